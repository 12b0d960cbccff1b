import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detexplain.core import (
    Box,
    Detection,
    DetectionSet,
    box_pixel_mask,
    dilate_box,
    iou,
    match_detection,
    minmax_normalize,
)


def boxes(max_coord=100.0):
    coords = st.floats(0.0, max_coord, allow_nan=False, allow_infinity=False)
    return st.tuples(coords, coords, coords, coords).filter(
        lambda t: abs(t[0] - t[2]) > 1e-6 and abs(t[1] - t[3]) > 1e-6
    ).map(
        lambda t: Box(min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3]))
    )


class TestBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 10)
        with pytest.raises(ValueError):
            Box(5, 0, 4, 10)
        with pytest.raises(ValueError):
            Box(0, 0, float("inf"), 10)

    def test_area(self):
        assert Box(0, 0, 10, 5).area == 50.0

    def test_contains_point_half_open(self):
        b = Box(0, 0, 10, 10)
        assert b.contains_point(0.0, 0.0)
        assert b.contains_point(9.5, 9.5)
        assert not b.contains_point(10.0, 5.0)


class TestIou:
    def test_identity(self):
        b = Box(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        # inter = 50, union = 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        ab = iou(a, b)
        assert ab == iou(b, a)
        assert 0.0 <= ab <= 1.0

    @given(boxes())
    def test_self_iou_is_one(self, b):
        assert iou(b, b) == pytest.approx(1.0)


class TestMatchDetection:
    def _det(self, box, score=0.9, class_id=0):
        return Detection(box=box, class_id=class_id, score=score)

    def test_duplicate_matches_itself(self):
        target = self._det(Box(0, 0, 10, 10))
        candidates = DetectionSet(
            detections=(target, self._det(Box(30, 30, 40, 40), score=0.5))
        )
        assert match_detection(target, candidates, 0.2) == target

    def test_below_threshold_is_absent(self):
        target = self._det(Box(0, 0, 10, 10))
        candidates = DetectionSet(detections=(self._det(Box(8, 8, 20, 20)),))
        assert iou(target.box, candidates.detections[0].box) < 0.2
        assert match_detection(target, candidates, 0.2) is None

    def test_prefers_higher_iou(self):
        target = self._det(Box(0, 0, 10, 10))
        near = self._det(Box(1, 0, 11, 10), score=0.3)   # IoU ~ 0.8
        far = self._det(Box(4, 0, 14, 10), score=0.99)   # IoU ~ 0.43
        candidates = DetectionSet(detections=(far, near))
        assert match_detection(target, candidates, 0.2) == near

    def test_class_must_agree(self):
        target = self._det(Box(0, 0, 10, 10), class_id=1)
        candidates = DetectionSet(detections=(self._det(Box(0, 0, 10, 10), class_id=0),))
        assert match_detection(target, candidates, 0.2) is None

    def test_deterministic_given_order(self):
        target = self._det(Box(0, 0, 10, 10))
        twin_a = self._det(Box(0, 0, 10, 10), score=0.8)
        twin_b = self._det(Box(0, 0, 10, 10), score=0.8)
        candidates = DetectionSet(detections=(twin_a, twin_b))
        assert match_detection(target, candidates, 0.2) is candidates.detections[0]


class TestMinmaxNormalize:
    def test_hand_example(self):
        raw = np.array([[0.0, 5.0], [10.0, 2.5]])
        np.testing.assert_allclose(
            minmax_normalize(raw), [[0.0, 0.5], [1.0, 0.25]]
        )

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(
            minmax_normalize(np.zeros((3, 3))), np.zeros((3, 3))
        )
        np.testing.assert_array_equal(
            minmax_normalize(np.full((3, 3), 7.0)), np.zeros((3, 3))
        )

    def test_binary_unchanged(self):
        raw = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(minmax_normalize(raw), raw)

    @given(
        st.lists(
            st.floats(-100, 100, allow_nan=False, allow_infinity=False),
            min_size=2,
            max_size=40,
        ).filter(lambda v: max(v) > min(v))
    )
    def test_idempotent_on_normalized(self, values):
        arr = np.asarray(values)
        once = minmax_normalize(arr)
        np.testing.assert_allclose(minmax_normalize(once), once, atol=1e-12)
        assert once.min() == 0.0 and once.max() == 1.0


class TestDilateBox:
    def test_grow(self):
        assert dilate_box(Box(10, 10, 20, 20), 2, 100, 100) == Box(8, 8, 22, 22)

    def test_clamped(self):
        assert dilate_box(Box(0, 0, 10, 10), 2, 100, 100) == Box(0, 0, 12, 12)

    def test_identity(self):
        b = Box(10, 10, 20, 20)
        assert dilate_box(b, 0, 100, 100) == b


class TestDetectionSet:
    def test_canonical_order(self):
        d1 = Detection(box=Box(5, 0, 10, 10), class_id=0, score=0.5)
        d2 = Detection(box=Box(0, 0, 10, 10), class_id=0, score=0.9)
        d3 = Detection(box=Box(2, 0, 10, 10), class_id=0, score=0.5)
        ds = DetectionSet(detections=(d1, d2, d3))
        assert ds.detections == (d2, d3, d1)


class TestBoxPixelMask:
    def test_center_convention(self):
        mask = box_pixel_mask(Box(1, 1, 3, 2), height=4, width=4)
        expected = np.zeros((4, 4), dtype=bool)
        expected[1, 1:3] = True
        np.testing.assert_array_equal(mask, expected)
