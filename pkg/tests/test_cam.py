import numpy as np
import pytest

from detexplain.adapter import DetectorConfig, TinyConvDetector
from detexplain.cam import (
    CamRequest,
    aggregate_maps,
    bilinear_upsample,
    explain_detection,
    hirescam_raw,
    layercam_raw,
)


def bilinear_oracle(raw, out_h, out_w):
    """Closed-form corner-aligned bilinear interpolation, scalar loops."""
    in_h, in_w = raw.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = i * (in_h - 1) / (out_h - 1) if out_h > 1 and in_h > 1 else 0.0
            x = j * (in_w - 1) / (out_w - 1) if out_w > 1 and in_w > 1 else 0.0
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            u, v = y - y0, x - x0
            out[i, j] = (
                raw[y0, x0] * (1 - u) * (1 - v)
                + raw[y0, x1] * (1 - u) * v
                + raw[y1, x0] * u * (1 - v)
                + raw[y1, x1] * u * v
            )
    return out


class TestRawMaps:
    def test_zero_gradient_zero_map(self):
        a = np.ones((3, 4, 4))
        g = np.zeros((3, 4, 4))
        np.testing.assert_array_equal(layercam_raw(a, g), np.zeros((4, 4)))
        np.testing.assert_array_equal(hirescam_raw(a, g), np.zeros((4, 4)))

    def test_single_channel_hand_example(self):
        a = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        g = np.array([[[1.0, -1.0], [0.0, 2.0]]])
        expected = np.array([[1.0, 0.0], [0.0, 8.0]])
        np.testing.assert_allclose(layercam_raw(a, g), expected, atol=1e-12)
        np.testing.assert_allclose(hirescam_raw(a, g), expected, atol=1e-12)

    def test_layercam_negative_channel_killed(self):
        a1 = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        g1 = np.array([[[1.0, -1.0], [0.0, 2.0]]])
        a2 = np.concatenate([a1, np.abs(np.arange(4.0)).reshape(1, 2, 2) + 1])
        g2 = np.concatenate([g1, -np.ones((1, 2, 2))])
        np.testing.assert_allclose(layercam_raw(a2, g2), layercam_raw(a1, g1))

    def test_hirescam_sum_then_relu(self):
        # channel products [[2]] and [[-3]] sum to -1, ReLU -> 0
        a = np.array([[[1.0]], [[3.0]]])
        g = np.array([[[2.0]], [[-1.0]]])
        np.testing.assert_array_equal(hirescam_raw(a, g), np.array([[0.0]]))
        # layercam on the same input keeps only the positive-gradient channel
        np.testing.assert_array_equal(layercam_raw(a, g), np.array([[2.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            layercam_raw(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))
        with pytest.raises(ValueError):
            hirescam_raw(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))

    def test_nonnegative_when_activations_nonnegative(self, rng):
        for _ in range(200):
            a = np.abs(rng.normal(size=(3, 5, 5)))
            g = rng.normal(size=(3, 5, 5))
            assert layercam_raw(a, g).min() >= 0.0
            assert hirescam_raw(a, g).min() >= 0.0

    def test_hirescam_nonnegative_for_arbitrary_tensors(self, rng):
        for _ in range(200):
            a = rng.normal(size=(4, 3, 3))
            g = rng.normal(size=(4, 3, 3))
            assert hirescam_raw(a, g).min() >= 0.0

    def test_constant_gradient_equals_gradcam_pre_relu(self, rng):
        # spatially constant per-channel gradients: hirescam == pooled-gradient map
        for _ in range(50):
            a = rng.normal(size=(5, 4, 6))
            pooled = rng.normal(size=5)
            g = np.broadcast_to(pooled[:, None, None], a.shape).copy()
            gradcam_pre_relu = np.tensordot(pooled, a, axes=1)
            np.testing.assert_allclose(
                hirescam_raw(a, g), np.maximum(gradcam_pre_relu, 0.0), atol=1e-12
            )


class TestBilinearUpsample:
    def test_matches_closed_form_oracle(self, rng):
        raw = rng.random((2, 2))
        np.testing.assert_allclose(
            bilinear_upsample(raw, 4, 4), bilinear_oracle(raw, 4, 4), atol=1e-12
        )
        raw = rng.random((3, 5))
        np.testing.assert_allclose(
            bilinear_upsample(raw, 7, 11), bilinear_oracle(raw, 7, 11), atol=1e-12
        )

    def test_checkerboard_center(self):
        raw = np.array([[0.0, 1.0], [1.0, 0.0]])
        up3 = bilinear_upsample(raw, 3, 3)
        assert up3[1, 1] == pytest.approx(0.5)  # exact image center
        up4 = bilinear_upsample(raw, 4, 4)
        # the four central samples average to the 0.5 center value
        assert up4[1:3, 1:3].mean() == pytest.approx(0.5)
        np.testing.assert_allclose(up4, bilinear_oracle(raw, 4, 4), atol=1e-12)

    def test_corners_preserved(self, rng):
        raw = rng.random((3, 3))
        up = bilinear_upsample(raw, 9, 7)
        assert up[0, 0] == raw[0, 0]
        assert up[0, -1] == raw[0, -1]
        assert up[-1, 0] == raw[-1, 0]
        assert up[-1, -1] == raw[-1, -1]

    def test_single_cell_broadcasts(self):
        np.testing.assert_array_equal(
            bilinear_upsample(np.array([[3.0]]), 4, 5), np.full((4, 5), 3.0)
        )


class TestExplainDetection:
    def test_zero_gradient_fixture_gives_zero_map(self, rng):
        adapter = TinyConvDetector(
            DetectorConfig(score_threshold=0.0),
            head_weight=np.zeros((2, 4)),
            head_bias=np.zeros(2),
        )
        image = rng.random((10, 12, 3))
        target = adapter.detect([image])[0].detections[0]
        amap = explain_detection(adapter, image, target, "conv1", "layercam")
        np.testing.assert_array_equal(amap, np.zeros((10, 12)))

    def test_normalized_output(self, rng):
        adapter = TinyConvDetector(DetectorConfig(score_threshold=0.0))
        image = rng.random((10, 10, 3))
        target = adapter.detect([image])[0].detections[0]
        for method in ("layercam", "hirescam"):
            amap = explain_detection(adapter, image, target, "conv2", method)
            assert amap.shape == (10, 10)
            assert amap.min() == 0.0
            assert amap.max() == 1.0  # non-constant raw map normalizes to max 1


class TestAggregateMaps:
    def test_single_map_identity(self, rng):
        m = np.zeros((4, 4))
        m[1, 2] = 1.0
        np.testing.assert_array_equal(aggregate_maps([m]), m)

    def test_max_of_disjoint_onehots_is_union(self):
        a = np.zeros((3, 3))
        a[0, 0] = 1.0
        b = np.zeros((3, 3))
        b[2, 2] = 1.0
        np.testing.assert_array_equal(aggregate_maps([a, b], "max"), a + b)

    def test_mean_mode(self):
        a = np.array([[0.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 0.0], [0.0, 1.0]])
        # mean is [[0.5, 0], [0, 1]], already spanning [0, 1]
        np.testing.assert_allclose(
            aggregate_maps([a, b], "mean"), np.array([[0.5, 0.0], [0.0, 1.0]])
        )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_maps([])


class TestCamRequest:
    def test_validation(self, rng):
        from detexplain.core import Box, Detection

        det = Detection(box=Box(0, 0, 5, 5), class_id=0, score=0.9)
        with pytest.raises(ValueError):
            CamRequest(image=rng.random((8, 8, 3)), targets=(), layer="conv2")
        with pytest.raises(ValueError):
            CamRequest(
                image=rng.random((8, 8, 3)),
                targets=(det,),
                layer="conv2",
                method="gradcam",
            )

    def test_explain_all_one_map_per_target(self, rng):
        from detexplain.cam import explain_all

        adapter = TinyConvDetector(DetectorConfig(score_threshold=0.0))
        image = rng.random((10, 10, 3))
        target = adapter.detect([image])[0].detections[0]
        request = CamRequest(
            image=image, targets=(target, target), layer="conv1", method="hirescam"
        )
        maps = explain_all(adapter, request)
        assert len(maps) == 2
        np.testing.assert_array_equal(maps[0], maps[1])
        merged = aggregate_maps(maps, request.aggregation)
        np.testing.assert_array_equal(merged, maps[0])
