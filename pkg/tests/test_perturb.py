import numpy as np
import pytest

from detexplain.adapter import DetectorConfig, ToyBlobDetector
from detexplain.adapter.base import DetectorAdapter
from detexplain.core import Box, Detection, match_detection
from detexplain.errors import AdapterError, NoEligibleRegionError
from detexplain.perturb import (
    PerturbationOp,
    PerturbationResult,
    SearchAborted,
    SearchConfig,
    apply_perturbation,
    eligible_region,
    greedy_deletion,
    perturbation_mask,
)
from detexplain.segmentation import SegmentMap

from test_lime import grid_segmap


def blob_scene(size=48, rect=(9, 9, 21, 21), lum=0.15, bg=0.9):
    # default rect keeps >= 2px clearance from the 2x2 tile boundary at 24,
    # so a dilated edit of a neighbouring tile cannot touch the blob
    img = np.full((size, size, 3), bg)
    x0, y0, x1, y1 = rect
    img[y0:y1, x0:x1] = lum
    return img


class TestEligibleRegion:
    def test_box_spanning_segments(self):
        segmap = grid_segmap(32, 32, 2, 2)
        config = SearchConfig(min_region_segments=1)
        region = eligible_region(segmap, Box(2, 2, 30, 14), config)
        assert region == [0, 1]  # top two tiles only

    def test_ring_expansion_for_tiny_box(self):
        segmap = grid_segmap(32, 32, 2, 2)
        config = SearchConfig(min_region_segments=3)
        region = eligible_region(segmap, Box(2, 2, 10, 10), config)
        assert 0 in region
        assert len(region) >= 1
        # a box close to the tile corner pulls in ring neighbours
        near_center = eligible_region(segmap, Box(12, 12, 15, 15), config)
        assert near_center == [0, 1, 2, 3]

    def test_only_ineligible_raises(self):
        segmap = grid_segmap(32, 32, 2, 2)
        segmap = SegmentMap(
            labels=segmap.labels,
            areas=segmap.areas,
            mean_lab=segmap.mean_lab,
            eligible=np.zeros(4, dtype=bool),
        )
        with pytest.raises(NoEligibleRegionError):
            eligible_region(segmap, Box(2, 2, 10, 10), SearchConfig())


class TestApplyPerturbation:
    def test_mask_black_exact_zero(self, rng):
        img = np.clip(rng.random((32, 32, 3)), 0, 1)
        segmap = grid_segmap(32, 32, 2, 2)
        op = PerturbationOp(kind="mask_black", mask_dilation_px=2)
        out = apply_perturbation(img, [0], segmap, op)
        mask = perturbation_mask(segmap, [0], 2)
        assert (out[mask] == 0.0).all()
        np.testing.assert_array_equal(out[~mask], img[~mask])

    def test_mask_mean_fill(self, rng):
        img = np.clip(rng.random((32, 32, 3)), 0, 1)
        segmap = grid_segmap(32, 32, 2, 2)
        op = PerturbationOp(kind="mask_mean", mask_dilation_px=0)
        out = apply_perturbation(img, [3], segmap, op)
        mask = perturbation_mask(segmap, [3], 0)
        np.testing.assert_allclose(out[mask], np.tile(img.mean(axis=(0, 1)), (mask.sum(), 1)))

    def test_noise_level_zero_is_identity(self, rng):
        img = np.clip(rng.random((32, 32, 3)), 0, 1)
        segmap = grid_segmap(32, 32, 2, 2)
        op = PerturbationOp(kind="noise", noise_level=0.0)
        np.testing.assert_array_equal(apply_perturbation(img, [0], segmap, op), img)

    def test_noise_level_one_uniform_statistics(self):
        img = np.full((64, 64, 3), 0.9)
        segmap = grid_segmap(64, 64, 2, 2)
        op = PerturbationOp(kind="noise", noise_level=1.0, seed=11, mask_dilation_px=0)
        out = apply_perturbation(img, [0], segmap, op)
        region = out[segmap.labels == 0]
        assert region.size >= 1000
        assert abs(region.mean() - 0.5) < 0.05
        assert abs(region.var() - 1.0 / 12.0) < 0.02

    def test_noise_deterministic_under_seed(self, rng):
        img = np.clip(rng.random((16, 16, 3)), 0, 1)
        segmap = grid_segmap(16, 16, 2, 2)
        op = PerturbationOp(kind="noise", seed=4)
        a = apply_perturbation(img, [1], segmap, op)
        b = apply_perturbation(img, [1], segmap, op)
        np.testing.assert_array_equal(a, b)

    def test_blur_composited_inside_mask(self):
        img = blob_scene()
        segmap = grid_segmap(48, 48, 2, 2)
        op = PerturbationOp(kind="blur", blur_sigma=5.0, mask_dilation_px=0)
        out = apply_perturbation(img, [0], segmap, op)
        mask = segmap.labels == 0
        np.testing.assert_array_equal(out[~mask], img[~mask])
        assert not np.array_equal(out[mask], img[mask])

    def test_unknown_segment_rejected(self, rng):
        segmap = grid_segmap(8, 8, 2, 2)
        with pytest.raises(ValueError):
            perturbation_mask(segmap, [7], 0)


class TestGreedyDeletion:
    def _setup(self, **scene_kw):
        img = blob_scene(**scene_kw)
        adapter = ToyBlobDetector(DetectorConfig())
        target = adapter.detect([img])[0].detections[0]
        return img, adapter, target

    def test_single_segment_blob_mask_black(self):
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)  # blob entirely inside tile 0
        op = PerturbationOp(kind="mask_black")
        result = greedy_deletion(adapter, img, target, op, segmap, SearchConfig())
        assert result.selected_segments == (0,)
        assert result.iterations == 1
        assert result.flipped
        assert result.zero_suppressed
        assert result.final_confidence == 0.0

    def test_exhaustive_oracle_single_segment(self):
        # brute force over all single segments: only tile 0 flips the target
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)
        op = PerturbationOp(kind="mask_black")
        config = SearchConfig()
        flips = []
        for seg in range(4):
            edited = apply_perturbation(img, [seg], segmap, op)
            dets = adapter.detect([edited])[0]
            matched = match_detection(target, dets, config.delta)
            conf = matched.score if matched else 0.0
            flips.append(conf < config.tau)
        assert flips == [True, False, False, False]

    def test_target_already_below_tau(self):
        img, adapter, _ = self._setup()
        weak = Detection(box=Box(8, 8, 24, 24), class_id=0, score=0.3)
        segmap = grid_segmap(48, 48, 2, 2)
        result = greedy_deletion(
            adapter, img, weak, PerturbationOp(kind="mask_mean"), segmap, SearchConfig()
        )
        assert result.selected_segments == ()
        assert result.iterations == 0
        assert result.flipped
        assert result.final_confidence == 0.3
        assert result.area_fraction == 0.0

    def test_weak_blur_does_not_flip(self):
        img, adapter, target = self._setup(size=64, rect=(12, 12, 44, 44), lum=0.08)
        segmap = grid_segmap(64, 64, 2, 2)
        op = PerturbationOp(kind="blur", blur_sigma=2.0)
        result = greedy_deletion(adapter, img, target, op, segmap, SearchConfig())
        assert not result.flipped
        assert result.final_confidence >= 0.5
        assert result.iterations == 4  # exhausted every tile without flipping
        assert result.confidence_trace[-1] == result.final_confidence

    def test_flipped_iff_below_tau(self):
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)
        for kind in ("mask_black", "mask_mean", "noise", "blur"):
            result = greedy_deletion(
                adapter, img, target, PerturbationOp(kind=kind, seed=7), segmap,
                SearchConfig(),
            )
            assert result.flipped == (result.final_confidence < 0.5)
            assert result.zero_suppressed == (result.final_confidence == 0.0)

    def test_area_fraction_strictly_increasing_and_exact(self):
        img, adapter, target = self._setup(size=64, rect=(12, 12, 44, 44), lum=0.08)
        segmap = grid_segmap(64, 64, 2, 2)
        op = PerturbationOp(kind="blur", blur_sigma=2.0)
        result = greedy_deletion(adapter, img, target, op, segmap, SearchConfig())
        assert len(result.area_trace) == result.iterations >= 2
        assert all(a < b for a, b in zip(result.area_trace, result.area_trace[1:]))
        exact = perturbation_mask(
            segmap, result.selected_segments, op.mask_dilation_px
        ).sum() / (64 * 64)
        assert result.area_fraction == exact

    def test_one_step_optimality_replay(self):
        img, adapter, target = self._setup(rect=(10, 10, 30, 30), lum=0.2)
        segmap = grid_segmap(48, 48, 3, 3)
        op = PerturbationOp(kind="mask_mean")
        config = SearchConfig()
        result = greedy_deletion(adapter, img, target, op, segmap, config)
        region = eligible_region(segmap, target.box, config)
        prefix: list[int] = []
        for step, chosen in enumerate(result.selected_segments):
            best_key = None
            for seg in [s for s in region if s not in prefix]:
                edited = apply_perturbation(img, prefix + [seg], segmap, op)
                dets = adapter.detect([edited])[0]
                matched = match_detection(target, dets, config.delta)
                conf = matched.score if matched else 0.0
                key = (conf, int(segmap.areas[seg]), seg)
                if best_key is None or key < best_key:
                    best_key = key
            assert chosen == best_key[2]
            assert result.confidence_trace[step] == best_key[0]
            prefix.append(chosen)

    def test_determinism(self):
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)
        op = PerturbationOp(kind="noise", seed=3)
        a = greedy_deletion(adapter, img, target, op, segmap, SearchConfig())
        b = greedy_deletion(adapter, img, target, op, segmap, SearchConfig())
        assert a == b

    def test_detector_failure_preserves_partial_trace(self):
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)

        class FlakyAdapter(DetectorAdapter):
            def __init__(self, inner, fail_after):
                super().__init__(inner.config)
                self.inner = inner
                self.calls = 0
                self.fail_after = fail_after

            def detect(self, images):
                self.calls += 1
                if self.calls > self.fail_after:
                    raise AdapterError("backend went away")
                return self.inner.detect(images)

        img, adapter, target = self._setup(size=64, rect=(12, 12, 44, 44), lum=0.08)
        segmap = grid_segmap(64, 64, 2, 2)
        flaky = FlakyAdapter(adapter, fail_after=6)
        op = PerturbationOp(kind="blur", blur_sigma=2.0)
        with pytest.raises(SearchAborted) as excinfo:
            greedy_deletion(adapter=flaky, image=img, target=target, op=op,
                            segmap=segmap, config=SearchConfig())
        partial = excinfo.value.partial
        assert isinstance(partial, PerturbationResult)
        assert partial.iterations == len(partial.selected_segments) >= 1

    def test_json_round_trip(self):
        img, adapter, target = self._setup()
        segmap = grid_segmap(48, 48, 2, 2)
        result = greedy_deletion(
            adapter, img, target, PerturbationOp(kind="mask_black"), segmap,
            SearchConfig(),
        )
        assert PerturbationResult.from_json(result.to_json()) == result


class TestConfigValidation:
    def test_op_validation(self):
        with pytest.raises(ValueError):
            PerturbationOp(kind="sharpen")
        with pytest.raises(ValueError):
            PerturbationOp(kind="noise", noise_level=1.5)
        with pytest.raises(ValueError):
            PerturbationOp(kind="blur", blur_sigma=0.0)

    def test_search_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(tau=0.0)
        with pytest.raises(ValueError):
            SearchConfig(delta=1.0)
        with pytest.raises(ValueError):
            SearchConfig(max_iterations=0)
