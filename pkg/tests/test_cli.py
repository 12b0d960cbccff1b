import json

import numpy as np
import pytest

from detexplain.cli import main
from detexplain.runner import RunConfig, run_paths
from detexplain.schemas import (
    DATASET_SCHEMA,
    DETECTIONS_SCHEMA,
    LIME_EXPLANATION_SCHEMA,
    MANIFEST_SCHEMA,
    METRICS_REPORT_SCHEMA,
    PERTURBATION_RESULT_SCHEMA,
    TRIAGE_REPORT_SCHEMA,
    validate,
)
from scenes import write_scene_dataset


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full ingest -> explain -> perturb -> evaluate pipeline on 6 scenes."""
    root = tmp_path_factory.mktemp("pipeline")
    rng = np.random.default_rng(77)
    image_dir, ann_paths, n_decoys = write_scene_dataset(
        root, rng, n_images=6, decoys_for={1: 1, 4: 1}, size=64,
        blob_size=(14, 20),
    )
    dataset_path = root / "dataset.json"
    assert (
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                *map(str, ann_paths),
                "--out",
                str(dataset_path),
            ]
        )
        == 0
    )
    config = {
        "backend": "toy",
        "slic": {"n_segments": 12, "compactness": 20.0, "smoothing_sigma": 1.0, "seed": 0},
        "lime": {"n_samples": 40, "seed": 1},
        "perturb": {"ops": ["mask_black", "blur"], "search": {"max_iterations": 20}},
        "seed": 3,
        "output_dir": str(root / "runs"),
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    for stage in ("explain", "perturb", "evaluate"):
        assert (
            main(
                [
                    stage,
                    "--dataset",
                    str(dataset_path),
                    "--config",
                    str(config_path),
                ]
            )
            == 0
        )
    run_dir = run_paths(RunConfig.from_json(config)).root
    return {
        "root": root,
        "dataset_path": dataset_path,
        "config": config,
        "config_path": config_path,
        "run_dir": run_dir,
        "n_images": 6,
        "n_decoys": n_decoys,
    }


class TestIngestCli:
    def test_dataset_schema_valid(self, pipeline):
        payload = json.loads(pipeline["dataset_path"].read_text())
        validate(payload, DATASET_SCHEMA)
        assert len(payload["items"]) == pipeline["n_images"]

    def test_validation_report_written(self, pipeline):
        report = pipeline["dataset_path"].with_suffix(".validation.json")
        assert report.exists()
        assert len(json.loads(report.read_text())["loaded"]) == pipeline["n_images"]


class TestExplainStage:
    def test_manifest_schema_and_statuses(self, pipeline):
        manifest = json.loads((pipeline["run_dir"] / "manifest.json").read_text())
        validate(manifest, MANIFEST_SCHEMA)
        assert len(manifest["images"]) == pipeline["n_images"]
        assert all(s["status"] == "ok" for s in manifest["images"].values())
        assert manifest["config"]["seed"] == 3

    def test_detections_schema(self, pipeline):
        files = sorted((pipeline["run_dir"] / "images").glob("*_detections.json"))
        assert len(files) == pipeline["n_images"]
        for f in files:
            validate(json.loads(f.read_text()), DETECTIONS_SCHEMA)

    def test_cam_skipped_with_warning_on_detect_only_backend(self, pipeline):
        manifest = json.loads((pipeline["run_dir"] / "manifest.json").read_text())
        warnings = [w for s in manifest["images"].values() for w in s.get("warnings", [])]
        assert any("layercam" in w for w in warnings)
        assert any("hirescam" in w for w in warnings)
        assert not list((pipeline["run_dir"] / "maps").glob("*layercam*"))

    def test_lime_artifacts_present(self, pipeline):
        maps = pipeline["run_dir"] / "maps"
        images = pipeline["run_dir"] / "images"
        assert len(list(maps.glob("*_lime_agg.npy"))) == pipeline["n_images"]
        for f in images.glob("*_lime.json"):
            validate(json.loads(f.read_text()), LIME_EXPLANATION_SCHEMA)

    def test_segment_sidecars_present(self, pipeline):
        maps = pipeline["run_dir"] / "maps"
        assert len(list(maps.glob("*_segments.png"))) == pipeline["n_images"]


class TestPerturbStage:
    def test_results_schema_valid(self, pipeline):
        files = sorted((pipeline["run_dir"] / "images").glob("*_perturb_*.json"))
        assert files
        for f in files:
            validate(json.loads(f.read_text()), PERTURBATION_RESULT_SCHEMA)

    def test_mask_black_flips_everything(self, pipeline):
        for f in (pipeline["run_dir"] / "images").glob("*_perturb_mask_black_*.json"):
            payload = json.loads(f.read_text())
            assert payload["flipped"] is True


class TestEvaluateStage:
    def test_metrics_schema_and_content(self, pipeline):
        payload = json.loads(
            (pipeline["run_dir"] / "reports" / "metrics.json").read_text()
        )
        validate(payload, METRICS_REPORT_SCHEMA)
        assert payload["config"] == RunConfig.from_json(pipeline["config"]).to_json()
        assert "lime" in payload["localization"]
        assert payload["faithfulness"]["mask_black"]["flip_rate"] == 1.0

    def test_triage_fp_count_matches_decoys(self, pipeline):
        payload = json.loads(
            (pipeline["run_dir"] / "reports" / "triage.json").read_text()
        )
        validate(payload, TRIAGE_REPORT_SCHEMA)
        assert len(payload["false_positives"]) == pipeline["n_decoys"]
        assert payload["category_counts"]["unreviewed"] == pipeline["n_decoys"]

    def test_csv_exports(self, pipeline):
        reports = pipeline["run_dir"] / "reports"
        assert (reports / "fidelity.csv").exists()
        assert (reports / "faithfulness.csv").exists()


class TestReportCli:
    def test_summary_prints(self, pipeline, capsys):
        assert main(["report", "--run-dir", str(pipeline["run_dir"])]) == 0
        out = capsys.readouterr().out
        assert "lime" in out
        assert "mask_black" in out

    def test_triage_reemit(self, pipeline, tmp_path, capsys):
        src = pipeline["run_dir"] / "reports" / "triage.json"
        edited = tmp_path / "edited.json"
        payload = json.loads(src.read_text())
        if payload["false_positives"]:
            payload["false_positives"][0]["category"] = "black_ice"
        edited.write_text(json.dumps(payload))
        assert main(["triage", "--report", str(edited), "--out", str(tmp_path / "out.json")]) == 0
        out = json.loads((tmp_path / "out.json").read_text())
        assert out["category_counts"]["black_ice"] == 1


class TestTinyConvBackend:
    def test_cam_maps_produced(self, tmp_path):
        rng = np.random.default_rng(5)
        image_dir, ann_paths, _ = write_scene_dataset(
            tmp_path, rng, n_images=2, size=24, blob_size=(8, 10)
        )
        dataset_path = tmp_path / "dataset.json"
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                *map(str, ann_paths),
                "--out",
                str(dataset_path),
            ]
        )
        config = {
            "backend": "tinyconv",
            "detector": {"score_threshold": 0.0, "layer_name": "conv2"},
            "slic": {"n_segments": 6},
            "lime": {"n_samples": 16, "seed": 1},
            "output_dir": str(tmp_path / "runs"),
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        assert (
            main(["explain", "--dataset", str(dataset_path), "--config", str(config_path)])
            == 0
        )
        run_dir = run_paths(RunConfig.from_json(config)).root
        maps = run_dir / "maps"
        assert list(maps.glob("*_layercam_agg.npy"))
        assert list(maps.glob("*_hirescam_agg.npy"))
        for f in maps.glob("*_agg.npy"):
            arr = np.load(f)
            assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestBridgeBackend:
    def test_detect_only_bridge_skips_cam_keeps_lime(self, tmp_path, monkeypatch):
        import sys

        rng = np.random.default_rng(8)
        image_dir, ann_paths, _ = write_scene_dataset(
            tmp_path, rng, n_images=2, size=48, blob_size=(12, 16)
        )
        dataset_path = tmp_path / "dataset.json"
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                *map(str, ann_paths),
                "--out",
                str(dataset_path),
            ]
        )
        monkeypatch.setenv(
            "DETEXPLAIN_BRIDGE_CMD",
            f"{sys.executable} -m detexplain.adapter.bridge_server --backend toy",
        )
        config = {
            "backend": "bridge",
            "slic": {"n_segments": 8},
            "lime": {"n_samples": 16, "seed": 2},
            "output_dir": str(tmp_path / "runs"),
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        assert (
            main(["explain", "--dataset", str(dataset_path), "--config", str(config_path)])
            == 0
        )
        run_dir = run_paths(RunConfig.from_json(config)).root
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert all(s["status"] == "ok" for s in manifest["images"].values())
        warnings = [w for s in manifest["images"].values() for w in s.get("warnings", [])]
        assert any("cam" in w and "skipped" in w for w in warnings)
        assert list((run_dir / "maps").glob("*_lime_agg.npy"))
        assert not list((run_dir / "maps").glob("*layercam*"))


class TestWorkerParallelism:
    def test_two_workers_match_single_worker_bytes(self, tmp_path):
        rng = np.random.default_rng(9)
        image_dir, ann_paths, _ = write_scene_dataset(
            tmp_path, rng, n_images=4, size=48, blob_size=(12, 16)
        )
        dataset_path = tmp_path / "dataset.json"
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                *map(str, ann_paths),
                "--out",
                str(dataset_path),
            ]
        )
        base = {
            "backend": "toy",
            "slic": {"n_segments": 8},
            "lime": {"n_samples": 16, "seed": 2},
            "output_dir": str(tmp_path / "runs"),
        }
        snapshots = {}
        for workers in (1, 2):
            config = dict(base, workers=workers)
            config_path = tmp_path / f"config{workers}.json"
            config_path.write_text(json.dumps(config))
            assert (
                main(
                    ["explain", "--dataset", str(dataset_path), "--config", str(config_path)]
                )
                == 0
            )
            run_dir = run_paths(RunConfig.from_json(config)).root
            snapshots[workers] = {
                p.relative_to(run_dir): p.read_bytes()
                for p in run_dir.rglob("*")
                if p.is_file() and p.name != "manifest.json"
            }
        assert snapshots[1] == snapshots[2]


class TestNoDetectionImage:
    def test_blank_scene_explained_and_evaluated(self, tmp_path):
        from detexplain.render import save_image_png

        image_dir = tmp_path / "images"
        image_dir.mkdir()
        save_image_png(np.full((48, 48, 3), 0.9), image_dir / "blank.png")
        ann = {
            "imagePath": "blank.png",
            "imageHeight": 48,
            "imageWidth": 48,
            "shapes": [],
        }
        (image_dir / "blank.json").write_text(json.dumps(ann))
        dataset_path = tmp_path / "dataset.json"
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                str(image_dir / "blank.json"),
                "--out",
                str(dataset_path),
            ]
        )
        config = {
            "backend": "toy",
            "slic": {"n_segments": 8},
            "lime": {"n_samples": 16},
            "output_dir": str(tmp_path / "runs"),
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        for stage in ("explain", "perturb", "evaluate"):
            assert (
                main(
                    [stage, "--dataset", str(dataset_path), "--config", str(config_path)]
                )
                == 0
            )
        run_dir = run_paths(RunConfig.from_json(config)).root
        manifest = json.loads((run_dir / "manifest.json").read_text())
        status = manifest["images"]["blank"]
        assert status["status"] == "ok"
        assert any("no detections" in w for w in status["warnings"])
        triage = json.loads((run_dir / "reports" / "triage.json").read_text())
        assert triage["false_positives"] == []


class TestOverrides:
    def test_set_flag_changes_config(self, tmp_path):
        rng = np.random.default_rng(6)
        image_dir, ann_paths, _ = write_scene_dataset(tmp_path, rng, n_images=1, size=48, blob_size=(12, 16))
        dataset_path = tmp_path / "dataset.json"
        main(
            [
                "ingest",
                "--images",
                str(image_dir),
                "--annotations",
                *map(str, ann_paths),
                "--out",
                str(dataset_path),
            ]
        )
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"output_dir": str(tmp_path / "runs")}))
        assert (
            main(
                [
                    "explain",
                    "--dataset",
                    str(dataset_path),
                    "--config",
                    str(config_path),
                    "--set",
                    "lime.n_samples=24",
                    "--set",
                    "slic.n_segments=8",
                ]
            )
            == 0
        )
        runs = list((tmp_path / "runs").iterdir())
        assert len(runs) == 1
        manifest = json.loads((runs[0] / "manifest.json").read_text())
        assert manifest["config"]["lime"]["n_samples"] == 24
        assert manifest["config"]["slic"]["n_segments"] == 8
