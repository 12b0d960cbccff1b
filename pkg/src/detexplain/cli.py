"""Command-line entry points.

Subcommands mirror the pipeline stages::

    detexplain ingest    --images DIR --annotations ... --out dataset.json
    detexplain explain   --dataset dataset.json --config config.json
    detexplain perturb   --dataset dataset.json --config config.json
    detexplain evaluate  --dataset dataset.json --config config.json
    detexplain triage    --report triage.json [--out triage.json]
    detexplain report    --run-dir RUNS/run-xxxx

The config is a single JSON file; ``--set dotted.key=value`` overrides
individual entries (values parse as JSON, falling back to raw strings),
so a run remains reproducible from the stored manifest.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema

from .dataset import Dataset, ingest
from .errors import DetexplainError
from .runner import RunConfig, run_evaluate, run_explain, run_paths, run_perturb
from .triage import TriageReport


def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise DetexplainError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return raw


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    raw = _apply_overrides(raw, args.set or [])
    return RunConfig.from_json(raw)


def _cmd_ingest(args: argparse.Namespace) -> int:
    dataset, report = ingest(
        args.annotations, args.images, fmt=args.format, split=args.split
    )
    dataset.save(args.out)
    report_path = Path(args.report or Path(args.out).with_suffix(".validation.json"))
    report_path.write_text(
        json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    )
    print(
        f"ingested {len(dataset)} images "
        f"({len(report.skipped)} skipped, {len(report.warnings)} warnings) -> {args.out}"
    )
    return 0 if len(dataset) else 1


def _cmd_explain(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = Dataset.load(args.dataset)
    run_dir = run_explain(dataset, config)
    print(f"explanation artifacts in {run_dir}")
    return 0


def _cmd_perturb(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = Dataset.load(args.dataset)
    run_dir = run_perturb(dataset, config)
    print(f"perturbation results in {run_dir}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = Dataset.load(args.dataset)
    metrics, triage = run_evaluate(dataset, config)
    run_dir = run_paths(config).root
    print(f"reports in {run_dir / 'reports'}")
    for op, entry in sorted(metrics.faithfulness.items()):
        print(
            f"  {op}: flip_rate={entry['flip_rate']:.3f} "
            f"cd={entry['confidence_drop_mean']:.3f} (n={entry['n']})"
        )
    print(f"  false positives: {len(triage.false_positives)}")
    return 0


def _cmd_triage(args: argparse.Namespace) -> int:
    report = TriageReport.load(args.report)
    out = Path(args.out or args.report)
    report.save(out)
    for category, count in sorted(report.category_counts().items()):
        if count:
            print(f"  {category}: {count}")
    print(f"triage report re-emitted to {out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "reports" / "metrics.json"
    if not metrics_path.exists():
        raise DetexplainError(f"no metrics report under {run_dir}")
    payload = json.loads(metrics_path.read_text())
    print(f"run: {run_dir.name}")
    for method, entry in sorted(payload["localization"].items()):
        mean = entry["attribution_ratio_mean"]
        shown = "n/a" if mean is None else f"{100 * mean:.2f}%"
        boxes = entry["hit_rate_boxes"]
        images = entry["hit_rate_images"]
        print(
            f"  {method}: attribution_ratio={shown} "
            f"hit(boxes)={boxes['hits']}/{boxes['total']} "
            f"hit(images)={images['hits']}/{images['total']}"
        )
    for op, entry in sorted(payload["faithfulness"].items()):
        cd_flip = entry["confidence_drop_unflipped"]
        shown = "n/a" if cd_flip is None else f"{cd_flip:.3f}"
        print(
            f"  {op}: flip_rate={entry['flip_rate']:.3f} "
            f"cd={entry['confidence_drop_mean']:.3f} cd_unflipped={shown}"
        )
    triage_path = run_dir / "reports" / "triage.json"
    if triage_path.exists():
        triage = TriageReport.load(triage_path)
        print(f"  false positives: {len(triage.false_positives)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detexplain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="normalize annotations into a dataset")
    p_ingest.add_argument("--images", required=True, help="image directory")
    p_ingest.add_argument(
        "--annotations", required=True, nargs="+", help="annotation JSON file(s)"
    )
    p_ingest.add_argument("--format", choices=("auto", "labelme", "coco"), default="auto")
    p_ingest.add_argument("--split", default="test")
    p_ingest.add_argument("--out", required=True, help="normalized dataset JSON")
    p_ingest.add_argument("--report", help="validation report path")
    p_ingest.set_defaults(func=_cmd_ingest)

    for name, func, doc in (
        ("explain", _cmd_explain, "run detection + CAM + LIME per image"),
        ("perturb", _cmd_perturb, "run greedy deletion per detection and operator"),
        ("evaluate", _cmd_evaluate, "aggregate metrics and triage reports"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--dataset", required=True, help="normalized dataset JSON")
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.set_defaults(func=func)

    p_triage = sub.add_parser("triage", help="re-emit an edited triage report")
    p_triage.add_argument("--report", required=True)
    p_triage.add_argument("--out")
    p_triage.set_defaults(func=_cmd_triage)

    p_report = sub.add_parser("report", help="print a run summary")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except jsonschema.ValidationError as exc:
        print(f"error: artifact failed schema validation: {exc.message}", file=sys.stderr)
        return 2
    except DetexplainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
