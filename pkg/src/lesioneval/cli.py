"""Command-line entry point: ``lesioneval {evaluate,detect,agreement,analyze,phantom}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 per-case failures
under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io as vio
from .cohort import (
    ManifestError,
    Options,
    analyze_mape_curves,
    analyze_reproducibility,
    analyze_threshold_curves,
    build_phantom_cohort,
    load_cohort_spec,
    load_manifest,
    run_cases,
    summarize_agreement,
    summarize_detection,
    summarize_evaluation,
)
from .detection import IOU_THRESHOLD
from .stats import DEFAULT_N_LOG_BINS, THRESHOLD_STEPS, UPPER_QUANTILE, bonferroni
from .volume import CT_CLIP_HU

log = logging.getLogger("lesioneval")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CASE_FAILURES = 0, 1, 2, 3
ANALYSES = ("reproducibility", "mape_curves", "threshold_curves")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--manifest", type=Path, help="cohort manifest (YAML or JSON)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, default=1, help="parallel case workers")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    p.add_argument("--strict", action="store_true", help="exit 3 if any case fails")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resample-pred", choices=("on", "off"), default="on",
                   help="resample masks onto the GT grid (on) or reject mismatches (off)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="lesioneval", description="Evaluate 3D PET/CT lesion segmentations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("evaluate", parents=[common], help="segmentation scores and lesion measures")

    p = sub.add_parser("detect", parents=[common], help="per-lesion detection criteria")
    p.add_argument("--criteria", default="1,2,3", help="comma-separated subset of 1,2,3")
    p.add_argument("--iou-threshold", type=float, default=IOU_THRESHOLD)

    p = sub.add_parser("agreement", parents=[common], help="inter-observer agreement")
    p.add_argument("--staple", action="store_true", help="compute STAPLE consensus and write masks")
    p.add_argument("--crop-box", type=int, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"),
                   help="restrict kappa to an inclusive voxel box")

    p = sub.add_parser("analyze", parents=[common], help="statistics over a per-case evaluation report")
    p.add_argument("--report", type=Path, required=True, help="per_case report written by 'evaluate'")
    p.add_argument("--analyses", default=",".join(ANALYSES))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-log-bins", type=int, default=DEFAULT_N_LOG_BINS)
    p.add_argument("--upper-quantile", type=float, default=UPPER_QUANTILE)
    for measure, step in THRESHOLD_STEPS.items():
        p.add_argument(f"--step-{measure.replace('_', '-')}", type=float, default=step, dest=f"step_{measure}")

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic cohort")
    p.add_argument("--spec", type=Path, help="cohort spec (YAML/JSON); defaults built in")
    p.add_argument("--n-cases", type=int, default=10)
    return parser


def _options(args, **extra) -> Options:
    return Options(connectivity=args.connectivity, resample_pred=args.resample_pred == "on", **extra)


def _write(args, name: str, rows) -> Path | None:
    if not rows:
        return None
    path = args.out / f"{name}.{args.format}"
    vio.write_report(rows, args.format, path)
    log.info("wrote %s (%d rows)", path, len(rows))
    return path


def _write_parameters(args, params: dict) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "parameters.json", "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _finish(args, failures) -> int:
    if failures:
        _write(args, "failures", failures)
        if args.strict:
            log.error("%d case(s) failed", len(failures))
            return EXIT_CASE_FAILURES
    return EXIT_OK


def _manifest(args):
    if args.manifest is None:
        raise UsageError("--manifest is required for this command")
    return load_manifest(args.manifest)


def cmd_evaluate(args) -> int:
    manifest = _manifest(args)
    rows, failures = run_cases("evaluate", manifest, _options(args), args.workers)
    _write(args, "per_case", rows)
    if rows:
        _write(args, "summary", summarize_evaluation(rows))
    _write_parameters(args, {"command": "evaluate", "connectivity": args.connectivity,
                             "resample_pred": args.resample_pred})
    return _finish(args, failures)


def cmd_detect(args) -> int:
    try:
        criteria = tuple(sorted({int(c) for c in args.criteria.split(",") if c.strip()}))
    except ValueError:
        raise UsageError(f"bad --criteria {args.criteria!r}") from None
    if not criteria or any(c not in (1, 2, 3) for c in criteria):
        raise UsageError("--criteria must be a subset of 1,2,3")
    if not 0 < args.iou_threshold <= 1:
        raise UsageError("--iou-threshold must lie in (0, 1]")
    manifest = _manifest(args)
    options = _options(args, threshold=args.iou_threshold, criteria=criteria)
    rows, failures = run_cases("detect", manifest, options, args.workers)
    _write(args, "detection_per_case", rows)
    if rows:
        _write(args, "detection_summary", summarize_detection(rows))
    _write_parameters(args, {"command": "detect", "criteria": list(criteria),
                             "iou_threshold": args.iou_threshold, "connectivity": args.connectivity})
    return _finish(args, failures)


def cmd_agreement(args) -> int:
    manifest = _manifest(args)
    box = None
    if args.crop_box:
        b = args.crop_box
        box = (tuple(b[:3]), tuple(b[3:]))
    staple_dir = args.out / "staple" if args.staple else None
    options = _options(args, staple=args.staple, staple_dir=staple_dir, kappa_box=box)
    rows, failures = run_cases("agreement", manifest, options, args.workers)
    _write(args, "agreement_per_case", rows)
    if rows:
        _write(args, "agreement_summary", summarize_agreement(rows))
    _write_parameters(args, {"command": "agreement", "staple": args.staple,
                             "crop_box": list(args.crop_box) if args.crop_box else None})
    return _finish(args, failures)


def cmd_analyze(args) -> int:
    wanted = [a.strip() for a in args.analyses.split(",") if a.strip()]
    unknown = [a for a in wanted if a not in ANALYSES]
    if unknown:
        raise UsageError(f"unknown analyses {unknown}; choose from {', '.join(ANALYSES)}")
    rows = vio.read_report(args.report)
    models = list(dict.fromkeys(r["model"] for r in rows if r.get("model") is not None))
    if not models:
        raise ValueError(f"{args.report}: no model rows to analyze")
    for model in models:
        if sum(r.get("model") == model for r in rows) < 2:
            raise ValueError(f"{args.report}: model {model!r} has fewer than 2 cases")
    steps = {m: getattr(args, f"step_{m}") for m in THRESHOLD_STEPS}
    if "reproducibility" in wanted:
        _write(args, "reproducibility", analyze_reproducibility(rows, models, args.alpha))
    if "mape_curves" in wanted:
        _write(args, "mape_curves", analyze_mape_curves(rows, models, args.n_log_bins, steps))
    if "threshold_curves" in wanted:
        _write(args, "threshold_curves", analyze_threshold_curves(rows, models, steps, args.upper_quantile))
    n_tests = len(models) * len(THRESHOLD_STEPS)
    _write_parameters(args, {
        "command": "analyze",
        "alpha": args.alpha,
        "n_tests": n_tests,
        "alpha_corrected": bonferroni(args.alpha, n_tests),
        "upper_quantile": args.upper_quantile,
        "threshold_steps": steps,
        "n_log_bins": args.n_log_bins,
        "ct_clip_hu": list(CT_CLIP_HU),
        "iou_threshold": IOU_THRESHOLD,
    })
    return EXIT_OK


def cmd_phantom(args) -> int:
    if args.n_cases < 1:
        raise UsageError("--n-cases must be at least 1")
    spec = load_cohort_spec(args.spec)
    try:
        manifest = build_phantom_cohort(spec, args.n_cases, args.out, seed=args.seed, connectivity=args.connectivity)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad cohort spec: {exc!r}") from exc
    log.info("wrote %s", manifest)
    return EXIT_OK


COMMANDS = {
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "agreement": cmd_agreement,
    "analyze": cmd_analyze,
    "phantom": cmd_phantom,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lesioneval: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, ValueError, OSError) as exc:
        print(f"lesioneval: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
