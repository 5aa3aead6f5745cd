"""Cohort manifests and the per-case evaluation steps behind the CLI."""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import io as vio
from .agreement import RaterStack, fleiss_kappa, kappa_band, pairwise_dsc, staple
from .detection import IOU_THRESHOLD, criterion1, criterion2, criterion3, match_lesions
from .measures import MEASURE_NAMES, lesion_measures, mape
from .metrics import dsc, seg_scores
from .phantom import DropComponent, PhantomSpec, degrade, generate, parse_op, random_spec
from .stats import (
    THRESHOLD_STEPS,
    UPPER_QUANTILE,
    DEFAULT_N_LOG_BINS,
    mape_curve,
    paired_t_test,
    summary,
    threshold_subset_dsc,
)
from .volume import (
    DEFAULT_CONNECTIVITY,
    BinaryMask,
    GeometryError,
    ScalarVolume,
    SuvConversionParams,
    Unit,
    check_geometry,
    connected_components,
    resample_to_grid,
    suv_from_activity,
)

log = logging.getLogger(__name__)



class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Case:
    case_id: str
    pet_path: Path
    gt_path: Path
    pred_paths: dict[str, Path] = field(default_factory=dict)
    rater_paths: tuple[Path, ...] = ()
    suv_params: SuvConversionParams | None = None

    def files(self) -> list[Path]:
        return [self.pet_path, self.gt_path, *self.pred_paths.values(), *self.rater_paths]


@dataclass(frozen=True)
class CohortManifest:
    cases: tuple[Case, ...]
    root: Path

    @property
    def models(self) -> list[str]:
        seen: dict[str, None] = {}
        for case in self.cases:
            for name in case.pred_paths:
                seen.setdefault(name, None)
        return list(seen)


def load_manifest(path) -> CohortManifest:
    """Read a YAML/JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, Mapping) or not isinstance(doc.get("cases"), list):
        raise ManifestError(f"{path}: manifest needs a top-level 'cases' list")
    root = path.parent
    cases = []
    seen = set()
    for i, raw in enumerate(doc["cases"]):
        try:
            case_id = str(raw["case_id"])
            pet = root / raw["pet_path"]
            gt = root / raw["gt_path"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: case #{i} lacks {exc}") from exc
        if case_id in seen:
            raise ManifestError(f"{path}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        try:
            params = SuvConversionParams(**raw["suv_params"]) if raw.get("suv_params") else None
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: case {case_id!r} has bad suv_params: {exc}") from exc
        cases.append(Case(
            case_id=case_id,
            pet_path=pet,
            gt_path=gt,
            pred_paths={str(k): root / v for k, v in (raw.get("pred_paths") or {}).items()},
            rater_paths=tuple(root / p for p in raw.get("rater_paths") or ()),
            suv_params=params,
        ))
    return CohortManifest(tuple(cases), root)


@dataclass(frozen=True)
class Options:
    connectivity: int = DEFAULT_CONNECTIVITY
    resample_pred: bool = True
    threshold: float = IOU_THRESHOLD
    criteria: tuple[int, ...] = (1, 2, 3)
    staple: bool = False
    staple_dir: Path | None = None
    kappa_box: tuple | None = None


# -- loading -----------------------------------------------------------------


def _check_files(case: Case) -> None:
    missing = [str(p) for p in case.files() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing file(s): {', '.join(missing)}")


def _load_pet(case: Case) -> ScalarVolume:
    if case.suv_params is not None:
        act = vio.read_volume(case.pet_path, unit=Unit.BQ_PER_ML)
        return suv_from_activity(act, case.suv_params)
    return vio.read_volume(case.pet_path, unit=Unit.SUV)


def _on_grid(mask: BinaryMask, ref: BinaryMask, resample: bool) -> BinaryMask:
    try:
        check_geometry(ref, mask)
        return mask
    except GeometryError:
        if not resample:
            raise
    return resample_to_grid(mask, ref.dims, ref.spacing)


def _load_case(case: Case, options: Options):
    _check_files(case)
    gt = vio.read_mask(case.gt_path)
    pet = _load_pet(case)
    if tuple(pet.dims) != tuple(gt.dims) or not pet.spacing.isclose(gt.spacing):
        if not options.resample_pred:
            check_geometry(gt, pet)
        pet = resample_to_grid(pet, gt.dims, gt.spacing, "trilinear")
    preds = {name: _on_grid(vio.read_mask(p), gt, options.resample_pred) for name, p in case.pred_paths.items()}
    return pet, gt, preds


# -- per-case steps ------------------------------------------------------------


def evaluate_case(case: Case, options: Options) -> list[dict]:
    pet, gt, preds = _load_case(case, options)
    gt_cc = connected_components(gt, options.connectivity)
    gt_m = lesion_measures(pet, gt, gt_cc).as_dict()
    rows = []
    for model, pred in preds.items():
        pred_cc = connected_components(pred, options.connectivity)
        scores = seg_scores(gt, pred, gt_cc=gt_cc, pred_cc=pred_cc)
        pred_m = lesion_measures(pet, pred, pred_cc).as_dict()
        row: dict[str, Any] = {"case_id": case.case_id, "model": model,
                               "dsc": scores.dsc, "fpv_ml": scores.fpv_ml, "fnv_ml": scores.fnv_ml}
        row.update({f"gt_{k}": gt_m[k] for k in MEASURE_NAMES})
        row.update({f"pred_{k}": pred_m[k] for k in MEASURE_NAMES})
        rows.append(row)
    if not preds:
        row = {"case_id": case.case_id, "model": None}
        row.update({f"gt_{k}": gt_m[k] for k in MEASURE_NAMES})
        rows.append(row)
    return rows


def detect_case(case: Case, options: Options) -> list[dict]:
    pet, gt, preds = _load_case(case, options)
    gt_cc = connected_components(gt, options.connectivity)
    rows = []
    for model, pred in preds.items():
        pred_cc = connected_components(pred, options.connectivity)
        outcomes = []
        if 1 in options.criteria:
            outcomes.append(criterion1(gt_cc, pred_cc))
        if 2 in options.criteria or 3 in options.criteria:
            match = match_lesions(gt_cc, pred_cc)
            if 2 in options.criteria:
                outcomes.append(criterion2(match, options.threshold))
            if 3 in options.criteria:
                outcomes.append(criterion3(match, gt_cc, pred_cc, pet))
        for o in outcomes:
            rows.append({
                "case_id": case.case_id, "model": model, "criterion": o.criterion.value,
                "n_gt": o.n_gt, "n_pred": o.n_pred, "tp": o.tp, "fp": o.fp, "fn": o.fn,
                "fn_strict": o.fn_strict, "sensitivity": o.sensitivity, "no_lesion": o.no_lesion,
            })
    return rows


def agreement_case(case: Case, options: Options) -> list[dict]:
    _check_files(case)
    if len(case.rater_paths) < 2:
        raise ValueError(f"case {case.case_id} has {len(case.rater_paths)} rater mask(s); need at least 2")
    masks = tuple(vio.read_mask(p) for p in case.rater_paths)
    stack = RaterStack(masks)
    k = fleiss_kappa(stack, options.kappa_box)
    row: dict[str, Any] = {"case_id": case.case_id, "n_raters": stack.n_obs, "kappa": k.kappa,
                           "p_bar": k.p_bar, "p_e": k.p_e, "band": k.band.value, "degenerate": k.degenerate}
    pw = pairwise_dsc(stack)
    for i in range(stack.n_obs):
        for j in range(i + 1, stack.n_obs):
            row[f"dsc_r{i + 1}_r{j + 1}"] = float(pw[i, j])
    if options.staple:
        res = staple(stack)
        row["staple_converged"] = res.converged
        row["staple_iterations"] = res.iterations
        for i, m in enumerate(stack.masks):
            row[f"staple_dsc_r{i + 1}"] = dsc(res.consensus, m)
            row[f"staple_sens_r{i + 1}"] = float(res.sensitivity[i])
            row[f"staple_spec_r{i + 1}"] = float(res.specificity[i])
        if options.staple_dir is not None:
            vio.write_mask(res.consensus, Path(options.staple_dir) / f"{case.case_id}_staple.nii.gz")
    return [row]


STEPS: dict[str, Callable[[Case, Options], list[dict]]] = {
    "evaluate": evaluate_case,
    "detect": detect_case,
    "agreement": agreement_case,
}


def _run_one(args):
    step, case, options = args
    try:
        return case.case_id, STEPS[step](case, options), None
    except Exception as exc:  # per-case failures are reported, not fatal
        return case.case_id, [], f"{type(exc).__name__}: {exc}"


def run_cases(step: str, manifest: CohortManifest, options: Options, workers: int = 1):
    """Run a per-case step over the cohort; returns (rows, failures) in manifest order."""
    jobs = [(step, case, options) for case in manifest.cases]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_run_one(j) for j in jobs]
    rows, failures = [], []
    for case_id, case_rows, error in results:
        if error is not None:
            log.warning("case %s failed: %s", case_id, error)
            failures.append({"case_id": case_id, "error": error})
        rows.extend(case_rows)
    return rows, failures


# -- cohort summaries --------------------------------------------------------------


def _finite(values) -> list[float]:
    return [float(v) for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]


def _summary_row(prefix: Mapping[str, Any], values) -> dict:
    vals = _finite(values)
    row = dict(prefix)
    if not vals:
        row.update(n=0, mean=None, sd=None, median=None, q25=None, q75=None)
        return row
    s = summary(vals)
    row.update(n=s.n, mean=s.mean, sd=s.sd, median=s.median, q25=s.q25, q75=s.q75)
    return row


def summarize_evaluation(rows: Sequence[Mapping[str, Any]]) -> list[dict]:
    models = list(dict.fromkeys(r["model"] for r in rows if r.get("model") is not None))
    metrics = ["dsc", "fpv_ml", "fnv_ml"]
    metrics += [f"gt_{k}" for k in MEASURE_NAMES] + [f"pred_{k}" for k in MEASURE_NAMES]
    out = []
    for model in models:
        sel = [r for r in rows if r["model"] == model]
        for metric in metrics:
            out.append(_summary_row({"model": model, "metric": metric}, [r.get(metric) for r in sel]))
    if not models:
        for metric in (f"gt_{k}" for k in MEASURE_NAMES):
            out.append(_summary_row({"model": None, "metric": metric}, [r.get(metric) for r in rows]))
    return out


def summarize_detection(rows: Sequence[Mapping[str, Any]]) -> list[dict]:
    keys = list(dict.fromkeys((r["model"], r["criterion"]) for r in rows))
    out = []
    for model, crit in keys:
        sel = [r for r in rows if r["model"] == model and r["criterion"] == crit]
        for metric in ("sensitivity", "fp", "tp", "fn"):
            out.append(_summary_row({"model": model, "criterion": crit, "metric": metric},
                                    [r.get(metric) for r in sel]))
    return out


def summarize_agreement(rows: Sequence[Mapping[str, Any]]) -> list[dict]:
    out = [_summary_row({"metric": "kappa"}, [r["kappa"] for r in rows])]
    if out[0]["mean"] is not None:
        out[0]["band"] = kappa_band(out[0]["mean"]).value
    columns = list(dict.fromkeys(k for r in rows for k in r if k.startswith(("dsc_r", "staple_dsc_r"))))
    for col in columns:
        out.append(_summary_row({"metric": col}, [r.get(col) for r in rows]))
    return out


# -- analyses on a per-case evaluation report --------------------------------------


def _pairs(rows, model: str, measure: str):
    orig, pred, dscs = [], [], []
    for r in rows:
        if r.get("model") != model:
            continue
        g, p = r.get(f"gt_{measure}"), r.get(f"pred_{measure}")
        if g is None or p is None:
            continue
        orig.append(float(g))
        pred.append(float(p))
        dscs.append(float(r["dsc"]) if r.get("dsc") is not None else math.nan)
    return np.asarray(orig), np.asarray(pred), np.asarray(dscs)


def analyze_reproducibility(rows, models: Sequence[str], alpha: float = 0.05) -> list[dict]:
    n_tests = len(models) * len(MEASURE_NAMES)
    out = []
    for model in models:
        for measure in MEASURE_NAMES:
            orig, pred, _ = _pairs(rows, model, measure)
            if orig.size < 2:
                raise ValueError(f"model {model!r}: fewer than 2 cases for {measure}")
            res = paired_t_test(orig, pred, alpha, n_tests)
            row = {"model": model, "measure": measure, "n": res.n, "mean_gt": float(orig.mean()),
                   "mean_pred": float(pred.mean()), "t_stat": res.t_stat, "p_value": res.p_value,
                   "alpha": alpha, "n_tests": n_tests, "alpha_corrected": res.alpha_corrected,
                   "reject": res.reject, "reproducible": not res.reject, "degenerate": res.degenerate}
            if np.any(orig != 0):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    m = mape(orig, pred)
                row.update(mape_pct=m.value, mape_excluded=len(m.excluded))
            else:
                row.update(mape_pct=None, mape_excluded=int(orig.size))
            out.append(row)
    return out


def analyze_mape_curves(rows, models: Sequence[str], n_log_bins: int = DEFAULT_N_LOG_BINS,
                        steps: Mapping[str, float] = THRESHOLD_STEPS,
                        breaks: Mapping[str, float] | None = None) -> list[dict]:
    out = []
    for model in models:
        for measure in MEASURE_NAMES:
            orig, pred, _ = _pairs(rows, model, measure)
            if orig.size == 0 or not np.any(orig > 0):
                continue
            curve = mape_curve(orig, pred, (breaks or {}).get(measure), n_log_bins, steps[measure])
            for r in curve.rows():
                out.append({"model": model, "measure": measure, **r})
    return out


def analyze_threshold_curves(rows, models: Sequence[str], steps: Mapping[str, float] = THRESHOLD_STEPS,
                             upper_quantile: float = UPPER_QUANTILE) -> list[dict]:
    out = []
    for model in models:
        for measure in MEASURE_NAMES:
            orig, _, dscs = _pairs(rows, model, measure)
            if orig.size == 0:
                continue
            curve = threshold_subset_dsc(orig, dscs, steps[measure], upper_quantile)
            for t, v, c in zip(curve.bin_edges, curve.bin_values, curve.bin_counts):
                out.append({"model": model, "measure": measure, "step": steps[measure],
                            "upper_quantile": upper_quantile, "threshold": t, "median_dsc": v, "count": c})
    return out


# -- phantom cohorts ---------------------------------------------------------------

DEFAULT_COHORT = {
    "dims": [48, 48, 48],
    "spacing": 2.0,
    "background_suv": 1.0,
    "noise_sd": 0.2,
    "n_lesions": [1, 5],
    "radius_mm": [3.0, 9.0],
    "lesion_suv": [3.0, 20.0],
    "gap_mm": 6.0,
    "models": {
        "identity": [],
        "dilated": [{"dilate": 1}],
        "drop_add": [{"drop": 1}, {"add_blob": {"radius_mm": 3.0}}],
    },
    "raters": [[], [{"dilate": 1}], [{"erode": 1}]],
}


def _case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def load_cohort_spec(path) -> dict:
    if path is None:
        return dict(DEFAULT_COHORT)
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ValueError(f"cannot parse cohort spec {path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ValueError(f"{path}: cohort spec must be a mapping")
    spec = dict(DEFAULT_COHORT)
    spec.update(doc)
    return spec


def _phantom_spec(spec: Mapping[str, Any], seed: int) -> PhantomSpec:
    if "lesions" in spec:
        d = dict(spec)
        d["seed"] = seed
        return PhantomSpec.from_dict(d)
    return random_spec(
        seed,
        dims=tuple(spec["dims"]),
        spacing=spec["spacing"],
        n_lesions=tuple(spec["n_lesions"]),
        radius_mm=tuple(spec["radius_mm"]),
        suv=tuple(spec["lesion_suv"]),
        background_suv=float(spec["background_suv"]),
        noise_sd=float(spec["noise_sd"]),
        gap_mm=float(spec["gap_mm"]),
    )


def build_phantom_cohort(spec: Mapping[str, Any], n_cases: int, out_dir, seed: int = 0,
                         connectivity: int = DEFAULT_CONNECTIVITY) -> Path:
    """Write PET, GT, predictions, rater masks, a manifest and a truth sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = {name: [parse_op(o) for o in ops] for name, ops in (spec.get("models") or {}).items()}
    raters = [[parse_op(o) for o in ops] for ops in (spec.get("raters") or [])]
    cases, truth = [], []
    for i in range(n_cases):
        case_id = f"case{i:04d}"
        case_seed = _case_seed(seed, i)
        ph = generate(_phantom_spec(spec, case_seed), connectivity)
        entry: dict[str, Any] = {"case_id": case_id, "pet_path": f"pet/{case_id}.nii.gz",
                                 "gt_path": f"gt/{case_id}.nii.gz", "pred_paths": {}}
        vio.write_volume(ph.suv, out / entry["pet_path"])
        vio.write_mask(ph.gt, out / entry["gt_path"])
        for m, (name, ops) in enumerate(models.items()):
            if not ph.gt.count:
                ops = [op for op in ops if not isinstance(op, DropComponent)]
            pred = degrade(ph.gt, ops, seed=_case_seed(case_seed, m), connectivity=connectivity)
            rel = f"pred/{name}/{case_id}.nii.gz"
            vio.write_mask(pred, out / rel)
            entry["pred_paths"][name] = rel
        if raters:
            entry["rater_paths"] = []
            for r, ops in enumerate(raters):
                mask = degrade(ph.gt, ops, seed=_case_seed(case_seed, 1000 + r), connectivity=connectivity)
                rel = f"raters/{case_id}_r{r + 1}.nii.gz"
                vio.write_mask(mask, out / rel)
                entry["rater_paths"].append(rel)
        cases.append(entry)
        truth.append({"case_id": case_id, **ph.truth.as_dict()})
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"cases": cases}, fh, indent=1)
        fh.write("\n")
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
        fh.write("\n")
    return out / "manifest.json"

