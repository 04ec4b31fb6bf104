"""Benchmark harness: metric grids, per-subject spread, paired significance.

Every (test subject, dose) cell is scored against the full-dose reference
with one shared dynamic range, for the raw low-dose input (the LDPET row)
and for every supplied method checkpoint.  Aggregates are per (method, dose)
mean and sample standard deviation over subjects, always recomputable from
the raw records.  Significance markers follow the convention

    "+"  p < 0.005        "*"  p < 0.05

from a two-sided Wilcoxon signed-rank test on per-subject metric differences
against the per-dose individual baseline; with fewer than five subjects an
exact sign-flip permutation is used instead and noted in the output.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats

from .errors import MissingDataError, ValidationError
from .metrics import MetricsRecord, SsimParams, score_pair
from .raster import DatasetManifest, lowdose_path, read_raster, reference_path, write_raster
from . import trainer

MARK_STRONG = "†"  # dagger, p < 0.005
MARK_WEAK = "*"         # p < 0.05
METRICS = ("psnr", "ssim", "rmse")

LDPET = "ldpet"


def individual_method_name(dose: float) -> str:
    return f"individual_d{round(dose * 100):03d}"


@dataclass
class BenchmarkResult:
    records: list[MetricsRecord]
    doses: tuple[float, ...]
    methods: tuple[str, ...]  # row order, LDPET first
    # (method, dose) -> {metric: (mean, std)}
    aggregates: dict = field(default_factory=dict)
    # (method, dose, metric) -> p-value vs the per-dose individual baseline
    significance: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def cell(self, method: str, dose: float) -> list[MetricsRecord]:
        return [r for r in self.records
                if r.method == method and abs(r.dose_fraction - dose) < 1e-9]


def difference_map(est: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Signed error est - reference, for external visualization."""
    est = np.asarray(est, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    if est.shape != reference.shape:
        raise ValidationError(f"shape mismatch: {est.shape} vs {reference.shape}")
    return est - reference


def mip(stack) -> np.ndarray:
    """Pixelwise maximum over a stack of equally sized slices."""
    stack = list(stack)
    if not stack:
        raise ValidationError("empty stack")
    shapes = {np.asarray(s).shape for s in stack}
    if len(shapes) > 1:
        raise ValidationError(f"ragged stack shapes: {sorted(shapes)}")
    out = np.asarray(stack[0], dtype=np.float32).copy()
    for s in stack[1:]:
        np.maximum(out, np.asarray(s, dtype=np.float32), out=out)
    return out


def evaluate(
    methods: dict,
    manifest: DatasetManifest,
    root,
    figures_dir=None,
) -> BenchmarkResult:
    """Score every test subject x dose x method cell.

    ``methods`` maps method name -> model/Checkpoint/checkpoint dir (anything
    ``trainer.denoise`` accepts).  The raw low-dose row is always included
    under the name ``ldpet``.  With ``figures_dir`` set, difference maps for
    the first test subject and MIPs over the test stack are written as
    rasters.
    """
    subjects = sorted(manifest.test_subjects)
    if not subjects:
        raise ValidationError("manifest has no test subjects")
    doses = tuple(sorted(manifest.dose_levels))
    params = SsimParams(dynamic_range=manifest.suv_clip_max)

    loaded = {}
    for name in methods:
        src = methods[name]
        if isinstance(src, (str, Path)):
            src = trainer.load_checkpoint(src)
        if isinstance(src, trainer.Checkpoint):
            src = trainer.model_from_checkpoint(src)
        loaded[name] = src

    records: list[MetricsRecord] = []
    estimates = {}  # (method, dose) -> list of arrays, in subject order
    for sid in subjects:
        ref = read_raster(reference_path(root, sid))
        for d in doses:
            x = read_raster(lowdose_path(root, sid, d))
            records.append(score_pair(ref, x, sid, d, LDPET, params))
            estimates.setdefault((LDPET, d), []).append(x)
            for name, model in loaded.items():
                dose_arg = d if model.spec.variant == "dose_embedded" else None
                est = trainer.denoise(model, x, dose=dose_arg)
                records.append(score_pair(ref, est, sid, d, name, params))
                estimates.setdefault((name, d), []).append(est)

    result = BenchmarkResult(
        records=records,
        doses=doses,
        methods=(LDPET, *loaded.keys()),
    )
    result.aggregates = compute_aggregates(result)
    _attach_significance(result)

    if figures_dir is not None:
        figures_dir = Path(figures_dir)
        figures_dir.mkdir(parents=True, exist_ok=True)
        first = subjects[0]
        for d in doses:
            tag = f"d{round(d * 100):03d}"
            ref_stack = [read_raster(reference_path(root, s)) for s in subjects]
            write_raster(figures_dir / f"mip_reference_{tag}.ptr", mip(ref_stack))
            for name in result.methods:
                stack = estimates[(name, d)]
                write_raster(figures_dir / f"mip_{name}_{tag}.ptr", mip(stack))
                diff = difference_map(stack[0], read_raster(reference_path(root, first)))
                write_raster(figures_dir / f"diff_{name}_{tag}_{first}.ptr", diff)
    return result


def compute_aggregates(result: BenchmarkResult) -> dict:
    out = {}
    for method, dose in itertools.product(result.methods, result.doses):
        cell = result.cell(method, dose)
        if not cell:
            continue
        out[(method, dose)] = {
            m: (float(np.mean([getattr(r, m) for r in cell])),
                float(np.std([getattr(r, m) for r in cell], ddof=1)) if len(cell) > 1 else 0.0)
            for m in METRICS
        }
    return out


def per_subject_std(result: BenchmarkResult) -> dict:
    """Sample std (n-1 denominator) of each metric across subjects,
    one row per (method, dose)."""
    n_subjects = {len(result.cell(m, d)) for m in result.methods for d in result.doses}
    if max(n_subjects, default=0) < 2:
        raise ValidationError("per-subject std needs at least two test subjects")
    return {key: {m: agg[m][1] for m in METRICS} for key, agg in result.aggregates.items()}


def signed_rank_p(diffs, force_permutation: bool = False) -> tuple[float, str]:
    """Two-sided p for paired differences; returns (p, note).

    Zero differences are discarded (Wilcoxon's convention).  n >= 5 uses the
    exact signed-rank distribution; n < 5 falls back to an exact sign-flip
    permutation over the same statistic, flagged in the note.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    m = d.size
    if m == 0:
        return 1.0, "all differences zero"
    if m >= 5 and not force_permutation:
        try:
            p = float(scipy.stats.wilcoxon(d, alternative="two-sided", method="exact").pvalue)
            return p, ""
        except (ValueError, UserWarning):
            pass  # ties: fall through to enumeration
    if m > 20:
        p = float(scipy.stats.wilcoxon(d, alternative="two-sided", method="approx").pvalue)
        return p, "normal approximation"
    ranks = scipy.stats.rankdata(np.abs(d))
    w_obs = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    w_hi = max(w_obs, total - w_obs)
    w_lo = min(w_obs, total - w_obs)
    count = 0
    for bits in itertools.product((0.0, 1.0), repeat=m):
        w = float(np.dot(bits, ranks))
        if w >= w_hi - 1e-12 or w <= w_lo + 1e-12:
            count += 1
    note = "exact sign-flip permutation (n < 5)" if m < 5 else "exact sign-flip permutation"
    return count / 2.0**m, note


def paired_significance(result: BenchmarkResult, method_a: str, baseline: str,
                        metric: str) -> dict[float, float]:
    """Per-dose two-sided p-values for method_a vs baseline on ``metric``.

    Pairing unit is the subject.  Symmetric: swapping the two methods leaves
    the p-values unchanged.
    """
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    out = {}
    for d in result.doses:
        a = {r.subject_id: getattr(r, metric) for r in result.cell(method_a, d)}
        b = {r.subject_id: getattr(r, metric) for r in result.cell(baseline, d)}
        if set(a) != set(b):
            raise ValidationError(
                f"methods {method_a!r} and {baseline!r} cover different subjects at dose {d}")
        subjects = sorted(a)
        diffs = [a[s] - b[s] for s in subjects]
        if any(not math.isfinite(v) for v in diffs):
            # infinite PSNR on identical images: fall back to rmse sign
            diffs = [math.copysign(1.0, v) if not math.isfinite(v) else v for v in diffs]
        p, note = signed_rank_p(diffs, force_permutation=len(diffs) < 5)
        if note:
            result.notes.append(f"{method_a} vs {baseline} [{metric}] at {d:.2f}: {note}")
        out[d] = p
    return out


def _attach_significance(result: BenchmarkResult) -> None:
    """p-values vs the per-dose individual baseline, where one was trained."""
    for d in result.doses:
        baseline = individual_method_name(d)
        if baseline not in result.methods:
            continue
        for method in result.methods:
            if method in (baseline, LDPET):
                continue
            for metric in METRICS:
                p = paired_significance(result, method, baseline, metric)[d]
                result.significance[(method, d, metric)] = p


def marker(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.005:
        return MARK_STRONG
    if p < 0.05:
        return MARK_WEAK
    return ""


def render_table(result: BenchmarkResult) -> str:
    """Text grid: one block per metric, methods as rows, doses as columns."""
    dose_heads = [f"{round(d * 100)}%" for d in result.doses]
    width = max(18, max(len(m) for m in result.methods) + 2)
    lines = []
    for metric in METRICS:
        lines.append(f"{metric.upper():<{width}}" + "".join(f"{h:>10}" for h in dose_heads))
        for method in result.methods:
            cells = []
            for d in result.doses:
                agg = result.aggregates.get((method, d))
                if agg is None:
                    cells.append(f"{'-':>10}")
                    continue
                mean = agg[metric][0]
                mark = marker(result.significance.get((method, d, metric)))
                text = "inf" if math.isinf(mean) else f"{mean:.3f}"
                cells.append(f"{text + mark:>10}")
            lines.append(f"{method:<{width}}" + "".join(cells))
        lines.append("")
    lines.append(f"{MARK_STRONG} p < 0.005, {MARK_WEAK} p < 0.05 vs the per-dose "
                 "individual baseline (two-sided signed-rank on per-subject differences)")
    for note in sorted(set(result.notes)):
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def write_records_csv(result: BenchmarkResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subject", "dose", "method", "psnr", "ssim", "rmse"])
        for r in sorted(result.records, key=lambda r: (r.method, r.dose_fraction, r.subject_id)):
            w.writerow([r.subject_id, f"{r.dose_fraction:.2f}", r.method,
                        f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.rmse:.6f}"])


def read_records_csv(path) -> BenchmarkResult:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"records file not found: {path}")
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(
                subject_id=row["subject"],
                dose_fraction=float(row["dose"]),
                method=row["method"],
                psnr=float(row["psnr"]),
                ssim=float(row["ssim"]),
                rmse=float(row["rmse"]),
            ))
    if not records:
        raise MissingDataError(f"{path}: no records")
    doses = tuple(sorted({r.dose_fraction for r in records}))
    methods = [LDPET] + sorted({r.method for r in records} - {LDPET})
    result = BenchmarkResult(records=records, doses=doses, methods=tuple(methods))
    result.aggregates = compute_aggregates(result)
    _attach_significance(result)
    return result


def write_aggregates_csv(result: BenchmarkResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dose", "metric", "mean", "std"])
        for method in result.methods:
            for d in result.doses:
                agg = result.aggregates.get((method, d))
                if agg is None:
                    continue
                for metric in METRICS:
                    mean, std = agg[metric]
                    w.writerow([method, f"{d:.2f}", metric, f"{mean:.6f}", f"{std:.6f}"])


def write_significance_csv(result: BenchmarkResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dose", "metric", "p_value", "marker"])
        for (method, d, metric), p in sorted(result.significance.items()):
            w.writerow([method, f"{d:.2f}", metric, f"{p:.6g}", marker(p)])
