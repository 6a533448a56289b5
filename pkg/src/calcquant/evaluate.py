"""Segmentation metrics, threshold curves, agreement statistics, and tests.

Voxel-level confusion counts feed dataset-wise recall/precision and
participant-wise summaries (false-positive volume stratified by whether
the reference shows any calcification). Threshold sweeps produce
precision-recall and FPV curves. Paired volume measurements get
ICC(2,1) (two-way random, single measure, absolute agreement),
Spearman correlation, Bland-Altman limits of agreement (identity or
cube-root scale), percentile-bootstrap confidence intervals, and a
tie-corrected Wilcoxon signed-rank test for ordinal grade comparisons.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .quantify import binarize, measure_volume
from .volgrid import Mask, ProbMap


@dataclass(frozen=True)
class VoxelCounts:
    """Confusion counts of one scan's segmentation against a reference."""

    tp: int
    fp: int
    fn: int
    tn: int
    scan_id: str = ""

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def has_icac(self) -> bool:
        """Whether the reference contains any positive voxel."""
        return (self.tp + self.fn) > 0


def voxel_counts(pred: Mask, ref: Mask, scan_id: str = "") -> VoxelCounts:
    """Elementwise TP/FP/FN/TN of a predicted mask against a reference."""
    if pred.grid != ref.grid:
        raise ValueError("prediction and reference masks live on different grids")
    p = pred.bool_data
    r = ref.bool_data
    tp = int(np.sum(p & r))
    fp = int(np.sum(p & ~r))
    fn = int(np.sum(~p & r))
    tn = int(np.sum(~p & ~r))
    return VoxelCounts(tp, fp, fn, tn, scan_id)


@dataclass(frozen=True)
class ScanMetrics:
    scan_id: str
    recall: float | None  # None when the reference is empty
    precision: float | None  # None when nothing was predicted
    fpv_mm3: float
    ref_volume_mm3: float
    has_icac: bool


@dataclass(frozen=True)
class MeanSd:
    mean: float
    sd: float
    n: int


def _mean_sd(values) -> MeanSd | None:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return MeanSd(float(values.mean()), sd, int(values.size))


@dataclass(frozen=True)
class DatasetReport:
    dataset_recall: float | None
    dataset_precision: float | None
    recall_with_icac: MeanSd | None  # participant-wise, scans with reference ICAC
    fpv_with_icac: MeanSd | None
    fpv_icac_free: MeanSd | None
    per_scan: tuple[ScanMetrics, ...]


def scan_metrics(counts: VoxelCounts, voxel_volume: float) -> ScanMetrics:
    recall = counts.tp / (counts.tp + counts.fn) if counts.has_icac else None
    denom = counts.tp + counts.fp
    precision = counts.tp / denom if denom > 0 else None
    return ScanMetrics(
        scan_id=counts.scan_id,
        recall=recall,
        precision=precision,
        fpv_mm3=counts.fp * voxel_volume,
        ref_volume_mm3=(counts.tp + counts.fn) * voxel_volume,
        has_icac=counts.has_icac,
    )


def aggregate_metrics(counts, voxel_volume: float) -> DatasetReport:
    """Pooled (dataset-wise) and per-participant metric summaries.

    Undefined ratios (no reference positives anywhere, or no predicted
    positives) are reported as None, never coerced to 0 or 1.
    """
    counts = list(counts)
    if not counts:
        raise ValueError("need at least one scan")
    per_scan = tuple(scan_metrics(c, voxel_volume) for c in counts)
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    dataset_recall = tp / (tp + fn) if (tp + fn) > 0 else None
    dataset_precision = tp / (tp + fp) if (tp + fp) > 0 else None
    with_icac = [m for m in per_scan if m.has_icac]
    without = [m for m in per_scan if not m.has_icac]
    return DatasetReport(
        dataset_recall=dataset_recall,
        dataset_precision=dataset_precision,
        recall_with_icac=_mean_sd([m.recall for m in with_icac]),
        fpv_with_icac=_mean_sd([m.fpv_mm3 for m in with_icac]),
        fpv_icac_free=_mean_sd([m.fpv_mm3 for m in without]),
        per_scan=per_scan,
    )


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    recall: float | None
    precision: float | None
    mean_fpv_mm3: float | None  # among scans whose reference has ICAC


def sweep_curves(scans, thresholds) -> list[CurvePoint]:
    """Dataset recall/precision and mean FPV at each probability threshold.

    `scans` is a sequence of (prob: ProbMap, candidates: Mask, ref: Mask)
    triples; `thresholds` must be ascending.
    """
    scans = list(scans)
    if not scans:
        raise ValueError("need at least one scan")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    points = []
    for thr in thresholds:
        per_scan = []
        for prob, cand, ref in scans:
            seg = binarize(prob, cand, thr)
            per_scan.append(voxel_counts(seg, ref))
        report = aggregate_metrics(per_scan, scans[0][2].grid.voxel_volume_mm3)
        fpv = report.fpv_with_icac
        points.append(
            CurvePoint(
                threshold=thr,
                recall=report.dataset_recall,
                precision=report.dataset_precision,
                mean_fpv_mm3=fpv.mean if fpv is not None else None,
            )
        )
    return points


@dataclass(frozen=True)
class PairedMeasurements:
    """Per-participant measurements from two sources (a first, b second)."""

    ids: tuple[str, ...]
    value_a: np.ndarray
    value_b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.value_a, dtype=np.float64)
        b = np.asarray(self.value_b, dtype=np.float64)
        if len(self.ids) != a.size or a.size != b.size:
            raise ValueError("ids, value_a, and value_b must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate participant ids")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("paired values must be finite")
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "value_a", a)
        object.__setattr__(self, "value_b", b)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_rows(cls, rows) -> "PairedMeasurements":
        rows = list(rows)
        return cls(
            ids=tuple(str(r[0]) for r in rows),
            value_a=np.array([r[1] for r in rows], dtype=np.float64),
            value_b=np.array([r[2] for r in rows], dtype=np.float64),
        )

    def take(self, indices) -> "PairedMeasurements":
        idx = np.asarray(indices)
        return PairedMeasurements(
            ids=tuple(f"r{i}" for i in range(idx.size)),
            value_a=self.value_a[idx].copy(),
            value_b=self.value_b[idx].copy(),
        )


def icc21(pairs: PairedMeasurements) -> float:
    """ICC(2,1): two-way random effects, single measure, absolute agreement.

    (MSR - MSE) / (MSR + (k-1)·MSE + (k/n)·(MSC - MSE)) with k = 2 raters.
    """
    n = len(pairs)
    if n < 3:
        raise ValueError("ICC needs at least 3 pairs")
    x = np.stack([pairs.value_a, pairs.value_b], axis=1)
    k = 2
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = k * np.sum((row_means - grand) ** 2)
    ss_cols = n * np.sum((col_means - grand) ** 2)
    resid = x - row_means[:, None] - col_means[None, :] + grand
    ss_err = np.sum(resid**2)
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_err / ((n - 1) * (k - 1))
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0:
        raise ValueError("ICC undefined: zero variance in both raters")
    return float((ms_r - ms_e) / denom)


def midranks(values) -> np.ndarray:
    """Average ranks (1-based); tied values share the mean of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(pairs: PairedMeasurements) -> float:
    """Spearman rho: Pearson correlation of midranked values."""
    if len(pairs) < 3:
        raise ValueError("Spearman needs at least 3 pairs")
    ra = midranks(pairs.value_a)
    rb = midranks(pairs.value_b)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        raise ValueError("Spearman undefined for a constant vector")
    return float(np.corrcoef(ra, rb)[0, 1])


TRANSFORMS = {"identity": lambda v: v, "cube_root": np.cbrt}


@dataclass(frozen=True)
class BlandAltman:
    transform: str
    mean_diff: float
    sd: float
    lower: float
    upper: float
    n: int


def bland_altman(pairs: PairedMeasurements, transform: str = "identity") -> BlandAltman:
    """Limits of agreement for d_i = f(a_i) - f(b_i), f identity or cube root."""
    if transform not in TRANSFORMS:
        raise ValueError(f"transform must be one of {sorted(TRANSFORMS)}")
    if len(pairs) < 2:
        raise ValueError("Bland-Altman needs at least 2 pairs")
    f = TRANSFORMS[transform]
    d = f(pairs.value_a) - f(pairs.value_b)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(
        transform=transform,
        mean_diff=mean,
        sd=sd,
        lower=mean - 1.96 * sd,
        upper=mean + 1.96 * sd,
        n=len(pairs),
    )


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    ci_low: float
    ci_high: float
    p_two_sided: float
    replications: int
    seed: int


def bootstrap(statistic, pairs: PairedMeasurements, replications: int = 10000,
              seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap over participants.

    `statistic` maps a PairedMeasurements resample to a float. The CI is
    the 2.5/97.5 percentile interval. The two-sided p-value treats the
    replication values as a difference distribution:
    p = 2·min(frac ≤ 0, frac ≥ 0), clamped to at most 1. Replications
    that raise (degenerate resamples) are excluded from the percentiles.
    """
    if replications < 100:
        raise ValueError("use at least 100 bootstrap replications")
    rng = np.random.default_rng(seed)
    n = len(pairs)
    estimate = float(statistic(pairs))
    values = np.full(replications, np.nan)
    for rep in range(replications):
        idx = rng.integers(0, n, size=n)
        try:
            values[rep] = statistic(pairs.take(idx))
        except ValueError:
            continue
    valid = values[np.isfinite(values)]
    if valid.size == 0:
        raise ValueError("all bootstrap replications failed")
    ci_low, ci_high = np.percentile(valid, [2.5, 97.5])
    frac_le = np.mean(valid <= 0.0)
    frac_ge = np.mean(valid >= 0.0)
    p = min(2.0 * min(frac_le, frac_ge), 1.0)
    return BootstrapResult(
        estimate=estimate,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_two_sided=float(p),
        replications=replications,
        seed=seed,
    )


@dataclass(frozen=True)
class WilcoxonResult:
    n_nonzero: int
    w_plus: float
    z: float
    p_two_sided: float


def wilcoxon_signed_rank(grades) -> WilcoxonResult:
    """Wilcoxon signed-rank test on signed grades, zeros discarded.

    Ranks |grade| with midranks; W+ sums the ranks of positive grades.
    The normal approximation uses the tie-corrected variance
    n(n+1)(2n+1)/24 - Σ(t³-t)/48 (no continuity correction).
    """
    g = np.asarray(grades, dtype=np.float64)
    g = g[g != 0]
    n = g.size
    if n == 0:
        raise ValueError("all grades are zero; test undefined")
    ranks = midranks(np.abs(g))
    w_plus = float(ranks[g > 0].sum())
    expect = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(g), return_counts=True)
    var -= np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts) / 48.0
    if var <= 0:
        raise ValueError("zero variance; all grades tie at one magnitude")
    z = (w_plus - expect) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(n_nonzero=n, w_plus=w_plus, z=float(z), p_two_sided=float(p))


def expand_grade_counts(counts: dict) -> np.ndarray:
    """Flatten {grade: count} into a grade vector (e.g. {1: 2} -> [1, 1])."""
    grades = []
    for grade, count in sorted(counts.items()):
        grades.extend([grade] * int(count))
    return np.asarray(grades, dtype=np.int64)


@dataclass(frozen=True)
class AgreementReport:
    icc: BootstrapResult
    rho: BootstrapResult
    ba_identity: BlandAltman
    ba_cube_root: BlandAltman
    replications: int
    seed: int

    def to_dict(self) -> dict:
        def boot(r):
            return {
                "estimate": r.estimate,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
            }

        def ba(r):
            return {
                "transform": r.transform,
                "mean_diff": r.mean_diff,
                "sd": r.sd,
                "lower": r.lower,
                "upper": r.upper,
            }

        return {
            "icc21": boot(self.icc),
            "spearman": boot(self.rho),
            "bland_altman": [ba(self.ba_identity), ba(self.ba_cube_root)],
            "bootstrap": {"replications": self.replications, "seed": self.seed},
        }


def agreement_report(
    pairs: PairedMeasurements, replications: int = 10000, seed: int = 0
) -> AgreementReport:
    """ICC(2,1) and Spearman with bootstrap CIs, plus Bland-Altman limits."""
    return AgreementReport(
        icc=bootstrap(icc21, pairs, replications, seed),
        rho=bootstrap(spearman, pairs, replications, seed),
        ba_identity=bland_altman(pairs, "identity"),
        ba_cube_root=bland_altman(pairs, "cube_root"),
        replications=replications,
        seed=seed,
    )


def read_paired_volumes_csv(path) -> PairedMeasurements:
    """CSV with header id,manual_mm3,auto_mm3 -> paired (manual, automated)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [
            (row["id"], float(row["manual_mm3"]), float(row["auto_mm3"]))
            for row in reader
        ]
    return PairedMeasurements.from_rows(rows)


def read_grades_csv(path) -> list[int]:
    """CSV with header region_id,grade -> list of signed integer grades."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [int(row["grade"]) for row in reader]


def write_curve_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "recall", "precision", "mean_fpv_mm3"])
        for pt in points:
            writer.writerow(
                [
                    repr(pt.threshold),
                    "" if pt.recall is None else repr(pt.recall),
                    "" if pt.precision is None else repr(pt.precision),
                    "" if pt.mean_fpv_mm3 is None else repr(pt.mean_fpv_mm3),
                ]
            )
