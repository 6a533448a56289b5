"""Cox proportional-hazards association analysis with HR sensitivity grids.

The fitter maximizes the Cox partial likelihood (Efron tie handling by
default, Breslow available) with damped Newton iterations; standard
errors come from the observed information. Exposure is either a
presence flag or a volume standardized to unit sample SD, adjusted for
the cohort covariates. Bootstrap resampling of participants yields
percentile CIs on hazard ratios and paired difference p-values between
two models fit on the same resamples.

The exclusion grid refits the volume model after dropping, per cell,
lesions below a (volume, attenuation) threshold pair; the inclusion
grid adds back false-negative lesions above the pair. Cell (0, 0) of
the exclusion grid runs through the identical code path as the
reference fit, so it reproduces it bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

COVARIATE_NAMES = (
    "age",
    "sex",
    "scanner64",
    "obesity",
    "hypertension",
    "diabetes",
    "hypercholesterolemia",
    "low_hdl",
    "smoker",
)

EXPOSURE_MODES = ("presence", "volume_per_sd")
# Largest |coefficient| treated as a genuine optimum.  The exposure column
# is standardized and the adjustment covariates are binary, so a fitted
# log-hazard ratio beyond this is only ever produced by a monotone partial
# likelihood (perfect separation), where beta drifts without bound while
# the likelihood creeps toward a finite supremum.
_BETA_BOUND = 15.0


@dataclass(frozen=True)
class SurvivalRecord:
    """One participant: follow-up, event flag, covariates, exposure volume."""

    participant_id: str
    time_days: float
    event: bool
    age: float
    sex: int
    scanner64: int
    obesity: int
    hypertension: int
    diabetes: int
    hypercholesterolemia: int
    low_hdl: int
    smoker: int
    volume_mm3: float

    def __post_init__(self):
        if not self.time_days > 0:
            raise ValueError("follow-up must be positive")
        for name in COVARIATE_NAMES[1:]:
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"covariate {name} must be 0 or 1")
        if self.volume_mm3 < 0:
            raise ValueError("volume must be non-negative")

    def covariate_vector(self, names) -> list[float]:
        return [float(getattr(self, name)) for name in names]


@dataclass(frozen=True)
class CoxFit:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    grad_max: float
    exposure_hr: float  # exp(coef of the first column)

    def hr_ci_wald(self, z: float = 1.96) -> tuple[float, float]:
        return (
            math.exp(self.coef[0] - z * self.se[0]),
            math.exp(self.coef[0] + z * self.se[0]),
        )


@dataclass(frozen=True)
class _EventGroups:
    """Flattened tie groups of the time-sorted data.

    One group per unique event time; the pair arrays enumerate the
    (group, within-tie rank) terms of the likelihood so the evaluation
    needs no Python loop.
    """

    risk_start: np.ndarray  # (G,) first index of each risk set
    events: np.ndarray  # (D,) event indices, grouped
    starts: np.ndarray  # (G,) offsets of each group within `events`
    sizes: np.ndarray  # (G,) tie multiplicities m
    pair_group: np.ndarray  # (D,) group of each (group, j) pair
    pair_rank: np.ndarray  # (D,) j of each pair, 0 <= j < m


def _event_groups(time_sorted, event_sorted) -> _EventGroups:
    event_times = np.unique(time_sorted[event_sorted])
    d_all = np.nonzero(event_sorted)[0]
    risk_start = np.searchsorted(time_sorted, event_times, side="left")
    # Events are already grouped by time because the data is time-sorted.
    sizes = np.searchsorted(
        time_sorted[d_all], event_times, side="right"
    ) - np.searchsorted(time_sorted[d_all], event_times, side="left")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pair_group = np.repeat(np.arange(sizes.size), sizes)
    pair_rank = np.arange(d_all.size) - starts[pair_group]
    return _EventGroups(
        risk_start=risk_start.astype(np.intp),
        events=d_all.astype(np.intp),
        starts=starts.astype(np.intp),
        sizes=sizes.astype(np.int64),
        pair_group=pair_group,
        pair_rank=pair_rank.astype(np.float64),
    )


def _prepare_design(time, event, X):
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if time.size != X.shape[0] or event.size != X.shape[0]:
        raise ValueError("time, event, and X must have equal length")
    order = np.argsort(time, kind="stable")
    t_s, e_s, x_s = time[order], event[order], X[order]
    return t_s, e_s, x_s, _event_groups(t_s, e_s)


def _loglik_grad_hess(e_s, x_s, groups: _EventGroups, beta, use_efron):
    """Efron/Breslow log partial likelihood with gradient and Hessian.

    Breslow fixes the within-tie discount factor f at zero where Efron
    uses j/m, so the two conventions share every other operation and are
    bit-identical when no event times tie (then m = 1 and f = 0/1 = 0.0
    exactly, for both).
    """
    eta = x_s @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    wx = w[:, None] * x_s
    wxx = np.einsum("i,ij,ik->ijk", w, x_s, x_s)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum(wx[::-1], axis=0)[::-1]
    s2 = np.cumsum(wxx[::-1], axis=0)[::-1]
    d = groups.events
    if use_efron:
        f = groups.pair_rank / groups.sizes[groups.pair_group]
    else:
        f = np.zeros(d.size)
    sd0 = np.add.reduceat(w[d], groups.starts)
    sd1 = np.add.reduceat(wx[d], groups.starts, axis=0)
    sd2 = np.add.reduceat(wxx[d], groups.starts, axis=0)
    g = groups.pair_group
    r = groups.risk_start[g]
    z0 = s0[r] - f * sd0[g]
    z1 = s1[r] - f[:, None] * sd1[g]
    z2 = s2[r] - f[:, None, None] * sd2[g]
    mu = z1 / z0[:, None]
    ll = float(eta[d].sum() - d.size * shift - np.log(z0).sum())
    grad = x_s[d].sum(axis=0) - mu.sum(axis=0)
    hess = -(
        np.tensordot(1.0 / z0, z2, axes=(0, 0))
        - np.einsum("ij,ik->jk", mu, mu)
    )
    return ll, grad, hess


def cox_loglik(time, event, X, beta, ties: str = "efron"):
    """Log partial likelihood, gradient, and Hessian at a given beta."""
    if ties not in ("efron", "breslow"):
        raise ValueError("ties must be 'efron' or 'breslow'")
    _, e_s, x_s, groups = _prepare_design(time, event, X)
    beta = np.asarray(beta, dtype=np.float64).reshape(x_s.shape[1])
    return _loglik_grad_hess(e_s, x_s, groups, beta, ties == "efron")


def cox_partial_fit(
    time,
    event,
    X,
    names=None,
    ties: str = "efron",
    tol: float = 1e-9,
    max_iter: int = 100,
) -> CoxFit:
    """Maximize the Cox partial likelihood over the columns of X.

    `ties` is 'efron' or 'breslow'; the two share one accumulation loop
    (Breslow fixes the within-tie discount factor at zero), so they are
    bit-identical when no event times tie. Convergence is a relative
    log-likelihood change below `tol`. Raises on fewer than two events,
    rank-deficient designs, and monotone likelihoods (separation).
    """
    t_s, e_s, x_s, groups = _prepare_design(time, event, X)
    n, p = x_s.shape
    if names is None:
        names = tuple(f"x{i}" for i in range(p))
    if e_s.sum() < 2:
        raise ValueError("need at least 2 events")
    if ties not in ("efron", "breslow"):
        raise ValueError("ties must be 'efron' or 'breslow'")
    centered = x_s - x_s.mean(axis=0)
    if np.linalg.matrix_rank(centered) < p:
        raise ValueError("design matrix is rank deficient")
    use_efron = ties == "efron"

    def evaluate(beta):
        return _loglik_grad_hess(e_s, x_s, groups, beta, use_efron)

    beta = np.zeros(p)
    ll, grad, hess = evaluate(beta)
    n_iter = 0
    converged = False
    for n_iter in range(1, max_iter + 1):
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular information matrix") from exc
        factor = 1.0
        for _ in range(40):
            candidate = beta + factor * delta
            new_ll, new_grad, new_hess = evaluate(candidate)
            if np.isfinite(new_ll) and new_ll >= ll:
                break
            factor /= 2.0
        else:
            converged = True  # no uphill step exists; already at the optimum
            break
        if np.max(np.abs(candidate)) > _BETA_BOUND:
            raise ValueError(
                "coefficients diverged (monotone likelihood / separation)"
            )
        improvement = new_ll - ll
        beta, ll, grad, hess = candidate, new_ll, new_grad, new_hess
        if improvement <= tol * (abs(ll) + 1.0):
            converged = True
            break

    # A monotone likelihood flattens out, so the improvement criterion can
    # fire while beta is still drifting upward; re-check the bound here.
    if np.max(np.abs(beta)) > _BETA_BOUND:
        raise ValueError(
            "coefficients diverged (monotone likelihood / separation)"
        )
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular information matrix at optimum") from exc
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return CoxFit(
        names=tuple(names),
        coef=beta,
        se=se,
        loglik=float(ll),
        n_iter=n_iter,
        converged=converged,
        grad_max=float(np.max(np.abs(grad))),
        exposure_hr=float(np.exp(beta[0])),
    )


@dataclass(frozen=True)
class _Cohort:
    """Array view of a record list, for fast resampling."""

    ids: tuple[str, ...]
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray  # (n, c)
    covariate_names: tuple[str, ...]
    volume: np.ndarray

    @classmethod
    def from_records(cls, records, covariate_names=COVARIATE_NAMES) -> "_Cohort":
        records = list(records)
        if not records:
            raise ValueError("no survival records")
        return cls(
            ids=tuple(r.participant_id for r in records),
            time=np.array([r.time_days for r in records]),
            event=np.array([r.event for r in records], dtype=bool),
            covariates=np.array(
                [r.covariate_vector(covariate_names) for r in records]
            ).reshape(len(records), len(covariate_names)),
            covariate_names=tuple(covariate_names),
            volume=np.array([r.volume_mm3 for r in records]),
        )


def _exposure_column(volume: np.ndarray, mode: str) -> np.ndarray:
    if mode == "presence":
        return (volume > 0).astype(np.float64)
    if mode == "volume_per_sd":
        sd = volume.std(ddof=1)
        if sd == 0:
            raise ValueError("exposure is constant; cannot standardize")
        return volume / sd
    raise ValueError(f"exposure mode must be one of {EXPOSURE_MODES}")


def _fit_cohort(cohort: _Cohort, volume, mode, ties="efron") -> CoxFit:
    exposure = _exposure_column(np.asarray(volume, dtype=np.float64), mode)
    if np.all(exposure == exposure[0]):
        raise ValueError("exposure is constant across participants")
    # Constant adjustment columns carry no information in a Cox model and
    # would make the design singular (e.g. a single-scanner cohort), so
    # they are dropped; the exposure column is never dropped.
    keep = [
        i
        for i in range(cohort.covariates.shape[1])
        if not np.all(cohort.covariates[:, i] == cohort.covariates[0, i])
    ]
    X = np.column_stack([exposure, cohort.covariates[:, keep]])
    names = ("exposure",) + tuple(cohort.covariate_names[i] for i in keep)
    return cox_partial_fit(cohort.time, cohort.event, X, names, ties=ties)


def cox_fit(
    records,
    exposure_mode: str = "volume_per_sd",
    covariate_names=COVARIATE_NAMES,
    ties: str = "efron",
) -> CoxFit:
    """Fit the exposure model on a record list.

    'presence' uses the indicator volume > 0; 'volume_per_sd' divides
    the volume by its sample SD so the HR is per one SD of volume.
    """
    cohort = _Cohort.from_records(records, covariate_names)
    return _fit_cohort(cohort, cohort.volume, exposure_mode, ties)


@dataclass(frozen=True)
class HRBootstrap:
    hr: float
    ci_low: float
    ci_high: float
    p_vs_alt: float  # 1.0 when comparing a model against itself
    replications: int
    n_failed: int
    redraws: int
    seed: int


def _resample_indices(rng, event, n, max_redraws):
    """Participant resample with at least two events; counts redraws."""
    redraws = 0
    while True:
        idx = rng.integers(0, n, size=n)
        if event[idx].sum() >= 2:
            return idx, redraws
        redraws += 1
        if redraws > max_redraws:
            raise ValueError("too many zero-event bootstrap resamples")


def bootstrap_hr(
    records,
    exposure_mode: str = "volume_per_sd",
    alt_volumes=None,
    alt_mode: str | None = None,
    covariate_names=COVARIATE_NAMES,
    replications: int = 1000,
    seed: int = 0,
    ties: str = "efron",
) -> HRBootstrap:
    """Percentile-bootstrap CI on the exposure HR, optionally paired.

    When `alt_volumes` (and/or `alt_mode`) names a second model, both
    models are fit on each resample and p_vs_alt = 2·min(frac(ΔHR ≤ 0),
    frac(ΔHR ≥ 0)) clamped to 1, where ΔHR = HR − HR_alt. With no
    alternative, the model is compared to itself (p = 1). Resamples with
    fewer than two events are redrawn (at most 10× replications in
    total); resamples where a fit fails are dropped from the
    percentiles and counted in n_failed.
    """
    if replications < 100:
        raise ValueError("use at least 100 bootstrap replications")
    cohort = _Cohort.from_records(records, covariate_names)
    n = len(cohort.ids)
    vol_a = cohort.volume
    vol_b = cohort.volume if alt_volumes is None else np.asarray(alt_volumes, float)
    if vol_b.size != n:
        raise ValueError("alt_volumes length differs from the cohort")
    mode_b = exposure_mode if alt_mode is None else alt_mode

    point = _fit_cohort(cohort, vol_a, exposure_mode, ties)
    rng = np.random.default_rng(seed)
    max_redraws = 10 * replications
    hrs = np.full(replications, np.nan)
    diffs = np.full(replications, np.nan)
    total_redraws = 0
    for rep in range(replications):
        idx, redraws = _resample_indices(
            rng, cohort.event, n, max_redraws - total_redraws
        )
        total_redraws += redraws
        sub = _Cohort(
            ids=tuple(f"r{i}" for i in range(n)),
            time=cohort.time[idx],
            event=cohort.event[idx],
            covariates=cohort.covariates[idx],
            covariate_names=cohort.covariate_names,
            volume=cohort.volume[idx],
        )
        try:
            hr_a = _fit_cohort(sub, vol_a[idx], exposure_mode, ties).exposure_hr
            hr_b = (
                hr_a
                if alt_volumes is None and alt_mode is None
                else _fit_cohort(sub, vol_b[idx], mode_b, ties).exposure_hr
            )
        except ValueError:
            continue
        hrs[rep] = hr_a
        diffs[rep] = hr_a - hr_b
    valid = np.isfinite(hrs)
    if valid.sum() == 0:
        raise ValueError("all bootstrap replications failed")
    ci_low, ci_high = np.percentile(hrs[valid], [2.5, 97.5])
    d = diffs[np.isfinite(diffs)]
    p = min(2.0 * min(np.mean(d <= 0), np.mean(d >= 0)), 1.0)
    return HRBootstrap(
        hr=point.exposure_hr,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_vs_alt=float(p),
        replications=replications,
        n_failed=int(replications - valid.sum()),
        redraws=total_redraws,
        seed=seed,
    )


@dataclass(frozen=True)
class HRCell:
    vmin: float
    dmin: float
    hr: float | None
    ci_low: float | None
    ci_high: float | None
    p_vs_ref: float | None
    marker: str  # '**' p < .05, '*' p < .1, '' otherwise
    degenerate: bool = False


@dataclass(frozen=True)
class HRGrid:
    kind: str  # 'exclusion' | 'inclusion'
    vol_edges: tuple[float, ...]
    att_edges: tuple[float, ...]
    cells: tuple[tuple[HRCell, ...], ...]  # [vol index][att index]
    reference_hr: float
    replications: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "volume_edges_mm3": list(self.vol_edges),
            "attenuation_edges_hu": list(self.att_edges),
            "reference_hr": self.reference_hr,
            "bootstrap": {"replications": self.replications, "seed": self.seed},
            "cells": [
                [
                    {
                        "vmin": c.vmin,
                        "dmin": c.dmin,
                        "hr": c.hr,
                        "ci": None if c.hr is None else [c.ci_low, c.ci_high],
                        "p_vs_reference": c.p_vs_ref,
                        "marker": c.marker,
                        "degenerate": c.degenerate,
                    }
                    for c in row
                ]
                for row in self.cells
            ],
        }


def grid_to_json(grid: HRGrid) -> str:
    return json.dumps(grid.to_dict(), indent=2)


def _marker(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def excluded_volume(table, vmin: float, dmin: float, predicate: str = "and") -> float:
    """Participant volume after dropping lesions below the thresholds.

    'and' (default) drops a lesion only when its volume < vmin AND its
    median attenuation < dmin; 'or' drops when either is below.
    """
    total = 0.0
    for lesion in table:
        small = lesion.volume_mm3 < vmin
        faint = lesion.median_hu < dmin
        dropped = (small and faint) if predicate == "and" else (small or faint)
        if not dropped:
            total += lesion.volume_mm3
    return total


def included_volume(base: float, fn_table, vmin: float, dmin: float) -> float:
    """Automated volume plus false-negative lesions at or above both thresholds."""
    extra = sum(
        lesion.volume_mm3
        for lesion in fn_table
        if lesion.volume_mm3 >= vmin and lesion.median_hu >= dmin
    )
    return base + extra


def _grid_fit(
    kind,
    cohort,
    cell_volumes,
    ref_volumes,
    vol_edges,
    att_edges,
    replications,
    seed,
    ties,
):
    """Shared grid machinery: reference fit + per-cell paired bootstrap."""
    mode = "volume_per_sd"
    ref_fit = _fit_cohort(cohort, ref_volumes, mode, ties)
    n = len(cohort.ids)
    rng = np.random.default_rng(seed)
    max_redraws = 10 * replications
    total_redraws = 0
    index_sets = []
    for _ in range(replications):
        idx, redraws = _resample_indices(
            rng, cohort.event, n, max_redraws - total_redraws
        )
        total_redraws += redraws
        index_sets.append(idx)

    def subcohort(idx):
        return _Cohort(
            ids=tuple(f"r{i}" for i in range(n)),
            time=cohort.time[idx],
            event=cohort.event[idx],
            covariates=cohort.covariates[idx],
            covariate_names=cohort.covariate_names,
            volume=cohort.volume[idx],
        )

    ref_hrs = np.full(replications, np.nan)
    subs = []
    for rep, idx in enumerate(index_sets):
        sub = subcohort(idx)
        subs.append((idx, sub))
        try:
            ref_hrs[rep] = _fit_cohort(sub, ref_volumes[idx], mode, ties).exposure_hr
        except ValueError:
            continue

    rows = []
    for vi, vmin in enumerate(vol_edges):
        row = []
        for ai, dmin in enumerate(att_edges):
            volumes = cell_volumes[vi][ai]
            if np.all(volumes == volumes[0]):
                row.append(
                    HRCell(vmin, dmin, None, None, None, None, "", degenerate=True)
                )
                continue
            fit = _fit_cohort(cohort, volumes, mode, ties)
            hrs = np.full(replications, np.nan)
            for rep, (idx, sub) in enumerate(subs):
                try:
                    hrs[rep] = _fit_cohort(sub, volumes[idx], mode, ties).exposure_hr
                except ValueError:
                    continue
            valid = np.isfinite(hrs)
            paired = valid & np.isfinite(ref_hrs)
            if valid.sum() == 0 or paired.sum() == 0:
                row.append(
                    HRCell(vmin, dmin, None, None, None, None, "", degenerate=True)
                )
                continue
            ci_low, ci_high = np.percentile(hrs[valid], [2.5, 97.5])
            d = hrs[paired] - ref_hrs[paired]
            p = min(2.0 * min(np.mean(d <= 0), np.mean(d >= 0)), 1.0)
            row.append(
                HRCell(
                    vmin=float(vmin),
                    dmin=float(dmin),
                    hr=fit.exposure_hr,
                    ci_low=float(ci_low),
                    ci_high=float(ci_high),
                    p_vs_ref=float(p),
                    marker=_marker(float(p)),
                )
            )
        rows.append(tuple(row))
    return HRGrid(
        kind=kind,
        vol_edges=tuple(float(v) for v in vol_edges),
        att_edges=tuple(float(a) for a in att_edges),
        cells=tuple(rows),
        reference_hr=ref_fit.exposure_hr,
        replications=replications,
        seed=seed,
    )


def exclusion_grid(
    records,
    lesion_tables: dict,
    vol_edges,
    att_edges,
    predicate: str = "and",
    covariate_names=COVARIATE_NAMES,
    replications: int = 1000,
    seed: int = 0,
    ties: str = "efron",
) -> HRGrid:
    """HR grid after excluding, per cell, lesions below both thresholds.

    `lesion_tables` maps participant id to that participant's lesion
    records; participants absent from the map contribute volume 0. The
    reference model (and the p-value pairing target) is the cell-(0,0)
    computation itself, i.e. the unmodified volume model.
    """
    if predicate not in ("and", "or"):
        raise ValueError("predicate must be 'and' or 'or'")
    cohort = _Cohort.from_records(records, covariate_names)
    tables = [lesion_tables.get(pid, ()) for pid in cohort.ids]
    cell_volumes = [
        [
            np.array(
                [excluded_volume(t, vmin, dmin, predicate) for t in tables]
            )
            for dmin in att_edges
        ]
        for vmin in vol_edges
    ]
    ref_volumes = np.array(
        [excluded_volume(t, 0.0, 0.0, predicate) for t in tables]
    )
    return _grid_fit(
        "exclusion",
        cohort,
        cell_volumes,
        ref_volumes,
        vol_edges,
        att_edges,
        replications,
        seed,
        ties,
    )


def inclusion_grid(
    records,
    fn_tables: dict,
    reference_volumes,
    vol_edges,
    att_edges,
    covariate_names=COVARIATE_NAMES,
    replications: int = 1000,
    seed: int = 0,
    ties: str = "efron",
) -> HRGrid:
    """HR grid after adding false-negative lesions above both thresholds.

    Each record's own volume is the automated measurement;
    `fn_tables[pid]` lists that participant's false-negative (manual
    only) lesions, and `reference_volumes` (one per record, in order) is
    the comparison model's exposure, typically the manual volume.
    """
    cohort = _Cohort.from_records(records, covariate_names)
    tables = [fn_tables.get(pid, ()) for pid in cohort.ids]
    ref_volumes = np.asarray(reference_volumes, dtype=np.float64)
    if ref_volumes.size != len(cohort.ids):
        raise ValueError("reference_volumes length differs from the cohort")
    cell_volumes = [
        [
            np.array(
                [
                    included_volume(base, t, vmin, dmin)
                    for base, t in zip(cohort.volume, tables)
                ]
            )
            for dmin in att_edges
        ]
        for vmin in vol_edges
    ]
    return _grid_fit(
        "inclusion",
        cohort,
        cell_volumes,
        ref_volumes,
        vol_edges,
        att_edges,
        replications,
        seed,
        ties,
    )


def simulate_cohort(
    rng: np.random.Generator,
    n: int = 1000,
    hr_presence: float = 2.0,
    baseline_hazard: float = 1e-3,
    followup_cap_days: float = 1095.0,
    with_covariates: bool = False,
) -> list[SurvivalRecord]:
    """Synthetic cohort with exponential event times and admin censoring.

    Exposure presence doubles (by default) the hazard; exposed
    participants get a log-normal volume. Covariates are all zero unless
    `with_covariates`, in which case they are independent coin flips
    (age uniform 45-85) with no effect on the hazard.
    """
    present = rng.uniform(size=n) < 0.5
    volume = np.where(present, rng.lognormal(mean=3.0, sigma=1.0, size=n), 0.0)
    hazard = baseline_hazard * np.where(present, hr_presence, 1.0)
    t_event = rng.exponential(1.0 / hazard)
    time = np.minimum(t_event, followup_cap_days)
    event = t_event <= followup_cap_days
    records = []
    for i in range(n):
        if with_covariates:
            age = float(rng.uniform(45, 85))
            flags = rng.integers(0, 2, size=8)
        else:
            age, flags = 0.0, np.zeros(8, dtype=int)
        records.append(
            SurvivalRecord(
                participant_id=f"s{i:05d}",
                time_days=float(time[i]),
                event=bool(event[i]),
                age=age,
                sex=int(flags[0]),
                scanner64=int(flags[1]),
                obesity=int(flags[2]),
                hypertension=int(flags[3]),
                diabetes=int(flags[4]),
                hypercholesterolemia=int(flags[5]),
                low_hdl=int(flags[6]),
                smoker=int(flags[7]),
                volume_mm3=float(volume[i]),
            )
        )
    return records


CSV_COLUMNS = ("id", "time_days", "event") + COVARIATE_NAMES + ("volume_mm3",)


def read_survival_csv(path) -> list[SurvivalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            records.append(
                SurvivalRecord(
                    participant_id=row["id"],
                    time_days=float(row["time_days"]),
                    event=bool(int(row["event"])),
                    age=float(row["age"]),
                    sex=int(row["sex"]),
                    scanner64=int(row["scanner64"]),
                    obesity=int(row["obesity"]),
                    hypertension=int(row["hypertension"]),
                    diabetes=int(row["diabetes"]),
                    hypercholesterolemia=int(row["hypercholesterolemia"]),
                    low_hdl=int(row["low_hdl"]),
                    smoker=int(row["smoker"]),
                    volume_mm3=float(row["volume_mm3"]),
                )
            )
    return records


def write_survival_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.participant_id,
                    repr(r.time_days),
                    int(r.event),
                    repr(r.age),
                    r.sex,
                    r.scanner64,
                    r.obesity,
                    r.hypertension,
                    r.diabetes,
                    r.hypercholesterolemia,
                    r.low_hdl,
                    r.smoker,
                    repr(r.volume_mm3),
                ]
            )
