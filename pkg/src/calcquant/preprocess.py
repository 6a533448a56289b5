"""Scan preprocessing: affine registration and grid standardization.

Registration maximizes mutual information between a fixed and a moving
volume, estimated from a Parzen-window joint histogram over randomly
sampled fixed-image points, on a coarse-to-fine resolution pyramid. The
similarity surface is sharply peaked (a basin of attraction only a few
degrees wide), so the coarsest level seeds a grid of candidate rotations
whose best few are refined by quasi-Newton ascent at every level, with
the winner chosen by the finest level's metric and polished by a gated
gradient ascent on the configured sub-voxel step schedule. The result
maps fixed-space mm points into moving-space mm points, so resampling
the moving image through it produces the aligned image on any target
grid. A mean absolute HU error above a threshold (default 300, strict)
marks the registration as failed.

Also here: axial recentering on the center of mass of positive-HU
voxels, per-slice 2D Gaussian smoothing, and the canonical-grid
standardization used to put every scan on the same 240x240x100 lattice
of 0.5 mm voxels.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage, optimize

from .volgrid import Grid3, Mask, Volume, sample_at

CANONICAL_DIMS = (240, 240, 100)
CANONICAL_SPACING = (0.5, 0.5, 0.5)
FAILURE_THRESHOLD_HU = 300.0

_PARZEN_PAD = 2
_MIN_LEVEL_DIM = 8
_MIN_VALID_FRACTION = 0.1


@dataclass(frozen=True)
class AffineTransform:
    """Affine map from fixed-space mm points to moving-space mm points."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64)
        tra = np.array(self.translation, dtype=np.float64).reshape(3)
        if lin.shape != (3, 3):
            raise ValueError(f"linear part must be 3x3, got {lin.shape}")
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(tra))):
            raise ValueError("transform entries must be finite")
        if abs(np.linalg.det(lin)) < 1e-12:
            raise ValueError("singular transform")
        lin.flags.writeable = False
        tra.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(shift_mm) -> "AffineTransform":
        return AffineTransform(np.eye(3), np.asarray(shift_mm, dtype=np.float64))

    def apply(self, points) -> np.ndarray:
        """Map mm points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """The map x -> other(self(x)): apply `self` first, then `other`."""
        return AffineTransform(
            other.linear @ self.linear,
            other.linear @ self.translation + other.translation,
        )

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)


def mean_displacement_voxels(
    transform: AffineTransform, grid: Grid3, stride: int = 1
) -> float:
    """Mean |T(x) - x| over grid voxel centers, in (mean-spacing) voxels."""
    nx, ny, nz = grid.dims
    ix, iy, iz = np.meshgrid(
        np.arange(0, nx, stride),
        np.arange(0, ny, stride),
        np.arange(0, nz, stride),
        indexing="ij",
    )
    pts = grid.voxel_to_mm(
        np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    )
    disp = np.linalg.norm(transform.apply(pts) - pts, axis=1)
    return float(disp.mean() / np.mean(grid.spacing))


def resample(obj, transform: AffineTransform, target: Grid3):
    """Pull `obj` onto `target` through `transform` (fixed mm -> moving mm).

    Volumes and probability maps interpolate trilinearly; masks use the
    nearest voxel. Points landing outside the source stay at the kind's
    fill value (-1024 HU, probability 0, or background).
    """
    interpolation = "nearest" if isinstance(obj, Mask) else "linear"
    points = transform.apply(target.voxel_centers())
    values = sample_at(obj, points, interpolation=interpolation)
    if isinstance(obj, Mask):
        values = values.astype(np.uint8)
    return type(obj)(target, values)


def canonical_grid_like(src: Grid3) -> Grid3:
    """The canonical 240x240x100 / 0.5 mm grid centered on `src`.

    The origin snaps onto `src`'s voxel lattice so that a source already
    at canonical spacing is standardized voxel-for-voxel.
    """
    dims = CANONICAL_DIMS
    spacing = CANONICAL_SPACING
    src_origin = np.asarray(src.origin)
    src_spacing = np.asarray(src.spacing)
    center = src_origin + src_spacing * (np.asarray(src.dims) - 1) / 2.0
    origin = center - np.asarray(spacing) * (np.asarray(dims) - 1) / 2.0
    origin = src_origin + np.round((origin - src_origin) / src_spacing) * src_spacing
    return Grid3(dims, spacing, tuple(float(o) for o in origin))


def standardize_grid(
    vol, transform: AffineTransform, grid: Grid3 | None = None
):
    """Resample onto the canonical grid (default: centered on the input)."""
    if grid is None:
        grid = canonical_grid_like(vol.grid)
    return resample(vol, transform, grid)


def recenter_axial(vol: Volume) -> Volume:
    """Shift the image in-plane so positive-HU voxels are axially centered.

    The shift is the rounded offset between the axial center and the
    center of mass of voxels with HU > 0, applied as a whole-voxel
    translation (vacated voxels become air), so no interpolation occurs.
    """
    positive = vol.data > 0.0
    if not positive.any():
        raise ValueError("no positive-HU voxels")
    com = ndimage.center_of_mass(positive)
    shifts = [
        int(round((vol.grid.dims[a] - 1) / 2.0 - com[a])) for a in (0, 1)
    ]
    data = np.full_like(vol.data, -1024.0)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for a, s in enumerate(shifts):
        n = vol.grid.dims[a]
        if abs(s) >= n:
            return Volume(vol.grid, data)
        src[a] = slice(max(0, -s), min(n, n - s))
        dst[a] = slice(max(0, s), min(n, n + s))
    data[tuple(dst)] = vol.data[tuple(src)]
    return Volume(vol.grid, data)


def gaussian_smooth(vol: Volume, sigma: float) -> Volume:
    """Convolve each axial slice with a normalized 2D Gaussian.

    `sigma` is in voxels; the kernel is truncated at radius ceil(3*sigma)
    and renormalized to sum to one, so constant images pass unchanged.
    """
    if not (np.isfinite(sigma) and sigma > 0.0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    data = ndimage.correlate1d(vol.data, kernel, axis=0, mode="nearest")
    data = ndimage.correlate1d(data, kernel, axis=1, mode="nearest")
    return Volume(vol.grid, data)


class FailureCheck(NamedTuple):
    failed: bool
    mae_hu: float


def detect_failure(
    fixed: Volume, registered: Volume, threshold: float = FAILURE_THRESHOLD_HU
) -> FailureCheck:
    """Mean absolute per-voxel HU error; failure iff strictly above threshold."""
    if fixed.grid != registered.grid:
        raise ValueError("grid mismatch between fixed and registered volumes")
    mae = float(np.mean(np.abs(fixed.data - registered.data)))
    return FailureCheck(failed=mae > threshold, mae_hu=mae)


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs of the similarity optimization; defaults fit routine scans."""

    pyramid_levels: int = 3
    iterations_per_level: int = 128
    histogram_bins: int = 32
    sample_fraction: float = 0.05
    rng_seed: int = 0
    step_initial_mm: float = 2.0
    step_decay: float = 0.5

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be positive")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be positive")
        if self.histogram_bins < 2 * _PARZEN_PAD + 4:
            raise ValueError("histogram_bins too small for the Parzen window")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if not (np.isfinite(self.step_initial_mm) and self.step_initial_mm > 0):
            raise ValueError("step_initial_mm must be positive")
        if not 0.0 < self.step_decay <= 1.0:
            raise ValueError("step_decay must be in (0, 1]")


@dataclass(frozen=True)
class RegistrationReport:
    """Outcome of one registration: transform, metric, and failure check."""

    transform: AffineTransform
    final_metric: float  # negated mutual information at the solution
    mae_hu: float
    failed: bool


def _bspline3(u: np.ndarray) -> np.ndarray:
    """Cubic B-spline Parzen window; support |u| < 2, integrates to 1."""
    a = np.abs(u)
    return np.where(
        a <= 1.0,
        2.0 / 3.0 - a * a + a * a * a / 2.0,
        np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0),
    )


def _bspline3_deriv(u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    inner = -2.0 * a + 1.5 * a * a
    outer = -0.5 * (2.0 - a) ** 2
    mag = np.where(a <= 1.0, inner, np.where(a < 2.0, outer, 0.0))
    return np.sign(u) * mag


def _trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at in-bounds continuous voxel coords."""
    dims = np.asarray(data.shape)
    i0 = np.minimum(coords.astype(np.intp), dims - 2)
    fr = coords - i0
    out = np.zeros(coords.shape[0])
    for dx in (0, 1):
        wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
        for dy in (0, 1):
            wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
            for dz in (0, 1):
                wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                out += wx * wy * wz * data[
                    i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                ]
    return out


def _downsample_level(data: np.ndarray, grid: Grid3) -> tuple[np.ndarray, Grid3]:
    """Halve the resolution: smooth then keep every second voxel."""
    smoothed = ndimage.gaussian_filter(data, sigma=1.0, mode="nearest")
    sub = smoothed[::2, ::2, ::2]
    new_grid = Grid3(
        sub.shape,
        tuple(2.0 * s for s in grid.spacing),
        grid.origin,
    )
    return np.ascontiguousarray(sub), new_grid


def _positive_com_mm(data: np.ndarray, grid: Grid3) -> np.ndarray:
    """Center of mass (mm) of voxels above 0 HU; grid center if none."""
    positive = data > 0.0
    if positive.any():
        com = np.asarray(ndimage.center_of_mass(positive))
    else:
        com = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    return grid.voxel_to_mm(com)


class _MetricSamples:
    """Mutual information and its affine gradient on one pyramid level.

    Fixed-image points are sampled once (seeded), binned with a box
    window; the moving image contributes cubic B-spline Parzen weights,
    which makes the joint histogram differentiable in the transform. The
    affine is held in a frame centered on the sample centroid, which
    decouples the linear part from the translation it would induce.
    """

    def __init__(self, fixed_data, fixed_grid, moving_data, moving_grid, cfg, rng):
        bins = cfg.histogram_bins
        nvox = fixed_grid.voxel_count
        n = min(nvox, max(2048, int(round(cfg.sample_fraction * nvox))))
        flat = rng.choice(nvox, size=n, replace=False) if n < nvox else np.arange(nvox)
        idx = np.stack(np.unravel_index(flat, fixed_grid.dims), axis=1)
        # Jitter samples off the voxel lattice: histograms built at exact
        # grid positions have spurious extrema at integer shifts, which
        # would bias the optimum away from true alignment.
        pos = idx + rng.uniform(-0.5, 0.5, size=idx.shape)
        pos = np.clip(pos, 0.0, np.asarray(fixed_grid.dims) - 1.0)
        self.x = fixed_grid.voxel_to_mm(pos)
        self.center = self.x.mean(axis=0)
        self.xc = self.x - self.center
        self.r2 = float(np.mean(np.sum(self.xc**2, axis=1)))
        fvals = _trilinear(fixed_data, pos)
        fmin, fmax = float(fvals.min()), float(fvals.max())
        if fmax <= fmin:
            raise ValueError("degenerate fixed image: sampled values are constant")
        span = bins - 1 - 2 * _PARZEN_PAD
        uf = _PARZEN_PAD + (fvals - fmin) * (span / (fmax - fmin))
        self.f_idx = np.clip(np.floor(uf + 0.5).astype(np.intp), 0, bins - 1)
        self.bins = bins

        mmin, mmax = float(moving_data.min()), float(moving_data.max())
        if mmax <= mmin:
            raise ValueError("degenerate moving image: values are constant")
        self.m_scale = span / (mmax - mmin)
        self.m_min = mmin
        self.m_data = moving_data
        self.m_origin = np.asarray(moving_grid.origin)
        self.m_spacing = np.asarray(moving_grid.spacing)
        self.m_dims = np.asarray(moving_grid.dims)

    def evaluate(self, lin: np.ndarray, t_c: np.ndarray):
        """Return (mi, grad_linear, grad_translation) at y = lin·(x-c) + t_c."""
        bins = self.bins
        y = self.xc @ lin.T + t_c
        u = (y - self.m_origin) / self.m_spacing
        valid = np.all((u >= 0.0) & (u <= self.m_dims - 1), axis=1)
        nv = int(valid.sum())
        if nv < max(32, _MIN_VALID_FRACTION * self.x.shape[0]):
            return -np.inf, None, None
        uc = u[valid]
        i0 = np.minimum(uc.astype(np.intp), self.m_dims - 2)
        fr = uc - i0
        # Value and exact spatial gradient of the trilinear interpolant,
        # accumulated from the same eight corner samples.
        value = np.zeros(nv)
        grad_mm = np.zeros((nv, 3))
        for dx in (0, 1):
            wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
            sx = 1.0 if dx else -1.0
            for dy in (0, 1):
                wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
                sy = 1.0 if dy else -1.0
                for dz in (0, 1):
                    wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                    sz = 1.0 if dz else -1.0
                    corner = self.m_data[
                        i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    ]
                    value += wx * wy * wz * corner
                    grad_mm[:, 0] += sx * wy * wz * corner
                    grad_mm[:, 1] += wx * sy * wz * corner
                    grad_mm[:, 2] += wx * wy * sz * corner
        grad_mm /= self.m_spacing
        um_raw = _PARZEN_PAD + (value - self.m_min) * self.m_scale
        lo, hi = float(_PARZEN_PAD), float(bins - 1 - _PARZEN_PAD)
        um = np.clip(um_raw, lo, hi)
        interior = (um_raw > lo) & (um_raw < hi)
        k0 = np.floor(um).astype(np.intp)
        kmat = k0[:, None] + np.array([-1, 0, 1, 2])
        du = um[:, None] - kmat
        weights = _bspline3(du)
        f_v = self.f_idx[valid]
        joint = np.zeros((bins, bins))
        np.add.at(joint, (np.repeat(f_v, 4), kmat.ravel()), weights.ravel())
        joint /= nv
        pf = joint.sum(axis=1)
        pm = joint.sum(axis=0)
        log_pf = np.log(np.where(pf > 0.0, pf, 1.0))
        log_pm = np.log(np.where(pm > 0.0, pm, 1.0))
        nz = joint > 0.0
        log_ratio = np.zeros_like(joint)
        log_ratio[nz] = np.log(joint[nz]) - log_pm[np.nonzero(nz)[1]]
        mi = float(
            (joint[nz] * (log_ratio[nz] - log_pf[np.nonzero(nz)[0]])).sum()
        )
        dweights = _bspline3_deriv(du)
        w_s = (dweights * log_ratio[f_v[:, None], kmat]).sum(axis=1)
        w_s *= self.m_scale / nv
        w_s[~interior] = 0.0
        dy = grad_mm * w_s[:, None]
        grad_t = dy.sum(axis=0)
        grad_lin = dy.T @ self.xc[valid]
        return mi, grad_lin, grad_t


def _gated_ascent(problem: _MetricSamples, lin, t_c, step0, cfg):
    """Improvement-gated gradient ascent with an adaptive step size.

    Each proposal moves the sample cloud by `step` mm (on average) along
    the preconditioned gradient. Rejected proposals decay the step;
    accepted ones regrow it toward the level's initial value, so the
    schedule spends its iterations at whatever scale is productive.
    """
    mi, g_lin, g_t = problem.evaluate(lin, t_c)
    if not np.isfinite(mi):
        raise ValueError("optimizer diverged: non-finite similarity metric")
    step = step0
    floor = 1e-4 * step0
    for _ in range(cfg.iterations_per_level):
        if step < floor:
            break
        d_lin = g_lin / problem.r2
        d_t = g_t
        disp = problem.xc @ d_lin.T + d_t
        scale = float(np.mean(np.linalg.norm(disp, axis=1)))
        if not np.isfinite(scale) or scale <= 0.0:
            break
        cand_lin = lin + (step / scale) * d_lin
        cand_t = t_c + (step / scale) * d_t
        if abs(np.linalg.det(cand_lin)) < 1e-9:
            step *= cfg.step_decay
            continue
        cand_mi, cand_g_lin, cand_g_t = problem.evaluate(cand_lin, cand_t)
        if np.isfinite(cand_mi) and cand_mi > mi:
            lin, t_c = cand_lin, cand_t
            mi, g_lin, g_t = cand_mi, cand_g_lin, cand_g_t
            step = min(2.0 * step, step0)
        else:
            step *= cfg.step_decay
    return lin, t_c, mi


def _quasi_newton(problem: _MetricSamples, lin, t_c, cfg):
    """L-BFGS ascent of the metric from one starting transform.

    Parameters are packed as [linear * s, translation] with s the RMS
    radius of the centered sample cloud, so a unit change in either block
    moves the samples by about the same distance and the ascent is well
    scaled without an explicit preconditioner.
    """
    s = math.sqrt(problem.r2)

    def objective(p):
        p_lin = p[:9].reshape(3, 3) / s
        mi, g_lin, g_t = problem.evaluate(p_lin, p[9:])
        if not np.isfinite(mi) or g_lin is None:
            # Out of overlap: a large value with zero gradient makes the
            # line search back off instead of crashing.
            return 1e10, np.zeros(12)
        return -mi, -np.concatenate([g_lin.ravel() / s, g_t])

    p0 = np.concatenate([lin.ravel() * s, t_c])
    res = optimize.minimize(
        objective,
        p0,
        method="L-BFGS-B",
        jac=True,
        options={"maxiter": cfg.iterations_per_level},
    )
    best_lin = res.x[:9].reshape(3, 3) / s
    if abs(np.linalg.det(best_lin)) < 1e-9 or not np.isfinite(res.fun):
        return lin, t_c, problem.evaluate(lin, t_c)[0]
    return best_lin, res.x[9:], -float(res.fun)


_ROTATION_GRID_DEG = (-8.0, -4.0, 0.0, 4.0, 8.0)
_ROTATION_STARTS_KEPT = 3


def _dedup_candidates(problem: _MetricSamples, refined, tol_mm: float):
    """Drop candidates that moved to the same optimum, best metric first.

    Two candidates are the same when they displace the sample cloud by
    less than `tol_mm` RMS relative to each other.
    """
    kept = []
    for lin, t_c, mi in sorted(refined, key=lambda s: s[2], reverse=True):
        dup = False
        for k_lin, k_t, _ in kept:
            disp = problem.xc @ (lin - k_lin).T + (t_c - k_t)
            if float(np.sqrt(np.mean(np.sum(disp**2, axis=1)))) < tol_mm:
                dup = True
                break
        if not dup:
            kept.append((lin, t_c, mi))
    return kept


def _axis_rotation(axis: int, degrees: float) -> np.ndarray:
    rad = math.radians(degrees)
    c, s = math.cos(rad), math.sin(rad)
    rot = np.eye(3)
    a, b = [i for i in range(3) if i != axis]
    rot[a, a] = c
    rot[b, b] = c
    rot[a, b] = -s
    rot[b, a] = s
    return rot


def _best_rotation_starts(problem: _MetricSamples, lin, t_c):
    """Rank a grid of candidate rotations composed onto the start.

    The metric's basin of attraction is only a few degrees wide, so a
    single start can miss rotations well inside the supported range.
    Candidates rotate about the sample centroid (the centered frame makes
    that free of induced translation) and are scored by the metric; the
    best few are returned for refinement.
    """
    scored = []
    for ax, ay, az in itertools.product(_ROTATION_GRID_DEG, repeat=3):
        rot = (
            _axis_rotation(0, ax) @ _axis_rotation(1, ay) @ _axis_rotation(2, az)
        )
        cand = rot @ lin
        mi, _, _ = problem.evaluate(cand, t_c)
        if np.isfinite(mi):
            scored.append((mi, cand))
    scored.sort(key=lambda pair: pair[0], reverse=True)
    starts = [cand for _, cand in scored[:_ROTATION_STARTS_KEPT]]
    return starts or [lin]


def _check_nondegenerate(vol: Volume, name: str) -> None:
    if float(vol.data.max()) <= float(vol.data.min()):
        raise ValueError(f"degenerate {name} image: constant intensity")


def register(
    moving: Volume,
    fixed: Volume,
    cfg: RegistrationConfig | None = None,
    failure_threshold: float = FAILURE_THRESHOLD_HU,
) -> RegistrationReport:
    """Estimate the affine aligning `moving` to `fixed`.

    Starts from a center-of-mass pre-alignment; the coarsest pyramid
    level then seeds a grid of candidate rotations whose best few are
    refined by quasi-Newton ascent at every level. The winner by the
    finest level's metric gets a final gated ascent on the configured
    step schedule, capped below the voxel scale. Deterministic for a
    given `cfg.rng_seed`. The report's transform maps fixed-space mm to
    moving-space mm; its `failed` flag is the strict MAE rule applied to
    the moving image resampled onto the fixed grid.
    """
    cfg = cfg or RegistrationConfig()
    _check_nondegenerate(fixed, "fixed")
    _check_nondegenerate(moving, "moving")
    rng = np.random.default_rng(cfg.rng_seed)

    levels = [(fixed.data, fixed.grid, moving.data, moving.grid)]
    while len(levels) < cfg.pyramid_levels:
        f_data, f_grid, m_data, m_grid = levels[-1]
        if min(f_grid.dims) < 2 * _MIN_LEVEL_DIM or min(m_grid.dims) < 2 * _MIN_LEVEL_DIM:
            break
        levels.append(
            _downsample_level(f_data, f_grid) + _downsample_level(m_data, m_grid)
        )

    com_fixed = _positive_com_mm(fixed.data, fixed.grid)
    com_moving = _positive_com_mm(moving.data, moving.grid)
    center = None
    states: list[tuple[np.ndarray, np.ndarray]] = []
    mi = math.nan
    for depth in range(len(levels) - 1, -1, -1):
        f_data, f_grid, m_data, m_grid = levels[depth]
        problem = _MetricSamples(f_data, f_grid, m_data, m_grid, cfg, rng)
        if center is None:
            center = problem.center
            t_c = center + (com_moving - com_fixed)
            starts = _best_rotation_starts(problem, np.eye(3), t_c)
            starts.append(np.eye(3))
            states = [(start, t_c) for start in starts]
        else:
            # Re-express each candidate around the new sample centroid.
            states = [
                (lin, t_c + lin @ (problem.center - center)) for lin, t_c in states
            ]
            center = problem.center
        # Every candidate is refined at every level; the winner is picked
        # by the finest level's metric, because coarse levels of a small
        # volume are too degraded to rank nearby candidates reliably.
        refined = [_quasi_newton(problem, lin, t_c, cfg) for lin, t_c in states]
        refined = _dedup_candidates(
            problem, refined, 0.25 * float(np.min(problem.m_spacing))
        )
        states = [(lin, t_c) for lin, t_c, _ in refined]
    lin, t_c, mi = refined[0]
    # Final gated ascent on the configured step schedule, capped below the
    # voxel scale: the sampled metric has spurious maxima at offsets near
    # the cortical-shell thickness, so large polishing steps can leave the
    # true optimum, while sub-voxel steps are bounded-safe.
    step0 = min(cfg.step_initial_mm, 0.25 * float(np.min(problem.m_spacing)))
    lin, t_c, mi = _gated_ascent(problem, lin, t_c, step0, cfg)

    transform = AffineTransform(lin, t_c - lin @ center)
    registered = resample(moving, transform, fixed.grid)
    failed, mae = detect_failure(fixed, registered, failure_threshold)
    return RegistrationReport(
        transform=transform, final_metric=-mi, mae_hu=mae, failed=failed
    )


def evaluate_transform(
    moving: Volume,
    fixed: Volume,
    transform: AffineTransform,
    cfg: RegistrationConfig | None = None,
    failure_threshold: float = FAILURE_THRESHOLD_HU,
) -> RegistrationReport:
    """Report metric and failure check for a fixed, not-optimized transform."""
    cfg = cfg or RegistrationConfig()
    _check_nondegenerate(fixed, "fixed")
    _check_nondegenerate(moving, "moving")
    rng = np.random.default_rng(cfg.rng_seed)
    problem = _MetricSamples(
        fixed.data, fixed.grid, moving.data, moving.grid, cfg, rng
    )
    t_c = transform.translation + transform.linear @ problem.center
    mi, _, _ = problem.evaluate(transform.linear, t_c)
    registered = resample(moving, transform, fixed.grid)
    failed, mae = detect_failure(fixed, registered, failure_threshold)
    return RegistrationReport(
        transform=transform, final_metric=-mi, mae_hu=mae, failed=failed
    )


@dataclass(frozen=True)
class ReferenceSpace:
    """Reference-scan configuration shared by a whole preprocessing run."""

    grid: Grid3
    failure_threshold_hu: float = FAILURE_THRESHOLD_HU
    reference_path: str | None = None
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)


def reference_space_to_json(ref: ReferenceSpace) -> str:
    payload = {
        "grid": {
            "dims": list(ref.grid.dims),
            "spacing": list(ref.grid.spacing),
            "origin": list(ref.grid.origin),
        },
        "crop_z_mm": [
            ref.grid.origin[2],
            ref.grid.origin[2] + ref.grid.spacing[2] * (ref.grid.dims[2] - 1),
        ],
        "failure_threshold_hu": ref.failure_threshold_hu,
        "reference": ref.reference_path,
        "registration": {
            "pyramid_levels": ref.registration.pyramid_levels,
            "iterations_per_level": ref.registration.iterations_per_level,
            "histogram_bins": ref.registration.histogram_bins,
            "sample_fraction": ref.registration.sample_fraction,
            "rng_seed": ref.registration.rng_seed,
            "step_initial_mm": ref.registration.step_initial_mm,
            "step_decay": ref.registration.step_decay,
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def reference_space_from_json(text: str) -> ReferenceSpace:
    obj = json.loads(text)
    gspec = obj.get("grid", {})
    dims = tuple(gspec.get("dims", CANONICAL_DIMS))
    spacing = tuple(gspec.get("spacing", CANONICAL_SPACING))
    origin = list(gspec.get("origin", (0.0, 0.0, 0.0)))
    if "crop_z_mm" in obj and "origin" not in gspec:
        origin[2] = float(obj["crop_z_mm"][0])
    grid = Grid3(dims, spacing, tuple(origin))
    reg = RegistrationConfig(**obj.get("registration", {}))
    return ReferenceSpace(
        grid=grid,
        failure_threshold_hu=float(
            obj.get("failure_threshold_hu", FAILURE_THRESHOLD_HU)
        ),
        reference_path=obj.get("reference"),
        registration=reg,
    )
