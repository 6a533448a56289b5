"""Synthetic head phantom generation for tests and demos.

The phantom is a CT-like volume: an ellipsoidal bony shell around soft
tissue with a smooth low-frequency texture, air outside, and a set of
bright spherical deposits whose voxels, centroids, and volumes are known
by construction. Deposits are painted as exact voxel sets (no partial
volume), so downstream volume measurements have an exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import Grid3, Mask, ProbMap, Volume

AIR_HU = -1024.0
TISSUE_HU = 40.0
SHELL_HU = 700.0
LESION_HU_RANGE = (200.0, 600.0)


@dataclass(frozen=True)
class PhantomLesion:
    """Ground truth for one painted deposit."""

    center_mm: tuple[float, float, float]
    radius_mm: float
    mean_hu: float
    voxel_count: int
    volume_mm3: float


@dataclass(frozen=True)
class HeadPhantom:
    """A synthetic scan plus its exact ground truth."""

    volume: Volume
    truth_mask: Mask
    lesions: tuple[PhantomLesion, ...]

    @property
    def truth_volume_mm3(self) -> float:
        return float(
            np.count_nonzero(self.truth_mask.data)
            * self.volume.grid.voxel_volume_mm3
        )

    def indicator_map(self) -> ProbMap:
        """Probability map that is exactly 1 on deposits and 0 elsewhere."""
        return ProbMap(self.volume.grid, self.truth_mask.data.astype(np.float64))


def _ellipsoid_distance(grid: Grid3, center_mm, radii_mm) -> np.ndarray:
    """Normalized radius field: < 1 inside the ellipsoid, 1 on its surface."""
    coords = [
        (grid.origin[a] + grid.spacing[a] * np.arange(grid.dims[a]) - center_mm[a])
        / radii_mm[a]
        for a in range(3)
    ]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    return np.sqrt(x * x + y * y + z * z)


def make_head_phantom(
    seed: int = 0,
    dims: tuple[int, int, int] = (96, 96, 48),
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5),
    n_lesions: int = 5,
    texture_hu: float = 30.0,
    radii_frac: tuple[float, float, float] = (0.40, 0.33, 0.30),
) -> HeadPhantom:
    """Build a deterministic head-like phantom.

    The shell is two voxels thick (in the smallest spacing), deposits are
    spheres of 0.8-2.0 mm radius placed well inside the tissue, at least
    one shell thickness apart, with HU in ``LESION_HU_RANGE`` so every
    deposit voxel clears a 130 HU threshold by construction. `radii_frac`
    sets the head half-axes as fractions of the field of view; the
    defaults leave air margins so moderate rigid motion keeps the head
    fully inside the volume.
    """
    rng = np.random.default_rng(seed)
    grid = Grid3(dims, spacing)
    extent = [grid.spacing[a] * (grid.dims[a] - 1) for a in range(3)]
    center = [grid.origin[a] + extent[a] / 2.0 for a in range(3)]
    # Unequal in-plane radii: a rotationally symmetric shell would leave
    # axial rotations almost unconstrained for registration.
    radii = [radii_frac[a] * extent[a] for a in range(3)]
    shell = 2.0 * min(spacing)

    r = _ellipsoid_distance(grid, center, radii)
    data = np.full(grid.dims, AIR_HU)
    data[r < 1.0] = SHELL_HU
    inner = [(rad - shell) / rad for rad in radii]
    r_inner = _ellipsoid_distance(
        grid, center, [rad * s for rad, s in zip(radii, inner)]
    )
    tissue = r_inner < 1.0

    # Asymmetric internal anatomy: a dark ventricle-like pocket forward of
    # center and a dense sinus-like knot behind it, so every rotation axis
    # sees high-contrast structure.
    pocket_c = [center[0] + 0.35 * radii[0], center[1] + 0.15 * radii[1], center[2]]
    pocket = _ellipsoid_distance(
        grid, pocket_c, (0.25 * radii[0], 0.2 * radii[1], 0.3 * radii[2])
    )
    knot_c = [center[0] - 0.4 * radii[0], center[1] - 0.1 * radii[1],
              center[2] - 0.25 * radii[2]]
    knot = _ellipsoid_distance(
        grid, knot_c, (0.18 * radii[0], 0.22 * radii[1], 0.2 * radii[2])
    )

    # Smooth low-frequency texture gives the similarity metric structure
    # away from edges; amplitude stays far below any lesion threshold.
    texture = np.zeros(grid.dims)
    axes = [
        grid.origin[a] + grid.spacing[a] * np.arange(grid.dims[a])
        for a in range(3)
    ]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    for _ in range(4):
        freq = rng.uniform(0.05, 0.2, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        texture += np.cos(freq[0] * x + phase[0]) * np.cos(
            freq[1] * y + phase[1]
        ) * np.cos(freq[2] * z + phase[2])
    texture *= texture_hu / 4.0
    data[tissue] = TISSUE_HU + texture[tissue]
    data[(pocket < 1.0) & tissue] = -60.0
    data[(knot < 1.0) & tissue] = 110.0

    mask = np.zeros(grid.dims, dtype=np.uint8)
    lesions = []
    placed: list[np.ndarray] = []
    attempts = 0
    while len(lesions) < n_lesions and attempts < 200 * max(n_lesions, 1):
        attempts += 1
        offset = rng.uniform(-0.55, 0.55, size=3)
        c = np.asarray(center) + offset * np.asarray(radii)
        radius = float(rng.uniform(0.8, 2.0))
        if any(np.linalg.norm(c - p) < radius + 2.0 * shell for p in placed):
            continue
        dist = _ellipsoid_distance(grid, c, (radius, radius, radius))
        inside = (dist < 1.0) & tissue
        count = int(np.count_nonzero(inside))
        if count == 0:
            continue
        hu = float(rng.uniform(*LESION_HU_RANGE))
        data[inside] = hu
        mask[inside] = 1
        placed.append(c)
        lesions.append(
            PhantomLesion(
                center_mm=tuple(float(v) for v in c),
                radius_mm=radius,
                mean_hu=hu,
                voxel_count=count,
                volume_mm3=count * grid.voxel_volume_mm3,
            )
        )

    return HeadPhantom(
        volume=Volume(grid, data),
        truth_mask=Mask(grid, mask),
        lesions=tuple(lesions),
    )
