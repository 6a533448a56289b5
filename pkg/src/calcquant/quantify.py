"""Ensemble fusion, candidate masking, binarization, and volume measurement.

The quantification path is: average the ensemble's probability maps,
keep voxels whose attenuation is strictly above the calcification
threshold (130 HU; optionally in both an original and a smoothed
volume), binarize at probability strictly above 0.5 within the
candidate mask, and report voxel count times voxel volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import Grid3, Mask, ProbMap, Volume

HU_THRESHOLD = 130.0
PROB_THRESHOLD = 0.5


@dataclass(frozen=True)
class EnsembleOutput:
    """Probability maps from the ensemble members, on one shared grid."""

    maps: tuple[ProbMap, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        maps = tuple(self.maps)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "labels", tuple(self.labels))
        if not maps:
            raise ValueError("ensemble must contain at least one probability map")
        grid = maps[0].grid
        if any(m.grid != grid for m in maps[1:]):
            raise ValueError("ensemble maps live on different grids")
        if self.labels and len(self.labels) != len(maps):
            raise ValueError("labels must match the number of maps")

    @property
    def grid(self) -> Grid3:
        return self.maps[0].grid


@dataclass(frozen=True)
class QuantResult:
    fused: ProbMap
    segmentation: Mask
    volume_mm3: float


def fuse_mean(ens: EnsembleOutput) -> ProbMap:
    """Per-voxel arithmetic mean of the ensemble's probability maps."""
    total = np.zeros(ens.grid.dims, dtype=np.float64)
    for m in ens.maps:
        total += m.data
    mean = total / len(ens.maps)
    return ProbMap(ens.grid, np.clip(mean, 0.0, 1.0))


def candidate_mask(vol: Volume, hu_threshold: float = HU_THRESHOLD) -> Mask:
    """Voxels with attenuation strictly above the threshold."""
    return Mask(vol.grid, vol.data > hu_threshold)


def dual_candidate_mask(
    original: Volume, smoothed: Volume, hu_threshold: float = HU_THRESHOLD
) -> Mask:
    """Voxels above the threshold in BOTH the original and smoothed volumes."""
    if original.grid != smoothed.grid:
        raise ValueError("original and smoothed volumes live on different grids")
    keep = (original.data > hu_threshold) & (smoothed.data > hu_threshold)
    return Mask(original.grid, keep)


def binarize(
    prob: ProbMap, candidates: Mask, threshold: float = PROB_THRESHOLD
) -> Mask:
    """Candidate voxels with probability strictly above the threshold."""
    if prob.grid != candidates.grid:
        raise ValueError("probability map and candidate mask grids differ")
    return Mask(prob.grid, (prob.data > threshold) & candidates.bool_data)


def measure_volume(seg: Mask) -> float:
    """Segmented volume in mm³: voxel count times voxel volume."""
    return float(seg.data.sum(dtype=np.int64)) * seg.grid.voxel_volume_mm3


def quantify_scan(
    ens: EnsembleOutput,
    hu: Volume,
    smoothed: Volume | None = None,
    prob_threshold: float = PROB_THRESHOLD,
    hu_threshold: float = HU_THRESHOLD,
) -> QuantResult:
    """Full quantification: fuse, mask candidates, binarize, measure."""
    if hu.grid != ens.grid:
        raise ValueError("HU volume grid differs from ensemble grid")
    fused = fuse_mean(ens)
    if smoothed is None:
        cand = candidate_mask(hu, hu_threshold)
    else:
        cand = dual_candidate_mask(hu, smoothed, hu_threshold)
    seg = binarize(fused, cand, prob_threshold)
    return QuantResult(fused=fused, segmentation=seg, volume_mm3=measure_volume(seg))
