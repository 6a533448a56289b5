"""Lesion-level analysis of binary calcification masks.

A *lesion* is one maximal 3D connected component of a mask (26- or
6-neighborhood). Each lesion carries its voxel count, physical volume,
and median attenuation; comparing the two segmentation sources yields
false-positive lesions (automated, zero voxels shared with the manual
mask) and false-negative lesions (manual, zero voxels shared with the
automated mask). For population histograms, bin edges are percentiles
*adjusted for volume*: the edge for percentile p is the smallest
attribute value at which the cumulative lesion volume reaches p% of the
total.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import label_components as _label_kernel
from .volgrid import Grid3, Mask, Volume

SOURCES = ("manual", "automated")
ATTRIBUTES = ("volume", "attenuation")


@dataclass(frozen=True)
class LesionRecord:
    """One connected component with its measurements and comparison class."""

    lesion_id: int
    participant_id: str
    source: str
    voxel_count: int
    volume_mm3: float
    median_hu: float
    overlap_voxels: int
    category: str  # overlapping | false_positive | false_negative


@dataclass(frozen=True)
class LesionLabels:
    """Connected-component labeling of one mask."""

    grid: Grid3
    labels: np.ndarray  # int32, (nx, ny, nz); 0 = background, 1..count = lesions
    count: int
    connectivity: int

    def lesion_voxels(self, lesion_id: int) -> tuple[np.ndarray, ...]:
        """Index arrays (ix, iy, iz) of the voxels in one lesion."""
        if not 1 <= lesion_id <= self.count:
            raise ValueError(f"lesion id {lesion_id} not in 1..{self.count}")
        return np.nonzero(self.labels == lesion_id)


def label_lesions(mask: Mask, connectivity: int = 26) -> LesionLabels:
    """Label the connected components of a mask.

    `connectivity` 26 joins voxels sharing a face, edge, or corner; 6
    joins face neighbors only.
    """
    labels, count = _label_kernel(mask.data, connectivity)
    return LesionLabels(mask.grid, labels, count, connectivity)


def summarize_lesion(voxels, hu: Volume) -> tuple[float, float]:
    """Volume (mm³) and median attenuation (HU) of one lesion.

    `voxels` is the tuple of index arrays from :meth:`LesionLabels.lesion_voxels`.
    The median of an even-sized lesion is the mean of the two central values.
    """
    values = hu.data[voxels]
    if values.size == 0:
        raise ValueError("lesion must contain at least one voxel")
    volume = values.size * hu.grid.voxel_volume_mm3
    return volume, float(np.median(values))


def extract_lesions(
    mask: Mask,
    hu: Volume,
    other: Mask | None,
    source: str,
    participant_id: str = "",
    connectivity: int = 26,
) -> list[LesionRecord]:
    """Label `mask`, measure every lesion, and classify it against `other`.

    `source` names which segmentation `mask` came from ('manual' or
    'automated'); `other` is the counterpart mask (None is treated as
    empty, so every lesion classifies as FP or FN). An automated lesion
    sharing zero voxels with the manual mask is a false positive; a
    manual lesion sharing zero voxels with the automated mask is a false
    negative; any shared voxel makes the lesion 'overlapping'.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    if mask.grid != hu.grid:
        raise ValueError("mask and HU volume live on different grids")
    if other is not None and other.grid != mask.grid:
        raise ValueError("the two masks live on different grids")

    labeled = label_lesions(mask, connectivity)
    flat_labels = labeled.labels.ravel()
    fg = flat_labels > 0
    lab = flat_labels[fg]
    hu_flat = hu.data.ravel()[fg]
    other_flat = (
        other.data.ravel()[fg].astype(np.int64)
        if other is not None
        else np.zeros(lab.size, dtype=np.int64)
    )

    counts = np.bincount(lab, minlength=labeled.count + 1)
    overlaps = np.bincount(lab, weights=other_flat, minlength=labeled.count + 1)
    order = np.argsort(lab, kind="stable")
    sorted_hu = hu_flat[order]
    bounds = np.cumsum(counts)

    zero_class = "false_positive" if source == "automated" else "false_negative"
    voxvol = mask.grid.voxel_volume_mm3
    records = []
    for lesion_id in range(1, labeled.count + 1):
        chunk = sorted_hu[bounds[lesion_id - 1] : bounds[lesion_id]]
        n_overlap = int(overlaps[lesion_id])
        records.append(
            LesionRecord(
                lesion_id=lesion_id,
                participant_id=participant_id,
                source=source,
                voxel_count=int(counts[lesion_id]),
                volume_mm3=int(counts[lesion_id]) * voxvol,
                median_hu=float(np.median(chunk)),
                overlap_voxels=n_overlap,
                category="overlapping" if n_overlap > 0 else zero_class,
            )
        )
    return records


def _attribute_values(records, attribute: str) -> np.ndarray:
    if attribute == "volume":
        return np.array([r.volume_mm3 for r in records], dtype=np.float64)
    if attribute == "attenuation":
        return np.array([r.median_hu for r in records], dtype=np.float64)
    raise ValueError(f"attribute must be one of {ATTRIBUTES}, got {attribute!r}")


@dataclass(frozen=True)
class VolumeAdjustedBins:
    """Percentile bin edges where percentiles count lesion volume, not lesions."""

    attribute: str
    percentiles: tuple[float, ...]
    edges: tuple[float, ...]
    table: tuple[LesionRecord, ...] = field(repr=False, default=())


def volume_adjusted_percentiles(
    records, attribute: str, percentiles
) -> VolumeAdjustedBins:
    """Bin edges adjusted for volume, from a (manual) lesion table.

    The edge for percentile p is the smallest attribute value v such
    that the total volume of lesions with attribute ≤ v reaches p% of
    the table's total volume.
    """
    records = list(records)
    if not records:
        raise ValueError("lesion table is empty")
    values = _attribute_values(records, attribute)
    volumes = np.array([r.volume_mm3 for r in records], dtype=np.float64)
    total = volumes.sum()
    if total <= 0:
        raise ValueError("total lesion volume must be positive")

    order = np.argsort(values, kind="stable")
    values, volumes = values[order], volumes[order]
    uniq, start = np.unique(values, return_index=True)
    # cumulative volume of all lesions with attribute <= each unique value
    cum = np.cumsum(volumes)
    cum_at_uniq = cum[np.append(start[1:] - 1, values.size - 1)]

    edges = []
    for p in percentiles:
        if not 0 <= p <= 100:
            raise ValueError(f"percentile {p} outside [0, 100]")
        target = p / 100.0 * total
        idx = int(np.searchsorted(cum_at_uniq, target, side="left"))
        idx = min(idx, uniq.size - 1)
        edges.append(float(uniq[idx]))
    return VolumeAdjustedBins(
        attribute=attribute,
        percentiles=tuple(float(p) for p in percentiles),
        edges=tuple(edges),
        table=tuple(records),
    )


def _bin_index(values: np.ndarray, edges) -> np.ndarray:
    """Cell index per value: i means edges[i-1] < value <= edges[i] (0 means
    value <= edges[0]); values beyond the last edge clamp into the last cell."""
    idx = np.searchsorted(np.asarray(edges), values, side="left")
    return np.minimum(idx, len(edges) - 1)


def hist2d_volume_fraction(
    records, volume_bins: VolumeAdjustedBins, atten_bins: VolumeAdjustedBins
) -> np.ndarray:
    """2D histogram of a lesion subset over volume × attenuation bins.

    Cell value = percentage of the subset's total volume carried by
    lesions whose (volume, median attenuation) fall in the cell; the
    matrix sums to 100. Rows follow `volume_bins`, columns `atten_bins`.
    """
    records = list(records)
    if volume_bins.attribute != "volume" or atten_bins.attribute != "attenuation":
        raise ValueError("bins must be (volume, attenuation) in that order")
    volumes = np.array([r.volume_mm3 for r in records], dtype=np.float64)
    total = volumes.sum() if records else 0.0
    if total <= 0:
        raise ValueError("subset has zero total volume")
    rows = _bin_index(_attribute_values(records, "volume"), volume_bins.edges)
    cols = _bin_index(_attribute_values(records, "attenuation"), atten_bins.edges)
    matrix = np.zeros((len(volume_bins.edges), len(atten_bins.edges)))
    np.add.at(matrix, (rows, cols), volumes)
    return matrix / total * 100.0


CSV_COLUMNS = (
    "participant_id",
    "source",
    "lesion_id",
    "voxel_count",
    "volume_mm3",
    "median_hu",
    "overlap_voxels",
    "class",
)


def write_lesion_table_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.participant_id,
                    r.source,
                    r.lesion_id,
                    r.voxel_count,
                    repr(r.volume_mm3),
                    repr(r.median_hu),
                    r.overlap_voxels,
                    r.category,
                ]
            )


def read_lesion_table_csv(path) -> list[LesionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            records.append(
                LesionRecord(
                    lesion_id=int(row["lesion_id"]),
                    participant_id=row["participant_id"],
                    source=row["source"],
                    voxel_count=int(row["voxel_count"]),
                    volume_mm3=float(row["volume_mm3"]),
                    median_hu=float(row["median_hu"]),
                    overlap_voxels=int(row["overlap_voxels"]),
                    category=row["class"],
                )
            )
    return records


def hist2d_to_json(
    matrix: np.ndarray,
    volume_bins: VolumeAdjustedBins,
    atten_bins: VolumeAdjustedBins,
) -> str:
    payload = {
        "volume_bins": {
            "percentiles": list(volume_bins.percentiles),
            "edges": list(volume_bins.edges),
        },
        "attenuation_bins": {
            "percentiles": list(atten_bins.percentiles),
            "edges": list(atten_bins.edges),
        },
        "matrix_percent": [[float(v) for v in row] for row in matrix],
    }
    return json.dumps(payload, indent=2)
