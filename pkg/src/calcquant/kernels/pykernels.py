"""Pure numpy/scipy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable.
Both backends implement the same contracts and are cross-checked in the
test suite; see ``benchmarks/bench_kernels.py`` for a speed comparison.

All kernels index arrays as ``data[ix, iy, iz]`` and take continuous
voxel coordinates, where coordinate ``i`` is the center of voxel ``i``.
"""

import numpy as np
from scipy import ndimage

BACKEND = "python"


def gather_linear(data, coords, fill):
    """Trilinear interpolation of `data` at continuous voxel coords.

    Points outside the voxel-center hull ``[0, n-1]`` on any axis get
    `fill`. `coords` has shape (N, 3); returns shape (N,) float64.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    upper = np.asarray(data.shape, dtype=np.float64) - 1.0
    inside = np.all((coords >= 0.0) & (coords <= upper), axis=1)
    clipped = np.clip(coords, 0.0, upper)
    values = ndimage.map_coordinates(data, clipped.T, order=1, mode="nearest")
    return np.where(inside, values, float(fill))


def gather_nearest(data, coords, fill):
    """Nearest-voxel lookup with the same out-of-bounds rule as above.

    Half-integer coordinates round up (``floor(u + 0.5)``) on every axis.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    upper = np.asarray(data.shape, dtype=np.float64) - 1.0
    inside = np.all((coords >= 0.0) & (coords <= upper), axis=1)
    idx = np.floor(coords + 0.5).astype(np.intp)
    for axis in range(3):
        np.clip(idx[:, axis], 0, data.shape[axis] - 1, out=idx[:, axis])
    values = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    return np.where(inside, values, float(fill))


def label_components(mask, connectivity):
    """Label 3D connected components of a binary array.

    Returns ``(labels, count)`` where labels is int32, zero on background,
    and components are numbered 1..count. Connectivity 6 joins face
    neighbors only; 26 joins face, edge, and corner neighbors.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask)
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    else:
        structure = np.ones((3, 3, 3), dtype=bool)
    labels, count = ndimage.label(mask != 0, structure=structure)
    return labels.astype(np.int32, copy=False), int(count)
