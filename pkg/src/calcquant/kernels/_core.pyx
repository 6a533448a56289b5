# Compiled versions of the hot kernels. Contracts are identical to
# calcquant.kernels.pykernels; keep the two in sync.

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


@cython.boundscheck(False)
@cython.wraparound(False)
def gather_linear(data, coords, double fill):
    """Trilinear interpolation at continuous voxel coordinates.

    Points outside the voxel-center hull [0, n-1] on any axis get `fill`.
    """
    cdef const double[:, :, :] vol = np.asarray(data, dtype=np.float64)
    cdef const double[:, ::1] pts = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t i, ix, iy, iz, jx, jy, jz
    cdef double ux, uy, uz, fx, fy, fz, gx, gy, gz
    for i in range(n):
        ux = pts[i, 0]
        uy = pts[i, 1]
        uz = pts[i, 2]
        if (ux < 0.0 or ux > nx - 1.0 or
                uy < 0.0 or uy > ny - 1.0 or
                uz < 0.0 or uz > nz - 1.0):
            out[i] = fill
            continue
        ix = <Py_ssize_t> ux
        iy = <Py_ssize_t> uy
        iz = <Py_ssize_t> uz
        if ix > nx - 2:
            ix = nx - 2 if nx > 1 else 0
        if iy > ny - 2:
            iy = ny - 2 if ny > 1 else 0
        if iz > nz - 2:
            iz = nz - 2 if nz > 1 else 0
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        jx = ix + 1 if nx > 1 else ix
        jy = iy + 1 if ny > 1 else iy
        jz = iz + 1 if nz > 1 else iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        out[i] = (gx * (gy * (gz * vol[ix, iy, iz] + fz * vol[ix, iy, jz])
                        + fy * (gz * vol[ix, jy, iz] + fz * vol[ix, jy, jz]))
                  + fx * (gy * (gz * vol[jx, iy, iz] + fz * vol[jx, iy, jz])
                          + fy * (gz * vol[jx, jy, iz] + fz * vol[jx, jy, jz])))
    return out_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def gather_nearest(data, coords, double fill):
    """Nearest-voxel lookup; half-integer coordinates round up."""
    cdef const double[:, :, :] vol = np.asarray(data, dtype=np.float64)
    cdef const double[:, ::1] pts = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t i, ix, iy, iz
    cdef double ux, uy, uz
    for i in range(n):
        ux = pts[i, 0]
        uy = pts[i, 1]
        uz = pts[i, 2]
        if (ux < 0.0 or ux > nx - 1.0 or
                uy < 0.0 or uy > ny - 1.0 or
                uz < 0.0 or uz > nz - 1.0):
            out[i] = fill
            continue
        ix = <Py_ssize_t> (ux + 0.5)
        iy = <Py_ssize_t> (uy + 0.5)
        iz = <Py_ssize_t> (uz + 0.5)
        if ix > nx - 1:
            ix = nx - 1
        if iy > ny - 1:
            iy = ny - 1
        if iz > nz - 1:
            iz = nz - 1
        out[i] = vol[ix, iy, iz]
    return out_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def label_components(mask, int connectivity):
    """Label 3D connected components (depth-first flood fill).

    Returns (labels int32, count); labels are 0 on background and
    1..count on foreground, matching the python backend's partition.
    """
    if connectivity != 6 and connectivity != 26:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask_arr = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] fg = mask_arr
    cdef Py_ssize_t nx = fg.shape[0], ny = fg.shape[1], nz = fg.shape[2]
    labels_arr = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef cnp.int32_t[:, :, ::1] lab = labels_arr

    # Neighbor offset table: 6 face neighbors first, then edges/corners.
    offsets_arr = np.zeros((26, 3), dtype=np.int64)
    cdef Py_ssize_t n_off = 0
    cdef Py_ssize_t dx, dy, dz, man
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                man = (dx != 0) + (dy != 0) + (dz != 0)
                if connectivity == 6 and man != 1:
                    continue
                offsets_arr[n_off, 0] = dx
                offsets_arr[n_off, 1] = dy
                offsets_arr[n_off, 2] = dz
                n_off += 1
    cdef cnp.int64_t[:, ::1] off = offsets_arr

    stack_arr = np.empty(nx * ny * nz, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    cdef Py_ssize_t top, current
    cdef Py_ssize_t ix, iy, iz, cx, cy, cz, qx, qy, qz, k
    cdef cnp.int32_t next_label = 0

    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                if fg[ix, iy, iz] == 0 or lab[ix, iy, iz] != 0:
                    continue
                next_label += 1
                lab[ix, iy, iz] = next_label
                stack[0] = (ix * ny + iy) * nz + iz
                top = 1
                while top > 0:
                    top -= 1
                    current = stack[top]
                    cz = current % nz
                    cy = (current // nz) % ny
                    cx = current // (ny * nz)
                    for k in range(n_off):
                        qx = cx + off[k, 0]
                        qy = cy + off[k, 1]
                        qz = cz + off[k, 2]
                        if qx < 0 or qx >= nx or qy < 0 or qy >= ny or qz < 0 or qz >= nz:
                            continue
                        if fg[qx, qy, qz] != 0 and lab[qx, qy, qz] == 0:
                            lab[qx, qy, qz] = next_label
                            stack[top] = (qx * ny + qy) * nz + qz
                            top += 1
    return labels_arr, int(next_label)
