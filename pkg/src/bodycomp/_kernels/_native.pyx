# cython: boundscheck=False, wraparound=False, cdivision=False
"""Compiled twins of the kernels in ``fallback.py``.

Expressions mirror the numpy fallback exactly (same operations, same
association order, no reciprocal tricks) so both backends produce
bit-identical outputs. The extension is built with -ffp-contract=off.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "native"

LBL_BACKGROUND = 0
LBL_TORSO = 1
LBL_SUBQ = 2
LBL_VAT = 3
LBL_LIVER = 4
LBL_THIGH_LEFT = 5
LBL_THIGH_RIGHT = 6


def label_voxels(Py_ssize_t nz, Py_ssize_t ny, Py_ssize_t nx, double spacing,
                 torso_c, torso_ax3, double shell_t,
                 liver_c, liver_ax3, blobs,
                 double thigh_y, double thigh_xl, double thigh_xr,
                 double thigh_rl, double thigh_rr,
                 double thigh_z0, double thigh_z1):
    cdef double cz = torso_c[0], cy = torso_c[1], cx = torso_c[2]
    cdef double az = torso_ax3[0], ay = torso_ax3[1], ax = torso_ax3[2]
    cdef double lz = liver_c[0], ly = liver_c[1], lx = liver_c[2]
    cdef double laz = liver_ax3[0], lay = liver_ax3[1], lax = liver_ax3[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bl = np.ascontiguousarray(blobs, dtype=np.float64)
    cdef Py_ssize_t nb = bl.shape[0]

    out_arr = np.zeros((nz, ny, nx), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr

    cdef double oaz = az + shell_t, oay = ay + shell_t, oax = ax + shell_t
    cdef Py_ssize_t i, j, k, b
    cdef double z, y, x, tz, ty, tx, d
    cdef bint in_z
    cdef unsigned char lab

    for i in range(nz):
        z = (<double>i + 0.5) * spacing
        in_z = (z >= thigh_z0) and (z < thigh_z1)
        for j in range(ny):
            y = (<double>j + 0.5) * spacing
            for k in range(nx):
                x = (<double>k + 0.5) * spacing
                tz = (z - cz) / oaz
                ty = (y - cy) / oay
                tx = (x - cx) / oax
                d = tz * tz + ty * ty + tx * tx
                if d <= 1.0:
                    tz = (z - cz) / az
                    ty = (y - cy) / ay
                    tx = (x - cx) / ax
                    d = tz * tz + ty * ty + tx * tx
                    if d <= 1.0:
                        tz = (z - lz) / laz
                        ty = (y - ly) / lay
                        tx = (x - lx) / lax
                        d = tz * tz + ty * ty + tx * tx
                        if d <= 1.0:
                            lab = LBL_LIVER
                        else:
                            lab = LBL_TORSO
                            for b in range(nb):
                                d = (z - bl[b, 0]) * (z - bl[b, 0]) \
                                    + (y - bl[b, 1]) * (y - bl[b, 1]) \
                                    + (x - bl[b, 2]) * (x - bl[b, 2])
                                if d <= bl[b, 3] * bl[b, 3]:
                                    lab = LBL_VAT
                                    break
                    else:
                        lab = LBL_SUBQ
                    out[i, j, k] = lab
                elif in_z:
                    d = (y - thigh_y) * (y - thigh_y) + (x - thigh_xl) * (x - thigh_xl)
                    if d <= thigh_rl * thigh_rl:
                        out[i, j, k] = LBL_THIGH_LEFT
                    else:
                        d = (y - thigh_y) * (y - thigh_y) + (x - thigh_xr) * (x - thigh_xr)
                        if d <= thigh_rr * thigh_rr:
                            out[i, j, k] = LBL_THIGH_RIGHT
    return out_arr


def mip_mean(data, int axis):
    cdef cnp.ndarray[cnp.float32_t, ndim=3] v = np.ascontiguousarray(data, dtype=np.float32)
    cdef Py_ssize_t nz = v.shape[0], ny = v.shape[1], nx = v.shape[2]
    cdef Py_ssize_t i, j, k
    cdef double s
    cdef double[:, ::1] acc
    if axis == 1:
        out_arr = np.zeros((nz, nx), dtype=np.float64)
        acc = out_arr
        for i in range(nz):
            for k in range(nx):
                s = 0.0
                for j in range(ny):
                    s += <double>v[i, j, k]
                acc[i, k] = s / ny
        return out_arr
    if axis == 2:
        out_arr = np.zeros((nz, ny), dtype=np.float64)
        acc = out_arr
        for i in range(nz):
            for j in range(ny):
                s = 0.0
                for k in range(nx):
                    s += <double>v[i, j, k]
                acc[i, j] = s / nx
        return out_arr
    raise ValueError(f"axis must be 1 or 2, got {axis}")


def resize_bilinear(src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    cdef double sy_scale = (<double>(h - 1)) / (out_h - 1) if out_h > 1 else 0.0
    cdef double sx_scale = (<double>(w - 1)) / (out_w - 1) if out_w > 1 else 0.0

    out_arr = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, y0, x0, y1, x1
    cdef double sy, sx, fy, fx, top, bot

    for r in range(out_h):
        sy = r * sy_scale
        y0 = <Py_ssize_t>sy
        fy = sy - y0
        y1 = y0 + 1
        if y1 > h - 1:
            y1 = h - 1
        for c in range(out_w):
            sx = c * sx_scale
            x0 = <Py_ssize_t>sx
            fx = sx - x0
            x1 = x0 + 1
            if x1 > w - 1:
                x1 = w - 1
            top = (1.0 - fx) * s[y0, x0] + fx * s[y0, x1]
            bot = (1.0 - fx) * s[y1, x0] + fx * s[y1, x1]
            out[r, c] = (1.0 - fy) * top + fy * bot
    return out_arr


def quantize_u8(src, double v_max):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    out_arr = np.empty((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double t
    for i in range(h):
        for j in range(w):
            t = s[i, j] / v_max
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            out[i, j] = <unsigned char>(255.0 * t + 0.5)
    return out_arr
