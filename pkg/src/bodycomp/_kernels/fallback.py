"""Pure-numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_native.pyx``. The two must
agree bit-for-bit, so expressions (including association order) are written
exactly as the compiled loops evaluate them. Keep both files in sync.
"""

import numpy as np

BACKEND_NAME = "fallback"

# structure labels shared by both backends
LBL_BACKGROUND = 0
LBL_TORSO = 1
LBL_SUBQ = 2
LBL_VAT = 3
LBL_LIVER = 4
LBL_THIGH_LEFT = 5
LBL_THIGH_RIGHT = 6


def label_voxels(nz, ny, nx, spacing,
                 torso_c, torso_ax3, shell_t,
                 liver_c, liver_ax3, blobs,
                 thigh_y, thigh_xl, thigh_xr, thigh_rl, thigh_rr,
                 thigh_z0, thigh_z1):
    """Assign one structure label per voxel from analytic inside-tests.

    Voxel centers sit at (i + 0.5) * spacing. ``blobs`` is an (n, 4) float64
    array of (cz, cy, cx, r). Returns a uint8 volume of shape (nz, ny, nx).
    """
    z = (np.arange(nz, dtype=np.float64) + 0.5) * spacing
    y = (np.arange(ny, dtype=np.float64) + 0.5) * spacing
    x = (np.arange(nx, dtype=np.float64) + 0.5) * spacing
    Z = z[:, None, None]
    Y = y[None, :, None]
    X = x[None, None, :]

    cz, cy, cx = torso_c
    az, ay, ax = torso_ax3
    lz, ly, lx = liver_c
    laz, lay, lax = liver_ax3

    outer = (((Z - cz) / (az + shell_t)) ** 2
             + ((Y - cy) / (ay + shell_t)) ** 2
             + ((X - cx) / (ax + shell_t)) ** 2) <= 1.0
    inner = (((Z - cz) / az) ** 2
             + ((Y - cy) / ay) ** 2
             + ((X - cx) / ax) ** 2) <= 1.0
    liver = (((Z - lz) / laz) ** 2
             + ((Y - ly) / lay) ** 2
             + ((X - lx) / lax) ** 2) <= 1.0

    vat = np.zeros((nz, ny, nx), dtype=bool)
    for b in range(blobs.shape[0]):
        bz, by, bx, br = blobs[b]
        vat |= ((Z - bz) ** 2 + (Y - by) ** 2 + (X - bx) ** 2) <= br * br

    in_thigh_z = (Z >= thigh_z0) & (Z < thigh_z1)
    d_left = (Y - thigh_y) ** 2 + (X - thigh_xl) ** 2
    d_right = (Y - thigh_y) ** 2 + (X - thigh_xr) ** 2
    left = in_thigh_z & (d_left <= thigh_rl * thigh_rl)
    right = in_thigh_z & (d_right <= thigh_rr * thigh_rr)

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    # priority mirrors the compiled branch order: structures are disjoint by
    # construction, the order only settles boundary voxels
    labels[outer & ~inner] = LBL_SUBQ
    labels[outer & inner] = LBL_TORSO
    labels[outer & inner & vat] = LBL_VAT
    labels[outer & inner & liver] = LBL_LIVER
    labels[~outer & left] = LBL_THIGH_LEFT
    labels[~outer & ~left & right] = LBL_THIGH_RIGHT
    return labels


def mip_mean(data, axis):
    """Mean-intensity projection with sequential float64 accumulation.

    ``axis`` is 1 (project over y) or 2 (project over x). The explicit loop
    fixes the summation order so a brute-force oracle matches exactly.
    """
    nz, ny, nx = data.shape
    if axis == 1:
        acc = np.zeros((nz, nx), dtype=np.float64)
        for j in range(ny):
            acc += data[:, j, :]
        return acc / ny
    if axis == 2:
        acc = np.zeros((nz, ny), dtype=np.float64)
        for k in range(nx):
            acc += data[:, :, k]
        return acc / nx
    raise ValueError(f"axis must be 1 or 2, got {axis}")


def resize_bilinear(src, out_h, out_w):
    """Corner-aligned bilinear resize of a float64 2D map.

    Source coordinate of output pixel (r, c):
        sy = r * (H - 1) / (out_h - 1),  sx = c * (W - 1) / (out_w - 1)
    (0 when the output axis has a single pixel), then
        out = (1-fy) * ((1-fx) * v00 + fx * v01) + fy * ((1-fx) * v10 + fx * v11)
    with v at floor/ceil neighbors clamped to the source extent.
    """
    h, w = src.shape
    sy_scale = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    sx_scale = (w - 1) / (out_w - 1) if out_w > 1 else 0.0

    sy = np.arange(out_h, dtype=np.float64) * sy_scale
    sx = np.arange(out_w, dtype=np.float64) * sx_scale
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = sy - y0
    fx = sx - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    v00 = src[np.ix_(y0, x0)]
    v01 = src[np.ix_(y0, x1)]
    v10 = src[np.ix_(y1, x0)]
    v11 = src[np.ix_(y1, x1)]
    fy = fy[:, None]
    fx = fx[None, :]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bot


def quantize_u8(src, v_max):
    """255 * clamp(x / v_max, 0, 1), rounded half away from zero, as uint8."""
    t = src / v_max
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    return np.floor(255.0 * t + 0.5).astype(np.uint8)
