#!/usr/bin/env python3
"""Compare the compiled kernels against the numpy fallback.

Times each hot kernel on realistic inputs, verifies the two backends agree
bit-for-bit, and reports end-to-end subject rendering throughput.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from bodycomp._kernels import available_backends
from bodycomp.phantom import (
    DEFAULT_GRID,
    _derived_geometry,
    render_volume,
    sample_phantom_params,
)
from bodycomp.projection import compose_input


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def label_args(params, grid):
    torso_c, z0, z1 = _derived_geometry(params, grid)
    laxes, lc = params.liver_semi_axes_and_center
    blobs = np.array([[c[0], c[1], c[2], r]
                      for c, r in params.vat_blob_centers_and_radii]).reshape(-1, 4)
    ey, ex = grid.extent_mm[1], grid.extent_mm[2]
    return (grid.shape[0], grid.shape[1], grid.shape[2], grid.spacing_mm,
            torso_c, params.torso_semi_axes, params.subq_shell_thickness,
            lc, laxes, blobs,
            ey / 2.0, ex / 2.0 + params.thigh_offset_x, ex / 2.0 - params.thigh_offset_x,
            params.thigh_radius_left, params.thigh_radius_right, z0, z1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    backends = available_backends()
    if "native" not in backends:
        print("compiled extension not built; only the fallback is available")

    params = sample_phantom_params(7, 0)
    grid = DEFAULT_GRID
    rng = np.random.default_rng(0)
    vol = rng.random(grid.shape, dtype=np.float32)
    flat_map = rng.random((grid.shape[0], grid.shape[2]))

    cases = {
        "label_voxels (128x96x96)": lambda mod: mod.label_voxels(*label_args(params, grid)),
        "mip_mean coronal": lambda mod: mod.mip_mean(vol, 1),
        "mip_mean sagittal": lambda mod: mod.mip_mean(vol, 2),
        "resize 128x96 -> 256x128": lambda mod: mod.resize_bilinear(flat_map, 256, 128),
        "quantize 256x128": lambda mod: mod.quantize_u8(
            backends["fallback"].resize_bilinear(flat_map, 256, 128), 1.0),
    }

    print(f"{'kernel':28s} {'fallback':>10s} {'native':>10s} {'speedup':>8s}  equal")
    for name, call in cases.items():
        t_fb, out_fb = timeit(lambda: call(backends["fallback"]), args.repeats)
        if "native" in backends:
            t_nat, out_nat = timeit(lambda: call(backends["native"]), args.repeats)
            equal = np.array_equal(out_fb, out_nat)
            print(f"{name:28s} {t_fb*1e3:8.1f}ms {t_nat*1e3:8.1f}ms "
                  f"{t_fb/t_nat:7.1f}x  {equal}")
            if not equal:
                raise SystemExit(f"backend mismatch in {name}")
        else:
            print(f"{name:28s} {t_fb*1e3:8.1f}ms {'-':>10s} {'-':>8s}")

    # end-to-end: render three volumes and compose the network input
    def subject():
        water, fat, ff = render_volume(params, grid)
        return compose_input(water, fat, ff)

    t, _ = timeit(subject, args.repeats)
    print(f"\nend-to-end subject (render + compose, active backend): {t*1e3:.0f} ms "
          f"-> {1.0/t:.1f} subjects/s")


if __name__ == "__main__":
    main()
