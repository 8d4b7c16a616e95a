"""Parametric body phantoms with analytically known regression targets.

A phantom is a torso ellipsoid wrapped in a subcutaneous fat shell, with a
liver ellipsoid and visceral fat blobs inside and two thigh cylinders below.
Water/fat/fat-fraction volumes are rendered from per-voxel inside-tests at
voxel centers, so every structure volume has a closed form and the voxel
count is an independent brute-force check.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .volume_io import KIND_RANGE, Volume

TARGET_NAMES = (
    "vat_ml",
    "subq_ml",
    "liver_fat_pct",
    "thigh_left_ml",
    "thigh_right_ml",
    "lean_ml",
    "stature_mm",
)

# the six body-composition targets used by the n-of-6 acceptance checks
BODY_COMP_TARGETS = TARGET_NAMES[:6]

NOISE_MODES = ("none", "homoscedastic", "heteroscedastic", "outlier")

MAX_REJECTION_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    """Raised when rejection sampling cannot satisfy a geometric constraint."""


class GeometryError(ValueError):
    """Raised when a phantom does not fit strictly inside its grid."""


@dataclass(frozen=True)
class GridSpec:
    shape: tuple = (128, 96, 96)
    spacing_mm: float = 3.0

    @property
    def extent_mm(self):
        return tuple(n * self.spacing_mm for n in self.shape)

    @property
    def voxel_ml(self) -> float:
        return self.spacing_mm**3 / 1000.0


DEFAULT_GRID = GridSpec()


@dataclass(frozen=True)
class PhantomParams:
    subject_id: str
    torso_semi_axes: tuple  # (az, ay, ax) mm
    subq_shell_thickness: float  # mm
    vat_blob_centers_and_radii: tuple  # ((cz, cy, cx), r) mm
    liver_semi_axes_and_center: tuple  # ((az, ay, ax), (cz, cy, cx)) mm
    liver_fat_fraction: float  # percent in [0, 50]
    thigh_radius_left: float  # mm
    thigh_radius_right: float  # mm
    thigh_length: float  # mm
    atrophy_flag: bool
    rng_seed: int
    thigh_offset_x: float = 46.0  # thigh centers at grid center +- this, mm

    def __post_init__(self):
        if not 0.0 <= self.liver_fat_fraction <= 50.0:
            raise ValueError(
                f"liver_fat_fraction must be in [0, 50], got {self.liver_fat_fraction}"
            )


@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "none"
    sigma: float | dict = 0.0  # per-target scale; scalar broadcasts
    outlier_fraction: float = 0.0
    outlier_multiplier: float = 1.0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must be in [0, 1]")
        sigmas = self.sigma.values() if isinstance(self.sigma, dict) else [self.sigma]
        if any(s < 0 for s in sigmas):
            raise ValueError("sigma must be >= 0")

    def sigma_for(self, target: str) -> float:
        if isinstance(self.sigma, dict):
            return float(self.sigma[target])
        return float(self.sigma)


@dataclass
class TargetVector:
    values: dict  # target name -> value, fixed key order
    provenance: str  # analytic | voxel | noisy_label

    def as_array(self, names=TARGET_NAMES) -> np.ndarray:
        return np.array([self.values[n] for n in names], dtype=np.float64)


@dataclass(frozen=True)
class CohortConfig:
    """Sampling ranges for the phantom cohort (uniform per parameter, mm).

    These ranges are free parameters of the artifact: they guarantee that
    every body fits the default grid with enough margin that a +-16 px
    translation of the composed 256x256 input never clips body pixels, and
    that the conservative containment checks below are satisfiable; they
    claim nothing about anatomy.
    """

    torso_az: tuple = (70.0, 88.0)
    torso_ay: tuple = (56.0, 70.0)
    torso_ax: tuple = (72.0, 92.0)
    shell_thickness: tuple = (8.0, 16.0)
    liver_axes: tuple = (24.0, 32.0)
    liver_offset_z: tuple = (-0.30, -0.12)  # normalized by torso semi-axes
    liver_offset_y: tuple = (-0.08, 0.08)
    liver_offset_x: tuple = (0.08, 0.25)
    liver_fat: tuple = (2.0, 48.0)
    vat_blob_count: tuple = (2, 3)
    vat_radius: tuple = (20.0, 27.0)
    vat_center_rho_cap: float = 0.70  # keeps blobs visually clear of the shell
    thigh_radius: tuple = (20.0, 30.0)
    thigh_length: tuple = (92.0, 116.0)
    thigh_offset_x: tuple = (40.0, 52.0)
    atrophy_rate: float = 0.10
    atrophy_scale: float = 0.6  # radius multiplier for the atrophied thigh
    texture_noise_amplitude: float = 0.05
    top_margin_mm: float = 30.0
    clearance_mm: float = 1.5  # blob-blob / blob-liver separation
    grid: GridSpec = field(default_factory=GridSpec)


DEFAULT_COHORT = CohortConfig()


def _derived_geometry(params: PhantomParams, grid: GridSpec, cohort: CohortConfig = None):
    """Torso/liver/thigh placement in grid coordinates (mm)."""
    margin = (cohort or DEFAULT_COHORT).top_margin_mm
    az, ay, ax = params.torso_semi_axes
    t = params.subq_shell_thickness
    ez, ey, ex = grid.extent_mm
    torso_c = (margin + az + t, ey / 2.0, ex / 2.0)
    thigh_z0 = margin + 2.0 * (az + t)
    thigh_z1 = thigh_z0 + params.thigh_length
    return torso_c, thigh_z0, thigh_z1


def validate_geometry(params: PhantomParams, grid: GridSpec, cohort: CohortConfig = None):
    """Check that every primitive lies strictly inside the grid bounding box."""
    torso_c, thigh_z0, thigh_z1 = _derived_geometry(params, grid, cohort)
    az, ay, ax = params.torso_semi_axes
    t = params.subq_shell_thickness
    ez, ey, ex = grid.extent_mm
    cz, cy, cx = torso_c

    def inside(name, lo_ok, hi_ok):
        if not (lo_ok and hi_ok):
            raise GeometryError(f"{params.subject_id}: {name} clipped by the grid")

    inside("torso shell (z)", cz - (az + t) > 0, cz + (az + t) < ez)
    inside("torso shell (y)", cy - (ay + t) > 0, cy + (ay + t) < ey)
    inside("torso shell (x)", cx - (ax + t) > 0, cx + (ax + t) < ex)
    inside("thighs (z)", thigh_z0 > 0, thigh_z1 < ez)
    half = ey / 2.0
    for side, r, dx in (
        ("left", params.thigh_radius_left, params.thigh_offset_x),
        ("right", params.thigh_radius_right, -params.thigh_offset_x),
    ):
        tx = ex / 2.0 + dx
        inside(f"{side} thigh (x)", tx - r > 0, tx + r < ex)
        inside(f"{side} thigh (y)", half - r > 0, half + r < ey)
    (laz, lay, lax), (lz, ly, lx) = params.liver_semi_axes_and_center
    inside("liver (z)", lz - laz > 0, lz + laz < ez)
    inside("liver (y)", ly - lay > 0, ly + lay < ey)
    inside("liver (x)", lx - lax > 0, lx + lax < ex)
    for (bz, by, bx), r in params.vat_blob_centers_and_radii:
        inside("vat blob (z)", bz - r > 0, bz + r < ez)
        inside("vat blob (y)", by - r > 0, by + r < ey)
        inside("vat blob (x)", bx - r > 0, bx + r < ex)


def _norm_radius(point, center, axes) -> float:
    return math.sqrt(
        ((point[0] - center[0]) / axes[0]) ** 2
        + ((point[1] - center[1]) / axes[1]) ** 2
        + ((point[2] - center[2]) / axes[2]) ** 2
    )


def sample_phantom_params(seed: int, idx: int, cohort: CohortConfig = DEFAULT_COHORT,
                          subject_id: str = None) -> PhantomParams:
    """Draw one subject's phantom parameters, deterministic in (seed, idx, cohort).

    Geometric constraints (liver inside the torso, blobs inside the torso and
    disjoint from the liver and each other) are enforced by rejection
    sampling with conservative bounding-sphere tests; exceeding
    MAX_REJECTION_ATTEMPTS raises GenerationError naming the constraint.
    """
    rng = np.random.default_rng((seed, idx))
    u = rng.uniform
    grid = cohort.grid
    ez, ey, ex = grid.extent_mm

    az = u(*cohort.torso_az)
    ay = u(*cohort.torso_ay)
    ax = u(*cohort.torso_ax)
    shell_t = u(*cohort.shell_thickness)
    torso_axes = (az, ay, ax)
    torso_c = (cohort.top_margin_mm + az + shell_t, ey / 2.0, ex / 2.0)
    a_min = min(torso_axes)

    atrophy = bool(u() < cohort.atrophy_rate)
    if atrophy:
        base = u(*cohort.thigh_radius)
        thigh_rl, thigh_rr = base, cohort.atrophy_scale * base
    else:
        thigh_rl = u(*cohort.thigh_radius)
        thigh_rr = u(*cohort.thigh_radius)
    thigh_len = u(*cohort.thigh_length)
    thigh_dx = u(*cohort.thigh_offset_x)

    liver = None
    for _ in range(MAX_REJECTION_ATTEMPTS):
        laxes = (u(*cohort.liver_axes), u(*cohort.liver_axes), u(*cohort.liver_axes))
        off = (u(*cohort.liver_offset_z), u(*cohort.liver_offset_y), u(*cohort.liver_offset_x))
        lc = tuple(c + o * a for c, o, a in zip(torso_c, off, torso_axes))
        rho = _norm_radius(lc, torso_c, torso_axes)
        if rho <= 1.0 - max(laxes) / a_min - 0.02:
            liver = (laxes, lc)
            break
    if liver is None:
        raise GenerationError("liver containment in torso unsatisfiable after "
                              f"{MAX_REJECTION_ATTEMPTS} attempts")
    laxes, lc = liver
    l_min = min(laxes)

    n_blobs = int(rng.integers(cohort.vat_blob_count[0], cohort.vat_blob_count[1] + 1))
    blobs = []
    clear = cohort.clearance_mm
    for _ in range(n_blobs):
        placed = False
        for attempt in range(MAX_REJECTION_ATTEMPTS):
            lo, hi = cohort.vat_radius
            if attempt >= MAX_REJECTION_ATTEMPTS // 2:
                # crowded corner case: fall back to smaller radii rather than
                # exhausting the attempt budget on unplaceable large blobs
                lo, hi = 0.6 * lo, lo
            r = u(lo, hi)
            rho_max = min(1.0 - r / a_min - 0.01, cohort.vat_center_rho_cap)
            if rho_max <= 0:
                continue
            d = u(-1.0, 1.0, size=3)
            if d @ d > 1.0:
                continue
            c = tuple(tc + di * ai * rho_max for tc, di, ai in zip(torso_c, d, torso_axes))
            # conservative separation from the liver in scaled coordinates
            if l_min * (_norm_radius(c, lc, laxes) - 1.0) < r + clear:
                continue
            if any(
                math.dist(c, bc) < r + br + clear for bc, br in blobs
            ):
                continue
            blobs.append((c, r))
            placed = True
            break
        if not placed:
            raise GenerationError("vat blob placement (inside torso, disjoint from liver "
                                  f"and other blobs) unsatisfiable after {MAX_REJECTION_ATTEMPTS} attempts")

    params = PhantomParams(
        subject_id=subject_id if subject_id is not None else f"ph{idx:06d}",
        torso_semi_axes=torso_axes,
        subq_shell_thickness=shell_t,
        vat_blob_centers_and_radii=tuple(blobs),
        liver_semi_axes_and_center=(laxes, lc),
        liver_fat_fraction=u(*cohort.liver_fat),
        thigh_radius_left=thigh_rl,
        thigh_radius_right=thigh_rr,
        thigh_length=thigh_len,
        atrophy_flag=atrophy,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
        thigh_offset_x=thigh_dx,
    )
    validate_geometry(params, grid, cohort)
    return params


def label_volume(params: PhantomParams, grid: GridSpec = DEFAULT_GRID,
                 cohort: CohortConfig = None) -> np.ndarray:
    """Per-voxel structure labels (uint8) from analytic inside-tests."""
    nz, ny, nx = grid.shape
    if min(grid.shape) < 32:
        raise GeometryError(f"grid shape {grid.shape} too small; every dim must be >= 32")
    validate_geometry(params, grid, cohort)
    torso_c, thigh_z0, thigh_z1 = _derived_geometry(params, grid, cohort)
    laxes, lc = params.liver_semi_axes_and_center
    blobs = np.array(
        [[c[0], c[1], c[2], r] for c, r in params.vat_blob_centers_and_radii],
        dtype=np.float64,
    ).reshape(-1, 4)
    ex = grid.extent_mm[2]
    dx = params.thigh_offset_x
    return _kernels.label_voxels(
        nz, ny, nx, grid.spacing_mm,
        torso_c, params.torso_semi_axes, params.subq_shell_thickness,
        lc, laxes, blobs,
        grid.extent_mm[1] / 2.0, ex / 2.0 + dx, ex / 2.0 - dx,
        params.thigh_radius_left, params.thigh_radius_right,
        thigh_z0, thigh_z1,
    )


# per-label signal values: water, fat, fat-fraction (liver filled per subject)
_WATER_LUT = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0], dtype=np.float32)
_FAT_LUT = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0], dtype=np.float32)
_FF_LUT = np.array([0.0, 0.0, 100.0, 100.0, 0.0, 0.0, 0.0], dtype=np.float32)


def render_volume(params: PhantomParams, grid: GridSpec = DEFAULT_GRID,
                  texture_noise_amplitude: float = 0.05,
                  cohort: CohortConfig = None, labels: np.ndarray = None):
    """Render (water, fat, fat_fraction) volumes for one subject.

    Texture noise is Gaussian with sigma = amplitude/2, hard-clipped to
    +-amplitude (x100 for the fat-fraction volume), then the voxel values are
    clamped to the valid range of each kind. Noise draws depend only on
    params.rng_seed, so rendering is reproducible regardless of scheduling.
    """
    if labels is None:
        labels = label_volume(params, grid, cohort)

    f = params.liver_fat_fraction
    water_lut = _WATER_LUT.copy()
    fat_lut = _FAT_LUT.copy()
    ff_lut = _FF_LUT.copy()
    water_lut[_kernels.LBL_LIVER] = 1.0 - f / 100.0
    fat_lut[_kernels.LBL_LIVER] = f / 100.0
    ff_lut[_kernels.LBL_LIVER] = f

    out = []
    for kind_idx, (kind, lut) in enumerate(
        (("water", water_lut), ("fat", fat_lut), ("fat_fraction", ff_lut))
    ):
        data = lut[labels]
        amp = texture_noise_amplitude * (100.0 if kind == "fat_fraction" else 1.0)
        if amp > 0:
            rng = np.random.default_rng((params.rng_seed, kind_idx))
            noise = rng.normal(0.0, amp / 2.0, size=data.shape)
            np.clip(noise, -amp, amp, out=noise)
            data = data + noise.astype(np.float32)
        lo, hi = KIND_RANGE[kind]
        np.clip(data, lo, hi, out=data)
        out.append(
            Volume(data=data, spacing_mm=(grid.spacing_mm,) * 3, kind=kind,
                   subject_id=params.subject_id)
        )
    return tuple(out)


def _analytic_targets(params: PhantomParams) -> dict:
    az, ay, ax = params.torso_semi_axes
    t = params.subq_shell_thickness
    (laz, lay, lax), _ = params.liver_semi_axes_and_center
    sphere = lambda r: 4.0 / 3.0 * math.pi * r**3
    ell = lambda a, b, c: 4.0 / 3.0 * math.pi * a * b * c

    vat = sum(sphere(r) for _, r in params.vat_blob_centers_and_radii)
    inner = ell(az, ay, ax)
    outer = ell(az + t, ay + t, ax + t)
    liver = ell(laz, lay, lax)
    thigh_l = math.pi * params.thigh_radius_left**2 * params.thigh_length
    thigh_r = math.pi * params.thigh_radius_right**2 * params.thigh_length
    lean = inner - vat - liver + thigh_l + thigh_r
    return {
        "vat_ml": vat / 1000.0,
        "subq_ml": (outer - inner) / 1000.0,
        "liver_fat_pct": params.liver_fat_fraction,
        "thigh_left_ml": thigh_l / 1000.0,
        "thigh_right_ml": thigh_r / 1000.0,
        "lean_ml": lean / 1000.0,
        "stature_mm": 2.0 * (az + t) + params.thigh_length,
    }


def compute_targets(params: PhantomParams, grid: GridSpec = DEFAULT_GRID,
                    mode: str = "analytic", labels: np.ndarray = None,
                    cohort: CohortConfig = None) -> TargetVector:
    """Regression targets: closed-form geometry or brute-force voxel counts."""
    if mode == "analytic":
        return TargetVector(values=_analytic_targets(params), provenance="analytic")
    if mode != "voxel":
        raise ValueError(f"unknown target mode {mode!r}")
    if labels is None:
        labels = label_volume(params, grid, cohort)
    v_ml = grid.voxel_ml
    counts = np.bincount(labels.ravel(), minlength=7)
    body_z = np.flatnonzero(labels.reshape(labels.shape[0], -1).any(axis=1))
    stature = (body_z[-1] - body_z[0] + 1) * grid.spacing_mm if body_z.size else 0.0
    k = _kernels
    return TargetVector(
        values={
            "vat_ml": counts[k.LBL_VAT] * v_ml,
            "subq_ml": counts[k.LBL_SUBQ] * v_ml,
            "liver_fat_pct": params.liver_fat_fraction,
            "thigh_left_ml": counts[k.LBL_THIGH_LEFT] * v_ml,
            "thigh_right_ml": counts[k.LBL_THIGH_RIGHT] * v_ml,
            "lean_ml": (counts[k.LBL_TORSO] + counts[k.LBL_THIGH_LEFT]
                        + counts[k.LBL_THIGH_RIGHT]) * v_ml,
            "stature_mm": stature,
        },
        provenance="voxel",
    )


def station_layout(nz: int, n_stations: int, overlap_vox: int):
    """(z_start, depth) per station tiling [0, nz) with the given overlap."""
    if n_stations < 1:
        raise ValueError("n_stations must be >= 1")
    if overlap_vox < 0:
        raise ValueError("overlap_vox must be >= 0")
    total = nz + (n_stations - 1) * overlap_vox
    base, rem = divmod(total, n_stations)
    depths = [base + (1 if i < rem else 0) for i in range(n_stations)]
    if n_stations > 1 and min(depths) <= overlap_vox:
        raise ValueError(
            f"overlap {overlap_vox} >= station depth {min(depths)} for nz={nz}, "
            f"n_stations={n_stations}"
        )
    layout = []
    start = 0
    for d in depths:
        layout.append((start, d))
        start += d - overlap_vox
    return layout


def split_into_stations(v: Volume, n_stations: int, overlap_vox: int = 0):
    """Tile the z-axis into overlapping stations (copies, no resampling)."""
    stations = []
    for i, (start, d) in enumerate(station_layout(v.data.shape[0], n_stations,
                                                  overlap_vox)):
        stations.append(
            Volume(
                data=v.data[start:start + d].copy(),
                spacing_mm=v.spacing_mm,
                kind=v.kind,
                subject_id=v.subject_id,
                station_index=i,
                z_offset_vox=start,
            )
        )
    return stations


def apply_label_noise(t: TargetVector, spec: NoiseSpec, rng_seed: int) -> TargetVector:
    """Perturb analytic targets into (possibly contaminated) training labels."""
    if t.provenance != "analytic":
        raise ValueError(f"label noise applies to analytic targets, got {t.provenance!r}")
    if spec.mode == "none":
        return TargetVector(values=dict(t.values), provenance=t.provenance)
    rng = np.random.default_rng(rng_seed)
    out = {}
    for name, val in t.values.items():
        sigma = spec.sigma_for(name)
        if spec.mode == "heteroscedastic":
            delta = rng.normal() * (sigma * abs(val))
        else:
            delta = rng.normal() * sigma
            if spec.mode == "outlier" and rng.uniform() < spec.outlier_fraction:
                delta *= spec.outlier_multiplier
        noisy = val + delta
        if name == "liver_fat_pct":
            noisy = min(max(noisy, 0.0), 100.0)
        else:
            noisy = max(noisy, 0.0)
        out[name] = noisy
    return TargetVector(values=out, provenance="noisy_label")
