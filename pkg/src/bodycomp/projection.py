"""Station fusion, mean-intensity projection, and 8-bit input composition.

The network input is a 256x256 image whose channels are (water MIP, fat MIP
[, fat fraction]); each channel holds the coronal view on the left half and
the sagittal view on the right half, resized with corner-aligned bilinear
interpolation and quantized against a fixed per-channel scale.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .volume_io import Volume

PROJECTION_AXES = {"coronal": 1, "sagittal": 2}

LAYOUT = "coronal_sagittal_side_by_side"


@dataclass(frozen=True)
class ProjectionConfig:
    out_size: int = 256
    v_max_water: float = 1.0
    v_max_fat: float = 1.0
    v_max_ff: float = 100.0

    @property
    def half_width(self) -> int:
        return self.out_size // 2


DEFAULT_PROJECTION = ProjectionConfig()

CHANNEL_NAMES = ("water_mip", "fat_mip", "fat_fraction")


@dataclass
class ProjectionImage:
    pixels: np.ndarray  # uint8, (out_size, out_size, C)
    channel_semantics: tuple
    subject_id: str
    layout: str = LAYOUT

    def __post_init__(self):
        h, w, c = self.pixels.shape
        if h != w or c not in (2, 3):
            raise ValueError(f"projection image must be square with 2 or 3 channels, "
                             f"got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("projection image must be uint8")
        if tuple(self.channel_semantics) != CHANNEL_NAMES[:c]:
            raise ValueError(f"channel semantics must be {CHANNEL_NAMES[:c]}, "
                             f"got {self.channel_semantics}")


def fuse_stations(stations) -> Volume:
    """Reassemble stations into one volume, averaging overlap voxels.

    Stations must share spacing, (y, x) extent, kind, and subject, carry
    consecutive station_index values, and know their z placement
    (split_into_stations sets it; loaders reconstruct it from the dataset
    manifest).
    """
    if not stations:
        raise ValueError("no stations to fuse")
    ref = stations[0]
    for s in stations:
        if s.station_index is None:
            raise ValueError(f"{s.subject_id}: station without station_index")
        if s.z_offset_vox is None:
            raise ValueError(f"{s.subject_id}: station {s.station_index} has no z offset; "
                             "was it loaded without the dataset manifest?")
        if s.spacing_mm != ref.spacing_mm:
            raise ValueError("stations disagree on voxel spacing")
        if s.data.shape[1:] != ref.data.shape[1:]:
            raise ValueError("stations disagree on (y, x) extent")
        if s.kind != ref.kind or s.subject_id != ref.subject_id:
            raise ValueError("stations mix kinds or subjects")
    order = sorted(stations, key=lambda s: s.station_index)
    if [s.station_index for s in order] != list(range(len(order))):
        raise ValueError("station_index values must be consecutive from 0")

    nz = max(s.z_offset_vox + s.data.shape[0] for s in order)
    acc = np.zeros((nz,) + ref.data.shape[1:], dtype=np.float32)
    cnt = np.zeros((nz, 1, 1), dtype=np.float32)
    for s in order:
        z0 = s.z_offset_vox
        acc[z0:z0 + s.data.shape[0]] += s.data
        cnt[z0:z0 + s.data.shape[0]] += 1.0
    if (cnt == 0).any():
        raise ValueError(f"{ref.subject_id}: stations leave a z gap")
    acc /= cnt
    return Volume(data=acc, spacing_mm=ref.spacing_mm, kind=ref.kind,
                  subject_id=ref.subject_id, station_index=None)


def mean_intensity_projection(v: Volume, axis: str) -> np.ndarray:
    """Arithmetic mean of all slices along the named axis.

    ``coronal`` averages over y giving a (z, x) map; ``sagittal`` averages
    over x giving (z, y). Accumulation is sequential in float64 so a
    brute-force loop reproduces the output exactly.
    """
    if axis not in PROJECTION_AXES:
        raise ValueError(f"axis must be one of {tuple(PROJECTION_AXES)}, got {axis!r}")
    ax = PROJECTION_AXES[axis]
    if v.data.shape[ax] < 1:
        raise ValueError("volume has no slices along the projection axis")
    return _kernels.mip_mean(v.data, ax)


def resize_bilinear(map2d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize (see _kernels.fallback for the formula)."""
    return _kernels.resize_bilinear(np.asarray(map2d, dtype=np.float64), out_h, out_w)


def quantize_to_u8(map2d: np.ndarray, v_max: float) -> np.ndarray:
    """pixel = round_half_away_from_zero(255 * clamp(value / v_max, 0, 1))."""
    if v_max <= 0:
        raise ValueError(f"v_max must be > 0, got {v_max}")
    return _kernels.quantize_u8(np.asarray(map2d, dtype=np.float64), v_max)


def _check_fused(v: Volume, ref: Volume = None):
    if v.station_index is not None:
        raise ValueError(f"{v.subject_id}: expected a fused volume, got station "
                         f"{v.station_index}")
    if ref is not None and (v.data.shape != ref.data.shape or v.spacing_mm != ref.spacing_mm):
        raise ValueError(f"{v.subject_id}: volume geometry mismatch "
                         f"({v.kind} vs {ref.kind})")


def _two_view_channel(vol: Volume, cfg: ProjectionConfig) -> np.ndarray:
    """Float canvas: coronal MIP left, sagittal MIP right."""
    h, hw = cfg.out_size, cfg.half_width
    canvas = np.empty((h, h), dtype=np.float64)
    canvas[:, :hw] = resize_bilinear(mean_intensity_projection(vol, "coronal"), h, hw)
    canvas[:, hw:] = resize_bilinear(mean_intensity_projection(vol, "sagittal"), h, hw)
    return canvas


def _slice_channel(vol: Volume, cfg: ProjectionConfig) -> np.ndarray:
    """Float canvas: central coronal slice left, central sagittal slice right."""
    h, hw = cfg.out_size, cfg.half_width
    _, ny, nx = vol.data.shape
    canvas = np.empty((h, h), dtype=np.float64)
    canvas[:, :hw] = resize_bilinear(vol.data[:, ny // 2, :].astype(np.float64), h, hw)
    canvas[:, hw:] = resize_bilinear(vol.data[:, :, nx // 2].astype(np.float64), h, hw)
    return canvas


def compose_input(water: Volume, fat: Volume, ff: Volume = None,
                  config: ProjectionConfig = DEFAULT_PROJECTION) -> ProjectionImage:
    """Build the quantized 2- or 3-channel network input for one subject."""
    _check_fused(water)
    _check_fused(fat, water)
    channels = [
        quantize_to_u8(_two_view_channel(water, config), config.v_max_water),
        quantize_to_u8(_two_view_channel(fat, config), config.v_max_fat),
    ]
    if ff is not None:
        _check_fused(ff, water)
        channels.append(quantize_to_u8(_slice_channel(ff, config), config.v_max_ff))
    pixels = np.stack(channels, axis=-1)
    return ProjectionImage(pixels=pixels,
                           channel_semantics=CHANNEL_NAMES[: pixels.shape[-1]],
                           subject_id=water.subject_id)


def save_projection_png(img: ProjectionImage, directory) -> Path:
    """Write ``<subject_id>.png`` (8-bit RGB; 2-channel inputs get a zero blue)."""
    h, w, c = img.pixels.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    rgb[:, :, :c] = img.pixels
    path = Path(directory) / f"{img.subject_id}.png"
    Image.fromarray(rgb, mode="RGB").save(path)
    return path


def load_projection_png(path, n_channels: int) -> ProjectionImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return ProjectionImage(pixels=arr[:, :, :n_channels].copy(),
                           channel_semantics=CHANNEL_NAMES[:n_channels],
                           subject_id=Path(path).stem)
