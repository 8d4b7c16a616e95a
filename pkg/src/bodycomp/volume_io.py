"""Volume container and target-table serialization.

Volume files: magic ``MRVOL1\\n``, a 4-byte little-endian header length, a
UTF-8 JSON header, then the C-order little-endian float32 payload. The
header keys are written in a fixed order with compact separators so that
identical volumes produce identical bytes.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MRVOL1\n"

VOLUME_KINDS = ("water", "fat", "fat_fraction")

# value range per kind; rendering clamps into these
KIND_RANGE = {"water": (0.0, 1.0), "fat": (0.0, 1.0), "fat_fraction": (0.0, 100.0)}


class VolumeFormatError(ValueError):
    """Raised for malformed or mismatched volume containers."""


@dataclass
class Volume:
    """A 3D scalar field with spacing and station metadata.

    ``data`` is float32, C-order, shape (z, y, x). ``station_index`` is set
    on station sub-volumes; ``z_offset_vox`` records where a station sits in
    the source volume (in-memory only, not serialized — datasets persist the
    split configuration in their manifest instead).
    """

    data: np.ndarray
    spacing_mm: tuple
    kind: str
    subject_id: str
    station_index: int | None = None
    z_offset_vox: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in VOLUME_KINDS:
            raise VolumeFormatError(f"unknown volume kind {self.kind!r}")
        if self.data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)

    @property
    def shape(self):
        return self.data.shape


def write_volume(vol: Volume, path) -> None:
    compact = lambda o: json.dumps(o, separators=(",", ":"))
    header = (
        "{"
        f'"shape":{compact([int(s) for s in vol.data.shape])},'
        f'"dtype":"f32",'
        f'"spacing_mm":{compact([float(s) for s in vol.spacing_mm])},'
        f'"kind":{compact(vol.kind)},'
        f'"subject_id":{compact(vol.subject_id)},'
        f'"station_index":{compact(vol.station_index)}'
        "}"
    ).encode("utf-8")
    payload = np.ascontiguousarray(vol.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(payload.tobytes(order="C"))


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        n = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        if header.get("dtype") != "f32":
            raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        data = np.frombuffer(f.read(count * 4), dtype="<f4", count=count).reshape(shape)
    return Volume(
        data=np.ascontiguousarray(data),
        spacing_mm=tuple(header["spacing_mm"]),
        kind=header["kind"],
        subject_id=header["subject_id"],
        station_index=header["station_index"],
    )


def write_targets_csv(rows: dict, target_names, path) -> None:
    """Write ``subject_id -> {target: value}`` rows at full decimal precision.

    Subjects are written in sorted order for reproducible bytes.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subject_id", *target_names])
        for sid in sorted(rows):
            vals = rows[sid]
            w.writerow([sid, *(repr(float(vals[t])) for t in target_names)])


def read_targets_csv(path):
    """Read a targets CSV; returns (target_names, {subject_id: {target: value}})."""
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if not header or header[0] != "subject_id":
            raise VolumeFormatError(f"{path}: first column must be subject_id")
        names = header[1:]
        rows = {}
        for rec in r:
            rows[rec[0]] = {t: float(v) for t, v in zip(names, rec[1:])}
    return names, rows


def station_path(directory, subject_id: str, kind: str, station_index: int | None):
    """Canonical volume filename within a dataset directory."""
    suffix = "" if station_index is None else f"_s{station_index:02d}"
    return Path(directory) / f"{subject_id}_{kind}{suffix}.mrvol"
