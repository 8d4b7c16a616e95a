"""Dataset directories: generation, preprocessing, manifests, and loading.

A volume dataset holds per-subject (possibly station-split) MRVOL volumes;
a projection dataset holds composed PNG inputs. Both carry targets.csv
(training labels), targets_analytic.csv (ground truth), params.jsonl
(phantom parameters, enough to rebuild label volumes and masks), and a
single append-only manifest.json.
"""

import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .phantom import (
    CohortConfig,
    NoiseSpec,
    PhantomParams,
    TARGET_NAMES,
    apply_label_noise,
    compute_targets,
    label_volume,
    render_volume,
    sample_phantom_params,
    split_into_stations,
    station_layout,
)
from .projection import (
    DEFAULT_PROJECTION,
    ProjectionConfig,
    compose_input,
    fuse_stations,
    load_projection_png,
    save_projection_png,
)
from .training import SubjectArrays
from .volume_io import read_targets_csv, read_volume, station_path, write_targets_csv, write_volume


def params_to_dict(p: PhantomParams) -> dict:
    return dataclasses.asdict(p)


def params_from_dict(d: dict) -> PhantomParams:
    d = dict(d)
    d["torso_semi_axes"] = tuple(d["torso_semi_axes"])
    d["vat_blob_centers_and_radii"] = tuple(
        (tuple(c), r) for c, r in d["vat_blob_centers_and_radii"])
    ax, c = d["liver_semi_axes_and_center"]
    d["liver_semi_axes_and_center"] = (tuple(ax), tuple(c))
    return PhantomParams(**d)


def write_params_jsonl(params_list, path) -> None:
    with open(path, "w") as f:
        for p in params_list:
            f.write(json.dumps(params_to_dict(p), sort_keys=True) + "\n")


def read_params_jsonl(path):
    with open(path) as f:
        return [params_from_dict(json.loads(line)) for line in f if line.strip()]


def config_hash(*objs) -> str:
    h = hashlib.sha256()
    for o in objs:
        if dataclasses.is_dataclass(o):
            o = dataclasses.asdict(o)
        h.update(json.dumps(o, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def append_run_manifest(directory, entry: dict) -> dict:
    """Create or extend the directory's single manifest; runs are append-only."""
    path = Path(directory) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    runs = manifest.get("runs", [])
    runs.append({"tool_version": __version__, **entry})
    manifest.update(entry.get("dataset", {}))
    manifest["runs"] = runs
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{directory}: no manifest.json")
    return json.loads(path.read_text())


def _gen_one_subject(args):
    (idx, seed, cohort, noise, n_stations, overlap, out_dir) = args
    params = sample_phantom_params(seed, idx, cohort)
    grid = cohort.grid
    labels = label_volume(params, grid, cohort)
    vols = render_volume(params, grid, cohort.texture_noise_amplitude, cohort,
                         labels=labels)
    vol_dir = Path(out_dir) / "volumes"
    for vol in vols:
        if n_stations > 1:
            for st in split_into_stations(vol, n_stations, overlap):
                write_volume(st, station_path(vol_dir, vol.subject_id, vol.kind,
                                              st.station_index))
        else:
            write_volume(vol, station_path(vol_dir, vol.subject_id, vol.kind, None))
    analytic = compute_targets(params, grid, "analytic", cohort=cohort)
    noisy = apply_label_noise(analytic, noise, rng_seed=params.rng_seed)
    return params, analytic.values, noisy.values


def generate_volume_dataset(out_dir, n: int, seed: int,
                            cohort: CohortConfig = None,
                            noise: NoiseSpec = None,
                            n_stations: int = 1, overlap_vox: int = 0,
                            jobs: int = 1) -> dict:
    """Render and persist n subjects' volumes plus target tables."""
    cohort = cohort or CohortConfig()
    noise = noise or NoiseSpec()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    work = [(i, seed, cohort, noise, n_stations, overlap_vox, out_dir)
            for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_gen_one_subject, work, chunksize=8))
    else:
        results = [_gen_one_subject(w) for w in work]

    params_list = [r[0] for r in results]
    analytic = {p.subject_id: r[1] for p, r in zip(params_list, results)}
    noisy = {p.subject_id: r[2] for p, r in zip(params_list, results)}
    write_targets_csv(noisy, TARGET_NAMES, out_dir / "targets.csv")
    write_targets_csv(analytic, TARGET_NAMES, out_dir / "targets_analytic.csv")
    write_params_jsonl(params_list, out_dir / "params.jsonl")
    return append_run_manifest(out_dir, {
        "command": "gen",
        "seed": seed,
        "dataset": {
            "kind": "volume_dataset",
            "n_subjects": n,
            "subject_ids": [p.subject_id for p in params_list],
            "grid_shape": list(cohort.grid.shape),
            "grid_spacing_mm": cohort.grid.spacing_mm,
            "n_stations": n_stations,
            "overlap_vox": overlap_vox,
            "noise": dataclasses.asdict(noise),
            "config_hash": config_hash(cohort, noise, {"n": n, "seed": seed}),
        },
    })


def load_subject_volumes(directory, subject_id: str, kinds=("water", "fat", "fat_fraction")):
    """Load one subject's volumes, fusing stations using the manifest layout."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    n_stations = manifest.get("n_stations", 1)
    overlap = manifest.get("overlap_vox", 0)
    nz = manifest["grid_shape"][0]
    vols = []
    for kind in kinds:
        if n_stations > 1:
            layout = station_layout(nz, n_stations, overlap)
            stations = []
            for i, (start, _) in enumerate(layout):
                st = read_volume(station_path(directory / "volumes", subject_id, kind, i))
                st.z_offset_vox = start
                stations.append(st)
            vols.append(fuse_stations(stations))
        else:
            vols.append(read_volume(station_path(directory / "volumes", subject_id,
                                                 kind, None)))
    return tuple(vols)


def _preprocess_one(args):
    (sid, in_dir, out_dir, with_ff, proj_cfg) = args
    kinds = ("water", "fat", "fat_fraction") if with_ff else ("water", "fat")
    vols = load_subject_volumes(in_dir, sid, kinds)
    img = compose_input(vols[0], vols[1], vols[2] if with_ff else None, proj_cfg)
    save_projection_png(img, Path(out_dir) / "images")
    return sid


def preprocess_dataset(in_dir, out_dir, with_ff: bool = False,
                       proj_cfg: ProjectionConfig = DEFAULT_PROJECTION,
                       jobs: int = 1) -> dict:
    """Volume dataset -> projection dataset (PNG inputs + copied tables)."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    manifest = read_manifest(in_dir)
    if manifest.get("kind") != "volume_dataset":
        raise ValueError(f"{in_dir}: not a volume dataset")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ids = manifest["subject_ids"]
    work = [(sid, in_dir, out_dir, with_ff, proj_cfg) for sid in ids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_preprocess_one, work, chunksize=8))
    else:
        for w in work:
            _preprocess_one(w)
    for name in ("targets.csv", "targets_analytic.csv", "params.jsonl"):
        (out_dir / name).write_bytes((in_dir / name).read_bytes())
    return append_run_manifest(out_dir, {
        "command": "preprocess",
        "input": str(in_dir),
        "dataset": {
            "kind": "projection_dataset",
            "n_subjects": len(ids),
            "subject_ids": list(ids),
            "n_channels": 3 if with_ff else 2,
            "channel_v_max": [proj_cfg.v_max_water, proj_cfg.v_max_fat, proj_cfg.v_max_ff],
            "grid_shape": manifest["grid_shape"],
            "grid_spacing_mm": manifest["grid_spacing_mm"],
            "config_hash": config_hash(proj_cfg, {"with_ff": with_ff,
                                                  "src": manifest.get("config_hash")}),
        },
    })


def _build_one_subject(args):
    (idx, seed, cohort, noise, with_ff, proj_cfg, out_dir) = args
    params = sample_phantom_params(seed, idx, cohort)
    grid = cohort.grid
    labels = label_volume(params, grid, cohort)
    water, fat, ff = render_volume(params, grid, cohort.texture_noise_amplitude,
                                   cohort, labels=labels)
    img = compose_input(water, fat, ff if with_ff else None, proj_cfg)
    save_projection_png(img, Path(out_dir) / "images")
    analytic = compute_targets(params, grid, "analytic", cohort=cohort)
    noisy = apply_label_noise(analytic, noise, rng_seed=params.rng_seed)
    return params, analytic.values, noisy.values


def build_projection_dataset(out_dir, n: int, seed: int,
                             cohort: CohortConfig = None,
                             noise: NoiseSpec = None,
                             with_ff: bool = True,
                             proj_cfg: ProjectionConfig = DEFAULT_PROJECTION,
                             jobs: int = 1) -> dict:
    """Phantoms straight to projection PNGs, skipping volume persistence.

    Equivalent to generate_volume_dataset + preprocess_dataset with a single
    station (the split/fuse round trip is the identity); used where writing
    thousands of float volumes to disk would be pointless.
    """
    cohort = cohort or CohortConfig()
    noise = noise or NoiseSpec()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    work = [(i, seed, cohort, noise, with_ff, proj_cfg, out_dir) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_build_one_subject, work, chunksize=8))
    else:
        results = [_build_one_subject(w) for w in work]
    params_list = [r[0] for r in results]
    analytic = {p.subject_id: r[1] for p, r in zip(params_list, results)}
    noisy = {p.subject_id: r[2] for p, r in zip(params_list, results)}
    write_targets_csv(noisy, TARGET_NAMES, out_dir / "targets.csv")
    write_targets_csv(analytic, TARGET_NAMES, out_dir / "targets_analytic.csv")
    write_params_jsonl(params_list, out_dir / "params.jsonl")
    return append_run_manifest(out_dir, {
        "command": "build_projection_dataset",
        "seed": seed,
        "dataset": {
            "kind": "projection_dataset",
            "n_subjects": n,
            "subject_ids": [p.subject_id for p in params_list],
            "n_channels": 3 if with_ff else 2,
            "channel_v_max": [proj_cfg.v_max_water, proj_cfg.v_max_fat, proj_cfg.v_max_ff],
            "grid_shape": list(cohort.grid.shape),
            "grid_spacing_mm": cohort.grid.spacing_mm,
            "noise": dataclasses.asdict(noise),
            "config_hash": config_hash(cohort, noise, proj_cfg,
                                       {"n": n, "seed": seed, "with_ff": with_ff}),
        },
    })


def load_projection_dataset(directory, n_channels: int = None,
                            labels: str = "noisy") -> SubjectArrays:
    """Load a projection dataset into memory as SubjectArrays.

    ``labels`` picks the training-label table ('noisy', the default, equals
    the analytic table when the dataset was built without label noise);
    the analytic truth rides along in ``.truth``.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("kind") != "projection_dataset":
        raise ValueError(f"{directory}: not a projection dataset")
    c = n_channels or manifest["n_channels"]
    if c > manifest["n_channels"]:
        raise ValueError(f"dataset has {manifest['n_channels']} channels, "
                         f"{c} requested")
    ids = manifest["subject_ids"]
    names, noisy = read_targets_csv(directory / "targets.csv")
    _, analytic = read_targets_csv(directory / "targets_analytic.csv")
    table = noisy if labels == "noisy" else analytic

    first = load_projection_png(directory / "images" / f"{ids[0]}.png", c)
    h, w, _ = first.pixels.shape
    images = np.empty((len(ids), c, h, w), dtype=np.uint8)
    targets = np.empty((len(ids), len(names)), dtype=np.float64)
    truth = np.empty_like(targets)
    for i, sid in enumerate(ids):
        img = load_projection_png(directory / "images" / f"{sid}.png", c)
        images[i] = np.transpose(img.pixels, (2, 0, 1))
        targets[i] = [table[sid][t] for t in names]
        truth[i] = [analytic[sid][t] for t in names]
    return SubjectArrays(subject_ids=list(ids), images=images, targets=targets,
                         target_names=tuple(names), truth=truth)


def load_params(directory) -> dict:
    """subject_id -> PhantomParams from a dataset's params.jsonl."""
    return {p.subject_id: p for p in read_params_jsonl(Path(directory) / "params.jsonl")}
