"""Command-line entry point: gen | preprocess | train | predict | saliency |
evaluate | ablate.

Exit codes: 0 success, 2 usage/config errors (argparse), 1 runtime failures
(single-line ``error: <type>: <message>`` on stderr).
"""

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .model import BackboneConfig, load_snapshot
from .phantom import CohortConfig, NoiseSpec
from .training import TrainConfig, infer_standardized, make_cv_splits, train

FORMAT_VERSIONS = "mrvol=1 snapshot-sidecar=1 manifest=1"

CONFIG_KEYS = {
    "batch_size": int,
    "base_lr": float,
    "iterations_phase1": int,
    "lr_decay_factor": float,
    "iterations_phase2": int,
    "snapshot_every": int,
    "max_translation_px": int,
    "seed": int,
}


class CliError(RuntimeError):
    pass


def parse_train_config(path) -> TrainConfig:
    """Flat ``key = value`` text file mirroring TrainConfig fields."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r} "
                           f"(known: {', '.join(sorted(CONFIG_KEYS))})")
        values[key] = CONFIG_KEYS[key](val)
    return TrainConfig(**values)


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bodycomp",
        description="Phantom generation, projection preprocessing, uncertainty-aware "
                    "regression training, and reporting.",
    )
    ap.add_argument("--version", action="version",
                    version=f"bodycomp {__version__} ({FORMAT_VERSIONS})")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate phantom volumes and target tables")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--stations", type=int, default=1)
    g.add_argument("--overlap", type=int, default=0, help="station overlap in voxels")
    g.add_argument("--noise", choices=["none", "homoscedastic", "heteroscedastic",
                                       "outlier"], default="none")
    g.add_argument("--sigma", type=float, default=0.0)
    g.add_argument("--outlier-fraction", type=float, default=0.0)
    g.add_argument("--outlier-multiplier", type=float, default=1.0)
    g.add_argument("--atrophy-rate", type=float, default=None)
    g.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("preprocess", help="fuse stations and compose PNG inputs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-ff", action="store_true",
                   help="add the fat-fraction slice channel")
    p.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train one model or an ensemble")
    t.add_argument("--config", help="flat key=value TrainConfig file")
    t.add_argument("--data", required=True, help="projection dataset directory")
    t.add_argument("--out", required=True)
    t.add_argument("--fold", type=int, default=None)
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--members", type=int, default=1)
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--head", choices=["mean_variance", "mse_single"],
                   default="mean_variance")
    t.add_argument("--channels", type=int, default=None,
                   help="input channels (default: all the dataset has)")
    t.add_argument("--labels", choices=["noisy", "analytic"], default="noisy")
    t.add_argument("--debug-schedule", type=float, default=None, metavar="FACTOR",
                   help="scale iteration counts by FACTOR, keeping the two-phase shape")
    t.add_argument("--jobs", type=int, default=1, help="parallel member training")

    r = sub.add_parser("predict", help="ensemble inference to a predictions CSV")
    r.add_argument("--models", required=True,
                   help="snapshot file, member directory, or directory of member dirs")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)

    s = sub.add_parser("saliency", help="guided Grad-CAM maps and localization report")
    s.add_argument("--model", required=True, help="snapshot .pt path")
    s.add_argument("--data", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--aggregate", action="store_true")
    s.add_argument("--masks", default=None,
                   help="dataset dir with params.jsonl for structure masks")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None,
                   help="cap the number of subjects mapped")
    s.add_argument("--per-subject-pngs", action="store_true")

    e = sub.add_parser("evaluate", help="metrics report from predictions and truth")
    e.add_argument("--preds", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="training-set-size ablation")
    a.add_argument("--data", required=True)
    a.add_argument("--sizes", type=_int_list, required=True)
    a.add_argument("--seeds", type=_int_list, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--test-n", type=int, default=256)
    a.add_argument("--channels", type=int, default=None)
    a.add_argument("--head", choices=["mean_variance", "mse_single"],
                   default="mean_variance")
    a.add_argument("--config", default=None)
    a.add_argument("--debug-schedule", type=float, default=None)
    a.add_argument("--plot", action="store_true")
    return ap


def cmd_gen(args) -> int:
    from .datasets import generate_volume_dataset

    cohort = CohortConfig()
    if args.atrophy_rate is not None:
        cohort = dataclasses.replace(cohort, atrophy_rate=args.atrophy_rate)
    noise = NoiseSpec(mode=args.noise, sigma=args.sigma,
                      outlier_fraction=args.outlier_fraction,
                      outlier_multiplier=args.outlier_multiplier)
    generate_volume_dataset(args.out, args.n, args.seed, cohort, noise,
                            n_stations=args.stations, overlap_vox=args.overlap,
                            jobs=args.jobs)
    print(f"gen: wrote {args.n} subjects to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from .datasets import preprocess_dataset

    preprocess_dataset(args.in_dir, args.out, with_ff=args.with_ff, jobs=args.jobs)
    print(f"preprocess: wrote projection images to {args.out}")
    return 0


def _resolve_train_setup(args):
    from .datasets import load_projection_dataset, read_manifest

    manifest = read_manifest(args.data)
    channels = args.channels or manifest["n_channels"]
    data = load_projection_dataset(args.data, n_channels=channels, labels=args.labels)
    tc = parse_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    if args.debug_schedule is not None:
        tc = tc.scaled(args.debug_schedule)
    if args.fold is not None:
        plan = make_cv_splits(data.subject_ids, args.folds, tc.seed)
        train_ids, val_ids, _ = plan.fold_roles(args.fold)
    else:
        perm = np.random.default_rng(tc.seed).permutation(sorted(data.subject_ids))
        n_val = max(1, len(perm) // 10)
        val_ids, train_ids = tuple(perm[:n_val]), tuple(perm[n_val:])
    cfg = BackboneConfig(head=args.head, n_targets=len(data.target_names),
                         in_channels=channels)
    return data, train_ids, val_ids, cfg, tc


def _train_member_worker(payload):
    (data_dir, channels, labels, train_ids, val_ids, cfg_dict, tc_dict, out_dir,
     threads) = payload
    import torch

    from .datasets import load_projection_dataset

    torch.set_num_threads(threads)
    data = load_projection_dataset(data_dir, n_channels=channels, labels=labels)
    result = train(data, train_ids, val_ids, BackboneConfig.from_dict(cfg_dict),
                   TrainConfig(**tc_dict), out_dir)
    return str(result.canonical_snapshot)


def cmd_train(args) -> int:
    from .datasets import append_run_manifest

    data, train_ids, val_ids, cfg, tc = _resolve_train_setup(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    canonical = []
    if args.members == 1:
        result = train(data, train_ids, val_ids, cfg, tc, out_dir)
        canonical.append(str(result.canonical_snapshot))
    else:
        payloads = []
        threads = max(1, (os.cpu_count() or 1) // max(1, args.jobs))
        for m in range(args.members):
            member_tc = dataclasses.replace(tc, seed=tc.seed + m)
            payloads.append((args.data, cfg.in_channels, args.labels, train_ids,
                             val_ids, cfg.to_dict(),
                             dataclasses.asdict(member_tc),
                             str(out_dir / f"member_{m:02d}"), threads))
        if args.jobs > 1:
            ctx = multiprocessing.get_context("spawn")
            with ctx.Pool(processes=args.jobs) as pool:
                canonical = list(pool.map(_train_member_worker, payloads))
        else:
            canonical = [_train_member_worker(p) for p in payloads]
    append_run_manifest(out_dir, {
        "command": "train",
        "seed": tc.seed,
        "members": args.members,
        "train_config": dataclasses.asdict(tc),
        "backbone": cfg.to_dict(),
        "n_train": len(train_ids),
        "n_val": len(val_ids),
        "canonical_snapshots": canonical,
    })
    print(f"train: {args.members} member(s) done; canonical: {', '.join(canonical)}")
    return 0


def resolve_member_snapshots(models_path):
    """The canonical (highest-iteration) snapshot of each ensemble member."""
    p = Path(models_path)
    if p.is_file():
        return [p]
    member_dirs = sorted(d for d in p.iterdir() if d.is_dir()
                         and list(d.glob("snap_*.pt")))
    if member_dirs:
        return [max(d.glob("snap_*.pt")) for d in member_dirs]
    snaps = sorted(p.glob("snap_*.pt"))
    if not snaps:
        raise CliError(f"{models_path}: no snapshots found")
    return [max(snaps)]


def cmd_predict(args) -> int:
    from .datasets import load_projection_dataset
    from .model import Standardizer
    from .uncertainty import combine_members, write_predictions_csv

    paths = resolve_member_snapshots(args.models)
    nets, sidecars = zip(*(load_snapshot(p) for p in paths))
    hashes = {s["data_manifest_hash"] for s in sidecars}
    if len(hashes) > 1:
        raise CliError(f"members trained on different folds (manifest hashes {hashes}); "
                       "they do not share a standardizer")
    channels = nets[0].config.in_channels
    data = load_projection_dataset(args.data, n_channels=channels)
    std = Standardizer.from_dict(sidecars[0]["standardizer"])

    mus, vars_ = [], []
    for net in nets:
        mu, var = infer_standardized(net, data.images)
        mus.append(mu)
        vars_.append(var)
    member_vars = None if vars_[0] is None else np.stack(vars_)
    records = combine_members(np.stack(mus), member_vars, data.subject_ids,
                              std.target_names, std)
    write_predictions_csv(records, std.target_names, args.out)
    print(f"predict: {len(records)} subjects x {len(paths)} member(s) -> {args.out}")
    return 0


def cmd_saliency(args) -> int:
    from .datasets import load_params, load_projection_dataset, append_run_manifest
    from .saliency import (
        STRUCTURE_LABELS,
        aggregate_saliency,
        cohort_structure_mask,
        guided_grad_cam,
        localization_score,
        save_saliency_png,
    )

    net, sidecar = load_snapshot(args.model)
    std_names = sidecar["standardizer"]["target_names"]
    if args.target not in std_names:
        raise CliError(f"target {args.target!r} not in model targets {std_names}")
    t_idx = std_names.index(args.target)
    data = load_projection_dataset(args.data, n_channels=net.config.in_channels)
    out_dir = Path(args.out)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)

    ids = data.subject_ids[: args.limit] if args.limit else data.subject_ids
    maps = []
    for sid in ids:
        img = np.transpose(data.images[data.rows([sid])[0]], (1, 2, 0))
        smap = guided_grad_cam(net, img, t_idx, target_name=args.target)
        smap.subject_id = sid
        if args.per_subject_pngs:
            save_saliency_png(smap, out_dir / "maps" / f"{sid}_{args.target}.png")
        maps.append(smap.to_unit_max())

    written = []
    if args.aggregate:
        agg = aggregate_saliency(maps)
        written.append(str(save_saliency_png(
            agg, out_dir / f"aggregate_{args.target}.png")))
        report = {}
        if args.masks:
            params = list(load_params(args.masks).values())
            for structure in STRUCTURE_LABELS:
                mask = cohort_structure_mask(params, structure)
                report[structure] = localization_score(agg, mask)
            report_path = out_dir / f"localization_{args.target}.json"
            report_path.write_text(json.dumps({args.target: report}, indent=1,
                                              sort_keys=True))
            written.append(str(report_path))
    append_run_manifest(out_dir, {
        "command": "saliency",
        "model": str(args.model),
        "target": args.target,
        "n_subjects": len(ids),
        "outputs": written,
    })
    print(f"saliency: {len(ids)} subjects -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import compute_metrics, write_report_json
    from .uncertainty import calibration_report, read_predictions_csv
    from .volume_io import read_targets_csv

    names, records = read_predictions_csv(args.preds)
    _, truths = read_targets_csv(args.truth)
    preds = {r.subject_id: r.mean for r in records}
    report = compute_metrics(preds, truths)
    extra = {}
    try:
        extra["calibration"] = calibration_report(records, truths)
    except ValueError as e:
        extra["calibration_skipped"] = str(e)
    write_report_json(report, args.out, extra=extra)
    print(f"evaluate: {report.n_subjects} subjects -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .datasets import append_run_manifest, load_projection_dataset, read_manifest
    from .evaluation import plot_ablation_curve, sample_size_ablation, write_ablation_csv

    manifest = read_manifest(args.data)
    channels = args.channels or manifest["n_channels"]
    data = load_projection_dataset(args.data, n_channels=channels)
    tc = parse_train_config(args.config) if args.config else TrainConfig()
    if args.debug_schedule is not None:
        tc = tc.scaled(args.debug_schedule)
    ids = sorted(data.subject_ids)
    test_ids = ids[-args.test_n:]
    cfg = BackboneConfig(head=args.head, n_targets=len(data.target_names),
                         in_channels=channels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = sample_size_ablation(
        data, args.sizes, args.seeds, test_ids, cfg, tc, out_dir / "runs",
        progress=lambda n, seed, rep: print(f"  ablate n={n} seed={seed} done"))
    write_ablation_csv(result, out_dir / "ablation.csv")
    ratios = {f"n={n}": result.median_ratio(n) for n in result.sizes}
    (out_dir / "ablation_ratios.json").write_text(json.dumps(ratios, indent=1))
    outputs = ["ablation.csv", "ablation_ratios.json"]
    if args.plot:
        plot_ablation_curve(result, out_dir / "ablation.png")
        outputs.append("ablation.png")
    append_run_manifest(out_dir, {
        "command": "ablate",
        "sizes": list(result.sizes),
        "seeds": list(result.seeds),
        "outputs": outputs,
    })
    print(f"ablate: median ratios {ratios}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "saliency": cmd_saliency,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BrokenPipeError:
        raise
    except Exception as e:  # runtime failure -> exit 1, single parsable line
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
