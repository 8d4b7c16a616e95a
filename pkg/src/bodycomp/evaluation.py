"""Cohort metrics and the two study protocols: training-set-size ablation and
snapshot learning curves.

Quantile convention for box statistics: linear interpolation between order
statistics (numpy's default), whiskers at the most extreme data point within
1.5 IQR of the box, values beyond listed as outliers.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class MetricsReport:
    per_target: dict  # target -> {mae, mape_pct, r2, pearson_r, n_mape_excluded}
    n_subjects: int
    split_id: str = ""

    def to_dict(self) -> dict:
        return {"split_id": self.split_id, "n_subjects": self.n_subjects,
                "per_target": self.per_target}


def compute_metrics(preds: dict, truths: dict, split_id: str = "") -> MetricsReport:
    """MAE, MAPE (over nonzero truths), R^2, and Pearson r per target.

    ``preds`` and ``truths`` map subject_id -> {target: value}; only subjects
    present in both are scored. R^2 is null (with a reason) when the truth
    has zero variance.
    """
    ids = sorted(set(preds) & set(truths))
    if len(ids) < 2:
        raise ValueError(f"need >= 2 subjects present in both predictions and truth, "
                         f"got {len(ids)}")
    targets = list(preds[ids[0]])
    per_target = {}
    for t in targets:
        p = np.array([preds[s][t] for s in ids], dtype=np.float64)
        y = np.array([truths[s][t] for s in ids], dtype=np.float64)
        e = p - y
        nonzero = y != 0
        mape = float(np.mean(np.abs(e[nonzero]) / np.abs(y[nonzero])) * 100.0) \
            if nonzero.any() else None
        ss_res = float((e**2).sum())
        ss_tot = float(((y - y.mean())**2).sum())
        if ss_tot == 0:
            r2, r2_reason = None, "zero truth variance"
            pearson = None
        else:
            r2, r2_reason = 1.0 - ss_res / ss_tot, None
            pearson = float(np.corrcoef(p, y)[0, 1]) if p.std() > 0 else None
        per_target[t] = {
            "mae": float(np.mean(np.abs(e))),
            "mape_pct": mape,
            "r2": r2,
            "pearson_r": pearson,
            "n_mape_excluded": int((~nonzero).sum()),
        }
        if r2_reason:
            per_target[t]["r2_reason"] = r2_reason
    return MetricsReport(per_target=per_target, n_subjects=len(ids), split_id=split_id)


def box_stats(values) -> dict:
    """Quartiles, median, 1.5-IQR whiskers, and outliers for one snapshot."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return {
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "whisker_lo": float(inside.min()),
        "whisker_hi": float(inside.max()),
        "outliers": sorted(float(x) for x in outliers),
    }


def snapshot_curve(metric_logs) -> list:
    """Box statistics per snapshot index across folds.

    ``metric_logs`` is one sequence of per-snapshot scores per fold; all folds
    must have the same snapshot count.
    """
    logs = [list(map(float, log)) for log in metric_logs]
    if len(logs) < 2:
        raise ValueError("need metric logs from >= 2 folds")
    n = len(logs[0])
    if any(len(log) != n for log in logs):
        raise ValueError(f"ragged metric logs: lengths {[len(l) for l in logs]}")
    return [box_stats([log[i] for log in logs]) for i in range(n)]


@dataclass
class AblationResult:
    rows: list  # dicts: n_train, seed, target, mape_pct
    ratios: dict  # (n_train, seed) -> mean over targets of MAPE(n)/MAPE(n_max)
    sizes: tuple
    seeds: tuple

    def median_ratio(self, n: int) -> float:
        return float(np.median([self.ratios[(n, s)] for s in self.seeds]))


def subsample_ids(train_ids, n: int, seed: int):
    """Deterministic nested subsets: the first n of a seed-keyed permutation."""
    pool = sorted(train_ids)
    if n > len(pool):
        raise ValueError(f"requested {n} training subjects, pool has {len(pool)}")
    perm = np.random.default_rng((seed, 0x5AB)).permutation(pool)
    return tuple(perm[:n])


def sample_size_ablation(data, sizes, seeds, test_ids, model_cfg, tc,
                         workdir, train_pool=None, progress=None,
                         resume=False) -> AblationResult:
    """Retrain at each (size, seed) with the fixed iteration budget and score
    MAPE on the fixed test fold; ratios are relative to the largest size.

    ``data`` is a training.SubjectArrays; the training pool defaults to every
    subject outside the test fold. Truth for scoring comes from ``data.truth``
    when present (clean targets), else the training labels. With ``resume``,
    runs whose directory carries a TRAIN_DONE marker are scored from their
    stored canonical snapshot instead of retrained.
    """
    import dataclasses

    from .model import Standardizer, load_snapshot
    from .training import infer_standardized, train

    sizes = tuple(sorted(sizes))
    test_ids = tuple(test_ids)
    pool = tuple(train_pool) if train_pool is not None else tuple(
        s for s in data.subject_ids if s not in set(test_ids))

    truth_arr = data.truth if data.truth is not None else data.targets
    truths = {
        sid: dict(zip(data.target_names, truth_arr[r]))
        for sid, r in zip(test_ids, data.rows(test_ids))
    }

    workdir = Path(workdir)
    rows = []
    mapes = {}
    for seed in seeds:
        for n in sizes:
            ids = subsample_ids(pool, n, seed)
            run_dir = workdir / f"ablate_n{n}_seed{seed}"
            marker = run_dir / "TRAIN_DONE"
            if resume and marker.exists():
                canonical = max(run_dir.glob("snap_*.pt"))
                net, sidecar = load_snapshot(canonical)
                std = Standardizer.from_dict(sidecar["standardizer"])
            else:
                result = train(data, ids, test_ids, model_cfg,
                               dataclasses.replace(tc, seed=seed), run_dir)
                if resume:
                    marker.touch()
                net, _ = load_snapshot(result.canonical_snapshot)
                std = result.standardizer
            mu_z, _ = infer_standardized(net, data.images[data.rows(test_ids)])
            mu, _ = std.destandardize_mean_var(mu_z, np.zeros_like(mu_z))
            preds = {sid: dict(zip(data.target_names, mu[i]))
                     for i, sid in enumerate(test_ids)}
            report = compute_metrics(preds, truths, split_id=f"ablate_n{n}_seed{seed}")
            for t, m in report.per_target.items():
                rows.append({"n_train": n, "seed": seed, "target": t,
                             "mape_pct": m["mape_pct"]})
                mapes[(n, seed, t)] = m["mape_pct"]
            if progress:
                progress(n, seed, report)

    n_max = sizes[-1]
    ratios = {}
    for seed in seeds:
        for n in sizes:
            per_target = [mapes[(n, seed, t)] / mapes[(n_max, seed, t)]
                          for t in data.target_names if mapes[(n_max, seed, t)]]
            ratios[(n, seed)] = float(np.mean(per_target))
    return AblationResult(rows=rows, ratios=ratios, sizes=sizes, seeds=tuple(seeds))


def write_ablation_csv(result: AblationResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_train", "seed", "target", "MAPE"])
        for r in result.rows:
            w.writerow([r["n_train"], r["seed"], r["target"], repr(r["mape_pct"])])


def write_report_json(report: MetricsReport, path, extra: dict = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def plot_ablation_curve(result: AblationResult, path) -> None:
    """MAPE-ratio-vs-size curve (median across seeds with per-seed points)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for seed in result.seeds:
        ax.plot(result.sizes, [result.ratios[(n, seed)] for n in result.sizes],
                "o--", alpha=0.4, label=f"seed {seed}")
    med = [result.median_ratio(n) for n in result.sizes]
    ax.plot(result.sizes, med, "k-", lw=2, label="median")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("unique training samples")
    ax.set_ylabel("MAPE ratio vs largest size")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_snapshot_boxes(curve, path, ylabel="validation R2") -> None:
    """Box-and-whisker chart per snapshot, matching the stated conventions."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    stats = [{
        "med": c["median"], "q1": c["q1"], "q3": c["q3"],
        "whislo": c["whisker_lo"], "whishi": c["whisker_hi"], "fliers": c["outliers"],
    } for c in curve]
    ax.bxp(stats, positions=range(1, len(curve) + 1))
    ax.set_xlabel("snapshot")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
