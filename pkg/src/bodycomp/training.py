"""Standardized training policy: Adam, batch 32, translation augmentation,
two-phase learning rate, snapshots every 1000 iterations.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .model import (
    RegressionNet,
    Standardizer,
    build_model,
    gaussian_nll,
    manifest_hash,
    mse_loss,
    save_snapshot,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    iterations_phase1: int = 5000
    lr_decay_factor: float = 10.0
    iterations_phase2: int = 1000
    snapshot_every: int = 1000
    max_translation_px: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "iterations_phase1", "iterations_phase2", "snapshot_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")

    @property
    def total_iterations(self) -> int:
        return self.iterations_phase1 + self.iterations_phase2

    def scaled(self, factor: float) -> "TrainConfig":
        """Proportionally shrunk schedule (same two-phase structure and
        snapshot count), for CI and smoke runs."""
        if factor <= 0:
            raise ValueError("schedule factor must be > 0")
        return replace(
            self,
            iterations_phase1=max(1, round(self.iterations_phase1 * factor)),
            iterations_phase2=max(1, round(self.iterations_phase2 * factor)),
            snapshot_every=max(1, round(self.snapshot_every * factor)),
        )


def learning_rate_at(iteration: int, tc: TrainConfig) -> float:
    """Learning rate for a 1-based iteration index."""
    if iteration <= tc.iterations_phase1:
        return tc.base_lr
    return tc.base_lr / tc.lr_decay_factor


def translate(img: np.ndarray, shift) -> np.ndarray:
    """Shift the last two axes by integer (s0, s1), zero-filling vacated pixels."""
    s0, s1 = int(shift[0]), int(shift[1])
    h, w = img.shape[-2:]
    if abs(s0) >= h or abs(s1) >= w:
        return np.zeros_like(img)
    out = np.zeros_like(img)
    dst0 = slice(max(s0, 0), h + min(s0, 0))
    dst1 = slice(max(s1, 0), w + min(s1, 0))
    src0 = slice(max(-s0, 0), h + min(-s0, 0))
    src1 = slice(max(-s1, 0), w + min(-s1, 0))
    out[..., dst0, dst1] = img[..., src0, src1]
    return out


def augment_translate(imgs: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform integer shift in [-max_shift, max_shift]^2 per sample."""
    if max_shift >= min(imgs.shape[-2:]):
        raise ValueError("max_shift must be smaller than the image side")
    shifts = rng.integers(-max_shift, max_shift + 1, size=(imgs.shape[0], 2))
    out = np.empty_like(imgs)
    for i in range(imgs.shape[0]):
        out[i] = translate(imgs[i], shifts[i])
    return out


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple  # k disjoint tuples of subject ids
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_roles(self, i: int):
        """(train_ids, val_ids, test_ids) for fold i: test = fold i, validation =
        the next fold, training = the rest."""
        k = self.k
        test = self.folds[i % k]
        val = self.folds[(i + 1) % k]
        train = tuple(
            sid for j, f in enumerate(self.folds)
            if j not in (i % k, (i + 1) % k) for sid in f
        )
        return train, val, test


def make_cv_splits(subject_ids, k: int, seed: int) -> SplitPlan:
    ids = sorted(subject_ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)}-subject cohort")
    perm = np.random.default_rng(seed).permutation(ids)
    folds = tuple(tuple(str(s) for s in f) for f in np.array_split(perm, k))
    return SplitPlan(folds=folds, seed=seed)


@dataclass
class SubjectArrays:
    """In-memory dataset: one image and one target row per subject."""

    subject_ids: list
    images: np.ndarray  # uint8 (N, C, H, W)
    targets: np.ndarray  # float64 (N, T), original units (training labels)
    target_names: tuple
    truth: np.ndarray = None  # analytic targets, same layout, optional

    def __post_init__(self):
        self._row = {sid: i for i, sid in enumerate(self.subject_ids)}

    def rows(self, ids) -> np.ndarray:
        return np.array([self._row[s] for s in ids], dtype=np.intp)


@dataclass
class TrainResult:
    snapshot_paths: list
    canonical_snapshot: Path
    metric_rows: list  # dicts: iteration, split, loss, R2_<target>...
    standardizer: Standardizer
    train_manifest_hash: str


def _r2_per_target(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    resid = ((truth - pred) ** 2).sum(axis=0)
    var = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(var > 0, 1.0 - resid / var, np.nan)


def infer_standardized(net: RegressionNet, images: np.ndarray, batch_size: int = 64):
    """Forward a uint8 image stack in eval mode; returns (mu_z, var_z or None)."""
    net.eval()
    mus, vars_ = [], []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[i:i + batch_size].astype(np.float32) / 255.0)
            mu, var = net.forward_distribution(x)
            mus.append(mu.numpy())
            vars_.append(var.numpy() if var is not None else None)
    mu = np.concatenate(mus, axis=0)
    var = None if vars_[0] is None else np.concatenate(vars_, axis=0)
    return mu, var


def train(data: SubjectArrays, train_ids, val_ids, model_cfg, tc: TrainConfig,
          out_dir) -> TrainResult:
    """Run the full iteration schedule; snapshot + validate every
    ``snapshot_every`` iterations; the final snapshot is canonical.

    The standardizer is fitted on the training fold only and its manifest
    hash is recorded in every snapshot sidecar.
    """
    if len(train_ids) == 0:
        raise TrainingError("empty training fold")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_rows = data.rows(train_ids)
    val_rows = data.rows(val_ids)
    train_hash = manifest_hash(train_ids)

    std = Standardizer.fit(data.targets[train_rows], data.target_names)
    y_train = std.standardize(data.targets[train_rows]).astype(np.float32)
    y_val = std.standardize(data.targets[val_rows]).astype(np.float32)
    imgs_train = data.images[train_rows]
    imgs_val = data.images[val_rows]

    torch.manual_seed(tc.seed)
    net = build_model(model_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=tc.base_lr, betas=tc.adam_betas)
    rng = np.random.default_rng((tc.seed, 0xA06))
    use_nll = model_cfg.head == "mean_variance"

    n = len(train_rows)
    order = rng.permutation(n)
    cursor = 0

    def next_batch_indices():
        nonlocal order, cursor
        take = []
        need = tc.batch_size
        while need:
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            grab = min(need, n - cursor)
            take.append(order[cursor:cursor + grab])
            cursor += grab
            need -= grab
        return np.concatenate(take)

    snapshot_paths = []
    metric_rows = []
    loss_window = []

    net.train()
    for it in range(1, tc.total_iterations + 1):
        lr = learning_rate_at(it, tc)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = next_batch_indices()
        batch = augment_translate(imgs_train[idx], tc.max_translation_px, rng)
        x = torch.from_numpy(batch.astype(np.float32) / 255.0)
        y = torch.from_numpy(y_train[idx])
        out = net(x)
        if use_nll:
            mu = out[:, : model_cfg.n_targets]
            var = torch.nn.functional.softplus(out[:, model_cfg.n_targets:]) + 1e-6
            loss = gaussian_nll(mu, var, y)
        else:
            loss = mse_loss(out, y)
        if not torch.isfinite(loss):
            raise TrainingError(f"NaN/Inf loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_window.append(float(loss.detach()))

        if it % tc.snapshot_every == 0 or it == tc.total_iterations:
            path = out_dir / f"snap_{it:06d}.pt"
            save_snapshot(path, net, std, tc.seed, it, train_hash)
            snapshot_paths.append(path)
            mu_z, var_z = infer_standardized(net, imgs_val)
            if use_nll:
                val_loss = float(gaussian_nll(torch.from_numpy(mu_z),
                                              torch.from_numpy(var_z),
                                              torch.from_numpy(y_val.astype(np.float64))))
            else:
                val_loss = float(mse_loss(torch.from_numpy(mu_z),
                                          torch.from_numpy(y_val.astype(np.float64))))
            r2 = _r2_per_target(mu_z, y_val.astype(np.float64))
            metric_rows.append({"iteration": it, "split": "train",
                                "loss": float(np.mean(loss_window)),
                                **{f"R2_{t}": "" for t in data.target_names}})
            metric_rows.append({"iteration": it, "split": "val", "loss": val_loss,
                                **{f"R2_{t}": float(v)
                                   for t, v in zip(data.target_names, r2)}})
            loss_window = []
            net.train()

    write_metric_log(metric_rows, data.target_names, out_dir / "metrics.csv")
    return TrainResult(
        snapshot_paths=snapshot_paths,
        canonical_snapshot=snapshot_paths[-1],
        metric_rows=metric_rows,
        standardizer=std,
        train_manifest_hash=train_hash,
    )


def write_metric_log(rows, target_names, path) -> None:
    cols = ["iteration", "split", "loss"] + [f"R2_{t}" for t in target_names]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def read_metric_log(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
