"""Regression network, target standardization, and the two loss criteria.

The mean-variance head emits (mu, raw) per target; the predicted variance is
softplus(raw) + VAR_FLOOR, which keeps the Gaussian likelihood away from its
singularity without the blow-ups an exponential parameterization invites.
The constant 0.5*ln(2*pi) is dropped from the likelihood; reported loss
values are comparable across runs but offset from the textbook value.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VAR_FLOOR = 1e-6

HEADS = ("mse_single", "mean_variance")


class SnapshotError(RuntimeError):
    """Raised for unreadable or sidecar-less snapshots."""


@dataclass(frozen=True)
class BackboneConfig:
    conv_blocks: tuple = ((16, 2), (32, 2), (64, 2), (128, 2))  # (out_channels, stride)
    stem_pool: int = 2  # average-pool factor before the first block (1 = none)
    global_pool: str = "mean"
    head: str = "mean_variance"
    n_targets: int = 7
    in_channels: int = 2
    pretrained_init: bool = False

    def __post_init__(self):
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        if len(self.conv_blocks) < 3:
            raise ValueError("need at least 3 conv blocks")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.global_pool != "mean":
            raise ValueError("only mean global pooling is supported")
        if self.pretrained_init:
            raise ValueError("pretrained initialization is unavailable offline; "
                             "train from scratch (pretrained_init=False)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["conv_blocks"] = tuple(tuple(b) for b in d["conv_blocks"])
        return cls(**d)


class RegressionNet(nn.Module):
    """Conv blocks (stride-2, BN, ReLU), global average pool, linear head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        blocks = []
        if config.stem_pool > 1:
            blocks.append(nn.AvgPool2d(config.stem_pool))
        cin = config.in_channels
        for cout, stride in config.conv_blocks:
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            ))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        out_per_target = 2 if config.head == "mean_variance" else 1
        self.head = nn.Linear(cin, out_per_target * config.n_targets)

    @property
    def last_conv_block(self) -> nn.Module:
        return self.blocks[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x).mean(dim=(2, 3))
        out = self.head(h)
        if not torch.isfinite(out).all():
            raise FloatingPointError(
                f"non-finite network output for batch of shape {tuple(x.shape)}")
        return out

    def forward_distribution(self, x: torch.Tensor):
        """Returns (mu_z, var_z); var_z is None for the mse_single head."""
        out = self.forward(x)
        if self.config.head == "mse_single":
            return out, None
        mu, raw = split_mean_variance(out, self.config.n_targets)
        return mu, variance_from_raw(raw)


def build_model(config: BackboneConfig) -> RegressionNet:
    return RegressionNet(config)


def split_mean_variance(out: torch.Tensor, n_targets: int):
    return out[:, :n_targets], out[:, n_targets:]


def variance_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + VAR_FLOOR


def gaussian_nll(mu_z: torch.Tensor, var_z: torch.Tensor, y_z: torch.Tensor) -> torch.Tensor:
    """Mean over batch and targets of 0.5*ln(var) + (y - mu)^2 / (2*var)."""
    if (var_z < VAR_FLOOR).any():
        raise ValueError(f"variance below the {VAR_FLOOR} floor; "
                         "is the head configured for mean_variance output?")
    return (0.5 * torch.log(var_z) + (y_z - mu_z) ** 2 / (2.0 * var_z)).mean()


def mse_loss(mu_z: torch.Tensor, y_z: torch.Tensor) -> torch.Tensor:
    if mu_z.shape != y_z.shape:
        raise ValueError(f"shape mismatch: {tuple(mu_z.shape)} vs {tuple(y_z.shape)}")
    return ((y_z - mu_z) ** 2).mean()


class Standardizer:
    """Per-target affine transform fitted on the training split only."""

    def __init__(self, target_names, mean, std):
        self.target_names = tuple(target_names)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, targets: np.ndarray, target_names) -> "Standardizer":
        targets = np.asarray(targets, dtype=np.float64)
        m = targets.mean(axis=0)
        s = targets.std(axis=0)
        if (s == 0).any():
            bad = [n for n, v in zip(target_names, s) if v == 0]
            raise ValueError(f"constant target(s) in the training split: {bad}")
        return cls(target_names, m, s)

    def standardize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def destandardize_mean_var(self, mu_z, var_z):
        mu = np.asarray(mu_z, dtype=np.float64) * self.std + self.mean
        var = np.asarray(var_z, dtype=np.float64) * self.std**2
        return mu, var

    def to_dict(self) -> dict:
        return {"target_names": list(self.target_names),
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(d["target_names"], d["mean"], d["std"])


@dataclass
class PredictionRecord:
    """Per-subject prediction in original units, with variance decomposition."""

    subject_id: str
    mean: dict  # target -> value
    var_total: dict
    var_aleatoric: dict
    var_epistemic: dict

    def __post_init__(self):
        for t in self.mean:
            tot = self.var_total[t]
            parts = self.var_aleatoric[t] + self.var_epistemic[t]
            if tot < 0 or self.var_aleatoric[t] < 0 or self.var_epistemic[t] < 0:
                raise ValueError(f"{self.subject_id}/{t}: negative variance")
            if abs(tot - parts) > 1e-6 * max(abs(tot), 1e-30):
                raise ValueError(f"{self.subject_id}/{t}: variance decomposition broken "
                                 f"({tot} != {self.var_aleatoric[t]} + {self.var_epistemic[t]})")


def manifest_hash(subject_ids) -> str:
    """Fingerprint of a subject list; guards leakage and member compatibility."""
    h = hashlib.sha256()
    for sid in sorted(subject_ids):
        h.update(sid.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


def save_snapshot(path, net: RegressionNet, standardizer: Standardizer, seed: int,
                  iteration: int, data_manifest_hash: str) -> Path:
    """Write weights plus the JSON sidecar that makes them loadable."""
    path = Path(path)
    torch.save(net.state_dict(), path)
    sidecar = {
        "backbone": net.config.to_dict(),
        "head": net.config.head,
        "standardizer": standardizer.to_dict(),
        "seed": seed,
        "iteration": iteration,
        "data_manifest_hash": data_manifest_hash,
        "format_version": 1,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_snapshot(path):
    """Load (net, sidecar) from a weights file; a missing sidecar is an error."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise SnapshotError(f"{path}: snapshot has no sidecar {sidecar_path.name}; refusing "
                            "to guess its configuration")
    sidecar = json.loads(sidecar_path.read_text())
    net = build_model(BackboneConfig.from_dict(sidecar["backbone"]))
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    net.eval()
    return net, sidecar
