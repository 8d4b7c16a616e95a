"""Guided Grad-CAM for regression outputs, cohort aggregation, and
localization scoring against phantom structure masks.

The backpropagated scalar is the standardized mean output of the chosen
target; the variance head never drives saliency.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy import ndimage

from . import _kernels
from .model import RegressionNet
from .phantom import DEFAULT_GRID, label_volume

SUPPORTED_MODULES = (
    RegressionNet, nn.Sequential, nn.Conv2d, nn.BatchNorm2d, nn.ReLU,
    nn.Linear, nn.AvgPool2d,
)

STRUCTURE_LABELS = {
    "vat": (_kernels.LBL_VAT,),
    "subq": (_kernels.LBL_SUBQ,),
    "liver": (_kernels.LBL_LIVER,),
    "thigh_left": (_kernels.LBL_THIGH_LEFT,),
    "thigh_right": (_kernels.LBL_THIGH_RIGHT,),
    "lean": (_kernels.LBL_TORSO, _kernels.LBL_THIGH_LEFT, _kernels.LBL_THIGH_RIGHT),
    "body": (1, 2, 3, 4, 5, 6),
}

TARGET_STRUCTURE = {
    "vat_ml": "vat",
    "subq_ml": "subq",
    "liver_fat_pct": "liver",
    "thigh_left_ml": "thigh_left",
    "thigh_right_ml": "thigh_right",
    "lean_ml": "lean",
    "stature_mm": "body",
}


class SaliencyError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray  # nonnegative float64 (H, W)
    subject_id: str  # or "aggregate"
    target_name: str
    normalization: str = "raw"  # raw | unit_max
    n_subjects: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise SaliencyError("saliency values must be nonnegative")
        if self.normalization not in ("raw", "unit_max"):
            raise SaliencyError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "unit_max":
            m = self.values.max()
            if m != 0.0 and not np.isclose(m, 1.0, rtol=0, atol=1e-9):
                raise SaliencyError(f"unit_max map has max {m}")

    def to_unit_max(self) -> "SaliencyMap":
        m = self.values.max()
        vals = self.values / m if m > 0 else self.values
        return SaliencyMap(vals, self.subject_id, self.target_name,
                           "unit_max", self.n_subjects)


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, C) image -> float (1, C, H, W) in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise SaliencyError(f"expected (H, W, C) pixels, got shape {arr.shape}")
    x = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    return torch.from_numpy(np.transpose(x, (2, 0, 1)))[None]


def _check_architecture(net: nn.Module):
    for m in net.modules():
        if not isinstance(m, SUPPORTED_MODULES):
            raise SaliencyError(
                f"unsupported module {type(m).__name__}: guided backprop is defined "
                "for ReLU architectures only")


def grad_cam(net: RegressionNet, img, target_index: int, layer: nn.Module = None) -> SaliencyMap:
    """Gradient-weighted activation map for one target's mean output.

    Channel weights are the spatial means of d(mu_z)/d(activation) at the
    chosen layer (default: last conv block); the weighted activation sum is
    rectified and bilinearly upsampled to the input resolution.
    """
    net.eval()
    if layer is None:
        layer = net.last_conv_block
    x = image_to_tensor(img if isinstance(img, np.ndarray) else img.pixels)
    captured = {}
    handle = layer.register_forward_hook(lambda m, i, o: captured.__setitem__("a", o))
    try:
        out = net(x)
    finally:
        handle.remove()
    acts = captured["a"]
    if acts.dim() != 4:
        raise SaliencyError(f"layer output has no spatial extent: shape {tuple(acts.shape)}")
    mu = out[0, target_index]
    grads = torch.autograd.grad(mu, acts)[0]
    alpha = grads.mean(dim=(2, 3))
    cam = torch.relu((alpha[:, :, None, None] * acts).sum(dim=1))[0].detach()
    up = _kernels.resize_bilinear(cam.numpy().astype(np.float64),
                                  x.shape[2], x.shape[3])
    sid = getattr(img, "subject_id", "")
    tname = str(target_index)
    return SaliencyMap(up, sid, tname)


def guided_backprop(net: RegressionNet, img, target_index: int) -> np.ndarray:
    """Input-space gradient of the target mean with the guided ReLU rule
    (gradient passes only where the activation and the gradient are positive).
    Returns a signed float64 (C, H, W) array.
    """
    net.eval()
    _check_architecture(net)
    outputs = {}
    handles = []

    def fwd(module, inp, out):
        outputs[module] = out

    def bwd(module, grad_in, grad_out):
        return (torch.clamp(grad_out[0], min=0.0) * (outputs[module] > 0),)

    for m in net.modules():
        if isinstance(m, nn.ReLU):
            handles.append(m.register_forward_hook(fwd))
            handles.append(m.register_full_backward_hook(bwd))
    try:
        x = image_to_tensor(img if isinstance(img, np.ndarray) else img.pixels)
        x.requires_grad_(True)
        out = net(x)
        grad = torch.autograd.grad(out[0, target_index], x)[0][0]
    finally:
        for h in handles:
            h.remove()
    return grad.detach().numpy().astype(np.float64)


def guided_grad_cam(net: RegressionNet, img, target_index: int, target_name: str = "",
                    layer: nn.Module = None) -> SaliencyMap:
    """Elementwise product of rectified guided-backprop evidence (channel mean)
    and the upsampled activation map."""
    cam = grad_cam(net, img, target_index, layer=layer)
    gbp = guided_backprop(net, img, target_index)
    evidence = np.maximum(gbp, 0.0).mean(axis=0)
    sid = getattr(img, "subject_id", "")
    return SaliencyMap(evidence * cam.values, sid,
                       target_name or str(target_index))


def aggregate_saliency(maps) -> SaliencyMap:
    """Pixelwise mean of unit-max maps of one target, renormalized to unit max."""
    if not maps:
        raise SaliencyError("nothing to aggregate")
    target = maps[0].target_name
    for m in maps:
        if m.target_name != target:
            raise SaliencyError(f"mixed targets in aggregation: {m.target_name!r} "
                                f"vs {target!r}")
        if m.normalization != "unit_max":
            raise SaliencyError("aggregation requires unit_max-normalized maps")
    mean = np.mean([m.values for m in maps], axis=0)
    peak = mean.max()
    if peak > 0:
        mean = mean / peak
    return SaliencyMap(mean, "aggregate", target, "unit_max",
                       n_subjects=sum(m.n_subjects for m in maps))


def localization_score(smap: SaliencyMap, mask: np.ndarray) -> dict:
    """Saliency mass inside the mask, absolute and relative to mask area."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != smap.values.shape:
        raise SaliencyError(f"mask shape {mask.shape} != map shape {smap.values.shape}")
    area = mask.mean()
    if area == 0:
        raise SaliencyError("empty mask")
    total = smap.values.sum()
    if total == 0:
        raise SaliencyError("identically zero saliency map")
    mass_fraction = float(smap.values[mask].sum() / total)
    return {"mass_fraction": mass_fraction, "enrichment": float(mass_fraction / area)}


def _projection_canvas(binary: np.ndarray, out_size: int) -> np.ndarray:
    """Two-view boolean canvas of a binary volume (any-voxel projection)."""
    half = out_size // 2
    cor = binary.any(axis=1).astype(np.float64)
    sag = binary.any(axis=2).astype(np.float64)
    canvas = np.empty((out_size, out_size), dtype=np.float64)
    canvas[:, :half] = _kernels.resize_bilinear(cor, out_size, half)
    canvas[:, half:] = _kernels.resize_bilinear(sag, out_size, half)
    return canvas


def structure_projection_mask(params, structure: str, grid=DEFAULT_GRID,
                              cohort=None, out_size: int = 256,
                              dilate_px: int = 3) -> np.ndarray:
    """Binarized two-view projection of one subject's structure labels,
    dilated to absorb upsampling blur."""
    labels = label_volume(params, grid, cohort)
    binary = np.isin(labels, STRUCTURE_LABELS[structure])
    mask = _projection_canvas(binary, out_size) > 0
    if dilate_px:
        mask = ndimage.binary_dilation(mask, iterations=dilate_px)
    return mask


def cohort_structure_mask(params_list, structure: str, grid=DEFAULT_GRID,
                          cohort=None, out_size: int = 256, dilate_px: int = 3,
                          vote: float = 0.5) -> np.ndarray:
    """Majority-vote mask across subjects (shared phantom frame), then dilation."""
    acc = np.zeros((out_size, out_size), dtype=np.float64)
    for p in params_list:
        labels = label_volume(p, grid, cohort)
        binary = np.isin(labels, STRUCTURE_LABELS[structure])
        acc += _projection_canvas(binary, out_size) > 0
    mask = acc >= vote * len(params_list)
    if dilate_px:
        mask = ndimage.binary_dilation(mask, iterations=dilate_px)
    return mask


def save_saliency_png(smap: SaliencyMap, path) -> Path:
    """16-bit grayscale PNG plus a JSON sidecar with scale and metadata."""
    path = Path(path)
    peak = float(smap.values.max())
    scale = peak if peak > 0 else 1.0
    pixels = np.floor(smap.values / scale * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(pixels, mode="I;16").save(path)
    sidecar = {
        "target": smap.target_name,
        "normalization": smap.normalization,
        "subject_count": smap.n_subjects,
        "subject_id": smap.subject_id,
        "scale": scale,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_saliency_png(path) -> SaliencyMap:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    arr = np.asarray(Image.open(path), dtype=np.float64) / 65535.0 * sidecar["scale"]
    return SaliencyMap(arr, sidecar["subject_id"], sidecar["target"],
                       sidecar["normalization"], sidecar["subject_count"])
