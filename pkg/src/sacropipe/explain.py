"""Grad-CAM heatmaps and the in-box activation fraction.

Heatmaps from the anatomy-aware model live in the crop frame; they are mapped
back into the full radiograph through the stored crop box so both models are
compared in one coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import imgproc
from .anatomy import Box, SijBoxes
from .errors import CoordinateError, LayerLookupError, ShapeError


@dataclass
class HeatMap:
    values: np.ndarray
    target_class: int
    layer_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError("heatmap must be 2-D")
        if (self.values < 0).any():
            raise ValueError("heatmap values must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)


def _normalize(values: np.ndarray) -> np.ndarray:
    values = np.maximum(values, 0)
    top = values.max() if values.size else 0
    return values / top if top > 0 else np.zeros_like(values)


def find_layer(model: torch.nn.Module, layer_id: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if not layer_id or layer_id not in modules:
        raise LayerLookupError(f"model has no layer named {layer_id!r}")
    return modules[layer_id]


def grad_cam(model: torch.nn.Module, image, target_class: int, layer_id: str | None = None) -> HeatMap:
    """Grad-CAM of ``target_class`` at ``layer_id`` (default: the last conv stage).

    ``image`` is a preprocessed (H, W) array or a (1, 1, H, W) tensor. The map is
    bilinearly upsampled to (H, W) and max-normalized; an all-zero map stays zero.
    """
    if layer_id is None:
        layer_id = getattr(model, "last_conv_layer", None)
    layer = find_layer(model, layer_id)
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)) if not torch.is_tensor(image) else image
    if x.ndim == 2:
        x = x[None, None]
    x = x.float()
    store = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        store["act"] = out

    handle = layer.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
            model.zero_grad(set_to_none=True)
            logits[0, target_class].backward()
    finally:
        handle.remove()
        model.train(was_training)
    act = store["act"]
    grad = act.grad if act.grad is not None else torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)
    return HeatMap(_normalize(cam[0, 0].double().numpy()), int(target_class), layer_id)


def to_frame(heat: HeatMap, frame_shape, crop: Box | None = None) -> HeatMap:
    """Resample a heatmap into the full-image frame.

    Without ``crop`` the map covers the whole frame; with ``crop`` it covers
    that box and is zero elsewhere.
    """
    h, w = frame_shape
    if crop is None:
        vals = imgproc.resize(heat.values.astype(np.float64), h, w, "bilinear")
    else:
        if crop.row0 < 0 or crop.col0 < 0 or crop.row1 > h or crop.col1 > w or crop.area == 0:
            raise CoordinateError(f"crop box {crop} does not fit the frame {frame_shape}")
        vals = np.zeros((h, w))
        vals[crop.slices()] = imgproc.resize(heat.values.astype(np.float64), crop.height, crop.width,
                                             "bilinear")
    return HeatMap(_normalize(vals), heat.target_class, heat.layer_id)


def box_mask(boxes: SijBoxes) -> np.ndarray:
    m = np.zeros(boxes.image_shape, dtype=bool)
    m[boxes.left.slices()] = True
    m[boxes.right.slices()] = True
    return m


def activation_in_box_fraction(heat: HeatMap, boxes: SijBoxes) -> float:
    """Share of heatmap mass inside the union of the two joint boxes (0 for an empty map)."""
    if heat.shape != tuple(boxes.image_shape):
        raise CoordinateError(f"heatmap frame {heat.shape} differs from box frame "
                              f"{tuple(boxes.image_shape)}; map crop heatmaps with to_frame first")
    total = float(heat.values.sum(dtype=np.float64))
    if total == 0:
        return 0.0
    return float(heat.values[box_mask(boxes)].sum(dtype=np.float64)) / total


def overlay_rgb(image: np.ndarray, heat: HeatMap, alpha: float = 0.5) -> np.ndarray:
    """uint8 RGB overlay: grayscale image with the heatmap in the red channel."""
    if heat.shape != image.shape:
        raise CoordinateError("overlay needs the heatmap in the image frame")
    g = image.astype(np.float64)
    g = (g - g.min()) / (np.ptp(g) or 1.0)
    rgb = np.repeat(g[..., None], 3, axis=2) * (1 - alpha)
    rgb[..., 0] += alpha * heat.values
    rgb[..., 1] += alpha * 0.2 * heat.values
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
