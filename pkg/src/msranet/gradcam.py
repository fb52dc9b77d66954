"""Gradient-weighted class activation maps, colour overlays and PNG export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import ConfigError, DataError, IOFailure, ShapeError
from .layers import Mode
from .model import Model, forward
from .tensor import GradTape, Tensor, backward, select

LAYERS = ("F1_att", "F2_att", "F_merged")
DEFAULT_LAYER = "F_merged"

# piecewise-linear colormap: position -> RGB in [0, 1]
ANCHORS = np.array([0.0, 0.35, 0.65, 1.0])
ANCHOR_RGB = np.array(
    [
        [0.0, 0.0, 1.0],  # blue
        [0.0, 1.0, 1.0],  # cyan
        [1.0, 1.0, 0.0],  # yellow
        [1.0, 0.0, 0.0],  # red
    ]
)


@dataclass
class Heatmap:
    values: np.ndarray  # [S, S] in [0, 1]
    layer: str
    class_id: int
    alpha: np.ndarray | None = None  # channel weights, kept for inspection


def _normalize_max(m: np.ndarray) -> np.ndarray:
    peak = m.max() if m.size else 0.0
    return m / peak if peak > 0 else np.zeros_like(m)


def cam_from_gradients(acts: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(alpha, map) from one ``[H, W, C]`` activation and its gradient.

    ``alpha`` is the spatial mean of the gradient per channel; the map is the
    rectified alpha-weighted channel sum, divided by its maximum.
    """
    alpha = grads.mean(axis=(0, 1))
    cam = np.maximum((acts * alpha).sum(axis=-1), 0)
    return alpha, _normalize_max(cam)


def heatmap(model: Model, image, class_id: int | None = None, layer: str = DEFAULT_LAYER) -> Heatmap:
    """Grad-CAM of one normalized ``[S, S, 3]`` image for ``class_id`` at ``layer``.

    The target is the pre-softmax logit. ``class_id=None`` uses the predicted
    class. The map is resized to ``S x S`` and lies in [0, 1].
    """
    if layer not in LAYERS:
        raise ConfigError(f"unknown Grad-CAM layer {layer!r}; choose from {', '.join(LAYERS)}")
    if model.fusion is None and layer != "F_merged":
        raise ConfigError(f"layer {layer!r} does not exist in the F1-only variant")
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim != 3:
        raise ShapeError(f"expected one [S, S, 3] image, got {list(img.shape)}")
    n = model.config.n_classes
    with GradTape() as tape:
        probs, cache = forward(model, img[None].astype(model.head.d1.weight.dtype), Mode.EVAL)
        if class_id is None:
            class_id = int(np.argmax(probs.data[0]))
        if not 0 <= class_id < n:
            raise DataError(f"class id {class_id} out of range [0, {n})")
        target = select(cache["logits"], (0, class_id))
    acts = cache[layer]
    g = backward(target, tape, wrt=[acts])[acts]
    alpha, cam = cam_from_gradients(acts.data[0].astype(np.float64), g.data[0].astype(np.float64))
    s = img.shape[0]
    up = kernels.bilinear(cam[None, :, :, None], s, s)[0, :, :, 0]
    return Heatmap(np.clip(up, 0, 1), layer, class_id, alpha)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map heat values in [0, 1] to RGB in [0, 1] through the fixed anchors."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    return np.stack([np.interp(v, ANCHORS, ANCHOR_RGB[:, c]) for c in range(3)], axis=-1)


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] reals to uint8, rounding halves up."""
    return np.floor(np.clip(x, 0, 1) * 255 + 0.5).astype(np.uint8)


def colormap_overlay(image: np.ndarray, hm: Heatmap | np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend ``(1 - alpha) * image + alpha * colormap(hm)`` and quantize to 8-bit RGB."""
    if not 0 <= alpha <= 1:
        raise ConfigError("overlay alpha must be in [0, 1]")
    values = hm.values if isinstance(hm, Heatmap) else np.asarray(hm)
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != values.shape:
        raise ShapeError(f"image {list(img.shape[:2])} and heatmap {list(values.shape)} differ in size")
    return quantize((1 - alpha) * img + alpha * colormap(values))


def write_png(img: np.ndarray, path) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"write_png expects uint8 [H, W, 3], got {arr.dtype} {list(arr.shape)}")
    try:
        Image.fromarray(arr, "RGB").save(Path(path), format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def triptych_names(sample: str, class_label: str, layer: str) -> dict[str, str]:
    return {kind: f"{sample}_{class_label}_{layer}_{kind}.png" for kind in ("orig", "heat", "overlay")}


def top_decile_fraction(values: np.ndarray, region: tuple[slice, slice]) -> float:
    """Share of the top-decile heat mass that falls inside ``region``."""
    v = np.asarray(values, dtype=np.float64)
    cut = np.quantile(v, 0.9)
    top = np.where(v >= cut, v, 0.0)
    total = top.sum()
    if total == 0:
        return 0.0
    return float(top[region].sum() / total)
