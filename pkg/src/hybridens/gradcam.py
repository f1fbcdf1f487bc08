"""Class-discriminative activation heatmaps for a trained MicroNet.

Channel importances are spatial means of the class-score gradient at the
final convolutional layer; the map is the ReLU of the importance-weighted
channel sum, bilinearly upsampled to input resolution for overlay rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import bilinear_resize
from .microcnn import MicroNet, class_score_gradient, forward


@dataclass
class CamHeatmap:
    map: np.ndarray
    source_layer: str
    class_id: int


def channel_importance(grads: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a (C, H, W) gradient stack."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 3 or grads.shape[0] < 1:
        raise ValueError(f"expected a nonempty (C, H, W) stack, got {grads.shape}")
    return grads.mean(axis=(1, 2))


def compute_cam(alpha: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """ReLU of the importance-weighted channel sum; entries are >= 0."""
    alpha = np.asarray(alpha, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 3 or alpha.shape != (activations.shape[0],):
        raise ValueError(
            f"channel mismatch: {alpha.shape} importances vs {activations.shape} activations"
        )
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


def explain(net: MicroNet, image: np.ndarray, class_id: int = 1) -> CamHeatmap:
    """Heatmap at input resolution for one grayscale image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    batch = image[None, None, :, :]
    _, cache = forward(net, batch, training=False)
    grads = class_score_gradient(net, cache, class_id)[0]
    activations = cache.conv_activation[0]
    cam = compute_cam(channel_importance(grads), activations)
    upsampled = bilinear_resize(cam, image.shape[0], image.shape[1])
    # Upsampling can undershoot zero by rounding error; the map is nonnegative.
    upsampled = np.maximum(upsampled, 0.0)
    return CamHeatmap(
        map=upsampled,
        source_layer=f"layer{net.final_conv_index}:conv2d",
        class_id=class_id,
    )


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; an all-constant map normalizes to all zeros."""
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Fixed blue-to-red map: 0 -> blue, 1 -> red, as float RGB in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def render_overlay(cam: CamHeatmap, image: np.ndarray) -> np.ndarray:
    """Blend the colormapped heatmap over the grayscale image as uint8 RGB.

    The 0.5 overlay opacity is scaled by the normalized heat, so zero-heat
    pixels show the untouched grayscale image.
    """
    image = np.asarray(image, dtype=np.float64)
    heat = cam.map
    if heat.shape != image.shape:
        heat = bilinear_resize(heat, image.shape[0], image.shape[1])
    v = normalize_cam(heat)
    color = colormap_blue_red(v)
    gray = np.repeat(np.clip(image, 0.0, 1.0)[:, :, None], 3, axis=2)
    a = (0.5 * v)[:, :, None]
    blended = (1.0 - a) * gray + a * color
    return np.rint(blended * 255.0).astype(np.uint8)
