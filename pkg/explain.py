"""
CLS attention maps of the final block, rendered over the input image.

The map is the CLS query row of each head's post-softmax attention, averaged
over heads and restricted to the patch keys. ``direction="key"`` reads the
CLS column instead (how much each token attends to CLS).
"""

import logging
from dataclasses import dataclass

import numpy as np
from matplotlib import colormaps
from scipy.ndimage import zoom

import numerics
from backbone import token_layout
from data import to_bytes, write_image
from errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("raw", "unit_sum")
DIRECTIONS = ("query", "key")
ORDERS = ("average_first", "drop_first")
COLORMAP = "jet"


@dataclass
class AttentionMap:
    grid: np.ndarray
    source_block: int
    normalization: str = "raw"

    @property
    def size(self):
        return self.grid.shape[0]


def _head_rows(weights, layout, direction):
    cls = layout.cls_row
    return weights[:, cls, :] if direction == "query" else weights[:, :, cls]


def cls_attention_map(record, layout, normalization="raw", direction="query", order="average_first"):
    """Head-averaged CLS attention over the patch grid.

    ``order="drop_first"`` cuts the CLS and register columns from every head
    before averaging; it differs from the default only under unit_sum, where
    each head's patch row is renormalized on its own.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigurationError(f"unknown normalization '{normalization}'")
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"unknown attention direction '{direction}'")
    if order not in ORDERS:
        raise ConfigurationError(f"unknown averaging order '{order}'")
    weights = np.asarray(record.weights, dtype=np.float64)
    tokens = layout.num_tokens
    if weights.ndim != 3 or weights.shape[1:] != (tokens, tokens):
        raise ShapeError(f"attention of shape {weights.shape} does not match {tokens} tokens")
    side = int(round(np.sqrt(len(layout.patch_rows))))
    if side * side != len(layout.patch_rows):
        raise ShapeError(f"{len(layout.patch_rows)} patches do not form a square grid")
    patch_cols = list(layout.patch_rows)
    rows = _head_rows(weights, layout, direction)
    if order == "drop_first":
        kept = rows[:, patch_cols]
        if normalization == "unit_sum":
            kept = kept / kept.sum(axis=1, keepdims=True)
        values = kept.mean(axis=0)
    else:
        values = rows.mean(axis=0)[patch_cols]
        if normalization == "unit_sum":
            values = values / values.sum()
    return AttentionMap(values.reshape(side, side), record.block_index, normalization)


def cls_row_sums(record, layout):
    """Sum over all keys of the head-averaged CLS row, per sample (1 up to rounding)."""
    weights = np.asarray(record.weights, dtype=np.float64)
    if weights.ndim == 3:
        weights = weights[None]
    return weights[:, :, layout.cls_row, :].mean(axis=1).sum(axis=-1)


def upsample(attention_map, target):
    """Bilinear upsampling of the grid to ``target`` x ``target`` pixels."""
    if target <= 0:
        raise ConfigurationError(f"upsample target must be positive, got {target}")
    grid = np.asarray(attention_map.grid, dtype=np.float64)
    factor = target / grid.shape[0]
    heat = zoom(grid, factor, order=1, mode="nearest", grid_mode=True)
    return np.clip(heat, grid.min(), grid.max())


def normalize(heat):
    low, high = float(heat.min()), float(heat.max())
    if high == low:
        return np.zeros_like(heat, dtype=np.float64)
    return (heat - low) / (high - low)


def gray(image):
    """(C, H, W) or (H, W) image -> (H, W) gray in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    return np.clip(image, 0.0, 1.0)


def overlay(image, heat, alpha=0.5):
    """(1 - alpha) * gray(image) + alpha * jet(min-max heat), as (H, W, 3) floats."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    base = gray(image)
    if base.shape != heat.shape:
        raise ShapeError(f"image {base.shape} and heat {heat.shape} differ in size")
    color = colormaps[COLORMAP](normalize(heat))[..., :3]
    return (1.0 - alpha) * np.repeat(base[..., None], 3, axis=2) + alpha * color


def heat_image(heat):
    return colormaps[COLORMAP](normalize(heat))[..., :3]


def export(rgb, path):
    """Write (H, W, 3) floats in [0, 1] as an 8-bit P6 file."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return write_image(path, to_bytes(rgb))


def montage(panels, gap=2):
    """Panels side by side on a white background."""
    height = max(panel.shape[0] for panel in panels)
    parts = []
    for i, panel in enumerate(panels):
        if panel.ndim == 2:
            panel = np.repeat(panel[..., None], 3, axis=2)
        padded = np.ones((height, panel.shape[1], 3))
        padded[: panel.shape[0]] = panel
        if i:
            parts.append(np.ones((height, gap, 3)))
        parts.append(padded)
    return np.concatenate(parts, axis=1)


def enlarge(image, scale):
    return np.kron(image, np.ones((scale, scale) + (1,) * (image.ndim - 2)))


@dataclass
class Visualization:
    attention: AttentionMap
    heat: np.ndarray
    overlay: np.ndarray
    base: np.ndarray

    def panels(self):
        return [np.repeat(self.base[..., None], 3, axis=2), heat_image(self.heat), self.overlay]


def attention_for(backbone, image):
    """Final-block attention record for one image; module modes are restored afterwards."""
    modes = [module.training for module in backbone.modules()]
    backbone.eval()
    try:
        with numerics.inference():
            record = backbone(image).attention.sample(0)
    finally:
        for module, mode in zip(backbone.modules(), modes):
            module.training = mode
    return record


def visualize(backbone, image, alpha=0.5, scale=1, normalization="raw", direction="query", order="average_first"):
    if scale < 1:
        raise ConfigurationError(f"scale must be at least 1, got {scale}")
    record = attention_for(backbone, image)
    attention = cls_attention_map(record, token_layout(backbone.config), normalization, direction, order)
    base = enlarge(gray(image), scale)
    heat = upsample(attention, base.shape[0])
    logger.debug("attention map peak at patch %d", int(attention.grid.argmax()))
    return Visualization(attention, heat, overlay(base, heat, alpha), base)


def mass_inside(attention, mask):
    """Share of the unit-sum map on patches, weighted by how much of each patch the mask covers."""
    mask = np.asarray(mask, dtype=np.float64)
    side = attention.size
    patch = mask.shape[0] // side
    coverage = mask.reshape(side, patch, side, patch).mean(axis=(1, 3))
    grid = attention.grid / attention.grid.sum()
    return float((grid * coverage).sum())
