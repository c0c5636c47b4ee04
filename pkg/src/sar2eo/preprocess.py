"""SAR tile preparation: despeckling, grayscale, edge maps, input triplets.

The translation network consumes three views of each SAR tile: the despeckled
RGB texture input, and a 2-channel structure input stacking a binary edge map
with the grayscale image.  All three are produced here from one raw tile.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.ndimage import uniform_filter
from skimage.feature import canny

from .config import PreprocessConfig
from .dataio import ImageTile
from .errors import ValidationError
from .imageops import rescale

# Keeps the speckle-variance estimate strictly positive on tiles whose
# flattest windows are noiseless, so the filter never degenerates to an
# identity around isolated bright points.
NOISE_FLOOR_FRACTION = 0.01


@dataclass
class SampleTriplet:
    """Network inputs for one tile: 2ch structure, 3ch texture, optional target."""

    structure_input: torch.Tensor  # 2 x H x W; channel 0 binary edges, channel 1 grayscale
    texture_input: torch.Tensor  # 3 x H x W despeckled RGB
    target: Optional[torch.Tensor]  # 3 x H x W EO tile, absent at inference

    def __post_init__(self):
        if self.structure_input.shape[0] != 2:
            raise ValidationError("structure input must have 2 channels")
        if self.texture_input.shape[0] != 3:
            raise ValidationError("texture input must have 3 channels")
        shapes = {tuple(self.structure_input.shape[1:]), tuple(self.texture_input.shape[1:])}
        if self.target is not None:
            if self.target.shape[0] != 3:
                raise ValidationError("target must have 3 channels")
            shapes.add(tuple(self.target.shape[1:]))
        if len(shapes) != 1:
            raise ValidationError(f"triplet members disagree on spatial dims: {shapes}")
        edge = self.structure_input[0]
        if not bool(((edge == 0) | (edge == 1)).all()):
            raise ValidationError("structure channel 0 must be binary")


def despeckle(tile: ImageTile, window: int = 5) -> ImageTile:
    """Suppress speckle with a local-statistics linear MMSE (Lee) filter.

    Per pixel: out = m + k (x - m) with local mean m, local variance v, and
    gain k = max(0, (v - n) / v).  The noise power n is the mean variance of
    the flattest decile of windows, floored at NOISE_FLOOR_FRACTION of the
    tile variance.  Homogeneous regions collapse toward their mean; constant
    tiles are fixed points.
    """
    if window < 3 or window % 2 == 0:
        raise ValidationError(f"despeckle window must be an odd integer >= 3, got {window}")
    pixels = tile.pixels.astype(np.float64)
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        x = pixels[:, :, c]
        mean = uniform_filter(x, size=window, mode="reflect")
        sq_mean = uniform_filter(x * x, size=window, mode="reflect")
        var = np.maximum(sq_mean - mean * mean, 0.0)

        flattest = np.sort(var, axis=None)[: max(1, var.size // 10)]
        noise = float(flattest.mean())
        noise = max(noise, NOISE_FLOOR_FRACTION * float(x.var()))

        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(var > 0, np.clip((var - noise) / np.where(var > 0, var, 1.0), 0.0, 1.0), 0.0)
        out[:, :, c] = mean + gain * (x - mean)
    lo, hi = tile.value_range
    return ImageTile(pixels=np.clip(out, lo, hi).astype(np.float32), value_range=tile.value_range)


def to_grayscale(rgb: ImageTile, weights=(0.299, 0.587, 0.114)) -> ImageTile:
    """Collapse RGB to luminance with a convex channel combination."""
    if rgb.channels != 3:
        raise ValidationError(f"to_grayscale expects 3 channels, got {rgb.channels}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-6:
        raise ValidationError(f"grayscale weights must be convex (>=0, sum 1), got {weights}")
    gray = rgb.pixels.astype(np.float64) @ w
    return ImageTile(pixels=gray.astype(np.float32)[:, :, None], value_range=rgb.value_range)


def canny_edges(gray: ImageTile, low: float = 0.1, high: float = 0.2, sigma: float = 1.4) -> ImageTile:
    """Binary edge map via Canny hysteresis on the [0, 1]-rescaled image.

    Thresholds apply to the gradient magnitude of the Gaussian-smoothed,
    [0, 1]-rescaled input, so they are invariant to the tile's stored range.
    """
    if gray.channels != 1:
        raise ValidationError(f"canny_edges expects a single channel, got {gray.channels}")
    if not 0 <= low < high:
        raise ValidationError(f"canny thresholds must satisfy 0 <= low < high, got {low}, {high}")
    img01 = rescale(gray.pixels[:, :, 0], gray.value_range, (0.0, 1.0))
    edges = canny(img01, sigma=sigma, low_threshold=low, high_threshold=high)
    return ImageTile(pixels=edges.astype(np.float32)[:, :, None], value_range=(0.0, 1.0))


def _chw(tile: ImageTile) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(tile.pixels.transpose(2, 0, 1), dtype=np.float32))


def assemble_triplet(
    sar_rgb: ImageTile,
    eo_rgb: Optional[ImageTile] = None,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> SampleTriplet:
    """Run the despeckle -> grayscale -> edge chain and pack the network inputs.

    Inputs are never mutated; the target slot stays empty at inference time.
    """
    if sar_rgb.channels != 3:
        raise ValidationError(f"SAR input must be RGB, got {sar_rgb.channels} channels")
    textured = despeckle(sar_rgb, window=cfg.despeckle_window)
    gray = to_grayscale(textured, weights=cfg.grayscale_weights)
    edge = canny_edges(gray, low=cfg.canny_low, high=cfg.canny_high, sigma=cfg.canny_sigma)

    structure = torch.cat([_chw(edge), _chw(gray)], dim=0)
    texture = _chw(textured)
    target = _chw(eo_rgb) if eo_rgb is not None else None
    return SampleTriplet(structure_input=structure, texture_input=texture, target=target)


def edge_and_gray_views(image: torch.Tensor, cfg: PreprocessConfig = PreprocessConfig()):
    """Edge and grayscale views of a batched (B, 3, H, W) image in [-1, 1].

    The grayscale view stays differentiable; the edge view is recomputed with
    the same Canny settings used for the structure input and is detached from
    the graph by construction.
    """
    gray = rgb_to_gray_batched(image, cfg.grayscale_weights)
    edges = []
    for i in range(image.shape[0]):
        g = gray[i, 0].detach().cpu().numpy().astype(np.float32)
        tile = ImageTile(pixels=g[:, :, None], value_range=(-1.0, 1.0))
        e = canny_edges(tile, low=cfg.canny_low, high=cfg.canny_high, sigma=cfg.canny_sigma)
        edges.append(torch.from_numpy(e.pixels[:, :, 0]))
    edge = torch.stack(edges)[:, None].to(dtype=image.dtype, device=image.device)
    return edge, gray


def rgb_to_gray_batched(image: torch.Tensor, weights=(0.299, 0.587, 0.114)) -> torch.Tensor:
    from .imageops import rgb_to_gray

    return rgb_to_gray(image, weights)
