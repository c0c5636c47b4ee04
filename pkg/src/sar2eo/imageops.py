"""Shared numerical kernels: SSIM, Gram matrices, spectra, patch grids.

Image-shaped inputs are numpy H x W (x C) arrays or ImageTile; feature-shaped
inputs are torch tensors so the same kernels stay usable inside autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import ImageTile
from .errors import ValidationError


def as_pixels(x) -> np.ndarray:
    if isinstance(x, ImageTile):
        return x.pixels
    return np.asarray(x)


def rescale(arr: np.ndarray, src_range, dst_range) -> np.ndarray:
    """Affine remap of values from src_range into dst_range."""
    (a, b), (c, d) = src_range, dst_range
    return (np.asarray(arr, dtype=np.float64) - a) / (b - a) * (d - c) + c


def resize_pixels(pixels: np.ndarray, size, mode: str = "bilinear") -> np.ndarray:
    """Resize an H x W (x C) array; same-size calls return the input untouched."""
    pixels = np.asarray(pixels)
    squeeze = pixels.ndim == 2
    if squeeze:
        pixels = pixels[:, :, None]
    if pixels.shape[:2] == tuple(size):
        return pixels[:, :, 0] if squeeze else pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode=mode, align_corners=False if mode == "bilinear" else None)
    arr = out[0].permute(1, 2, 0).numpy()
    return arr[:, :, 0] if squeeze else arr


def rgb_to_gray(t: torch.Tensor, weights=(0.299, 0.587, 0.114)) -> torch.Tensor:
    """Differentiable luminance of a (..., 3, H, W) tensor -> (..., 1, H, W)."""
    if t.shape[-3] != 3:
        raise ValidationError(f"expected 3 channels, got {t.shape[-3]}")
    w = torch.tensor(weights, dtype=t.dtype, device=t.device).view(3, 1, 1)
    return (t * w).sum(dim=-3, keepdim=True)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window (sums to 1)."""
    if size < 1:
        raise ValidationError("window size must be >= 1")
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, c1: float | None = None, c2: float | None = None, sigma: float = 1.5) -> float:
    """Structural similarity in [-1, 1]; 1 means identical.

    Local statistics use a Gaussian window evaluated only where it fits
    entirely inside the image.  Multi-channel inputs are scored per channel
    and averaged.  When c1/c2 are omitted they default to (0.01 L)^2 and
    (0.03 L)^2 with L the width of the value range ([-1, 1] unless the inputs
    are ImageTiles declaring otherwise).
    """
    if c1 is None or c2 is None:
        span = 2.0
        if isinstance(a, ImageTile):
            lo, hi = a.value_range
            span = hi - lo
        c1 = (0.01 * span) ** 2 if c1 is None else c1
        c2 = (0.03 * span) ** 2 if c2 is None else c2

    pa = np.asarray(as_pixels(a), dtype=np.float64)
    pb = np.asarray(as_pixels(b), dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValidationError(f"ssim shape mismatch: {pa.shape} vs {pb.shape}")
    if pa.ndim == 2:
        pa, pb = pa[:, :, None], pb[:, :, None]
    if pa.ndim != 3:
        raise ValidationError(f"ssim expects H x W (x C) input, got shape {pa.shape}")
    h, w, _ = pa.shape
    if window > min(h, w):
        raise ValidationError(f"ssim window {window} exceeds image dims {h}x{w}")

    kernel = torch.from_numpy(gaussian_window(window, sigma))[None, None]

    def _local(x: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(x))[None, None]
        return F.conv2d(t, kernel)[0, 0]

    scores = []
    for c in range(pa.shape[2]):
        x, y = pa[:, :, c], pb[:, :, c]
        mu_x, mu_y = _local(x), _local(y)
        var_x = _local(x * x) - mu_x * mu_x
        var_y = _local(y * y) - mu_y * mu_y
        cov = _local(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append((num / den).mean().item())
    return float(np.mean(scores))


def gram_matrix(feature) -> torch.Tensor:
    """Channel co-activation matrix G[i, j] = sum_hw F_i F_j / (C H W).

    Accepts (C, H, W) or (B, C, H, W); symmetric positive semidefinite by
    construction.  Stays inside autograd when given a tensor that requires
    gradients.
    """
    t = feature if isinstance(feature, torch.Tensor) else torch.as_tensor(np.asarray(feature))
    if t.dim() == 3:
        c, h, w = t.shape
        if t.numel() == 0:
            raise ValidationError("gram_matrix requires a nonempty feature map")
        flat = t.reshape(c, h * w)
        return flat @ flat.t() / (c * h * w)
    if t.dim() == 4:
        b, c, h, w = t.shape
        if t.numel() == 0:
            raise ValidationError("gram_matrix requires a nonempty feature map")
        flat = t.reshape(b, c, h * w)
        return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)
    raise ValidationError(f"gram_matrix expects (B,)C x H x W, got shape {tuple(t.shape)}")


def spectrum(tile) -> torch.Tensor:
    """2-D discrete Fourier transform of a single-channel image."""
    p = as_pixels(tile)
    t = p if isinstance(p, torch.Tensor) else torch.as_tensor(np.asarray(p))
    if t.dim() == 3:
        if t.shape[2] != 1:
            raise ValidationError(f"spectrum expects a single channel, got {t.shape[2]}")
        t = t[:, :, 0]
    if t.dim() != 2:
        raise ValidationError(f"spectrum expects an H x W image, got shape {tuple(t.shape)}")
    return torch.fft.fft2(t)


@dataclass
class PatchGrid:
    """R x S grid of equally sized tiles cut from one source image.

    The grid always covers the (possibly reflect-padded) source; source_dims
    records the original extent so stitching can crop back exactly.
    """

    patches: np.ndarray  # R x S x tile x tile x C
    tile_size: int
    source_dims: tuple
    overlap: int
    value_range: tuple = (-1.0, 1.0)

    @property
    def rows(self) -> int:
        return self.patches.shape[0]

    @property
    def cols(self) -> int:
        return self.patches.shape[1]


def _grid_count(extent: int, tile_size: int, stride: int) -> int:
    if extent <= tile_size:
        return 1
    return int(np.ceil((extent - tile_size) / stride)) + 1


def partition(image, tile_size: int, overlap: int = 0) -> PatchGrid:
    """Cut an image into a covering grid of tile_size squares.

    Right/bottom remainders are handled by reflect-padding the source up to a
    whole number of tiles.
    """
    value_range = image.value_range if isinstance(image, ImageTile) else (-1.0, 1.0)
    pixels = as_pixels(image)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    if tile_size > h or tile_size > w:
        raise ValidationError(f"tile_size {tile_size} larger than image {h}x{w}")
    if not 0 <= overlap < tile_size:
        raise ValidationError(f"overlap must satisfy 0 <= overlap < tile_size, got {overlap}")

    stride = tile_size - overlap
    rows = _grid_count(h, tile_size, stride)
    cols = _grid_count(w, tile_size, stride)
    padded_h = (rows - 1) * stride + tile_size
    padded_w = (cols - 1) * stride + tile_size
    padded = np.pad(pixels, ((0, padded_h - h), (0, padded_w - w), (0, 0)), mode="reflect")

    patches = np.empty((rows, cols, tile_size, tile_size, c), dtype=pixels.dtype)
    for r in range(rows):
        for s in range(cols):
            y, x = r * stride, s * stride
            patches[r, s] = padded[y : y + tile_size, x : x + tile_size]
    return PatchGrid(
        patches=patches,
        tile_size=tile_size,
        source_dims=(h, w),
        overlap=overlap,
        value_range=value_range,
    )


def _feather_join(left: np.ndarray, right: np.ndarray, overlap: int, axis: int) -> np.ndarray:
    """Join two arrays overlapping by `overlap` samples along `axis`.

    Blend weights ramp linearly and exclude 0/1 endpoints; the update form
    ``right + w * (left - right)`` keeps constant inputs bit-exact.
    """
    if overlap == 0:
        return np.concatenate([left, right], axis=axis)
    lead = left.take(range(left.shape[axis] - overlap), axis=axis)
    tail_left = left.take(range(left.shape[axis] - overlap, left.shape[axis]), axis=axis)
    head_right = right.take(range(overlap), axis=axis)
    rest = right.take(range(overlap, right.shape[axis]), axis=axis)
    w = (overlap - np.arange(overlap, dtype=np.float64)) / (overlap + 1.0)
    shape = [1] * left.ndim
    shape[axis] = overlap
    w = w.reshape(shape)
    blended = head_right + w * (tail_left - head_right)
    return np.concatenate([lead, blended.astype(left.dtype, copy=False), rest], axis=axis)


def stitch(grid: PatchGrid) -> ImageTile:
    """Reassemble a PatchGrid into an image of the recorded source_dims.

    Overlapping regions are blended by linear feathering; with overlap 0 the
    round trip stitch(partition(x)) == x is bit-exact.
    """
    patches = grid.patches
    if patches.ndim != 5:
        raise ValidationError("grid patches must be R x S x tile x tile x C")
    t = grid.tile_size
    if patches.shape[2] != t or patches.shape[3] != t:
        raise ValidationError("inconsistent patch shapes in grid")

    row_strips = []
    for r in range(grid.rows):
        strip = patches[r, 0]
        for s in range(1, grid.cols):
            strip = _feather_join(strip, patches[r, s], grid.overlap, axis=1)
        row_strips.append(strip)
    full = row_strips[0]
    for r in range(1, grid.rows):
        full = _feather_join(full, row_strips[r], grid.overlap, axis=0)

    h, w = grid.source_dims
    return ImageTile(pixels=full[:h, :w], value_range=grid.value_range)
