"""Paired SAR/EO tile ingestion: manifests, PNG raster I/O, and augmentation.

A manifest is a UTF-8 file with one JSON object per line::

    {"sar_path": "a_sar.png", "eo_path": "a_eo.png", "split": "train",
     "acquisition_gap_days": 0.5}

Relative image paths are resolved against the manifest's directory.  Rows
violating the pairing rules are not fatal: they are dropped and reported as
itemized diagnostics so a single bad pair cannot poison a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import MissingAssetError, ValidationError

SPLITS = ("train", "val", "test")

# Entries admitted to training must have been acquired close enough together
# that the scene content matches.
MAX_TRAIN_GAP_DAYS = 1.0


@dataclass
class ImageTile:
    """H x W x C raster with pixels normalized into a closed value range."""

    pixels: np.ndarray
    value_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] < 1:
            raise ValidationError(f"tile pixels must be H x W x C, got shape {self.pixels.shape}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValidationError(f"invalid value range {self.value_range}")
        if self.pixels.size:
            pmin, pmax = float(self.pixels.min()), float(self.pixels.max())
            if pmin < lo - 1e-5 or pmax > hi + 1e-5:
                raise ValidationError(
                    f"pixels [{pmin}, {pmax}] fall outside declared range [{lo}, {hi}]"
                )
            # Tolerate float round-off at the boundaries, then pin exactly.
            self.pixels = np.clip(self.pixels, lo, hi)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ManifestEntry:
    sar_path: Path
    eo_path: Path
    split: str
    acquisition_gap_days: float


class ManifestLoad(NamedTuple):
    entries: list
    rejections: list


def _image_size(path: Path):
    try:
        with Image.open(path) as img:
            return img.size
    except Exception as exc:
        raise ValidationError(f"unreadable raster {path}: {exc}") from exc


def load_manifest(path) -> ManifestLoad:
    """Parse and validate a manifest.

    Returns the accepted entries plus one diagnostic string per rejected row.
    Only a missing manifest file raises; per-row problems (malformed JSON,
    missing keys, unresolvable or unreadable images, mismatched dimensions,
    stale train pairs, duplicate pairs across splits) become diagnostics.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAssetError(f"manifest not found: {path}")

    entries: list[ManifestEntry] = []
    rejections: list[str] = []
    seen_pairs: dict[tuple, str] = {}

    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            rejections.append(f"{where}: malformed JSON ({exc.msg})")
            continue
        try:
            sar = (path.parent / row["sar_path"]).resolve()
            eo = (path.parent / row["eo_path"]).resolve()
            split = row["split"]
            gap = float(row["acquisition_gap_days"])
        except (KeyError, TypeError, ValueError) as exc:
            rejections.append(f"{where}: missing or malformed field ({exc})")
            continue

        if split not in SPLITS:
            rejections.append(f"{where}: unknown split {split!r}")
            continue
        if gap < 0:
            rejections.append(f"{where}: acquisition_gap_days must be >= 0, got {gap}")
            continue
        if split == "train" and gap > MAX_TRAIN_GAP_DAYS:
            rejections.append(
                f"{where}: acquisition gap {gap} days exceeds the "
                f"{MAX_TRAIN_GAP_DAYS}-day limit for training pairs"
            )
            continue
        missing = [p for p in (sar, eo) if not p.is_file()]
        if missing:
            rejections.append(f"{where}: unresolvable image path(s): {', '.join(map(str, missing))}")
            continue
        try:
            sar_size = _image_size(sar)
            eo_size = _image_size(eo)
        except ValidationError as exc:
            rejections.append(f"{where}: {exc}")
            continue
        if sar_size != eo_size:
            rejections.append(
                f"{where}: dimension mismatch, SAR {sar_size[0]}x{sar_size[1]} vs "
                f"EO {eo_size[0]}x{eo_size[1]}"
            )
            continue
        pair = (str(sar), str(eo))
        if pair in seen_pairs and seen_pairs[pair] != split:
            rejections.append(f"{where}: pair already assigned to split {seen_pairs[pair]!r}")
            continue
        seen_pairs[pair] = split
        entries.append(ManifestEntry(sar_path=sar, eo_path=eo, split=split, acquisition_gap_days=gap))

    return ManifestLoad(entries=entries, rejections=rejections)


def load_tile(path, target_range=(-1.0, 1.0)) -> ImageTile:
    """Load an 8-bit PNG (1 or 3 channels) and rescale linearly into target_range."""
    path = Path(path)
    if not path.is_file():
        raise MissingAssetError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                raise ValidationError(
                    f"unsupported raster mode {img.mode!r} in {path}; expected 8-bit L or RGB"
                )
            arr = np.asarray(img, dtype=np.float32)
    except ValidationError:
        raise
    except Exception as exc:
        raise ValidationError(f"corrupt or unreadable image {path}: {exc}") from exc
    lo, hi = target_range
    pixels = arr / 255.0 * (hi - lo) + lo
    return ImageTile(pixels=pixels.astype(np.float32), value_range=(float(lo), float(hi)))


def save_tile(tile: ImageTile, path, text: dict | None = None) -> None:
    """Write a tile as 8-bit PNG, inverting the load_tile rescaling.

    Optional `text` entries are embedded as PNG tEXt chunks (used for
    provenance blocks); the encoder is deterministic, so identical tiles and
    text produce byte-identical files.
    """
    lo, hi = tile.value_range
    arr = (tile.pixels.astype(np.float64) - lo) / (hi - lo) * 255.0
    arr = np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ValidationError(f"cannot encode {arr.shape[2]}-channel tile as PNG")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if text:
        from PIL.PngImagePlugin import PngInfo

        info = PngInfo()
        for key, value in sorted(text.items()):
            info.add_text(key, value)
        img.save(path, pnginfo=info)
    else:
        img.save(path)


@dataclass(frozen=True)
class AugmentPlan:
    """A concrete geometric transform, drawn once and applied to both tiles."""

    resize_to: int
    crop_y: int
    crop_x: int
    crop_size: int
    hflip: bool


def draw_augment_plan(seed: int, resize_to: int = 286, crop_size: int = 256) -> AugmentPlan:
    """Draw resize/crop/flip parameters deterministically from a seed."""
    if crop_size > resize_to:
        raise ValidationError(
            f"resized tile ({resize_to}) smaller than crop size ({crop_size})"
        )
    rng = np.random.default_rng(seed)
    margin = resize_to - crop_size
    crop_y = int(rng.integers(0, margin + 1))
    crop_x = int(rng.integers(0, margin + 1))
    hflip = bool(rng.random() < 0.5)
    return AugmentPlan(resize_to=resize_to, crop_y=crop_y, crop_x=crop_x, crop_size=crop_size, hflip=hflip)


def apply_augment_plan(tile: ImageTile, plan: AugmentPlan) -> ImageTile:
    from .imageops import resize_pixels

    if tile.height < 2 or tile.width < 2:
        raise ValidationError("tile too small to augment")
    pixels = resize_pixels(tile.pixels, (plan.resize_to, plan.resize_to))
    pixels = pixels[plan.crop_y : plan.crop_y + plan.crop_size, plan.crop_x : plan.crop_x + plan.crop_size]
    if plan.hflip:
        pixels = pixels[:, ::-1]
    return ImageTile(pixels=np.ascontiguousarray(pixels), value_range=tile.value_range)


def augment(sar: ImageTile, eo: ImageTile, seed: int, resize_to: int = 286, crop_size: int = 256):
    """Apply one identical geometric transform to a matched SAR/EO pair."""
    if (sar.height, sar.width) != (eo.height, eo.width):
        raise ValidationError(
            f"pair dimensions differ: SAR {sar.height}x{sar.width} vs EO {eo.height}x{eo.width}"
        )
    plan = draw_augment_plan(seed, resize_to=resize_to, crop_size=crop_size)
    return apply_augment_plan(sar, plan), apply_augment_plan(eo, plan)
