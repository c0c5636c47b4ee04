"""Translation-transparency tools.

Three independent signals tell an analyst how much to trust a translation:

  * a confidence heatmap rendered from the discriminator's probability map,
    overlaid on the translated image (red = confident, blue = not);
  * a scalar confidence percentage from a Siamese embedder comparing the SAR
    input with the translated optical image;
  * a spatial-consistency graph scoring the SSIM of facing strips between
    every pair of adjacent translated patches.

`assess` runs all three over a (possibly tiled) translation and persists the
report directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .config import Config, PreprocessConfig
from .dataio import ImageTile, save_tile
from .errors import ValidationError
from .imageops import PatchGrid, as_pixels, partition, rescale, resize_pixels, ssim, stitch
from .preprocess import assemble_triplet, canny_edges, to_grayscale

_COLORMAP_CACHE: Optional[np.ndarray] = None


def load_colormap() -> np.ndarray:
    """The shipped 256-entry blue-to-red table as float RGB in [0, 1]."""
    global _COLORMAP_CACHE
    if _COLORMAP_CACHE is None:
        text = resources.files("sar2eo").joinpath("data/colormap_coolwarm.json").read_text()
        _COLORMAP_CACHE = np.asarray(json.loads(text), dtype=np.float64) / 255.0
    return _COLORMAP_CACHE


@dataclass(frozen=True)
class SiameseConfig:
    input_size: int = 128
    in_channels: int = 3
    embed_dim: int = 128

    def as_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiameseConfig":
        return cls(**d)


class SiameseEmbedder(nn.Module):
    """Weight-tied image embedder for pairwise similarity scoring.

    Two conv+pool stages (64 and 128 filters of 5x5, stride-2 max pooling)
    feed three fully connected layers of 512, 256 and 128 units; the first
    two use ReLU and the last emits the embedding, which is length-normalized
    to the unit sphere.  Both images of a pair go through this one parameter
    set.
    """

    def __init__(self, cfg: SiameseConfig = SiameseConfig()):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.in_channels, 64, 5)
        self.conv2 = nn.Conv2d(64, 128, 5)
        self.pool = nn.MaxPool2d(2, 2)
        side = cfg.input_size
        side = (side - 4) // 2  # conv1 (valid) + pool
        side = (side - 4) // 2  # conv2 (valid) + pool
        if side < 1:
            raise ValidationError(f"siamese input_size {cfg.input_size} too small for the conv stack")
        self.flat_dim = 128 * side * side
        self.fc1 = nn.Linear(self.flat_dim, 512)
        self.fc2 = nn.Linear(512, 256)
        self.fc3 = nn.Linear(256, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] != self.cfg.input_size or x.shape[3] != self.cfg.input_size:
            raise ValidationError(
                f"siamese expects {self.cfg.input_size}x{self.cfg.input_size} inputs, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        x = self.fc3(x)
        return F.normalize(x, dim=1, eps=1e-12)


def _embed_input(image, cfg: SiameseConfig) -> torch.Tensor:
    pixels = as_pixels(image)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    if pixels.shape[2] != cfg.in_channels:
        raise ValidationError(f"siamese input needs {cfg.in_channels} channels, got {pixels.shape[2]}")
    pixels = resize_pixels(pixels.astype(np.float32), (cfg.input_size, cfg.input_size))
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32))[None]


def siamese_embed(image, model: SiameseEmbedder) -> np.ndarray:
    """Unit-norm embedding of an image (resized to the embedder's input size)."""
    with torch.no_grad():
        emb = model(_embed_input(image, model.cfg))[0]
    return emb.numpy()


def confidence_score(sar, eo, model: SiameseEmbedder) -> float:
    """Percentage score from the chord distance of paired unit embeddings.

    d = ||e_sar - e_eo|| lies in [0, 2]; the score is 100 * (1 - d / 2), so
    identical embeddings score 100 and antipodal ones 0.
    """
    e_sar = siamese_embed(sar, model)
    e_eo = siamese_embed(eo, model)
    d = float(np.linalg.norm(e_sar - e_eo))
    return 100.0 * (1.0 - min(d, 2.0) / 2.0)


def probability_overlay(translation: ImageTile, prob_map: np.ndarray, alpha: float = 0.45) -> ImageTile:
    """Overlay a [0, 1] probability map on a translation tile.

    The map is bilinearly upsampled to the image size, mapped through the
    shipped blue-to-red table, and alpha-blended; alpha 0 returns the
    translation bit-exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    base = rescale(translation.pixels, translation.value_range, (0.0, 1.0))
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    h, w = base.shape[:2]
    upsampled = resize_pixels(prob_map.astype(np.float32), (h, w)).astype(np.float64)
    table = load_colormap()
    idx = np.clip(np.rint(np.clip(upsampled, 0.0, 1.0) * 255.0), 0, 255).astype(np.intp)
    colors = table[idx]
    blended = base + alpha * (colors - base)
    return ImageTile(pixels=blended.astype(np.float32), value_range=(0.0, 1.0))


def confidence_heatmap(
    translated: ImageTile,
    discriminator,
    preprocess_cfg: PreprocessConfig = PreprocessConfig(),
    alpha: float = 0.45,
):
    """Discriminator-confidence overlay for a translated tile.

    The tile's edge and grayscale views are recomputed exactly as during
    training, the probability map is taken in evaluation mode, and the
    overlay is rendered at the requested alpha.  Returns (overlay, raw map).
    """
    gray = to_grayscale(translated, weights=preprocess_cfg.grayscale_weights)
    edge = canny_edges(
        gray,
        low=preprocess_cfg.canny_low,
        high=preprocess_cfg.canny_high,
        sigma=preprocess_cfg.canny_sigma,
    )

    def chw(tile):
        return torch.from_numpy(np.ascontiguousarray(tile.pixels.transpose(2, 0, 1), dtype=np.float32))[None]

    was_training = discriminator.training
    discriminator.eval()
    try:
        with torch.no_grad():
            pmap = discriminator(chw(translated), chw(edge), chw(gray)).probs[0, 0].numpy()
    finally:
        discriminator.train(was_training)
    overlay = probability_overlay(translated, pmap, alpha=alpha)
    return overlay, pmap


@dataclass
class SeamEdge:
    a: tuple
    b: tuple
    orientation: str  # "horizontal" joins left/right neighbors, "vertical" top/bottom
    ssim: float


@dataclass
class ConsistencyGraph:
    rows: int
    cols: int
    edges: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "grid": {"rows": self.rows, "cols": self.cols},
            "nodes": [[r, s] for r in range(self.rows) for s in range(self.cols)],
            "edges": [
                {"a": list(e.a), "b": list(e.b), "orientation": e.orientation, "ssim": e.ssim}
                for e in self.edges
            ],
            "summary": self.summary,
        }


def expected_edge_count(rows: int, cols: int) -> int:
    return rows * (cols - 1) + (rows - 1) * cols


def spatial_consistency(grid: PatchGrid, strip_width: int = 16, ssim_window: int = 11) -> ConsistencyGraph:
    """Score seam agreement between adjacent patches of a translated grid.

    For horizontal neighbors the right strip of a patch is compared with the
    left strip of the next; for vertical neighbors, bottom against top.  A
    single-patch grid yields an empty, not-applicable summary.
    """
    if strip_width < ssim_window:
        raise ValidationError(
            f"strip_width {strip_width} is narrower than the SSIM window {ssim_window}"
        )
    patches = grid.patches
    rows, cols = grid.rows, grid.cols
    graph = ConsistencyGraph(rows=rows, cols=cols)
    for r in range(rows):
        for s in range(cols - 1):
            left = patches[r, s][:, -strip_width:, :]
            right = patches[r, s + 1][:, :strip_width, :]
            score = ssim(left, right, window=ssim_window)
            graph.edges.append(SeamEdge(a=(r, s), b=(r, s + 1), orientation="horizontal", ssim=score))
    for r in range(rows - 1):
        for s in range(cols):
            bottom = patches[r, s][-strip_width:, :, :]
            top = patches[r + 1, s][:strip_width, :, :]
            score = ssim(bottom, top, window=ssim_window)
            graph.edges.append(SeamEdge(a=(r, s), b=(r + 1, s), orientation="vertical", ssim=score))

    assert len(graph.edges) == expected_edge_count(rows, cols)
    if graph.edges:
        scores = [e.ssim for e in graph.edges]
        worst = min(range(len(scores)), key=scores.__getitem__)
        graph.summary = {
            "applicable": True,
            "mean": float(np.mean(scores)),
            "min": float(scores[worst]),
            "argmin_edge": {
                "a": list(graph.edges[worst].a),
                "b": list(graph.edges[worst].b),
                "orientation": graph.edges[worst].orientation,
            },
        }
    else:
        graph.summary = {"applicable": False, "mean": None, "min": None, "argmin_edge": None}
    return graph


def render_consistency(graph: ConsistencyGraph, cell: int = 96) -> Image.Image:
    """Draw the patch grid with seam segments colored by their SSIM score."""
    table = load_colormap()
    width = max(1, graph.cols) * cell + 1
    height = max(1, graph.rows) * cell + 1
    img = Image.new("RGB", (width, height), (245, 245, 245))
    draw = ImageDraw.Draw(img)
    for r in range(graph.rows):
        for s in range(graph.cols):
            draw.rectangle(
                [s * cell, r * cell, (s + 1) * cell, (r + 1) * cell], outline=(200, 200, 200)
            )
    for e in graph.edges:
        idx = int(np.clip(np.rint((e.ssim + 1.0) / 2.0 * 255.0), 0, 255))
        color = tuple(int(round(v * 255)) for v in table[idx])
        r, s = e.a
        if e.orientation == "horizontal":
            x = (s + 1) * cell
            draw.line([x, r * cell + 2, x, (r + 1) * cell - 2], fill=color, width=5)
            draw.text((x - 14, r * cell + cell // 2 - 5), f"{e.ssim:.2f}", fill=(40, 40, 40))
        else:
            y = (r + 1) * cell
            draw.line([s * cell + 2, y, (s + 1) * cell - 2, y], fill=color, width=5)
            draw.text((s * cell + cell // 2 - 14, y - 12), f"{e.ssim:.2f}", fill=(40, 40, 40))
    return img


@dataclass
class AssessmentReport:
    translation: ImageTile
    heatmap_overlay: ImageTile
    confidence_percent: float
    consistency: ConsistencyGraph
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.confidence_percent <= 100.0:
            raise ValidationError("confidence_percent must lie in [0, 100]")
        if self.heatmap_overlay.pixels.shape[:2] != self.translation.pixels.shape[:2]:
            raise ValidationError("heatmap overlay must match translation dimensions")


REPORT_FILES = ("translation.png", "heatmap.png", "consistency.json", "consistency.png", "report.json")


def translate_tiled(sar: ImageTile, generator, cfg: Config, tile: int | None = None, overlap: int | None = None):
    """Patch -> translate -> restitch a SAR tile of any covered size.

    Returns (stitched translation in [-1, 1], PatchGrid of translated patches).
    """
    tile = cfg.get("assess.tile") if tile is None else tile
    overlap = cfg.get("assess.overlap") if overlap is None else overlap
    grid = partition(sar, tile_size=tile, overlap=overlap)
    was_training = generator.training
    generator.eval()
    try:
        translated = np.empty(
            (grid.rows, grid.cols, grid.tile_size, grid.tile_size, 3), dtype=np.float32
        )
        with torch.no_grad():
            for r in range(grid.rows):
                for s in range(grid.cols):
                    patch = ImageTile(pixels=grid.patches[r, s], value_range=grid.value_range)
                    triplet = assemble_triplet(patch, None, cfg.preprocess)
                    out = generator(triplet.structure_input[None], triplet.texture_input[None])
                    translated[r, s] = out.image[0].numpy().transpose(1, 2, 0)
    finally:
        generator.train(was_training)
    out_grid = PatchGrid(
        patches=translated,
        tile_size=grid.tile_size,
        source_dims=grid.source_dims,
        overlap=grid.overlap,
        value_range=(-1.0, 1.0),
    )
    return stitch(out_grid), out_grid


def assess(
    sar: ImageTile,
    generator,
    discriminator,
    siamese: SiameseEmbedder,
    cfg: Config,
    out_dir=None,
    provenance: dict | None = None,
) -> AssessmentReport:
    """Full transparency report for one SAR tile.

    Partitions, translates and restitches the input, then renders the
    discriminator heatmap, the Siamese confidence score against the SAR
    input, and the seam-consistency graph of the translated patches.  When
    out_dir is given the report directory is materialized with exactly the
    files in REPORT_FILES.
    """
    translation, out_grid = translate_tiled(sar, generator, cfg)
    overlay, _ = confidence_heatmap(
        translation, discriminator, cfg.preprocess, alpha=cfg.get("heatmap.alpha")
    )
    score = confidence_score(sar, translation, siamese)
    graph = spatial_consistency(
        out_grid,
        strip_width=cfg.get("consistency.strip_width"),
        ssim_window=cfg.get("consistency.ssim_window"),
    )
    report = AssessmentReport(
        translation=translation,
        heatmap_overlay=overlay,
        confidence_percent=score,
        consistency=graph,
        provenance=provenance or {},
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: AssessmentReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tile(report.translation, out / "translation.png")
    save_tile(report.heatmap_overlay, out / "heatmap.png")
    (out / "consistency.json").write_text(
        json.dumps(report.consistency.to_json_dict(), indent=2, sort_keys=True)
    )
    render_consistency(report.consistency).save(out / "consistency.png")
    (out / "report.json").write_text(
        json.dumps(
            {
                "confidence_percent": report.confidence_percent,
                "consistency_summary": report.consistency.summary,
                "provenance": report.provenance,
            },
            indent=2,
            sort_keys=True,
        )
    )
