"""Training objectives for the translation network.

Every loss is a pure, non-negative function of its inputs and stays inside
autograd.  The weighted total reports each unweighted term alongside the sum
so training logs can expose the full breakdown.
"""

from __future__ import annotations

import math
import warnings
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights, PreprocessConfig
from .dataio import ImageTile
from .errors import MissingAssetError, NumericalError, ValidationError
from .imageops import gram_matrix

TERM_NAMES = ("adv", "pix", "ffl", "perc", "style", "feat")


def _as_prob_tensor(pred) -> torch.Tensor:
    from .discriminator import ProbabilityMap

    t = pred.probs if isinstance(pred, ProbabilityMap) else pred
    if not bool(((t > 0) & (t < 1)).all()):
        raise ValidationError("adversarial predictions must lie strictly in (0, 1)")
    return t


def adversarial_loss(pred, target_is_real: bool, smoothing: float = 0.0) -> torch.Tensor:
    """Mean binary cross-entropy of a probability map against a constant label."""
    probs = _as_prob_tensor(pred)
    label = (1.0 - smoothing) if target_is_real else 0.0
    target = torch.full_like(probs, label)
    return F.binary_cross_entropy(probs, target)


def pixel_loss(gen: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    if gen.shape != real.shape:
        raise ValidationError(f"pixel_loss shape mismatch: {tuple(gen.shape)} vs {tuple(real.shape)}")
    return F.mse_loss(gen, real)


def focal_frequency_loss(gen: torch.Tensor, real: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Spectrum-difference loss that up-weights the hardest frequency bins.

    Per channel: d(u, v) = |F_gen - F_real|^2, w = d^(alpha/2) rescaled so the
    largest weight is 1, and the loss is the mean of w * d over all bins.
    Identical inputs give exactly 0.
    """
    if gen.shape != real.shape:
        raise ValidationError(f"focal_frequency_loss shape mismatch: {tuple(gen.shape)} vs {tuple(real.shape)}")
    diff = torch.fft.fft2(gen) - torch.fft.fft2(real)
    d = diff.real**2 + diff.imag**2
    w = d ** (alpha / 2.0)
    # Per-image (per-channel) peak normalization; the weight matrix stays in
    # the graph so the loss is exactly the differentiated function.
    peak = w.amax(dim=(-2, -1), keepdim=True)
    w = w / peak.clamp(min=torch.finfo(d.dtype).tiny)
    return (w * d).mean()


class IdentityExtractor(nn.Module):
    """Degenerate feature extractor returning the image itself (one layer)."""

    def forward(self, x: torch.Tensor) -> list:
        return [x]


class VggFeatureExtractor(nn.Module):
    """Frozen VGG16 features from the first activation of each of the first
    four downsampling stages.

    Weights must be supplied as a local state-dict file; nothing is ever
    downloaded.  Inputs are expected in [-1, 1] and are remapped to the
    ImageNet statistics the backbone was trained with.
    """

    LAYER_INDICES = (1, 6, 11, 18)

    def __init__(self, weights_path: str):
        super().__init__()
        import torchvision

        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except FileNotFoundError as exc:
            raise MissingAssetError(
                f"perceptual extractor weights not found at {weights_path}; leave "
                "loss.perceptual_weights unset to run in no-perceptual mode"
            ) from exc
        backbone = torchvision.models.vgg16(weights=None)
        backbone.load_state_dict(state)
        self.features = backbone.features[: max(self.LAYER_INDICES) + 1]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x: torch.Tensor) -> list:
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        outputs = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.LAYER_INDICES:
                outputs.append(x)
        return outputs


def perceptual_loss(gen: torch.Tensor, real: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Sum over extractor layers of mean squared feature differences."""
    if extractor is None:
        raise MissingAssetError(
            "no perceptual extractor configured; set loss.perceptual_weights or run in no-perceptual mode"
        )
    feats_gen = extractor(gen)
    feats_real = extractor(real)
    total = None
    for fg, fr in zip(feats_gen, feats_real):
        term = F.mse_loss(fg, fr)
        total = term if total is None else total + term
    return total


def style_loss(gen_feats: list, real_feats: list) -> torch.Tensor:
    """Sum over layers of mean squared Gram-matrix differences."""
    if len(gen_feats) != len(real_feats):
        raise ValidationError("style_loss needs matching feature lists")
    total = None
    for fg, fr in zip(gen_feats, real_feats):
        if fg.shape != fr.shape:
            raise ValidationError(f"style_loss layer shape mismatch: {tuple(fg.shape)} vs {tuple(fr.shape)}")
        term = F.mse_loss(gram_matrix(fg), gram_matrix(fr))
        total = term if total is None else total + term
    return total


class FeatureHeads(nn.Module):
    """Auxiliary reconstruction heads for the branch features.

    A 3x3 conv maps the texture feature to a 3-channel image and the
    structure feature to a 1-channel edge response; both heads are trained
    jointly with the generator.
    """

    def __init__(self, feature_channels: int = 64):
        super().__init__()
        self.texture_head = nn.Conv2d(feature_channels, 3, 3, padding=1)
        self.structure_head = nn.Conv2d(feature_channels, 1, 3, padding=1)
        from .generator import init_conv_weights

        init_conv_weights(self)


def edge_target(eo_target: torch.Tensor, cfg: PreprocessConfig = PreprocessConfig()) -> torch.Tensor:
    """Binary edge map of the target's grayscale view (constant w.r.t. the graph)."""
    from .preprocess import canny_edges, rgb_to_gray_batched

    gray = rgb_to_gray_batched(eo_target.detach(), cfg.grayscale_weights)
    maps = []
    for i in range(gray.shape[0]):
        tile = ImageTile(pixels=gray[i, 0].cpu().numpy()[:, :, None], value_range=(-1.0, 1.0))
        edges = canny_edges(tile, low=cfg.canny_low, high=cfg.canny_high, sigma=cfg.canny_sigma)
        maps.append(torch.from_numpy(edges.pixels[:, :, 0]))
    return torch.stack(maps)[:, None].to(dtype=eo_target.dtype, device=eo_target.device)


def feature_loss(
    heads: FeatureHeads,
    texture_feature: torch.Tensor,
    structure_feature: torch.Tensor,
    eo_target: Optional[torch.Tensor],
    edge_map: Optional[torch.Tensor] = None,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> torch.Tensor:
    """MSE of the head reconstructions against the EO target and its edge map."""
    if eo_target is None:
        raise ValidationError("feature_loss requires an EO target")
    if edge_map is None:
        edge_map = edge_target(eo_target, cfg)
    return F.mse_loss(heads.texture_head(texture_feature), eo_target) + F.mse_loss(
        heads.structure_head(structure_feature), edge_map
    )


def contrastive_loss(d, same_pair: bool, margin: float = 1.0) -> torch.Tensor:
    """Pull matched embeddings together, push mismatched beyond the margin.

    Matched pairs pay d^2; mismatched pairs pay max(0, margin - d)^2.
    """
    if margin <= 0:
        raise ValidationError(f"margin must be > 0, got {margin}")
    t = d if isinstance(d, torch.Tensor) else torch.as_tensor(float(d))
    if bool((t < 0).any()):
        raise ValidationError("embedding distance must be >= 0")
    if same_pair:
        return (t**2).mean()
    return (F.relu(margin - t) ** 2).mean()


def total_generator_loss(terms: dict, weights: LossWeights):
    """Weighted sum of the generator terms.

    Returns (total, record) where record maps each term name to its
    unweighted float value for logging.  Any non-finite term aborts with a
    NumericalError naming the offender.
    """
    wmap = weights.as_dict()
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValidationError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    record = {}
    for name in TERM_NAMES:
        if name not in terms or terms[name] is None:
            record[name] = 0.0
            continue
        value = terms[name]
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericalError(f"loss term {name!r} is non-finite ({scalar})")
        record[name] = scalar
        contribution = wmap[name] * value
        total = contribution if total is None else total + contribution
    if total is None:
        total = torch.zeros(())
    return total, record


def resolve_extractor(weights_path: Optional[str], weights: LossWeights):
    """Build the perceptual extractor, degrading gracefully when unconfigured.

    Without a weights file the perceptual and style weights are forced to 0
    (with a warning) so the pipeline stays runnable offline.
    """
    if weights_path:
        return VggFeatureExtractor(weights_path), weights
    if weights.w_perc > 0 or weights.w_style > 0:
        warnings.warn(
            "no perceptual extractor configured: forcing w_perc and w_style to 0 "
            "(set loss.perceptual_weights to enable them)",
            stacklevel=2,
        )
        weights = LossWeights(
            w_adv=weights.w_adv,
            w_pix=weights.w_pix,
            w_ffl=weights.w_ffl,
            w_perc=0.0,
            w_style=0.0,
            w_feat=weights.w_feat,
        )
    return None, weights
