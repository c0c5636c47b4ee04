"""Dual-feature translation generator.

Two partial-convolution encoder/decoder branches reconstruct a texture
feature and a structure feature from the SAR views; a cross-gated fusion
block mixes them, a patch-attention refiner aggregates context, and a tanh
head emits the RGB translation.

Wiring notes (deliberate, asserted at construction):
  - the texture decoder starts from the *structure* encoder's deepest
    feature and takes skip connections from the texture encoder;
  - the structure decoder starts from the *texture* encoder's deepest
    feature, takes its first skip from the structure encoder, and reuses
    texture-encoder features for all remaining skips;
  - decoders run on dense features, so their convolutions see full masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .preprocess import SampleTriplet

ENCODER_KERNELS = (7, 5, 5, 3, 3, 3, 3)
ENCODER_PADDINGS = (3, 2, 2, 1, 1, 1, 1)
CHANNEL_MULTIPLIERS = (1, 2, 4, 8, 8, 8, 8)
LEAKY_SLOPE = 0.2


def encoder_channels(base_channels: int, levels: int) -> list:
    return [base_channels * CHANNEL_MULTIPLIERS[i] for i in range(levels)]


def init_conv_weights(module: nn.Module, std: float = 0.02) -> None:
    """Zero-mean Gaussian init for convolution weights, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class MaskedFeature:
    """Feature map paired with a same-shaped binary validity mask.

    Values at invalid (mask == 0) positions are forced to zero on
    construction, so downstream consumers can rely on the invariant.
    """

    values: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValidationError(
                f"feature/mask shape mismatch: {tuple(self.values.shape)} vs {tuple(self.mask.shape)}"
            )
        binary = (self.mask == 0) | (self.mask == 1)
        if not bool(binary.all()):
            raise ValidationError("mask must be binary")
        self.values = self.values * self.mask


def partial_conv2d(
    values: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride=1,
    padding=0,
):
    """Mask-renormalized convolution.

    At output sites whose receptive window contains at least one valid input,
    the masked convolution is rescaled by (window size / valid count) and the
    bias added; sites with all-invalid windows emit 0 and an invalid mask.
    With a full mask this reduces exactly to a dense convolution.
    """
    cout, cin, kh, kw = weight.shape
    window = cin * kh * kw
    with torch.no_grad():
        ones = torch.ones(1, cin, kh, kw, dtype=values.dtype, device=values.device)
        mask_sum = F.conv2d(mask, ones, stride=stride, padding=padding)
        valid = mask_sum > 0
        ratio = torch.where(valid, window / mask_sum.clamp(min=1.0), torch.zeros_like(mask_sum))
        valid_f = valid.to(values.dtype)
    out = F.conv2d(values * mask, weight, None, stride=stride, padding=padding) * ratio
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    out = out * valid_f
    out_mask = valid_f.expand(-1, cout, -1, -1).contiguous()
    return out, out_mask


class PartialConv2d(nn.Conv2d):
    """Conv2d that renormalizes over a validity mask and propagates it.

    Called without a mask it behaves as a plain dense convolution (the
    renormalization factor of a full mask is 1).
    """

    def forward(self, values: torch.Tensor, mask: Optional[torch.Tensor] = None):
        if mask is None:
            return super().forward(values), None
        return partial_conv2d(
            values, mask, self.weight, self.bias, stride=self.stride, padding=self.padding
        )


@dataclass
class EncoderStack:
    """Per-level outputs of one encoder branch, shallowest first."""

    levels: list

    @property
    def top(self) -> MaskedFeature:
        return self.levels[-1]

    def channels(self) -> list:
        return [f.values.shape[1] for f in self.levels]

    def spatial(self) -> list:
        return [tuple(f.values.shape[2:]) for f in self.levels]


class FeatureEncoder(nn.Module):
    """Stride-2 partial-convolution pyramid.

    Kernel sizes shrink 7 -> 5 -> 5 -> 3... down the stack; every level uses
    ReLU, and batch normalization runs on all levels except the first and the
    last.  Masks are re-applied after normalization so invalid positions stay
    exactly zero.
    """

    def __init__(self, in_channels: int, levels: int = 7, base_channels: int = 64):
        super().__init__()
        if not 2 <= levels <= len(ENCODER_KERNELS):
            raise ValidationError(f"encoder levels must be in [2, {len(ENCODER_KERNELS)}], got {levels}")
        chans = encoder_channels(base_channels, levels)
        convs = []
        norms = []
        prev = in_channels
        for i in range(levels):
            convs.append(
                PartialConv2d(prev, chans[i], ENCODER_KERNELS[i], stride=2, padding=ENCODER_PADDINGS[i])
            )
            norms.append(nn.BatchNorm2d(chans[i]) if 0 < i < levels - 1 else nn.Identity())
            prev = chans[i]
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.in_channels = in_channels
        self.out_channels = chans

    def forward(self, values: torch.Tensor, mask: Optional[torch.Tensor] = None) -> EncoderStack:
        if values.shape[1] != self.in_channels:
            raise ValidationError(
                f"encoder expects {self.in_channels} input channels, got {values.shape[1]}"
            )
        if mask is None:
            mask = torch.ones_like(values)
        feats = []
        v, m = values, mask
        for conv, norm in zip(self.convs, self.norms):
            v, m = conv(v, m)
            v = F.relu(v)
            v = norm(v)
            v = v * m
            feats.append(MaskedFeature(values=v, mask=m))
        return EncoderStack(levels=feats)


class FeatureDecoder(nn.Module):
    """Nearest-upsample + 3x3 conv ladder with per-level skip concats.

    Each stage doubles resolution, concatenates a skip feature, convolves to
    the skip's width, and applies LeakyReLU; the first two stages use dropout.
    The last concat joins the branch's raw network input before the final
    feature convolution.
    """

    def __init__(
        self,
        enc_channels: list,
        branch_in_channels: int,
        feature_channels: int = 64,
        dropout: float = 0.5,
    ):
        super().__init__()
        self.concat_plan = []
        stages = []
        prev = enc_channels[-1]
        for i in range(len(enc_channels) - 2, -1, -1):
            cat_ch = prev + enc_channels[i]
            self.concat_plan.append(cat_ch)
            stages.append(nn.Conv2d(cat_ch, enc_channels[i], 3, stride=1, padding=1))
            prev = enc_channels[i]
        final_cat = prev + branch_in_channels
        self.concat_plan.append(final_cat)
        self.stages = nn.ModuleList(stages)
        self.final = nn.Conv2d(final_cat, feature_channels, 3, stride=1, padding=1)
        self.dropout = nn.Dropout(dropout)
        self.skip_channels = list(enc_channels[-2::-1])

    def forward(self, start: torch.Tensor, skips: list, branch_input: torch.Tensor) -> torch.Tensor:
        if len(skips) != len(self.stages):
            raise ValidationError(f"decoder expects {len(self.stages)} skips, got {len(skips)}")
        x = F.interpolate(start, scale_factor=2, mode="nearest")
        for i, (conv, skip) in enumerate(zip(self.stages, skips)):
            if x.shape[2:] != skip.shape[2:]:
                raise ValidationError(
                    f"decoder stage {i}: skip spatial {tuple(skip.shape[2:])} does not match "
                    f"{tuple(x.shape[2:])}"
                )
            x = torch.cat([x, skip], dim=1)
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            if i < 2:
                x = self.dropout(x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, branch_input], dim=1)
        return F.leaky_relu(self.final(x), LEAKY_SLOPE)


class GatedFeatureFusion(nn.Module):
    """Bidirectional cross-gated mixing of structure and texture features.

    Gates are 3x3 convolutions of the concatenated pair; each feature is
    enhanced residually by the gated *other* feature (structural information
    enriches texture and vice versa), then both are concatenated.  Gate
    weights start at zero, making the module an identity concat at init.
    Set cross=False to gate each feature by itself instead (ablation).
    """

    def __init__(self, channels: int = 64, cross: bool = True):
        super().__init__()
        self.gate_structure = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.gate_texture = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.cross = cross
        self.channels = channels
        for gate in (self.gate_structure, self.gate_texture):
            nn.init.zeros_(gate.weight)
            nn.init.zeros_(gate.bias)

    def forward(self, f_structure: torch.Tensor, f_texture: torch.Tensor) -> torch.Tensor:
        if f_structure.shape != f_texture.shape:
            raise ValidationError(
                f"fusion inputs disagree: {tuple(f_structure.shape)} vs {tuple(f_texture.shape)}"
            )
        if f_structure.shape[1] != self.channels:
            raise ValidationError(
                f"fusion expects {self.channels} channels, got {f_structure.shape[1]}"
            )
        joint = torch.cat([f_structure, f_texture], dim=1)
        g_s = self.gate_structure(joint)
        g_t = self.gate_texture(joint)
        if self.cross:
            enhanced_s = f_structure + g_s * f_texture
            enhanced_t = f_texture + g_t * f_structure
        else:
            enhanced_s = f_structure + g_s * f_structure
            enhanced_t = f_texture + g_t * f_texture
        return torch.cat([enhanced_s, enhanced_t], dim=1)


class ContextualFeatureAggregation(nn.Module):
    """Patch-similarity attention with multi-rate dilated refinement.

    Pipeline: three 3x3 preprocessing convolutions -> non-overlapping patch
    extraction -> per-patch normalization -> cosine-similarity attention with
    row softmax -> weighted patch reconstruction -> four dilated branches
    (rates 1, 2, 4, 8) blended by learned spatial weight maps -> skip concat
    with the raw input -> three output convolutions.
    """

    def __init__(
        self,
        in_channels: int = 128,
        channels: int = 64,
        patch_size: int = 3,
        dilations=(1, 2, 4, 8),
        attention_budget_mb: int = 1024,
    ):
        super().__init__()
        if patch_size < 1:
            raise ValidationError("patch_size must be >= 1")
        self.patch_size = patch_size
        self.attention_budget_bytes = attention_budget_mb * 1024 * 1024
        self.pre = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=d, dilation=d) for d in dilations
        )
        self.branch_weights = nn.Conv2d(channels, len(dilations), 1)
        mid = 2 * channels
        self.post = nn.Sequential(
            nn.Conv2d(channels + in_channels, mid, 3, padding=1),
            nn.BatchNorm2d(mid),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(mid, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.out_channels = channels

    def patch_attention(self, feature: torch.Tensor):
        """Attention over non-overlapping patches of a (B, C, H, W) feature.

        Returns (attention, patches, padded_size): attention rows are softmax
        of pairwise cosine similarities and sum to 1; patches are the raw
        flattened patch vectors the weighted reconstruction mixes.
        """
        b, _, h, w = feature.shape
        p = self.patch_size
        pad_h, pad_w = (-h) % p, (-w) % p
        if pad_h or pad_w:
            feature = F.pad(feature, (0, pad_w, 0, pad_h), mode="reflect")
        hp, wp = feature.shape[2], feature.shape[3]
        n = (hp // p) * (wp // p)
        needed = b * n * n * feature.element_size()
        if needed > self.attention_budget_bytes:
            raise ValidationError(
                f"attention matrix needs {needed / 2**20:.0f} MiB for {n} patches, exceeding the "
                f"{self.attention_budget_bytes / 2**20:.0f} MiB budget; raise "
                "generator.attention_budget_mb or reduce the tile/batch size"
            )
        patches = F.unfold(feature, kernel_size=p, stride=p).transpose(1, 2)  # B, N, C*p*p
        normed = F.normalize(patches, dim=2, eps=1e-8)
        attention = torch.softmax(normed @ normed.transpose(1, 2), dim=2)
        return attention, patches, (hp, wp)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        f = self.pre(x)
        attention, patches, (hp, wp) = self.patch_attention(f)
        mixed = attention @ patches
        folded = F.fold(
            mixed.transpose(1, 2), output_size=(hp, wp), kernel_size=self.patch_size, stride=self.patch_size
        )[:, :, :h, :w]
        weight_maps = self.branch_weights(folded)
        refined = None
        for i, branch in enumerate(self.branches):
            term = weight_maps[:, i : i + 1] * branch(folded)
            refined = term if refined is None else refined + term
        return self.post(torch.cat([refined, x], dim=1))


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 256
    levels: int = 7
    base_channels: int = 64
    feature_channels: int = 64
    cross_gating: bool = True
    cfa_patch: int = 3
    attention_budget_mb: int = 1024
    dropout: float = 0.5
    texture_channels: int = 3
    structure_channels: int = 2

    def __post_init__(self):
        if not 2 <= self.levels <= len(ENCODER_KERNELS):
            raise ValidationError(f"levels must be in [2, {len(ENCODER_KERNELS)}], got {self.levels}")
        if self.base_channels < 1 or self.feature_channels < 1:
            raise ValidationError("channel counts must be positive")
        validate_spatial(self.input_size, self.input_size, self.levels)

    def as_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "levels": self.levels,
            "base_channels": self.base_channels,
            "feature_channels": self.feature_channels,
            "cross_gating": self.cross_gating,
            "cfa_patch": self.cfa_patch,
            "attention_budget_mb": self.attention_budget_mb,
            "dropout": self.dropout,
            "texture_channels": self.texture_channels,
            "structure_channels": self.structure_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    def encoder_channel_plan(self) -> list:
        return encoder_channels(self.base_channels, self.levels)

    def spatial_plan(self) -> list:
        return [self.input_size // 2 ** (i + 1) for i in range(self.levels)]


def validate_spatial(h: int, w: int, levels: int) -> None:
    """Reject input sizes whose stride-2 chain leaves the integer grid."""
    for name, extent in (("height", h), ("width", w)):
        if extent % 2**levels != 0 or extent // 2**levels < 1:
            raise ValidationError(
                f"input {name} {extent} is incompatible with {levels} stride-2 levels "
                f"({extent} / 2^{levels} = {extent / 2 ** levels:g}); use a multiple of "
                f"{2 ** levels} or fewer levels"
            )


@dataclass
class GeneratorOutput:
    """Forward products: branch features, fused map, and the RGB image."""

    texture_feature: torch.Tensor
    structure_feature: torch.Tensor
    fused: torch.Tensor
    image: torch.Tensor


class DualFeatureGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        chans = cfg.encoder_channel_plan()
        self.texture_encoder = FeatureEncoder(cfg.texture_channels, cfg.levels, cfg.base_channels)
        self.structure_encoder = FeatureEncoder(cfg.structure_channels, cfg.levels, cfg.base_channels)
        self.texture_decoder = FeatureDecoder(
            chans, cfg.texture_channels, cfg.feature_channels, cfg.dropout
        )
        self.structure_decoder = FeatureDecoder(
            chans, cfg.structure_channels, cfg.feature_channels, cfg.dropout
        )
        self.fusion = GatedFeatureFusion(cfg.feature_channels, cross=cfg.cross_gating)
        self.refiner = ContextualFeatureAggregation(
            in_channels=2 * cfg.feature_channels,
            channels=cfg.feature_channels,
            patch_size=cfg.cfa_patch,
            attention_budget_mb=cfg.attention_budget_mb,
        )
        self.output_head = nn.Conv2d(cfg.feature_channels, 3, 3, padding=1)

        init_conv_weights(self)
        for gate in (self.fusion.gate_structure, self.fusion.gate_texture):
            nn.init.zeros_(gate.weight)
            nn.init.zeros_(gate.bias)

        self._assert_concat_arithmetic(chans)

    def _assert_concat_arithmetic(self, chans: list) -> None:
        # Independent recomputation of the skip-concat widths; a mismatch
        # means the decoder wiring drifted from the channel schedule.
        expected = []
        prev = chans[-1]
        for c in reversed(chans[:-1]):
            expected.append(prev + c)
            prev = c
        tex_plan = expected + [chans[0] + self.cfg.texture_channels]
        str_plan = expected + [chans[0] + self.cfg.structure_channels]
        if self.texture_decoder.concat_plan != tex_plan:
            raise AssertionError(
                f"texture decoder concat plan {self.texture_decoder.concat_plan} != {tex_plan}"
            )
        if self.structure_decoder.concat_plan != str_plan:
            raise AssertionError(
                f"structure decoder concat plan {self.structure_decoder.concat_plan} != {str_plan}"
            )

    def forward(
        self,
        structure_input: torch.Tensor,
        texture_input: torch.Tensor,
        structure_mask: Optional[torch.Tensor] = None,
        texture_mask: Optional[torch.Tensor] = None,
    ) -> GeneratorOutput:
        if structure_input.dim() != 4 or texture_input.dim() != 4:
            raise ValidationError("generator expects batched (B, C, H, W) inputs")
        if structure_input.shape[2:] != texture_input.shape[2:]:
            raise ValidationError("structure and texture inputs must share spatial dims")
        validate_spatial(int(texture_input.shape[2]), int(texture_input.shape[3]), self.cfg.levels)

        t_stack = self.texture_encoder(texture_input, texture_mask)
        s_stack = self.structure_encoder(structure_input, structure_mask)
        levels = self.cfg.levels

        texture_skips = [t_stack.levels[i].values for i in range(levels - 2, -1, -1)]
        f_texture = self.texture_decoder(s_stack.top.values, texture_skips, texture_input)

        structure_skips = [s_stack.levels[levels - 2].values]
        structure_skips += [t_stack.levels[i].values for i in range(levels - 3, -1, -1)]
        f_structure = self.structure_decoder(t_stack.top.values, structure_skips, structure_input)

        fused = self.fusion(f_structure, f_texture)
        refined = self.refiner(fused)
        image = torch.tanh(self.output_head(refined))
        return GeneratorOutput(
            texture_feature=f_texture, structure_feature=f_structure, fused=fused, image=image
        )


def generate(generator: DualFeatureGenerator, triplet: SampleTriplet) -> GeneratorOutput:
    """Translate a single SampleTriplet (adds and strips the batch dim)."""
    out = generator(triplet.structure_input[None], triplet.texture_input[None])
    return GeneratorOutput(
        texture_feature=out.texture_feature[0],
        structure_feature=out.structure_feature[0],
        fused=out.fused[0],
        image=out.image[0],
    )
