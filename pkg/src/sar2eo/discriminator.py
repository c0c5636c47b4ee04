"""Dual-branch patch discriminator.

A structure branch reads the binary edge map and a texture branch reads the
RGB image; the grayscale view is injected into the structure branch midway.
Both branches downsample through spectrally normalized residual blocks, are
fused by concatenation, and a final convolution plus sigmoid yields a grid of
per-cell probabilities that the input is a real optical image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .generator import init_conv_weights

LEAKY_SLOPE = 0.2
# Sigmoid outputs are pinned inside (eps, 1 - eps) so probability maps stay
# strictly inside the open interval and cross-entropy stays finite.
PROB_EPS = 1e-6


@dataclass
class ProbabilityMap:
    """Grid of per-cell real-image probabilities, all strictly in (0, 1)."""

    probs: torch.Tensor

    def __post_init__(self):
        if not bool(((self.probs > 0) & (self.probs < 1)).all()):
            raise ValidationError("probability map values must lie strictly in (0, 1)")


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, iterations: int = 1, update: bool = True, eps: float = 1e-12
):
    """Divide a weight by its largest singular value, power-iteration estimated.

    The convolution kernel is viewed as a (out_channels x rest) matrix.  `u`
    is the persistent left singular-vector estimate; each call runs
    `iterations` power-iteration steps (refining u in place when `update`)
    and returns (normalized weight, sigma).  Gradients flow through the
    weight; u and v are treated as constants.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u_est = u
        v_est = None
        for _ in range(max(1, iterations)):
            v_est = F.normalize(mat.t() @ u_est, dim=0, eps=eps)
            u_est = F.normalize(mat @ v_est, dim=0, eps=eps)
        if update:
            u.copy_(u_est)
        u_est = u_est.clone()
        v_est = v_est.clone()
    sigma = torch.dot(u_est, mat @ v_est)
    return weight / sigma.clamp(min=eps), sigma


class SNConv2d(nn.Module):
    """Conv2d whose weight is spectrally normalized at every call.

    Keeps a persistent power-iteration state; one refinement step runs per
    training-mode forward, while evaluation reuses the stored estimate so
    outputs are deterministic.
    """

    WARMUP_ITERATIONS = 20

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding, bias=bias)
        u = torch.randn(out_channels)
        self.register_buffer("u", F.normalize(u, dim=0))
        self._warmed_up = False

    def _warmup(self):
        with torch.no_grad():
            spectral_normalize(self.conv.weight, self.u, iterations=self.WARMUP_ITERATIONS)
        self._warmed_up = True

    def normalized_weight(self) -> torch.Tensor:
        if not self._warmed_up:
            self._warmup()
        weight, _ = spectral_normalize(self.conv.weight, self.u, iterations=1, update=self.training)
        return weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            x, self.normalized_weight(), self.conv.bias, stride=self.conv.stride, padding=self.conv.padding
        )


class ResidualBlock(nn.Module):
    """Downsampling residual block with spectral norm, batch norm, LeakyReLU.

    Branch: SN 3x3 conv (stride) -> BN -> LeakyReLU -> SN 3x3 conv -> BN.
    Shortcut: SN 1x1 conv projection whenever shape changes.  The sum is
    returned without a trailing activation, so a zeroed branch reduces the
    block to its shortcut projection.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = SNConv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, stride=1, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if in_channels != out_channels or stride != 1:
            self.shortcut = SNConv2d(in_channels, out_channels, 1, stride=stride, padding=0, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branch = F.leaky_relu(self.bn1(self.conv1(x)), LEAKY_SLOPE)
        branch = self.bn2(self.conv2(branch))
        return branch + self.shortcut(x)


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    blocks: int = 4
    gray_inject_after: int = 2

    def __post_init__(self):
        if self.blocks < 1:
            raise ValidationError("discriminator needs at least one block")
        if not 1 <= self.gray_inject_after <= self.blocks:
            raise ValidationError("gray_inject_after must address an existing block")

    def as_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "blocks": self.blocks,
            "gray_inject_after": self.gray_inject_after,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)

    def channel_plan(self) -> list:
        return [self.base_channels * min(2**i, 8) for i in range(self.blocks)]


class DualBranchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channel_plan()

        def branch(in_ch):
            blocks = []
            prev = in_ch
            for c in chans:
                blocks.append(ResidualBlock(prev, c, stride=2))
                prev = c
            return nn.ModuleList(blocks)

        self.texture_blocks = branch(3)
        self.structure_blocks = branch(1)
        inject_ch = chans[cfg.gray_inject_after - 1]
        self.gray_project = SNConv2d(inject_ch + 1, inject_ch, 1)
        self.head = SNConv2d(2 * chans[-1], 1, 3, padding=1)
        init_conv_weights(self)

    def forward(self, image: torch.Tensor, edge: torch.Tensor, gray: torch.Tensor) -> ProbabilityMap:
        if image.shape[1] != 3 or edge.shape[1] != 1 or gray.shape[1] != 1:
            raise ValidationError("discriminator expects image (3ch), edge (1ch), gray (1ch)")
        if image.shape[2:] != edge.shape[2:] or image.shape[2:] != gray.shape[2:]:
            raise ValidationError("discriminator views must share spatial dims")
        if not bool(((edge == 0) | (edge == 1)).all()):
            raise ValidationError("edge view must be binary")

        t = image
        for block in self.texture_blocks:
            t = block(t)

        s = edge
        for i, block in enumerate(self.structure_blocks, start=1):
            s = block(s)
            if i == self.cfg.gray_inject_after:
                g = F.interpolate(gray, size=s.shape[2:], mode="bilinear", align_corners=False)
                s = self.gray_project(torch.cat([s, g], dim=1))

        logits = self.head(torch.cat([t, s], dim=1))
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return ProbabilityMap(probs=probs)


def discriminate(
    disc: DualBranchDiscriminator,
    image: torch.Tensor,
    edge: torch.Tensor,
    gray: torch.Tensor,
) -> ProbabilityMap:
    """Single-sample convenience wrapper (adds and strips the batch dim)."""
    out = disc(image[None], edge[None], gray[None])
    return ProbabilityMap(probs=out.probs[0])
