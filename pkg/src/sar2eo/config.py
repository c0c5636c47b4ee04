"""Configuration handling: typed defaults, flat key/value files, and overrides.

Config files are plain text, one ``key = value`` pair per line with ``#``
comments.  Every key can also be supplied on the command line through
``--overrides key=value``.  The full schema (keys, types, defaults) lives in
``SCHEMA`` below and is rendered in the README.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(part) for part in text.split(","))


def _parse_optional_str(text: str):
    return text.strip() or None


# key -> (parser, default).  Defaults here describe the 256x256 reference
# configuration; toy-mode presets are applied in resolve().
SCHEMA = {
    "preprocess.despeckle.window": (int, 5),
    "preprocess.canny.low": (float, 0.1),
    "preprocess.canny.high": (float, 0.2),
    "preprocess.canny.sigma": (float, 1.4),
    "preprocess.grayscale.weights": (_parse_floats, (0.299, 0.587, 0.114)),
    "augment.resize_to": (int, 286),
    "augment.crop": (int, 256),
    "generator.input_size": (int, 256),
    "generator.levels": (int, 7),
    "generator.base_channels": (int, 64),
    "generator.feature_channels": (int, 64),
    "generator.cross_gating": (_parse_bool, True),
    "generator.cfa_patch": (int, 3),
    "generator.attention_budget_mb": (int, 1024),
    "generator.dropout": (float, 0.5),
    "discriminator.base_channels": (int, 64),
    "discriminator.blocks": (int, 4),
    "siamese.input_size": (int, 128),
    "loss.w_adv": (float, 1.0),
    "loss.w_pix": (float, 10.0),
    "loss.w_ffl": (float, 1.0),
    "loss.w_perc": (float, 1.0),
    "loss.w_style": (float, 10.0),
    "loss.w_feat": (float, 1.0),
    "loss.ffl_alpha": (float, 1.0),
    "loss.contrastive_margin": (float, 1.0),
    "loss.perceptual_weights": (_parse_optional_str, None),
    "training.learning_rate": (float, 2e-4),
    "training.adam_beta1": (float, 0.5),
    "training.adam_beta2": (float, 0.999),
    "training.batch_size": (int, 4),
    "training.steps": (int, 1000),
    "training.checkpoint_every": (int, 100),
    "training.seed": (int, 0),
    "training.toy_mode": (_parse_bool, False),
    "training.augment": (_parse_bool, True),
    "training.label_smoothing": (float, 0.0),
    "heatmap.alpha": (float, 0.45),
    "consistency.strip_width": (int, 16),
    "consistency.ssim_window": (int, 11),
    "assess.tile": (int, 256),
    "assess.overlap": (int, 0),
}

# Applied for keys the user did not set explicitly when training.toy_mode is
# on: a 64x64, 5-level, narrow configuration sized for commodity CPUs.
TOY_PRESET = {
    "generator.input_size": 64,
    "generator.levels": 5,
    "generator.base_channels": 16,
    "generator.feature_channels": 16,
    "discriminator.base_channels": 16,
    "training.batch_size": 4,
    "training.augment": False,
    "assess.tile": 64,
}


@dataclass(frozen=True)
class PreprocessConfig:
    despeckle_window: int = 5
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_sigma: float = 1.4
    grayscale_weights: tuple = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentConfig:
    resize_to: int = 286
    crop: int = 256


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the generator objective terms."""

    w_adv: float = 1.0
    w_pix: float = 10.0
    w_ffl: float = 1.0
    w_perc: float = 1.0
    w_style: float = 10.0
    w_feat: float = 1.0

    def __post_init__(self):
        import math

        for name, value in self.as_dict().items():
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {value}")

    def as_dict(self) -> dict:
        return {
            "adv": self.w_adv,
            "pix": self.w_pix,
            "ffl": self.w_ffl,
            "perc": self.w_perc,
            "style": self.w_style,
            "feat": self.w_feat,
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 4
    steps: int = 1000
    checkpoint_every: int = 100
    seed: int = 0
    toy_mode: bool = False
    augment: bool = True
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be a positive integer")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")


@dataclass(frozen=True)
class Config:
    """Resolved configuration bundle for all pipeline stages."""

    flat: dict = field(default_factory=dict)

    @property
    def preprocess(self) -> PreprocessConfig:
        f = self.flat
        return PreprocessConfig(
            despeckle_window=f["preprocess.despeckle.window"],
            canny_low=f["preprocess.canny.low"],
            canny_high=f["preprocess.canny.high"],
            canny_sigma=f["preprocess.canny.sigma"],
            grayscale_weights=f["preprocess.grayscale.weights"],
        )

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(resize_to=self.flat["augment.resize_to"], crop=self.flat["augment.crop"])

    @property
    def weights(self) -> LossWeights:
        f = self.flat
        return LossWeights(
            w_adv=f["loss.w_adv"],
            w_pix=f["loss.w_pix"],
            w_ffl=f["loss.w_ffl"],
            w_perc=f["loss.w_perc"],
            w_style=f["loss.w_style"],
            w_feat=f["loss.w_feat"],
        )

    @property
    def training(self) -> TrainConfig:
        f = self.flat
        return TrainConfig(
            learning_rate=f["training.learning_rate"],
            adam_beta1=f["training.adam_beta1"],
            adam_beta2=f["training.adam_beta2"],
            batch_size=f["training.batch_size"],
            steps=f["training.steps"],
            checkpoint_every=f["training.checkpoint_every"],
            seed=f["training.seed"],
            toy_mode=f["training.toy_mode"],
            augment=f["training.augment"],
            label_smoothing=f["training.label_smoothing"],
        )

    def generator_config(self):
        from .generator import GeneratorConfig

        f = self.flat
        return GeneratorConfig(
            input_size=f["generator.input_size"],
            levels=f["generator.levels"],
            base_channels=f["generator.base_channels"],
            feature_channels=f["generator.feature_channels"],
            cross_gating=f["generator.cross_gating"],
            cfa_patch=f["generator.cfa_patch"],
            attention_budget_mb=f["generator.attention_budget_mb"],
            dropout=f["generator.dropout"],
        )

    def discriminator_config(self):
        from .discriminator import DiscriminatorConfig

        f = self.flat
        return DiscriminatorConfig(
            base_channels=f["discriminator.base_channels"], blocks=f["discriminator.blocks"]
        )

    def siamese_config(self):
        from .interpretability import SiameseConfig

        return SiameseConfig(input_size=self.flat["siamese.input_size"])

    def get(self, key: str):
        return self.flat[key]

    def config_hash(self) -> str:
        """Stable digest of the resolved configuration (provenance)."""
        canon = json.dumps(
            {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.flat.items())},
            sort_keys=True,
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines into a raw string mapping."""
    raw = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def apply_overrides(raw: dict, overrides) -> dict:
    """Merge ``key=value`` strings (e.g. from --overrides) into a raw mapping."""
    merged = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def resolve(raw: dict | None = None) -> Config:
    """Turn a raw string mapping into a fully typed, defaulted Config.

    Unknown keys are rejected so typos fail loudly.  When training.toy_mode is
    set, TOY_PRESET values fill in any key the user left unset.
    """
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")

    typed = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            value = raw[key]
            try:
                typed[key] = parser(value) if isinstance(value, str) else value
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"config key {key}: cannot parse {value!r}: {exc}") from exc
        else:
            typed[key] = default

    if typed["training.toy_mode"]:
        for key, value in TOY_PRESET.items():
            if key not in raw:
                typed[key] = value

    cfg = Config(flat=typed)
    # Force construction of the typed views so invalid combinations are
    # rejected at resolve time rather than mid-pipeline.
    cfg.preprocess, cfg.augment, cfg.weights, cfg.training
    return cfg


def load(path=None, overrides=None) -> Config:
    raw = parse_config_file(path) if path else {}
    return resolve(apply_overrides(raw, overrides))
