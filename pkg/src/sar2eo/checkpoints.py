"""Checkpoint archives: named parameter arrays plus an architecture manifest.

Every checkpoint is a single torch archive carrying the builder kind, the
architecture configuration it was constructed from, and the state dict(s).
Loads rebuild the network from the stored manifest and fail loudly when the
stored arrays do not match it.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import MissingAssetError, ValidationError

FORMAT_VERSION = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind: str, arch: dict, state: dict, extra: dict | None = None) -> str:
    """Write a checkpoint archive; returns its content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "state": state,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return file_sha256(path)


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingAssetError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "kind" not in payload or "arch" not in payload:
        raise ValidationError(f"{path} is not a recognized checkpoint archive")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported checkpoint format {payload.get('format_version')!r}"
        )
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise ValidationError(
            f"{path}: expected a {expected_kind!r} checkpoint, found {payload['kind']!r}"
        )
    return payload


def load_generator(path):
    """Rebuild a generator from its checkpoint manifest."""
    from .generator import DualFeatureGenerator, GeneratorConfig

    payload = load_checkpoint(path, expected_kind="generator")
    cfg = GeneratorConfig.from_dict(payload["arch"])
    model = DualFeatureGenerator(cfg)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise ValidationError(f"{path}: parameter arrays do not match the manifest: {exc}") from exc
    model.eval()
    return model, cfg


def load_discriminator(path):
    from .discriminator import DiscriminatorConfig, DualBranchDiscriminator

    payload = load_checkpoint(path, expected_kind="discriminator")
    cfg = DiscriminatorConfig.from_dict(payload["arch"])
    model = DualBranchDiscriminator(cfg)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise ValidationError(f"{path}: parameter arrays do not match the manifest: {exc}") from exc
    model.eval()
    return model, cfg


def load_siamese(path):
    from .interpretability import SiameseConfig, SiameseEmbedder

    payload = load_checkpoint(path, expected_kind="siamese")
    cfg = SiameseConfig.from_dict(payload["arch"])
    model = SiameseEmbedder(cfg)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise ValidationError(f"{path}: parameter arrays do not match the manifest: {exc}") from exc
    model.eval()
    return model, cfg
