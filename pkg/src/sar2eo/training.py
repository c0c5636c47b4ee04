"""Adversarial training: alternating updates, logging, checkpoints, resumption.

One training step updates the discriminator on (real EO, generated EO) with
recomputed edge/grayscale views, then updates the generator on the weighted
objective with the discriminator held fixed.  Given (seed, config, manifest)
the emitted metrics stream is bit-deterministic on a single device, and a run
can resume from any checkpoint with the step counter and all random streams
restored.
"""

from __future__ import annotations

import json
import random
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .checkpoints import load_checkpoint, save_checkpoint
from .config import Config
from .dataio import ImageTile, augment, load_manifest, load_tile
from .discriminator import DualBranchDiscriminator
from .errors import NumericalError, ValidationError
from .generator import DualFeatureGenerator
from .imageops import rgb_to_gray
from .interpretability import SiameseEmbedder, _embed_input
from .preprocess import assemble_triplet, edge_and_gray_views

TRAIN_LOG_NAME = "train_log.jsonl"
SIAMESE_LOG_NAME = "siamese_log.jsonl"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    random.seed(seed)


def capture_rng(data_rng: np.random.Generator) -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": data_rng.bit_generator.state,
        "python": random.getstate(),
    }


def restore_rng(state: dict, data_rng: np.random.Generator) -> None:
    torch.set_rng_state(state["torch"])
    data_rng.bit_generator.state = state["numpy"]
    random.setstate(tuple(state["python"]) if isinstance(state["python"], list) else state["python"])


class _TileCache:
    """Small LRU over decoded tiles so repeated epochs skip PNG decoding."""

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._store: OrderedDict = OrderedDict()

    def get(self, path) -> ImageTile:
        key = str(path)
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        tile = load_tile(path)
        self._store[key] = tile
        if len(self._store) > self.capacity:
            self._store.popitem(last=False)
        return tile


@dataclass
class TrainState:
    generator: DualFeatureGenerator
    discriminator: DualBranchDiscriminator
    feature_heads: losses.FeatureHeads
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    extractor: Optional[torch.nn.Module]
    weights: losses.LossWeights
    cfg: Config
    step: int = 0


def build_train_state(cfg: Config) -> TrainState:
    """Construct models and optimizers for a fresh run (seed before calling)."""
    gen = DualFeatureGenerator(cfg.generator_config())
    disc = DualBranchDiscriminator(cfg.discriminator_config())
    heads = losses.FeatureHeads(cfg.generator_config().feature_channels)
    extractor, weights = losses.resolve_extractor(cfg.get("loss.perceptual_weights"), cfg.weights)
    tc = cfg.training
    betas = (tc.adam_beta1, tc.adam_beta2)
    g_opt = torch.optim.Adam(
        list(gen.parameters()) + list(heads.parameters()), lr=tc.learning_rate, betas=betas
    )
    d_opt = torch.optim.Adam(disc.parameters(), lr=tc.learning_rate, betas=betas)
    return TrainState(
        generator=gen,
        discriminator=disc,
        feature_heads=heads,
        g_opt=g_opt,
        d_opt=d_opt,
        extractor=extractor,
        weights=weights,
        cfg=cfg,
    )


def assemble_batch(entries, indices, cfg: Config, cache: _TileCache, augment_seeds=None):
    """Load, co-augment and preprocess a batch of manifest entries."""
    structures, textures, targets = [], [], []
    for slot, idx in enumerate(indices):
        entry = entries[idx]
        sar = cache.get(entry.sar_path)
        eo = cache.get(entry.eo_path)
        if cfg.training.augment:
            seed = int(augment_seeds[slot])
            sar, eo = augment(
                sar, eo, seed, resize_to=cfg.augment.resize_to, crop_size=cfg.augment.crop
            )
        triplet = assemble_triplet(sar, eo, cfg.preprocess)
        structures.append(triplet.structure_input)
        textures.append(triplet.texture_input)
        targets.append(triplet.target)
    return {
        "structure": torch.stack(structures),
        "texture": torch.stack(textures),
        "target": torch.stack(targets),
        "indices": [int(i) for i in indices],
    }


def train_step(state: TrainState, batch: dict) -> dict:
    """One alternating update; returns the per-term metrics record."""
    cfg = state.cfg
    tc = cfg.training
    target = batch["target"]

    gen_out = state.generator(batch["structure"], batch["texture"])
    fake = gen_out.image

    edge_real, gray_real = edge_and_gray_views(target, cfg.preprocess)
    edge_fake, _ = edge_and_gray_views(fake.detach(), cfg.preprocess)

    d_real = state.discriminator(target, edge_real, gray_real.detach())
    d_fake = state.discriminator(fake.detach(), edge_fake, rgb_to_gray(fake.detach()))
    d_loss = 0.5 * (
        losses.adversarial_loss(d_real, True, smoothing=tc.label_smoothing)
        + losses.adversarial_loss(d_fake, False)
    )
    if not torch.isfinite(d_loss):
        raise NumericalError(f"non-finite discriminator loss (batch indices {batch['indices']})")
    state.d_opt.zero_grad(set_to_none=True)
    d_loss.backward()
    state.d_opt.step()

    # Generator update; the discriminator participates only as a frozen critic.
    d_on_fake = state.discriminator(fake, edge_fake, rgb_to_gray(fake))
    terms = {
        "adv": losses.adversarial_loss(d_on_fake, True),
        "pix": losses.pixel_loss(fake, target),
        "ffl": losses.focal_frequency_loss(fake, target, alpha=cfg.get("loss.ffl_alpha")),
        "feat": losses.feature_loss(
            state.feature_heads,
            gen_out.texture_feature,
            gen_out.structure_feature,
            target,
            edge_map=edge_real,
        ),
    }
    if state.extractor is not None:
        feats_fake = state.extractor(fake)
        feats_real = state.extractor(target)
        total_p = None
        for fg, fr in zip(feats_fake, feats_real):
            term = torch.nn.functional.mse_loss(fg, fr)
            total_p = term if total_p is None else total_p + term
        terms["perc"] = total_p
        terms["style"] = losses.style_loss(feats_fake, feats_real)

    try:
        g_total, record = losses.total_generator_loss(terms, state.weights)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (batch indices {batch['indices']})") from exc
    state.g_opt.zero_grad(set_to_none=True)
    g_total.backward()
    state.g_opt.step()

    return {
        "step": state.step,
        "d_loss": float(d_loss.detach()),
        "g_adv": record["adv"],
        "g_pix": record["pix"],
        "g_ffl": record["ffl"],
        "g_perc": record["perc"],
        "g_style": record["style"],
        "g_feat": record["feat"],
        "total": float(g_total.detach()),
    }


def _save_training_checkpoint(state: TrainState, data_rng, out_dir: Path, final: bool) -> Path:
    path = out_dir / f"checkpoint_step{state.step:06d}.pt"
    arch = {
        "generator": state.generator.cfg.as_dict(),
        "discriminator": state.discriminator.cfg.as_dict(),
    }
    payload_state = {
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "feature_heads": state.feature_heads.state_dict(),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
    }
    extra = {"step": state.step, "rng": capture_rng(data_rng), "config": dict(state.cfg.flat)}
    digest = save_checkpoint(path, "training", arch, payload_state, extra)
    if final:
        save_checkpoint(
            out_dir / "generator.pt",
            "generator",
            state.generator.cfg.as_dict(),
            state.generator.state_dict(),
        )
        save_checkpoint(
            out_dir / "discriminator.pt",
            "discriminator",
            state.discriminator.cfg.as_dict(),
            state.discriminator.state_dict(),
        )
    print(f"checkpoint step {state.step}: {path.name} sha256={digest[:12]}")
    return path


def train(manifest_path, cfg: Config, out_dir, resume: Optional[str] = None) -> Path:
    """Run the adversarial loop over a manifest's train split.

    Checkpoints land in out_dir every training.checkpoint_every steps and at
    the end; generator.pt / discriminator.pt export the final networks for
    the translate/assess commands.  Returns the final training checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, rejections = load_manifest(manifest_path)
    for diag in rejections:
        warnings.warn(f"manifest row rejected: {diag}", stacklevel=2)
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        raise ValidationError("manifest has no valid train entries")

    tc = cfg.training
    seed_everything(tc.seed)
    data_rng = np.random.default_rng(tc.seed)
    state = build_train_state(cfg)
    state.generator.train()
    state.discriminator.train()
    state.feature_heads.train()

    if resume is not None:
        payload = load_checkpoint(resume, expected_kind="training")
        if payload["arch"]["generator"] != state.generator.cfg.as_dict():
            raise ValidationError("resume checkpoint generator architecture differs from config")
        if payload["arch"]["discriminator"] != state.discriminator.cfg.as_dict():
            raise ValidationError("resume checkpoint discriminator architecture differs from config")
        state.generator.load_state_dict(payload["state"]["generator"])
        state.discriminator.load_state_dict(payload["state"]["discriminator"])
        state.feature_heads.load_state_dict(payload["state"]["feature_heads"])
        state.g_opt.load_state_dict(payload["state"]["g_opt"])
        state.d_opt.load_state_dict(payload["state"]["d_opt"])
        state.step = payload["extra"]["step"]
        restore_rng(payload["extra"]["rng"], data_rng)

    cache = _TileCache()
    log_path = out_dir / TRAIN_LOG_NAME
    last_checkpoint = None
    if state.step == 0 and tc.steps == 0:
        return _save_training_checkpoint(state, data_rng, out_dir, final=True)

    with open(log_path, "a", encoding="utf-8") as log:
        while state.step < tc.steps:
            state.step += 1
            indices = data_rng.integers(0, len(train_entries), size=tc.batch_size)
            seeds = data_rng.integers(0, 2**31 - 1, size=tc.batch_size)
            batch = assemble_batch(train_entries, indices, cfg, cache, augment_seeds=seeds)
            metrics = train_step(state, batch)
            log.write(json.dumps(metrics) + "\n")
            log.flush()
            if state.step % tc.checkpoint_every == 0 or state.step == tc.steps:
                last_checkpoint = _save_training_checkpoint(
                    state, data_rng, out_dir, final=state.step == tc.steps
                )
    return last_checkpoint


def _siamese_batch(entries, indices, cache: _TileCache, scfg) -> tuple:
    sars, eos = [], []
    for idx in indices:
        entry = entries[idx]
        sars.append(_embed_input(cache.get(entry.sar_path), scfg)[0])
        eos.append(_embed_input(cache.get(entry.eo_path), scfg)[0])
    return torch.stack(sars), torch.stack(eos)


def train_siamese(manifest_path, cfg: Config, out_dir) -> Path:
    """Contrastive training of the Siamese embedder on matched SAR/EO pairs.

    Positives are manifest pairs; negatives pair each SAR with the EO of the
    next pair in the batch, so at least two pairs are required.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, rejections = load_manifest(manifest_path)
    for diag in rejections:
        warnings.warn(f"manifest row rejected: {diag}", stacklevel=2)
    pairs = [e for e in entries if e.split == "train"]
    if len(pairs) < 2:
        raise ValidationError("siamese training needs at least 2 pairs to form negatives")

    tc = cfg.training
    seed_everything(tc.seed)
    data_rng = np.random.default_rng(tc.seed)
    scfg = cfg.siamese_config()
    model = SiameseEmbedder(scfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(tc.adam_beta1, tc.adam_beta2))
    margin = cfg.get("loss.contrastive_margin")
    batch_size = max(2, min(tc.batch_size, len(pairs)))
    cache = _TileCache()

    log_path = out_dir / SIAMESE_LOG_NAME
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(1, tc.steps + 1):
            indices = data_rng.choice(len(pairs), size=batch_size, replace=False)
            sar_batch, eo_batch = _siamese_batch(pairs, indices, cache, scfg)
            emb_sar = model(sar_batch)
            emb_eo = model(eo_batch)
            d_pos = torch.linalg.vector_norm(emb_sar - emb_eo, dim=1)
            d_neg = torch.linalg.vector_norm(emb_sar - torch.roll(emb_eo, 1, dims=0), dim=1)
            loss = losses.contrastive_loss(d_pos, True, margin) + losses.contrastive_loss(
                d_neg, False, margin
            )
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite siamese loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.write(
                json.dumps(
                    {
                        "step": step,
                        "loss": float(loss.detach()),
                        "d_pos": float(d_pos.mean().detach()),
                        "d_neg": float(d_neg.mean().detach()),
                    }
                )
                + "\n"
            )

    path = out_dir / "siamese.pt"
    digest = save_checkpoint(path, "siamese", scfg.as_dict(), model.state_dict())
    print(f"siamese checkpoint: {path.name} sha256={digest[:12]}")
    return path
