"""Command-line entry point.

Subcommands cover the full pipeline::

    sar2eo prepare       --manifest pairs.jsonl --out cache/
    sar2eo train         --manifest pairs.jsonl --out run/
    sar2eo train-siamese --manifest pairs.jsonl --out run/
    sar2eo translate     --checkpoint run/generator.pt --input big_sar.png --output eo.png
    sar2eo assess        --generator run/generator.pt --discriminator run/discriminator.pt \
                         --siamese run/siamese.pt --input sar.png --out report/

Exit codes: 0 success, 1 validation failure, 2 missing asset, 3 numerical
failure.  Every key in the config schema can be overridden with repeated
``--overrides key=value`` flags, and all randomness funnels through --seed.
"""

from __future__ import annotations

import argparse

import json
import sys
from pathlib import Path

from . import checkpoints, config, training
from .dataio import load_manifest, load_tile, save_tile
from .errors import MissingAssetError, Sar2EoError, ValidationError
from .generator import validate_spatial
from .interpretability import assess as run_assess
from .preprocess import assemble_triplet


def _load_config(args) -> config.Config:
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"training.seed={args.seed}")
    return config.load(args.config, overrides)


def _require(path, role: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingAssetError(f"{role} not found: {p}")
    return p


def _provenance(cfg: config.Config, checkpoint_paths: dict) -> dict:
    return {
        "seed": cfg.get("training.seed"),
        "config_hash": cfg.config_hash(),
        "checkpoints": {role: checkpoints.file_sha256(p) for role, p in checkpoint_paths.items()},
    }


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries, rejections = load_manifest(manifest)
    for diag in rejections:
        print(f"rejected: {diag}", file=sys.stderr)

    index_entries = []
    for i, entry in enumerate(entries):
        sar = load_tile(entry.sar_path)
        eo = load_tile(entry.eo_path)
        triplet = assemble_triplet(sar, eo, cfg.preprocess)
        stem = f"{i:05d}_{entry.sar_path.stem}"
        files = {
            "edge": f"{stem}_edge.png",
            "gray": f"{stem}_gray.png",
            "rgb": f"{stem}_rgb.png",
            "target": f"{stem}_target.png",
        }
        from .dataio import ImageTile

        structure = triplet.structure_input.numpy()
        save_tile(ImageTile(structure[0][:, :, None], (0.0, 1.0)), out_dir / files["edge"])
        save_tile(ImageTile(structure[1][:, :, None], (-1.0, 1.0)), out_dir / files["gray"])
        save_tile(
            ImageTile(triplet.texture_input.numpy().transpose(1, 2, 0), (-1.0, 1.0)),
            out_dir / files["rgb"],
        )
        save_tile(
            ImageTile(triplet.target.numpy().transpose(1, 2, 0), (-1.0, 1.0)),
            out_dir / files["target"],
        )
        index_entries.append(
            {
                "sar_path": str(entry.sar_path),
                "eo_path": str(entry.eo_path),
                "split": entry.split,
                "acquisition_gap_days": entry.acquisition_gap_days,
                "files": files,
                "sha256": {
                    role: checkpoints.file_sha256(out_dir / name) for role, name in files.items()
                },
            }
        )

    index = {"provenance": _provenance(cfg, {}), "entries": index_entries}
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    print(f"prepared {len(index_entries)} triplet(s), {len(rejections)} rejection(s)")
    return 1 if rejections else 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    if args.resume:
        _require(args.resume, "resume checkpoint")
    training.train(manifest, cfg, args.out, resume=args.resume)
    return 0


def cmd_train_siamese(args) -> int:
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    training.train_siamese(manifest, cfg, args.out)
    return 0


def cmd_translate(args) -> int:
    cfg = _load_config(args)
    ckpt = _require(args.checkpoint, "generator checkpoint")
    image_path = _require(args.input, "input image")

    generator, gcfg = checkpoints.load_generator(ckpt)
    tile = args.tile if args.tile is not None else gcfg.input_size
    overlap = args.overlap if args.overlap is not None else cfg.get("assess.overlap")
    try:
        validate_spatial(tile, tile, gcfg.levels)
    except ValidationError as exc:
        raise ValidationError(f"tile size incompatible with checkpoint architecture: {exc}") from exc

    from .interpretability import translate_tiled

    sar = load_tile(image_path)
    translation, _ = translate_tiled(sar, generator, cfg, tile=tile, overlap=overlap)
    provenance = _provenance(cfg, {"generator": ckpt})
    save_tile(translation, args.output, text={"provenance": json.dumps(provenance, sort_keys=True)})
    print(f"translated {image_path.name} -> {args.output}")
    return 0


def cmd_assess(args) -> int:
    cfg = _load_config(args)
    gen_path = _require(args.generator, "generator checkpoint")
    disc_path = _require(args.discriminator, "discriminator checkpoint")
    siam_path = _require(args.siamese, "siamese checkpoint")
    image_path = _require(args.input, "input image")

    generator, _ = checkpoints.load_generator(gen_path)
    discriminator, _ = checkpoints.load_discriminator(disc_path)
    siamese, _ = checkpoints.load_siamese(siam_path)
    sar = load_tile(image_path)
    provenance = _provenance(
        cfg, {"generator": gen_path, "discriminator": disc_path, "siamese": siam_path}
    )
    report = run_assess(
        sar, generator, discriminator, siamese, cfg, out_dir=args.out, provenance=provenance
    )
    print(
        f"assessment written to {args.out}: confidence {report.confidence_percent:.2f}%, "
        f"seam edges {len(report.consistency.edges)}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sar2eo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument(
            "--overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, repeatable",
        )
        p.add_argument("--seed", type=int, default=None, help="override training.seed")

    p = sub.add_parser("prepare", help="materialize preprocessed triplets to a cache directory")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="adversarial training over the manifest's train split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="training checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-siamese", help="contrastive training of the confidence embedder")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_siamese)

    p = sub.add_parser("translate", help="translate one SAR image (tiled) to optical")
    common(p)
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("assess", help="translate and emit the transparency report")
    common(p)
    p.add_argument("--generator", required=True)
    p.add_argument("--discriminator", required=True)
    p.add_argument("--siamese", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assess)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Sar2EoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
