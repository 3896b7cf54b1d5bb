"""Command-line entry point wiring every stage of the pipeline.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Config
precedence is defaults < --config file < repeated --set KEY=VAL overrides;
the fully resolved config is embedded in every artifact manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, inference, metrics, synthface, trainer
from .config import VARIANT_ALIASES, VARIANTS, ConfigError, RunConfig, resolve_config

TABLE_ORDER = ("baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=False, variants=False):
        p.add_argument("--config", metavar="PATH", default=None)
        p.add_argument("--set", metavar="KEY=VAL", action="append", default=[], dest="overrides")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--dry-run", action="store_true")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--res", type=int, default=None)
        if steps:
            p.add_argument("--steps", type=int, default=None)
        if variants:
            p.add_argument("--variants", default="all",
                           choices=["baseline", "spade", "learned_seg", "latent", "upper", "all"])
        return p

    p = common(sub.add_parser("make-data", help="write a synthetic dataset"))
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_make_data)

    p = common(sub.add_parser("pretrain", help="layout pre-training stage"), steps=True)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="full pipeline training"), steps=True, variants=True)
    p.add_argument("--init", metavar="PATH", default=None, help="pre-training checkpoint")
    p.set_defaults(func=cmd_train, variants=None)  # default: the config's variant

    p = common(sub.add_parser("finetune", help="subject fine-tuning"))
    p.add_argument("--ckpt", metavar="PATH", required=True)
    p.add_argument("--identity", type=int, required=True)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("embed", help="write a K-shot avatar embedding"))
    p.add_argument("--ckpt", metavar="PATH", required=True)
    p.add_argument("--identity", type=int, required=True)
    p.set_defaults(func=cmd_embed)

    p = common(sub.add_parser("reenact", help="drive an avatar with landmark sequences"))
    p.add_argument("--ckpt", metavar="PATH", required=True)
    p.add_argument("--avatar", metavar="PATH", required=True)
    p.add_argument("--driving", metavar="DIR", required=True,
                   help="directory of *.lmk.json landmark files")
    p.add_argument("--mode", choices=["self", "cross"], default="self")
    p.add_argument("--layouts", action="store_true", help="also write layout colorizations")
    p.set_defaults(func=cmd_reenact)

    p = common(sub.add_parser("evaluate", help="metric report over output/gt directories"))
    p.add_argument("--outputs", metavar="DIR", required=True)
    p.add_argument("--gt", metavar="DIR", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("grid", help="compose a labeled comparison grid"))
    p.add_argument("--row", metavar="LABEL=DIR", action="append", required=True, dest="rows")
    p.set_defaults(func=cmd_grid)

    p = common(sub.add_parser("ablate", help="run the ablation ladder"), steps=True, variants=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = resolve_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "res", None) is not None:
        cfg.data.resolution = args.res
    if getattr(args, "k", None) is not None:
        cfg.data.k_shots = args.k
    if getattr(args, "steps", None) is not None:
        cfg.schedule.pretrain_steps = max(1, args.steps // 2)
        cfg.schedule.full_steps = args.steps
    if getattr(args, "out", None):
        cfg.logging.out_dir = args.out
    return cfg.validate()


def _dry_run(args, cfg: RunConfig) -> bool:
    if args.dry_run:
        print(json.dumps(dict(cfg.to_dict(), config_hash=cfg.config_hash), indent=1))
        return True
    return False


def _selected_variants(name: str) -> list[str]:
    if name == "all":
        return list(TABLE_ORDER)
    return [VARIANT_ALIASES[name]]


def cmd_make_data(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    out = Path(args.out or cfg.data.root)
    res = cfg.data.resolution
    index = synthface.make_dataset(args.ids, args.frames, (res, res), out, cfg.seed)
    n = sum(len(v) for v in index.frames.values())
    print(f"wrote {len(index.frames)} identities / {n} frames to {out}")
    print(f"checksum {dataio.index_checksum(index)}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    out = Path(cfg.logging.out_dir)
    ckpt = trainer.pretrain_layout(cfg, out, resume=args.resume)
    print(f"pretrain checkpoint: {ckpt}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.variants is not None:
        variants = _selected_variants(args.variants)
        if len(variants) > 1:
            raise ConfigError("train runs one variant; use ablate for --variants all")
        cfg.variant.variant = variants[0]
    cfg.validate()
    if _dry_run(args, cfg):
        return 0
    out = Path(cfg.logging.out_dir)
    ckpt = trainer.run_variant(cfg.variant.variant, cfg, out,
                               pretrain_checkpoint=args.init, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    return 0


def _subject_shots(cfg: RunConfig, identity: int, k: int, seed: int) -> list[dict]:
    index = dataio.load_dataset(cfg.data.root)
    if identity not in index.frames:
        raise ConfigError(f"identity {identity} not in dataset {cfg.data.root}")
    store = dataio.FrameStore(index)
    rng = np.random.default_rng([seed, identity])
    paths = index.frames[identity]
    if len(paths) < k:
        raise ConfigError(f"identity {identity} has {len(paths)} frames < K={k}")
    picks = rng.choice(len(paths), size=k, replace=False)
    shots = []
    for i in picks:
        img, con, seg, _ = store.frame(paths[i])
        shots.append({"image": img, "contour": con, "seg": seg})
    return shots


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    shots = _subject_shots(cfg, args.identity, cfg.data.k_shots, cfg.seed)
    out = Path(cfg.logging.out_dir)
    ckpt = trainer.finetune_subject(args.ckpt, shots, cfg, out, seed=cfg.seed)
    print(f"subject checkpoint: {ckpt}")
    return 0


def cmd_embed(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    shots = _subject_shots(cfg, args.identity, cfg.data.k_shots, cfg.seed)
    frames = [(s["image"], s["contour"]) for s in shots]
    embedding = inference.embed(args.ckpt, frames, identity_id=args.identity)
    out = Path(cfg.logging.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inference.save_avatar(embedding, out / "avatar.bin")
    print(f"avatar: {out / 'avatar.bin'} (K={embedding.k})")
    return 0


def cmd_reenact(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    driving_dir = Path(args.driving)
    lmk_files = sorted(driving_dir.glob("*.lmk.json"))
    if not lmk_files:
        raise ConfigError(f"no *.lmk.json files under {driving_dir}")
    driving = [dataio.load_landmarks(p) for p in lmk_files]
    request = inference.ReenactmentRequest(
        embedding=inference.load_avatar(args.avatar), driving=driving, mode=args.mode)
    result = inference.reenact(args.ckpt, request, return_layouts=args.layouts)
    out = Path(cfg.logging.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for i, img in enumerate(result["images"]):
        Image.fromarray(inference._to_uint8(img)).save(out / f"{i:04d}.png")
    if args.layouts and result["layouts"]:
        for i, layout in enumerate(result["layouts"]):
            vis = inference.colorize_layout(layout)
            Image.fromarray(inference._to_uint8(vis)).save(out / f"layout_{i:04d}.png")
    print(f"wrote {len(result['images'])} frames to {out}")
    return 0


def _sibling_landmark_fn(outputs: Path, gts: Path):
    def landmark_fn(name: str) -> dict:
        base = name[:-len(".png")]
        found = {}
        for key, root in (("output", outputs), ("gt", gts)):
            path = root / f"{base}.lmk.json"
            found[key] = dataio.load_landmarks(path) if path.exists() else None
        src = gts / f"{base}.src.lmk.json"
        found["source"] = dataio.load_landmarks(src) if src.exists() else None
        return found
    return landmark_fn


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    from .losses import RandomPyramidBackbone

    backbone = RandomPyramidBackbone(seed=cfg.seed)
    embedder = None
    if Path(cfg.data.root).exists():
        index = dataio.load_dataset(cfg.data.root)
        if index.frames:
            splits = trainer.resolve_splits(index, cfg)
            _, identity = trainer.build_backbones(cfg, trainer.EpisodeSampler(index), splits["train"])
            embedder = identity.embed
    report = metrics.evaluate_directory(
        args.outputs, args.gt,
        landmark_fn=_sibling_landmark_fn(Path(args.outputs), Path(args.gt)),
        embedder=embedder, backbone=backbone)
    out = Path(cfg.logging.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    print(report.table_row())
    return 0


def cmd_grid(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    rows = []
    for spec in args.rows:
        if "=" not in spec:
            raise ConfigError(f"--row expects LABEL=DIR, got {spec!r}")
        label, _, directory = spec.partition("=")
        files = sorted(Path(directory).glob("*.png"))
        if not files:
            raise ConfigError(f"no .png files under {directory}")
        rows.append((label, [dataio.load_image(p) for p in files]))
    out = Path(cfg.logging.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = inference.emit_grid(rows, out / "grid.png")
    print(f"grid: {path}")
    return 0


def run_ablation(cfg: RunConfig, out_dir: Path, variants: list[str],
                 eval_seed: int = 0) -> dict:
    """Train the requested variants with identical seeds/budgets and evaluate
    each on the held-out split in the single-shot setting."""
    index = dataio.load_dataset(cfg.data.root)
    if not index.frames:
        raise FileNotFoundError(f"no dataset at {cfg.data.root}")
    splits = trainer.resolve_splits(index, cfg)
    sampler = trainer.EpisodeSampler(index)
    backbones = trainer.build_backbones(cfg, sampler, splits["train"])

    pretrain_ckpt = None
    rows = {}
    for variant in variants:
        vdir = out_dir / variant
        if variant in ("learned_seg", "latent_layout") and pretrain_ckpt is None:
            vcfg = dataclasses.replace(cfg, variant=dataclasses.replace(cfg.variant, variant=variant))
            pretrain_ckpt = trainer.pretrain_layout(vcfg.validate(), out_dir / "pretrain",
                                                    backbones=backbones)
        try:
            ckpt = trainer.run_variant(variant, cfg, vdir,
                                       pretrain_checkpoint=(
                                           pretrain_ckpt if variant in ("learned_seg", "latent_layout")
                                           else None),
                                       backbones=backbones)
            result = trainer.evaluate_checkpoint(ckpt, k=1, seed=eval_seed,
                                                 backbones=backbones)
        except Exception as exc:
            raise RuntimeError(f"ablation variant {variant!r} failed: {exc}") from exc
        rows[variant] = dict(result["aggregate"], checkpoint=str(ckpt))

    report = {"variants": [
        dict(rows[v], variant=v) for v in TABLE_ORDER if v in rows
    ]}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=1))
    with open(out_dir / "ablation.csv", "w") as fh:
        cols = ["variant", "psnr", "ssim", "lpips", "id_sim", "fid", "l1"]
        fh.write(",".join(cols) + "\n")
        for row in report["variants"]:
            fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    return report


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if _dry_run(args, cfg):
        return 0
    variants = _selected_variants(args.variants)
    out = Path(cfg.logging.out_dir)
    report = run_ablation(cfg, out, variants, eval_seed=cfg.seed)
    print("variant PSNR↑ SSIM↑ LPIPS↓ ID-SIM↑ FID↓")
    for row in report["variants"]:
        print(f"{row['variant']} {row['psnr']:.3f} {row['ssim']:.3f} "
              f"{row['lpips']:.3f} {row['id_sim']:.3f} {row['fid']:.3f}")
    print(f"report: {out / 'ablation.json'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
