"""Calibration probe for the acceptance budgets: trains the ablation ladder at
the planned desk-scale settings and prints every directional check."""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import torch

from lsr import dataio, inference, synthface, trainer
from lsr.cli import run_ablation
from lsr.config import resolve_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/calib")
    ap.add_argument("--ids", type=int, default=30)
    ap.add_argument("--res", type=int, default=32)
    ap.add_argument("--pretrain-steps", type=int, default=500)
    ap.add_argument("--full-steps", type=int, default=1000)
    ap.add_argument("--base", type=int, default=16)
    ap.add_argument("--cmax", type=int, default=128)
    ap.add_argument("--variants", default="all")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    data_root = out / "data"
    if not (data_root / "ids.json").exists():
        synthface.make_dataset(args.ids, 10, (args.res, args.res), data_root, seed=11)
    print(f"[{time.time()-t0:7.1f}s] dataset ready", flush=True)

    cfg = resolve_config(overrides=[
        f"data.root={data_root}", f"data.resolution={args.res}", "data.k_shots=4",
        "data.batch_size=8",
        f"nets.enc_base={args.base}", f"nets.enc_max={args.cmax}", "nets.enc_blocks=5",
        f"nets.unet_base={args.base}", f"nets.unet_max={args.cmax}", "nets.unet_depth=3",
        f"nets.gen_base={args.base}", f"nets.gen_max={args.cmax}",
        f"nets.disc_base={args.base}", f"nets.disc_max={args.cmax}",
        f"schedule.pretrain_steps={args.pretrain_steps}",
        f"schedule.full_steps={args.full_steps}",
        "logging.ckpt_every=250",
    ])
    cfg.seed = 5

    variants = (["baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound"]
                if args.variants == "all" else args.variants.split(","))
    report = run_ablation(cfg, out / "ablate", variants, eval_seed=0)
    print(f"[{time.time()-t0:7.1f}s] ablation done", flush=True)
    for row in report["variants"]:
        print("  ", {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})

    rows = {r["variant"]: r for r in report["variants"]}
    if "latent_layout" in rows and "baseline" in rows:
        print("C6 latent.lpips < baseline.lpips:", rows["latent_layout"]["lpips"] < rows["baseline"]["lpips"])
        print("C6 latent.id_sim > baseline.id_sim:", rows["latent_layout"]["id_sim"] > rows["baseline"]["id_sim"])
    if "upper_bound" in rows and "latent_layout" in rows:
        print("C6 upper.psnr > latent.psnr:", rows["upper_bound"]["psnr"] > rows["latent_layout"]["psnr"])

    if "latent_layout" not in rows:
        return
    ck = rows["latent_layout"]["checkpoint"]
    index = dataio.load_dataset(data_root)
    splits = trainer.resolve_splits(index, cfg)
    sampler = trainer.EpisodeSampler(index)
    backbones = trainer.build_backbones(cfg, sampler, splits["train"])

    # C5 degenerate-solution probe
    pipeline, _ = trainer.load_pipeline(ck)
    probe = sampler.batch(splits["train"], 4, 8, np.random.default_rng(123))
    print("C5 zeroed-spatial probe L1:", round(trainer.zeroed_spatial_probe(pipeline, probe), 4), flush=True)

    # C7 K directions
    for seed in (0, 1, 2):
        e1 = trainer.evaluate_checkpoint(ck, k=1, seed=seed, backbones=backbones)["aggregate"]
        e4 = trainer.evaluate_checkpoint(ck, k=4, seed=seed, backbones=backbones)["aggregate"]
        print(f"C7 seed{seed} meta: K1 l1={e1['l1']:.4f} id={e1['id_sim']:.4f} | "
              f"K4 l1={e4['l1']:.4f} id={e4['id_sim']:.4f} | "
              f"K4 better l1:{e4['l1'] < e1['l1']} id:{e4['id_sim'] > e1['id_sim']}", flush=True)

    # C7 finetune direction (one identity per seed)
    for seed in (0, 1, 2):
        ident = splits["test"][seed % len(splits["test"])]
        rng = np.random.default_rng([seed, trainer._STAGE_IDS["eval"], ident])
        paths = index.frames[ident]
        perm = rng.permutation(len(paths))
        shots = []
        for i in perm[:4]:
            img, con, seg, _ = sampler.store.frame(paths[i])
            shots.append({"image": img, "contour": con, "seg": seg})
        ft = trainer.finetune_subject(ck, shots, cfg, out / f"ft{seed}", seed=seed, backbones=backbones)
        meta = trainer.evaluate_checkpoint(ck, k=4, seed=seed, backbones=backbones,
                                           identity_ids=[ident])["aggregate"]
        tuned = trainer.evaluate_checkpoint(ft, k=4, seed=seed, backbones=backbones,
                                            identity_ids=[ident])["aggregate"]
        print(f"C7ft seed{seed} id{ident}: meta l1={meta['l1']:.4f} id={meta['id_sim']:.4f} | "
              f"ft l1={tuned['l1']:.4f} id={tuned['id_sim']:.4f} | "
              f"ft better l1:{tuned['l1'] < meta['l1']} id:{tuned['id_sim'] > meta['id_sim']}", flush=True)

    # C8 occluder filtering
    for seed in (0, 1, 2):
        ident = splits["test"][seed % len(splits["test"])]
        spec = None
        meta = json.loads((data_root / "ids.json").read_text())
        for s in meta["identities"]:
            if s["identity_id"] == ident:
                spec = synthface.IdentitySpec(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in s.items()})
        rng = np.random.default_rng([7, seed])
        paths = index.frames[ident]
        perm = rng.permutation(len(paths))
        frames = [sampler.store.frame(paths[i]) for i in perm[:5]]
        target_img, target_con = frames[4][0], frames[4][1]
        occ_sample = synthface.RenderedSample(
            image=frames[0][0], landmarks=frames[0][3], segmentation=frames[0][2],
            identity_id=ident, pose=synthface.PoseSpec())
        occluded, mask = synthface.inject_occluder(occ_sample, seed=seed)
        shots4 = [(occluded.image, frames[0][1])] + [(f[0], f[1]) for f in frames[1:4]]
        shots1 = [(occluded.image, frames[0][1])]
        e4 = inference.embed(ck, shots4, pipeline=pipeline)
        e1 = inference.embed(ck, shots1, pipeline=pipeline)
        outs = {}
        for name, emb in (("k4", e4), ("k1", e1)):
            z_l = torch.from_numpy(emb.latents.z_layout)[None]
            z_s = torch.from_numpy(emb.latents.z_style)[None]
            batch = {"sources": None,
                     "target_contour": torch.from_numpy(np.moveaxis(target_con, -1, 0))[None].float()}
            with torch.no_grad():
                fake = pipeline.synthesize(batch, latents=(z_l, z_s))["fake"]
            outs[name] = np.moveaxis(((fake[0] + 1) / 2).clamp(0, 1).numpy(), 0, -1)
        l1_4 = np.abs(outs["k4"][mask] - target_img[mask]).mean()
        l1_1 = np.abs(outs["k1"][mask] - target_img[mask]).mean()
        print(f"C8 seed{seed}: masked L1 4shot={l1_4:.4f} 1shot={l1_1:.4f} better:{l1_4 < l1_1}", flush=True)

    print(f"[{time.time()-t0:7.1f}s] calibration complete")


if __name__ == "__main__":
    main()
