"""Three-stage training protocol, variant wiring, schedules, and checkpoints.

Stages: layout pre-training (cross-entropy against oracle segmentations plus
an auxiliary RGB reconstruction), full pipeline training (reconstruction +
adversarial + latent L2, alternating D/G steps), and subject fine-tuning
(frozen encoders, fixed latents, generators + discriminator updated).

Every batch is drawn from a stateless RNG keyed by (seed, stage, step), so an
interrupted run resumed from a checkpoint reproduces the original trajectory.

Value conventions: loaders hand images/contours in [0, 1]; encoder, UNet and
discriminator inputs plus all image losses use [-1, 1]; the SPADE spatial
input (layout simplex / one-hot segmentation, concatenated with the contour)
stays in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio, losses, metrics
from .config import ConfigError, RunConfig
from .nets import (AdaInUNet, Discriminator, Encoder, SpadeGenerator, load_checkpoint,
                   predict_layout, read_manifest, save_checkpoint, seeded_init)
from .synthface import NUM_CLASSES

_STAGE_IDS = {"pretrain": 1, "full": 2, "finetune": 3, "probe": 9, "eval": 10}

LOG_KEYS = ("xent", "rec_perc", "rec_id", "rec_l1", "g_adv", "d_adv", "r1", "latent_l2")


@dataclass
class StageSchedule:
    stage: str
    steps: int
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.999)
    decay_steps: int | None = None  # default: final 10% of steps

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("schedule must have positive duration")

    def lr_at(self, step: int) -> float:
        """Constant lr, then linear decay to lr/100 over the trailing steps."""
        decay = self.decay_steps if self.decay_steps is not None else max(1, self.steps // 10)
        decay = min(decay, self.steps)
        start = self.steps - decay
        if step < start:
            return self.lr
        t = (step - start + 1) / decay
        return self.lr * (1.0 - t * 0.99)


def stage_schedule(config: RunConfig, stage: str, steps: int | None = None) -> StageSchedule:
    s = config.schedule
    if steps is None:
        steps = {"pretrain": s.pretrain_steps, "full": s.full_steps + s.extra_steps}[stage]
    return StageSchedule(stage=stage, steps=steps, lr=s.lr, betas=(s.beta1, s.beta2))


def _step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STAGE_IDS[stage], step])


def to_signed(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


# ---------------------------------------------------------------------------
# data plumbing


class EpisodeSampler:
    """In-memory episode sampling over a dataset index."""

    def __init__(self, index: dataio.DatasetIndex):
        self.index = index
        self.store = dataio.FrameStore(index)

    def batch(self, identity_ids: list[int], k: int, batch_size: int,
              rng: np.random.Generator) -> dict[str, torch.Tensor]:
        usable = [i for i in identity_ids if len(self.index.frames[i]) >= k + 1]
        if not usable:
            raise ValueError(f"no identity among {identity_ids} has >= {k + 1} frames")
        chosen = rng.choice(len(usable), size=batch_size, replace=True)
        episodes = [dataio.sample_episode(self.index, usable[i], k, rng, self.store)
                    for i in chosen]
        return dataio.batch_episodes(episodes)


def resolve_splits(index: dataio.DatasetIndex, config: RunConfig) -> dict[str, list[int]]:
    if index.splits:
        return index.splits
    if config.data.split_file:
        return dataio.load_dataset(index.root, config.data.split_file).splits
    return dataio.split_identities(index, config.data.train_frac, config.seed)


def build_backbones(config: RunConfig, sampler: EpisodeSampler, train_ids: list[int],
                    identity_steps: int = 250):
    """Generic random pyramid plus an identity classifier trained on the train split."""
    generic = losses.RandomPyramidBackbone(seed=config.seed)
    images, labels = [], []
    for label, ident in enumerate(sorted(train_ids)):
        for path in sampler.index.frames[ident]:
            img, _, _, _ = sampler.store.frame(path)
            images.append(np.moveaxis(img, -1, 0))
            labels.append(label)
    images_t = to_signed(torch.from_numpy(np.stack(images).astype(np.float32)))
    labels_t = torch.tensor(labels, dtype=torch.int64)
    identity = losses.train_identity_backbone(
        images_t, labels_t, num_classes=len(train_ids),
        steps=identity_steps, seed=config.seed)
    return generic, identity


# ---------------------------------------------------------------------------
# pipeline wiring


class Pipeline:
    """The networks of one ablation variant plus its synthesis path."""

    def __init__(self, config: RunConfig, build_discriminator: bool = True):
        self.config = config
        self.variant = config.variant.variant
        n = config.nets
        res = config.data.resolution
        c_layout = config.variant.layout_channels

        heads = ("layout", "style") if self.variant in ("learned_seg", "latent_layout") else ("style",)
        self.encoder = Encoder(base=n.enc_base, cmax=n.enc_max, blocks=n.enc_blocks,
                               latent_dim=n.latent_dim, heads=heads,
                               separate_trunks=n.separate_trunks)
        self.layout_gen = None
        if self.variant in ("learned_seg", "latent_layout"):
            self.layout_gen = AdaInUNet(base=n.unet_base, cmax=n.unet_max, depth=n.unet_depth,
                                        latent_dim=n.latent_dim, layout_channels=c_layout,
                                        heads=("layout", "rgb"))
        if self.variant == "baseline":
            self.image_gen = AdaInUNet(base=n.unet_base, cmax=n.unet_max, depth=n.unet_depth,
                                       latent_dim=n.latent_dim, heads=("rgb",))
        else:
            spatial_ch = {"spade_landmarks": 3,
                          "learned_seg": c_layout + 3,
                          "latent_layout": c_layout + 3,
                          "upper_bound": NUM_CLASSES + 3}[self.variant]
            self.image_gen = SpadeGenerator(resolution=res, spatial_channels=spatial_ch,
                                            base=n.gen_base, cmax=n.gen_max, start=n.gen_start,
                                            latent_dim=n.latent_dim, hidden=n.spade_hidden,
                                            style_in_spade=n.style_in_spade)
        self.discriminator = (Discriminator(resolution=res, base=n.disc_base, cmax=n.disc_max)
                              if build_discriminator else None)
        self.init_weights(config.seed)

    def init_weights(self, seed: int):
        for offset, net in enumerate(self.networks().values()):
            seeded_init(net, seed * 7919 + offset)

    def networks(self, include_discriminator: bool = True) -> dict[str, torch.nn.Module]:
        nets = {"encoder": self.encoder, "image_gen": self.image_gen}
        if self.layout_gen is not None:
            nets["layout_gen"] = self.layout_gen
        if include_discriminator and self.discriminator is not None:
            nets["discriminator"] = self.discriminator
        return nets

    def generator_parameters(self):
        for net in self.networks(include_discriminator=False).values():
            yield from net.parameters()

    def train(self, mode: bool = True):
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def encode(self, sources: torch.Tensor):
        """sources (N, K, 6, H, W) in [0,1] -> aggregated (z_layout | None, z_style)."""
        shots = self.encoder.encode_shots(to_signed(sources))
        z_style = shots["style"].mean(dim=1)
        z_layout = shots["layout"].mean(dim=1) if "layout" in shots else None
        return z_layout, z_style

    def synthesize(self, batch: dict[str, torch.Tensor], zero_spatial: bool = False,
                   latents: tuple | None = None) -> dict:
        """Full synthesis path for one batch; returns fake image in [-1, 1].

        ``zero_spatial`` replaces the SPADE spatial input with zeros (the
        degenerate-solution probe). ``latents`` overrides encoding with fixed
        (z_layout, z_style), as during subject fine-tuning.
        """
        z_layout, z_style = latents if latents is not None else self.encode(batch["sources"])
        contour = batch["target_contour"]
        out = {"z_layout": z_layout, "z_style": z_style, "layout": None}

        if self.variant == "baseline":
            out["fake"] = self.image_gen(to_signed(contour), z_style)["rgb"]
            return out

        if self.variant == "spade_landmarks":
            spatial = contour
        elif self.variant == "upper_bound":
            onehot = F.one_hot(batch["target_seg"], NUM_CLASSES).permute(0, 3, 1, 2).float()
            spatial = torch.cat([onehot, contour], dim=1)
        else:
            layout = predict_layout(self.layout_gen, to_signed(contour), z_layout)
            out["layout"] = layout
            spatial = torch.cat([layout.map, contour], dim=1)
        if zero_spatial:
            spatial = torch.zeros_like(spatial)
        out["fake"] = self.image_gen(spatial, z_style)
        return out


def load_pipeline(ckpt_dir: str | Path, build_discriminator: bool = False) -> tuple[Pipeline, dict]:
    """Rebuild a Pipeline from a checkpoint directory and load its weights."""
    manifest = read_manifest(ckpt_dir)
    config = RunConfig.from_dict(manifest["config"]).validate()
    pipeline = Pipeline(config, build_discriminator=build_discriminator)
    names = {n: net for n, net in pipeline.networks().items() if n in manifest["networks"]}
    load_checkpoint(ckpt_dir, names)
    pipeline.eval()
    return pipeline, manifest


def _check_pretrain_compat(manifest: dict, config: RunConfig):
    if manifest.get("stage") != "pretrain":
        raise ConfigError(f"init checkpoint stage {manifest.get('stage')!r}, expected 'pretrain'")
    ref = RunConfig.from_dict(manifest["config"])
    same = (ref.variant.layout_channels == config.variant.layout_channels
            and ref.data.resolution == config.data.resolution
            and ref.nets == config.nets)
    if not same:
        raise ConfigError("init checkpoint was pre-trained under incompatible nets/data config")


# ---------------------------------------------------------------------------
# logging


class JsonlLogger:
    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        if not append and path.exists():
            path.unlink()

    def write(self, record: dict):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def read_log(path: str | Path) -> list[dict]:
    """Parse a JSONL log; on duplicate steps (resume) the last entry wins."""
    by_step: dict = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                by_step[rec.get("step", len(by_step))] = rec
    return [by_step[k] for k in sorted(by_step)]


def _log_record(step: int, lr: float, values: dict) -> dict:
    rec = {"step": step, "lr": lr}
    for key in LOG_KEYS:
        v = values.get(key, 0.0)
        rec[key] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    for key, v in values.items():
        if key not in LOG_KEYS:
            rec[key] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    return rec


# ---------------------------------------------------------------------------
# stages


def pretrain_layout(config: RunConfig, out_dir: str | Path,
                    backbones=None, resume: bool = False) -> Path:
    """Pre-train the layout path (encoder layout head + layout UNet) on oracle
    segmentations. Only checks that a layout-bearing variant is configured."""
    if config.variant.variant not in ("learned_seg", "latent_layout"):
        raise ConfigError(f"pretraining applies to layout variants, not {config.variant.variant!r}")
    out_dir = Path(out_dir)
    index = dataio.load_dataset(config.data.root)
    if not index.frames:
        raise FileNotFoundError(f"no dataset at {config.data.root}")
    splits = resolve_splits(index, config)
    sampler = EpisodeSampler(index)
    generic = backbones[0] if backbones else losses.RandomPyramidBackbone(seed=config.seed)

    pipeline = Pipeline(config, build_discriminator=False)
    encoder, layout_gen = pipeline.encoder, pipeline.layout_gen
    schedule = stage_schedule(config, "pretrain")
    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(layout_gen.parameters()),
        lr=schedule.lr, betas=schedule.betas)

    start_step = 0
    ckpt_dir = out_dir / "checkpoint"
    if resume and (ckpt_dir / "manifest.json").exists():
        manifest = load_checkpoint(ckpt_dir, {"encoder": encoder, "layout_gen": layout_gen},
                                   {"generators": opt})
        start_step = manifest["step"]
    logger = JsonlLogger(out_dir / "log.jsonl", append=start_step > 0)

    k = config.data.k_shots
    for step in range(start_step, schedule.steps):
        lr = schedule.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = _step_rng(config.seed, "pretrain", step)
        batch = sampler.batch(splits["train"], k, config.data.batch_size, rng)

        shots = encoder.encode_shots(to_signed(batch["sources"]))
        z_layout = shots["layout"].mean(dim=1)
        layout = predict_layout(layout_gen, to_signed(batch["target_contour"]), z_layout)
        total, terms = losses.pretrain_objective(
            layout.logits, batch["target_seg"], layout.aux_rgb,
            to_signed(batch["target_image"]), config.losses.lambda_r, generic)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        logger.write(_log_record(step, lr, dict(terms, total=total)))
        if (step + 1) % config.logging.ckpt_every == 0 or step + 1 == schedule.steps:
            save_checkpoint(ckpt_dir, {"encoder": encoder, "layout_gen": layout_gen},
                            {"generators": opt}, step + 1,
                            _epoch_of(step + 1, config, index, splits), config, stage="pretrain")
    return ckpt_dir


def steps_per_epoch(config: RunConfig, index: dataio.DatasetIndex, splits: dict) -> int:
    """One epoch = one pass over the train frames at the configured batch size."""
    frames = sum(len(index.frames[i]) for i in splits["train"])
    return max(1, frames // config.data.batch_size)


def _epoch_of(step: int, config: RunConfig, index, splits: dict) -> int:
    return step // steps_per_epoch(config, index, splits)


def train_full(config: RunConfig, out_dir: str | Path, init_checkpoint: str | Path | None = None,
               backbones=None, resume: bool = False, probe_every: int = 100,
               stop_at_step: int | None = None) -> Path:
    """Full pipeline training: alternating discriminator / generator steps.

    ``stop_at_step`` interrupts the run early (checkpointing at that step)
    without altering the schedule, so a later ``resume=True`` run reproduces
    the uninterrupted trajectory.
    """
    out_dir = Path(out_dir)
    variant = config.variant.variant
    needs_pretrain = variant in ("learned_seg", "latent_layout")
    if needs_pretrain and init_checkpoint is None:
        raise ConfigError(f"variant {variant!r} requires a pre-training checkpoint")
    if not needs_pretrain and init_checkpoint is not None:
        raise ConfigError(f"variant {variant!r} does not take a pre-training checkpoint")

    index = dataio.load_dataset(config.data.root)
    if not index.frames:
        raise FileNotFoundError(f"no dataset at {config.data.root}")
    splits = resolve_splits(index, config)
    sampler = EpisodeSampler(index)
    if backbones is None:
        backbones = build_backbones(config, sampler, splits["train"])
    generic, identity = backbones
    rec_loss = losses.ReconstructionLoss(
        generic, identity, w_perc=config.losses.rec_perc,
        w_id=config.losses.rec_id, w_l1=config.losses.rec_l1)

    pipeline = Pipeline(config)
    if init_checkpoint is not None:
        manifest = read_manifest(init_checkpoint)
        _check_pretrain_compat(manifest, config)
        load_checkpoint(init_checkpoint,
                        {"encoder": pipeline.encoder, "layout_gen": pipeline.layout_gen})

    schedule = stage_schedule(config, "full")
    opt_g = torch.optim.Adam(pipeline.generator_parameters(), lr=schedule.lr, betas=schedule.betas)
    opt_d = torch.optim.Adam(pipeline.discriminator.parameters(), lr=schedule.lr, betas=schedule.betas)

    start_step = 0
    ckpt_dir = out_dir / "checkpoint"
    if resume and (ckpt_dir / "manifest.json").exists():
        manifest = load_checkpoint(ckpt_dir, pipeline.networks(),
                                   {"generators": opt_g, "discriminator": opt_d})
        if manifest.get("stage") != "full":
            raise ConfigError(f"cannot resume 'full' from a {manifest.get('stage')!r} checkpoint")
        start_step = manifest["step"]
    logger = JsonlLogger(out_dir / "log.jsonl", append=start_step > 0)

    probe_batch = sampler.batch(splits["train"], config.data.k_shots,
                                config.data.batch_size, _step_rng(config.seed, "probe", 0))
    k = config.data.k_shots
    w = config.losses
    end_step = schedule.steps if stop_at_step is None else min(stop_at_step, schedule.steps)
    for step in range(start_step, end_step):
        lr = schedule.lr_at(step)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        rng = _step_rng(config.seed, "full", step)
        batch = sampler.batch(splits["train"], k, config.data.batch_size, rng)
        real = to_signed(batch["target_image"])

        synth = pipeline.synthesize(batch)
        fake = synth["fake"]

        # D step
        d_fake = pipeline.discriminator(fake.detach())
        real_req = real.detach().requires_grad_(True)
        d_real = pipeline.discriminator(real_req)
        d_adv = losses.d_logistic_loss(d_real, d_fake)
        r1 = (losses.r1_penalty(d_real, real_req, w.gamma_r1)
              if w.gamma_r1 > 0 and step % w.r1_stride == 0 else torch.zeros(()))
        d_loss = d_adv + r1
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        # G step
        d_on_fake = pipeline.discriminator(fake) if w.lambda_adv > 0 else None
        total, terms = losses.full_objective(fake, real, synth["z_layout"], synth["z_style"],
                                             d_on_fake, w, rec_loss)
        if variant == "learned_seg":
            xent = F.cross_entropy(synth["layout"].logits, batch["target_seg"])
            total = total + xent
            terms["xent"] = xent
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()

        terms.update({"d_adv": d_adv, "r1": r1, "total": total})
        if step % probe_every == 0 or step + 1 == schedule.steps:
            terms["probe_rec"] = probe_reconstruction(pipeline, probe_batch, rec_loss)
        logger.write(_log_record(step, lr, terms))
        if (step + 1) % config.logging.ckpt_every == 0 or step + 1 == end_step:
            save_checkpoint(ckpt_dir, pipeline.networks(),
                            {"generators": opt_g, "discriminator": opt_d},
                            step + 1, _epoch_of(step + 1, config, index, splits), config, stage="full")
    return ckpt_dir


def probe_reconstruction(pipeline: Pipeline, batch: dict, rec_loss) -> float:
    """Reconstruction loss on a fixed probe batch, evaluation mode."""
    pipeline.eval()
    with torch.no_grad():
        fake = pipeline.synthesize(batch)["fake"]
        total, _ = rec_loss(fake, to_signed(batch["target_image"]))
    pipeline.train()
    return float(total)


def zeroed_spatial_probe(pipeline: Pipeline, batch: dict) -> float:
    """Mean absolute output change when the SPADE spatial input is zeroed."""
    if pipeline.variant == "baseline":
        raise ConfigError("baseline has no spatial input to ablate")
    pipeline.eval()
    with torch.no_grad():
        normal = pipeline.synthesize(batch)["fake"]
        zeroed = pipeline.synthesize(batch, zero_spatial=True)["fake"]
    return float((normal - zeroed).abs().mean())


def finetune_subject(checkpoint: str | Path, shots: list[dict], config: RunConfig | None,
                     out_dir: str | Path, seed: int = 0, backbones=None) -> Path:
    """Fine-tune the generators (and discriminator) on one subject's K shots.

    ``shots``: K dicts with "image" and "contour" (H, W, 3) arrays in [0, 1],
    plus "seg" when the checkpoint variant consumes oracle segmentations.
    Encoders stay frozen; the latents are computed once and reused. The step
    budget is finetune_steps_per_shot * K.
    """
    if not shots:
        raise ValueError("fine-tuning needs K >= 1 shots")
    out_dir = Path(out_dir)
    pipeline, manifest = load_pipeline(checkpoint, build_discriminator=True)
    load_checkpoint(checkpoint, {"discriminator": pipeline.discriminator})
    if config is None:
        config = RunConfig.from_dict(manifest["config"]).validate()
    if backbones is None:
        index = dataio.load_dataset(config.data.root)
        sampler = EpisodeSampler(index)
        backbones = build_backbones(config, sampler, resolve_splits(index, config)["train"])
    generic, identity = backbones
    rec_loss = losses.ReconstructionLoss(generic, identity, w_perc=config.losses.rec_perc,
                                         w_id=config.losses.rec_id, w_l1=config.losses.rec_l1)

    def chw(arr):
        return torch.from_numpy(np.moveaxis(np.asarray(arr, np.float32), -1, 0))

    k = len(shots)
    images = torch.stack([chw(s["image"]) for s in shots])
    contours = torch.stack([chw(s["contour"]) for s in shots])
    segs = (torch.stack([torch.from_numpy(np.asarray(s["seg"], np.int64)) for s in shots])
            if all("seg" in s for s in shots) else None)
    sources = torch.cat([images, contours], dim=1)[None]  # (1, K, 6, H, W)

    pipeline.encoder.eval()
    for p in pipeline.encoder.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        latents = pipeline.encode(sources)

    gen_params = list(pipeline.image_gen.parameters())
    if pipeline.layout_gen is not None:
        gen_params += list(pipeline.layout_gen.parameters())
    schedule = StageSchedule("finetune", steps=config.schedule.finetune_steps_per_shot * k,
                             lr=config.schedule.lr, betas=(config.schedule.beta1, config.schedule.beta2))
    opt_g = torch.optim.Adam(gen_params, lr=schedule.lr, betas=schedule.betas)
    opt_d = torch.optim.Adam(pipeline.discriminator.parameters(), lr=schedule.lr, betas=schedule.betas)
    logger = JsonlLogger(out_dir / "log.jsonl")
    w = config.losses

    batch_size = min(config.data.batch_size, k)
    for step in range(schedule.steps):
        lr = schedule.lr_at(step)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        rng = _step_rng(seed, "finetune", step)
        idx = torch.from_numpy(rng.choice(k, size=batch_size, replace=False))
        batch = {"target_image": images[idx], "target_contour": contours[idx]}
        if segs is not None:
            batch["target_seg"] = segs[idx]
        z_layout, z_style = latents
        lat = (z_layout.expand(batch_size, -1) if z_layout is not None else None,
               z_style.expand(batch_size, -1))
        real = to_signed(batch["target_image"])

        synth = pipeline.synthesize(dict(batch, sources=None), latents=lat)
        fake = synth["fake"]
        d_fake = pipeline.discriminator(fake.detach())
        real_req = real.detach().requires_grad_(True)
        d_real = pipeline.discriminator(real_req)
        r1 = (losses.r1_penalty(d_real, real_req, w.gamma_r1)
              if w.gamma_r1 > 0 and step % w.r1_stride == 0 else torch.zeros(()))
        d_adv = losses.d_logistic_loss(d_real, d_fake)
        opt_d.zero_grad(set_to_none=True)
        (d_adv + r1).backward()
        opt_d.step()

        d_on_fake = pipeline.discriminator(fake) if w.lambda_adv > 0 else None
        total, terms = losses.full_objective(fake, real, lat[0], lat[1], d_on_fake, w, rec_loss)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        terms.update({"d_adv": d_adv, "r1": r1, "total": total})
        logger.write(_log_record(step, lr, terms))

    ckpt_dir = out_dir / "checkpoint"
    save_checkpoint(ckpt_dir, pipeline.networks(),
                    {"generators": opt_g, "discriminator": opt_d},
                    schedule.steps, 0, config, stage="finetune",
                    extra={"finetuned_k": k, "base_checkpoint": str(checkpoint)})
    return ckpt_dir


def run_variant(variant: str, config: RunConfig, out_dir: str | Path,
                pretrain_checkpoint: str | Path | None = None,
                backbones=None, resume: bool = False) -> Path:
    """Train one ablation variant end to end; returns the final checkpoint."""
    import dataclasses as dc

    if variant not in ("baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound"):
        raise ConfigError(f"unknown variant {variant!r}")
    config = dc.replace(config, variant=dc.replace(config.variant, variant=variant)).validate()
    out_dir = Path(out_dir)
    init = None
    if variant in ("learned_seg", "latent_layout"):
        if pretrain_checkpoint is None:
            pretrain_checkpoint = pretrain_layout(config, out_dir / "pretrain",
                                                  backbones=backbones, resume=resume)
        init = pretrain_checkpoint
    return train_full(config, out_dir / "full", init_checkpoint=init,
                      backbones=backbones, resume=resume)


def evaluate_layout_segmentation(ckpt_dir: str | Path, k: int = 4, seed: int = 0,
                                 split: str = "test") -> dict:
    """Mean IoU of the layout head against oracle segmentation on held-out
    frames, next to the majority-class baseline (predicting the most common
    class everywhere)."""
    pipeline, manifest = load_pipeline(ckpt_dir)
    if pipeline.layout_gen is None:
        raise ConfigError(f"checkpoint variant {pipeline.variant!r} has no layout head")
    config = RunConfig.from_dict(manifest["config"]).validate()
    index = dataio.load_dataset(config.data.root)
    splits = resolve_splits(index, config)
    sampler = EpisodeSampler(index)

    inter = np.zeros(NUM_CLASSES, dtype=np.int64)
    union = np.zeros(NUM_CLASSES, dtype=np.int64)
    gt_count = np.zeros(NUM_CLASSES, dtype=np.int64)
    total_pixels = 0
    for ident in splits[split]:
        paths = index.frames[ident]
        rng = np.random.default_rng([seed, _STAGE_IDS["eval"], ident])
        perm = rng.permutation(len(paths))
        frames = [sampler.store.frame(paths[i]) for i in perm[:k]]
        sources = torch.stack([
            torch.cat([torch.from_numpy(np.moveaxis(img, -1, 0)),
                       torch.from_numpy(np.moveaxis(con, -1, 0))])
            for img, con, _, _ in frames
        ])[None].float()
        with torch.no_grad():
            z_layout, _ = pipeline.encode(sources)
        for i in perm[k:]:
            _, con, seg, _ = sampler.store.frame(paths[i])
            contour = torch.from_numpy(np.moveaxis(con, -1, 0))[None].float()
            with torch.no_grad():
                layout = predict_layout(pipeline.layout_gen, to_signed(contour), z_layout)
            pred = layout.map[0].argmax(dim=0).numpy()
            for cls in range(NUM_CLASSES):
                p, g = pred == cls, seg == cls
                inter[cls] += int((p & g).sum())
                union[cls] += int((p | g).sum())
                gt_count[cls] += int(g.sum())
            total_pixels += seg.size

    present = union > 0
    mean_iou = float(np.mean(inter[present] / union[present]))
    majority = int(gt_count.argmax())
    base_present = gt_count > 0
    baseline_ious = np.zeros(NUM_CLASSES)
    baseline_ious[majority] = gt_count[majority] / total_pixels
    majority_iou = float(np.mean(baseline_ious[base_present]))
    return {"mean_iou": mean_iou, "majority_iou": majority_iou,
            "majority_class": majority, "per_class_iou": (inter / np.maximum(union, 1)).tolist()}


# ---------------------------------------------------------------------------
# checkpoint evaluation (self-reenactment over held-out identities)


def evaluate_checkpoint(ckpt_dir: str | Path, k: int, seed: int = 0,
                        split: str = "test", backbones=None,
                        max_targets: int | None = None,
                        identity_ids: list[int] | None = None) -> dict:
    """Self-reenactment metrics for a trained checkpoint on held-out identities.

    For each identity: K source frames embed the subject, every remaining
    frame is re-synthesized from its contour and compared to ground truth.
    """
    pipeline, manifest = load_pipeline(ckpt_dir)
    config = RunConfig.from_dict(manifest["config"]).validate()
    index = dataio.load_dataset(config.data.root)
    splits = resolve_splits(index, config)
    sampler = EpisodeSampler(index)
    if backbones is None:
        backbones = build_backbones(config, sampler, splits["train"])
    generic, identity = backbones

    idents = identity_ids if identity_ids is not None else splits[split]
    rows, outs, gts = [], [], []
    for ident in idents:
        paths = index.frames[ident]
        rng = np.random.default_rng([seed, _STAGE_IDS["eval"], ident])
        perm = rng.permutation(len(paths))
        src_paths = [paths[i] for i in perm[:k]]
        tgt_paths = [paths[i] for i in perm[k:]]
        if max_targets is not None:
            tgt_paths = tgt_paths[:max_targets]
        frames = [sampler.store.frame(p) for p in src_paths]
        sources = torch.stack([
            torch.cat([torch.from_numpy(np.moveaxis(img, -1, 0)),
                       torch.from_numpy(np.moveaxis(con, -1, 0))])
            for img, con, _, _ in frames
        ])[None].float()
        with torch.no_grad():
            latents = pipeline.encode(sources)
        for path in tgt_paths:
            img, con, seg, _ = sampler.store.frame(path)
            batch = {
                "sources": None,
                "target_contour": torch.from_numpy(np.moveaxis(con, -1, 0))[None].float(),
                "target_seg": torch.from_numpy(seg.astype(np.int64))[None],
            }
            with torch.no_grad():
                fake = pipeline.synthesize(batch, latents=latents)["fake"]
            out01 = ((fake[0] + 1.0) / 2.0).clamp(0, 1)
            gt01 = torch.from_numpy(np.moveaxis(img, -1, 0))
            out_np = np.moveaxis(out01.numpy(), 0, -1)
            rows.append({
                "identity": ident,
                "l1": float((out01 - gt01).abs().mean()),
                "psnr": metrics.psnr(out_np, img),
                "ssim": metrics.ssim(out_np, img),
                "lpips": metrics.lpips_like(generic, to_signed(out01), to_signed(gt01)),
                "id_sim": metrics.id_sim(identity.embed, to_signed(out01), to_signed(gt01)),
            })
            outs.append(out01)
            gts.append(gt01)
    with torch.no_grad():
        f_fake = generic.features(to_signed(torch.stack(outs)))[-1].mean(dim=(2, 3)).numpy()
        f_real = generic.features(to_signed(torch.stack(gts)))[-1].mean(dim=(2, 3)).numpy()
    agg = {key: float(np.mean([r[key] for r in rows])) for key in ("l1", "psnr", "ssim", "lpips", "id_sim")}
    agg["fid"] = metrics.fid(f_real, f_fake)
    agg["n_samples"] = len(rows)
    return {"aggregate": agg, "per_sample": rows, "variant": pipeline.variant, "k": k}
