import dataclasses
import json

import numpy as np
import pytest
import torch

from lsr import dataio, trainer
from lsr.config import ConfigError
from lsr.nets import read_manifest

from conftest import tiny_config


def test_lr_schedule_closed_form():
    s = trainer.StageSchedule("full", steps=100, lr=0.001)
    decay = 10  # default: final 10%
    for step in range(100):
        if step < 90:
            expected = 0.001
        else:
            t = (step - 90 + 1) / decay
            expected = 0.001 * (1 - t * 0.99)
        assert s.lr_at(step) == pytest.approx(expected, rel=1e-12), step
    assert s.lr_at(99) == pytest.approx(0.001 / 100.0, rel=1e-9)


def test_lr_schedule_decay_endpoint_custom():
    s = trainer.StageSchedule("pretrain", steps=7, lr=0.02, decay_steps=7)
    assert s.lr_at(6) == pytest.approx(0.0002, rel=1e-9)
    with pytest.raises(ValueError):
        trainer.StageSchedule("full", steps=0)


def test_pretrain_creates_layout_only_checkpoint(tiny_checkpoint):
    pre = tiny_checkpoint["out"] / "pretrain" / "checkpoint"
    manifest = read_manifest(pre)
    assert manifest["stage"] == "pretrain"
    assert sorted(manifest["networks"]) == ["encoder", "layout_gen"]
    assert not (pre / "image_gen").exists()
    assert not (pre / "discriminator").exists()


def test_pretrain_requires_layout_variant(tiny_dataset, tmp_path):
    cfg = tiny_config(tiny_dataset, **{"variant.variant": "baseline"})
    with pytest.raises(ConfigError):
        trainer.pretrain_layout(cfg, tmp_path)


def test_full_run_logs_schema(tiny_checkpoint):
    log = trainer.read_log(tiny_checkpoint["out"] / "full" / "log.jsonl")
    assert len(log) == tiny_checkpoint["cfg"].schedule.full_steps
    for key in trainer.LOG_KEYS:
        assert key in log[0]
    assert log[0]["xent"] == 0.0  # latent_layout turns cross-entropy off
    assert log[0]["rec_perc"] > 0


def test_learned_seg_keeps_xent_on(tiny_dataset, tiny_backbones, tmp_path):
    cfg = tiny_config(tiny_dataset, **{"variant.variant": "learned_seg"})
    trainer.run_variant("learned_seg", cfg, tmp_path, backbones=tiny_backbones,
                        pretrain_checkpoint=None)
    log = trainer.read_log(tmp_path / "full" / "log.jsonl")
    assert all(rec["xent"] > 0 for rec in log)


def test_variant_checkpoint_mismatch_errors(tiny_dataset, tiny_backbones, tiny_checkpoint, tmp_path):
    cfg = tiny_config(tiny_dataset, **{"variant.variant": "latent_layout"})
    with pytest.raises(ConfigError):
        trainer.train_full(cfg, tmp_path, init_checkpoint=None, backbones=tiny_backbones)
    cfg_b = tiny_config(tiny_dataset, **{"variant.variant": "baseline"})
    with pytest.raises(ConfigError):
        trainer.train_full(cfg_b, tmp_path, init_checkpoint=tiny_checkpoint["ckpt"],
                           backbones=tiny_backbones)
    # a "full" checkpoint is not a valid pre-training init
    cfg2 = tiny_config(tiny_dataset, **{"variant.variant": "latent_layout"})
    with pytest.raises(ConfigError):
        trainer.train_full(cfg2, tmp_path, init_checkpoint=tiny_checkpoint["ckpt"],
                           backbones=tiny_backbones)


def test_pipeline_wiring_flags(tiny_dataset):
    upper = trainer.Pipeline(tiny_config(tiny_dataset, **{"variant.variant": "upper_bound"}))
    assert upper.layout_gen is None
    baseline = trainer.Pipeline(tiny_config(tiny_dataset, **{"variant.variant": "baseline"}))
    assert baseline.layout_gen is None
    names = [n for n, _ in baseline.image_gen.named_parameters()]
    assert not any("spade" in n for n in names)
    spade_names = [n for n, _ in trainer.Pipeline(
        tiny_config(tiny_dataset, **{"variant.variant": "latent_layout"})).image_gen.named_parameters()]
    assert any("spade" in n for n in spade_names)


def test_resume_matches_uninterrupted_run(tiny_dataset, tiny_backbones, tmp_path):
    base = {"variant.variant": "spade_landmarks", "schedule.full_steps": 12,
            "logging.ckpt_every": 4}
    cfg_full = tiny_config(tiny_dataset, **base)
    trainer.train_full(cfg_full, tmp_path / "oneshot", backbones=tiny_backbones)
    log_full = trainer.read_log(tmp_path / "oneshot" / "log.jsonl")

    cfg_b = tiny_config(tiny_dataset, **base)
    trainer.train_full(cfg_b, tmp_path / "twopart", backbones=tiny_backbones, stop_at_step=8)
    trainer.train_full(cfg_b, tmp_path / "twopart", backbones=tiny_backbones, resume=True)
    log_resumed = trainer.read_log(tmp_path / "twopart" / "log.jsonl")

    assert len(log_full) == len(log_resumed) == 12
    for a, b in zip(log_full[8:], log_resumed[8:]):
        assert a["step"] == b["step"]
        assert a["total"] == pytest.approx(b["total"], abs=1e-5)
        assert a["rec_l1"] == pytest.approx(b["rec_l1"], abs=1e-5)


def test_finetune_freezes_encoders_and_k1(tiny_checkpoint, tiny_backbones, tmp_path):
    cfg = tiny_checkpoint["cfg"]
    index = dataio.load_dataset(cfg.data.root)
    store = dataio.FrameStore(index)
    ident = sorted(index.frames)[0]
    img, con, seg, _ = store.frame(index.frames[ident][0])
    shots = [{"image": img, "contour": con, "seg": seg}]

    pipeline, _ = trainer.load_pipeline(tiny_checkpoint["ckpt"])
    before = {k: v.clone() for k, v in pipeline.encoder.state_dict().items()}

    cfg_ft = dataclasses.replace(
        cfg, schedule=dataclasses.replace(cfg.schedule, finetune_steps_per_shot=3))
    ckpt = trainer.finetune_subject(tiny_checkpoint["ckpt"], shots, cfg_ft,
                                    tmp_path, seed=0, backbones=tiny_backbones)
    manifest = read_manifest(ckpt)
    assert manifest["stage"] == "finetune" and manifest["finetuned_k"] == 1

    tuned, _ = trainer.load_pipeline(ckpt)
    for key, val in tuned.encoder.state_dict().items():
        assert torch.equal(val, before[key]), key
    # generators did move
    base_pipeline, _ = trainer.load_pipeline(tiny_checkpoint["ckpt"])
    changed = any(not torch.equal(a, b) for (_, a), (_, b) in
                  zip(tuned.image_gen.state_dict().items(),
                      base_pipeline.image_gen.state_dict().items()))
    assert changed


def test_finetune_requires_shots(tiny_checkpoint, tmp_path):
    with pytest.raises(ValueError):
        trainer.finetune_subject(tiny_checkpoint["ckpt"], [], None, tmp_path)


def test_zeroed_spatial_probe_runs(tiny_checkpoint):
    pipeline, _ = trainer.load_pipeline(tiny_checkpoint["ckpt"])
    cfg = tiny_checkpoint["cfg"]
    index = dataio.load_dataset(cfg.data.root)
    sampler = trainer.EpisodeSampler(index)
    splits = trainer.resolve_splits(index, cfg)
    batch = sampler.batch(splits["train"], 2, 2, np.random.default_rng(0))
    delta = trainer.zeroed_spatial_probe(pipeline, batch)
    assert delta >= 0.0
    baseline = trainer.Pipeline(tiny_config(cfg.data.root, **{"variant.variant": "baseline"}))
    with pytest.raises(ConfigError):
        trainer.zeroed_spatial_probe(baseline, batch)


def test_evaluate_checkpoint_aggregates(tiny_checkpoint, tiny_backbones):
    res = trainer.evaluate_checkpoint(tiny_checkpoint["ckpt"], k=1, seed=0,
                                      backbones=tiny_backbones, max_targets=2)
    agg = res["aggregate"]
    for key in ("l1", "psnr", "ssim", "lpips", "id_sim", "fid"):
        assert key in agg
    assert res["k"] == 1 and res["variant"] == "latent_layout"
    assert agg["n_samples"] > 0


def test_all_variants_short_runs(tiny_dataset, tiny_backbones, tmp_path):
    for variant in ("baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound"):
        cfg = tiny_config(tiny_dataset, **{"variant.variant": variant,
                                           "schedule.pretrain_steps": 2,
                                           "schedule.full_steps": 3})
        ckpt = trainer.run_variant(variant, cfg, tmp_path / variant, backbones=tiny_backbones)
        log = trainer.read_log(tmp_path / variant / "full" / "log.jsonl")
        assert len(log) == 3
        assert all(np.isfinite(rec["total"]) for rec in log), variant
        manifest = read_manifest(ckpt)
        assert manifest["stage"] == "full"
