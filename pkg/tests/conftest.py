import pytest

from lsr import synthface, trainer
from lsr.config import resolve_config

TINY_NET_OVERRIDES = [
    "nets.enc_base=4", "nets.enc_max=16", "nets.enc_blocks=3",
    "nets.unet_base=4", "nets.unet_max=16", "nets.unet_depth=2",
    "nets.gen_base=4", "nets.gen_max=16", "nets.disc_base=4", "nets.disc_max=16",
    "nets.latent_dim=16", "nets.spade_hidden=8",
]


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    synthface.make_dataset(5, 6, (32, 32), root, seed=21)
    return root


def tiny_config(root, **extra):
    overrides = [
        f"data.root={root}", "data.resolution=32", "data.k_shots=2", "data.batch_size=2",
        "schedule.pretrain_steps=4", "schedule.full_steps=6",
        "logging.ckpt_every=3",
        *TINY_NET_OVERRIDES,
    ] + [f"{k}={v}" for k, v in extra.items()]
    cfg = resolve_config(overrides=overrides)
    cfg.seed = 13
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_backbones(tiny_dataset):
    cfg = tiny_config(tiny_dataset)
    import lsr.dataio as dataio

    index = dataio.load_dataset(tiny_dataset)
    sampler = trainer.EpisodeSampler(index)
    splits = trainer.resolve_splits(index, cfg)
    return trainer.build_backbones(cfg, sampler, splits["train"], identity_steps=15)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tiny_backbones, tmp_path_factory):
    """A latent_layout checkpoint trained for a handful of steps."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(tiny_dataset, **{"variant.variant": "latent_layout"})
    ckpt = trainer.run_variant("latent_layout", cfg, out, backbones=tiny_backbones)
    return {"ckpt": ckpt, "cfg": cfg, "out": out}
