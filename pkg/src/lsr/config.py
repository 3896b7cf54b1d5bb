"""Run configuration: dataclass sections, config-file parsing, --set overrides, hashing.

Config files use a flat ``section.key = value`` grammar, one entry per line:

    # comment
    data.resolution = 32
    schedule.full_steps = 1500
    variant.variant = "latent_layout"

Values are parsed as JSON where possible (numbers, booleans, lists, quoted
strings) and fall back to bare strings. Precedence: defaults < file < --set.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


VARIANTS = ("baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound")

# Table-order aliases accepted on the CLI (--variants).
VARIANT_ALIASES = {
    "baseline": "baseline",
    "spade": "spade_landmarks",
    "spade_landmarks": "spade_landmarks",
    "learned_seg": "learned_seg",
    "latent": "latent_layout",
    "latent_layout": "latent_layout",
    "upper": "upper_bound",
    "upper_bound": "upper_bound",
}


class ConfigError(Exception):
    """Bad configuration: unknown key, malformed file, invalid value."""


@dataclass
class DataConfig:
    root: str = "data/synth"
    resolution: int = 64
    k_shots: int = 4
    batch_size: int = 8
    split_file: str = ""      # JSON {"train": [ids], "test": [ids]}; empty -> train_frac split
    train_frac: float = 0.75
    prefetch_queue: int = 4   # bounded queue size for prefetch workers


@dataclass
class VariantConfig:
    variant: str = "latent_layout"
    layout_channels: int = 8  # >= 7 segmentation classes so the pretrain head is reusable
    resolution: int = 64


@dataclass
class NetsConfig:
    latent_dim: int = 512
    enc_base: int = 32
    enc_max: int = 512
    enc_blocks: int = 5
    unet_base: int = 32
    unet_max: int = 512
    unet_depth: int = 4
    gen_base: int = 32
    gen_max: int = 512
    gen_start: int = 4        # starting spatial size of the style-seeded feature tensor
    spade_hidden: int = 64
    disc_base: int = 32
    disc_max: int = 512
    separate_trunks: bool = False  # fully separate encoder trunks per latent head
    style_in_spade: bool = False   # also feed the style latent to SPADE blocks via AdaIN


@dataclass
class LossConfig:
    lambda_r: float = 0.1
    lambda_adv: float = 0.1
    lambda_l2: float = 1e-4
    gamma_r1: float = 10.0
    rec_perc: float = 1.0
    rec_id: float = 0.1
    rec_l1: float = 1.0
    r1_stride: int = 1        # apply R1 every N discriminator steps


@dataclass
class ScheduleConfig:
    pretrain_steps: int = 1000
    full_steps: int = 5000
    extra_steps: int = 0      # optional extended training after the main budget
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    decay_frac: float = 0.1   # trailing fraction of steps over which lr decays to lr/100
    finetune_steps_per_shot: int = 40


@dataclass
class LoggingConfig:
    out_dir: str = "runs"
    log_every: int = 10
    ckpt_every: int = 500


_SECTIONS = {
    "data": DataConfig,
    "variant": VariantConfig,
    "nets": NetsConfig,
    "losses": LossConfig,
    "schedule": ScheduleConfig,
    "logging": LoggingConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.variant.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant.variant!r}; expected one of {VARIANTS}")
        if self.variant.layout_channels < 7:
            raise ConfigError("variant.layout_channels must be >= 7 (segmentation classes)")
        for name in ("lambda_r", "lambda_adv", "lambda_l2", "gamma_r1"):
            if getattr(self.losses, name) < 0:
                raise ConfigError(f"losses.{name} must be nonnegative")
        for name in ("pretrain_steps", "full_steps", "finetune_steps_per_shot"):
            if getattr(self.schedule, name) <= 0:
                raise ConfigError(f"schedule.{name} must be positive")
        if self.data.resolution < 32:
            raise ConfigError("data.resolution must be >= 32")
        self.variant.resolution = self.data.resolution
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]

    @classmethod
    def from_dict(cls, nested: dict) -> "RunConfig":
        cfg = cls()
        for section, values in nested.items():
            if section == "seed":
                cfg.seed = int(values)
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            target = getattr(cfg, section)
            names = {f.name: f for f in dataclasses.fields(target)}
            for key, val in values.items():
                if key not in names:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(target, key, _coerce(val, type(getattr(target, key))))
        return cfg


def _coerce(val, target_type):
    if target_type is bool and isinstance(val, str):
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {val!r} as bool")
    if target_type in (int, float) and not isinstance(val, bool):
        return target_type(val)
    return val


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def parse_config_file(path: str | Path) -> dict:
    """Parse the ``section.key = value`` grammar into a nested dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    nested: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        _insert_dotted(nested, key.strip(), _parse_value(value.strip()), where=f"{path}:{lineno}")
    return nested


def _insert_dotted(nested: dict, dotted: str, value, where: str = "--set"):
    if dotted == "seed":
        nested["seed"] = value
        return
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"{where}: key must be 'section.key' or 'seed', got {dotted!r}")
    nested.setdefault(parts[0], {})[parts[1]] = value


def resolve_config(
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
    **direct,
) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and --set overrides.

    ``direct`` entries take dotted keys, e.g. resolve_config(**{"data.resolution": 32}).
    """
    nested: dict = {}
    if config_path is not None:
        file_dict = parse_config_file(config_path)
        for sec, vals in file_dict.items():
            if sec == "seed":
                nested["seed"] = vals
            else:
                nested.setdefault(sec, {}).update(vals)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VAL, got {item!r}")
        key, _, value = item.partition("=")
        _insert_dotted(nested, key.strip(), _parse_value(value.strip()))
    for key, value in direct.items():
        _insert_dotted(nested, key, value, where="direct override")
    return RunConfig.from_dict(nested).validate()
