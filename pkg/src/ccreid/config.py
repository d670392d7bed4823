"""Training/benchmark configuration and its INI representation.

Every key lives in a section; ``CCREID_<SECTION>_<KEY>`` environment
variables override file values (e.g. ``CCREID_STAGE2_EPOCHS=5``).
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .toybench import ToySpec

ENV_PREFIX = "CCREID_"


@dataclass
class StageConfig:
    epochs: int
    lr: float
    weight_decay: float = 0.0


@dataclass
class TrainingConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(120, 3.5e-4))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(40, 5e-6))
    P: int = 16
    K_p: int = 4
    batch_size: int = 64
    margin: float = 0.3
    lambda1: float = 0.1
    lambda2: float = 1.0
    temperature: float = 0.07
    seed: int = 0
    image_height: int = 256
    image_width: int = 128
    # augmentation
    hflip: bool = True
    pad_crop: bool = True
    pad: int = 10
    random_erasing: bool = True
    erasing_prob: float = 0.5
    # model
    backbone: str = "toy"          # "toy" or "clip"
    clip_name: str = "openai/clip-vit-base-patch16"
    feature_dim: int = 64
    n_tokens: int = 4
    token_dim: int = 64
    encoder_width: int = 32
    warm_start_steps: int = 0      # toy only: generic thumbnail-regression steps before stage 1
    # loss components (ablation switches)
    use_i2t: bool = True
    use_i2i: bool = True
    use_cfm: bool = True
    i2tce_negatives: int = 0       # 0 = full denominator over all classes
    # data
    manifest: str = ""
    clothes_labels: str = "5,6,7,9,12"
    workers: int = 0
    # run
    checkpoint_every: int = 0      # epochs; 0 = only at stage end
    stage1_checkpoint: str = ""    # used by stage 2 when no checkpoint is passed explicitly
    betas: str = "0.9,0.999"

    def __post_init__(self):
        self.validate()

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    @property
    def clothes_label_set(self) -> frozenset:
        return frozenset(int(x) for x in self.clothes_labels.split(",") if x.strip())

    @property
    def adam_betas(self) -> tuple[float, float]:
        b1, b2 = (float(x) for x in self.betas.split(","))
        return b1, b2

    def validate(self) -> None:
        for name in ("stage1", "stage2"):
            st = getattr(self, name)
            if st.epochs < 0 or st.lr <= 0:
                raise ConfigurationError(f"{name}: epochs must be >= 0 and lr > 0")
        if self.P < 1 or self.K_p < 1 or self.P * self.K_p != self.batch_size:
            raise ConfigurationError(
                f"P*K_p = {self.P}*{self.K_p} does not equal batch_size {self.batch_size}")
        if self.temperature <= 0 or self.margin < 0:
            raise ConfigurationError("temperature must be > 0 and margin >= 0")
        if self.warm_start_steps < 0:
            raise ConfigurationError("warm_start_steps must be >= 0")
        if self.backbone not in ("toy", "clip"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        for name in ("stage1", "stage2"):
            if isinstance(d.get(name), dict):
                d[name] = StageConfig(**d[name])
        return cls(**d)


# section -> {ini key: TrainingConfig attribute}
TRAIN_SECTIONS = {
    "stage1": {"epochs": "stage1.epochs", "lr": "stage1.lr", "weight_decay": "stage1.weight_decay"},
    "stage2": {"epochs": "stage2.epochs", "lr": "stage2.lr", "weight_decay": "stage2.weight_decay"},
    "batch": {"p": "P", "k_p": "K_p", "size": "batch_size"},
    "loss": {"margin": "margin", "lambda1": "lambda1", "lambda2": "lambda2",
             "temperature": "temperature", "use_i2t": "use_i2t", "use_i2i": "use_i2i",
             "use_cfm": "use_cfm", "i2tce_negatives": "i2tce_negatives"},
    "model": {"backbone": "backbone", "clip_name": "clip_name", "feature_dim": "feature_dim",
              "n_tokens": "n_tokens", "token_dim": "token_dim", "encoder_width": "encoder_width",
              "warm_start_steps": "warm_start_steps"},
    "augment": {"hflip": "hflip", "pad_crop": "pad_crop", "pad": "pad",
                "random_erasing": "random_erasing", "erasing_prob": "erasing_prob"},
    "data": {"manifest": "manifest", "image_height": "image_height", "image_width": "image_width",
             "clothes_labels": "clothes_labels", "workers": "workers"},
    "train": {"seed": "seed", "checkpoint_every": "checkpoint_every", "betas": "betas",
              "stage1_checkpoint": "stage1_checkpoint"},
}


def _convert(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def read_ini(path) -> configparser.ConfigParser:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str.lower
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigurationError(f"{path}: {e}") from None
    return cp


def _overrides(cp: configparser.ConfigParser, sections: dict, env=None):
    """(section, key, raw value) from the file, then the environment."""
    env = os.environ if env is None else env
    for section, keys in sections.items():
        for key in keys:
            env_key = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if env_key in env:
                yield section, key, env[env_key]
            elif cp.has_option(section, key):
                yield section, key, cp.get(section, key)


def _set(obj, dotted: str, raw: str, label: str):
    *parents, attr = dotted.split(".")
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, attr, _convert(raw, getattr(obj, attr), label))


def load_training_config(path, env=None) -> TrainingConfig:
    cp = read_ini(path)
    cfg = TrainingConfig()
    for section, key, raw in _overrides(cp, TRAIN_SECTIONS, env):
        _set(cfg, TRAIN_SECTIONS[section][key], raw, f"[{section}] {key}")
    here = os.path.dirname(os.path.abspath(path))
    for attr in ("manifest", "stage1_checkpoint"):
        value = getattr(cfg, attr)
        if value and not os.path.isabs(value):
            setattr(cfg, attr, os.path.normpath(os.path.join(here, value)))
    cfg.validate()
    return cfg


TOY_SECTION = {f.name: f.name for f in dataclasses.fields(ToySpec)}


def load_toy_spec(path, env=None) -> ToySpec:
    cp = read_ini(path)
    spec = ToySpec()
    for section, key, raw in _overrides(cp, {"toy": TOY_SECTION}, env):
        _set(spec, key, raw, f"[{section}] {key}")
    return spec


def write_ini(cfg: TrainingConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str.lower
    for section, keys in TRAIN_SECTIONS.items():
        cp[section] = {}
        for key, dotted in keys.items():
            obj = cfg
            for part in dotted.split("."):
                obj = getattr(obj, part)
            cp[section][key] = str(obj)
    with open(path, "w") as fh:
        cp.write(fh)
