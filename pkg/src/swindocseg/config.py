"""Run configuration: flat dotted-key JSON/TOML documents with dataset presets."""

import json

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields

from .backbone import BackboneConfig
from .matchloss import ConfigurationError, CostWeights, LossWeights
from .model import ModelConfig
from .queryselect import TAU_PRESETS
from .transformer import CDNConfig


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 2
    seed: int = 0
    lr_schedule: str = "constant"   # constant | cosine
    lr_min_mult: float = 0.05       # floor of the cosine decay, as a lr multiple

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch < 1:
            raise ConfigurationError("need lr > 0, steps >= 1, batch >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 <= self.lr_min_mult <= 1.0:
            raise ConfigurationError("lr_min_mult must lie in [0, 1]")


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    preset: str = ""            # publaynet | prima | hj | tablebank | ""
    synth_n: int = 0            # generate instead of reading when > 0
    synth_seed: int = 0
    image_size: int = 256
    num_classes: int = 5
    max_instances: int = 4

    def __post_init__(self):
        if self.preset and self.preset not in TAU_PRESETS:
            raise ConfigurationError(
                f"unknown preset {self.preset!r}; choose from {sorted(TAU_PRESETS)}")


@dataclass(frozen=True)
class ScheduleConfig:
    """Domain-shift penalty schedule for the hybrid mask-matching weight."""

    start_mult: float = 3.0     # w_start = start_mult * w_mask
    fraction: float = 0.5       # schedule spans the first fraction of steps
    shape: str = "cosine"


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train"
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    cost_weights: CostWeights = field(default_factory=CostWeights)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dim: int = 128
    mask_dim: int = 64
    low_dim: int = 32
    num_queries: int = 20
    enc_layers: int = 3
    dec_layers: int = 3
    backbone_dim: int = 64
    window_size: int = 8
    cdn: CDNConfig = field(default_factory=CDNConfig)
    tau: float = 0.1
    num_prototypes: int = 16
    prototype_momentum: float = 0.99
    look_forward_twice: bool = True
    precision: str = "float32"  # float64 only used for determinism/grad checks
    threads: int = 0            # 0 = leave torch default
    out_dir: str = "runs/default"
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.mode not in ("train", "finetune-domain-shift", "eval", "predict", "gradcheck"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")

    def effective_tau(self):
        if self.data.preset:
            return TAU_PRESETS[self.data.preset]
        return self.tau

    def model_config(self):
        return ModelConfig(
            num_classes=self.data.num_classes,
            dim=self.dim,
            mask_dim=self.mask_dim,
            low_dim=self.low_dim,
            num_queries=self.num_queries,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            tau=self.effective_tau(),
            num_prototypes=self.num_prototypes,
            prototype_momentum=self.prototype_momentum,
            look_forward_twice=self.look_forward_twice,
            cdn=self.cdn,
            backbone=BackboneConfig(embed_dim=self.backbone_dim, window_size=self.window_size),
        )


# dotted config key -> (section, field); sections "" map to RunConfig itself
_KEYMAP = {
    "mode": ("", "mode"),
    "out_dir": ("", "out_dir"),
    "log_every": ("", "log_every"),
    "checkpoint_every": ("", "checkpoint_every"),
    "precision": ("", "precision"),
    "threads": ("", "threads"),
    "model.dim": ("", "dim"),
    "model.mask_dim": ("", "mask_dim"),
    "model.low_dim": ("", "low_dim"),
    "model.backbone_dim": ("", "backbone_dim"),
    "model.window_size": ("", "window_size"),
    "model.enc_layers": ("", "enc_layers"),
    "decoder.layers": ("", "dec_layers"),
    "decoder.queries": ("", "num_queries"),
    "decoder.look_forward_twice": ("", "look_forward_twice"),
    "contrastive.tau": ("", "tau"),
    "prototypes.m": ("", "num_prototypes"),
    "prototypes.momentum": ("", "prototype_momentum"),
    "cdn.lambda_p": ("cdn", "lambda_p"),
    "cdn.lambda_e": ("cdn", "lambda_e"),
    "cdn.groups": ("cdn", "num_groups"),
    "cdn.label_flip_prob": ("cdn", "label_flip_prob"),
    "data.path": ("data", "path"),
    "data.preset": ("data", "preset"),
    "data.synth_n": ("data", "synth_n"),
    "data.synth_seed": ("data", "synth_seed"),
    "data.image_size": ("data", "image_size"),
    "data.num_classes": ("data", "num_classes"),
    "data.max_instances": ("data", "max_instances"),
    "optimizer.lr": ("optimizer", "lr"),
    "optimizer.steps": ("optimizer", "steps"),
    "optimizer.batch": ("optimizer", "batch"),
    "optimizer.seed": ("optimizer", "seed"),
    "optimizer.lr_schedule": ("optimizer", "lr_schedule"),
    "optimizer.lr_min_mult": ("optimizer", "lr_min_mult"),
    "schedule.start_mult": ("schedule", "start_mult"),
    "schedule.fraction": ("schedule", "fraction"),
    "schedule.shape": ("schedule", "shape"),
    "weights.cls": ("cost_weights", "w_cls"),
    "weights.l1": ("cost_weights", "w_l1"),
    "weights.mask": ("cost_weights", "w_mask"),
    "loss.cls": ("loss_weights", "cls"),
    "loss.l1": ("loss_weights", "l1"),
    "loss.dice": ("loss_weights", "dice"),
    "loss.bce": ("loss_weights", "bce"),
    "loss.low_con": ("loss_weights", "low_con"),
    "loss.high_con": ("loss_weights", "high_con"),
    "loss.focal_alpha": ("loss_weights", "focal_alpha"),
    "loss.focal_gamma": ("loss_weights", "focal_gamma"),
}

_SECTIONS = {
    "": None,
    "cdn": ("cdn", CDNConfig),
    "data": ("data", DataConfig),
    "optimizer": ("optimizer", OptimizerConfig),
    "schedule": ("schedule", ScheduleConfig),
    "cost_weights": ("cost_weights", CostWeights),
    "loss_weights": ("loss_weights", LossWeights),
}


def _flatten(doc, prefix=""):
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, prefix=f"{key}."))
        else:
            flat[key] = v
    return flat


def config_from_dict(doc):
    """Build a RunConfig from a flat or nested dotted-key document."""
    flat = _flatten(doc)
    top = {}
    sections = {name: {} for name in _SECTIONS if name}
    for key, value in flat.items():
        if key not in _KEYMAP:
            raise ConfigurationError(f"unknown config key {key!r}")
        section, attr = _KEYMAP[key]
        if section:
            sections[section][attr] = value
        else:
            top[attr] = value
    kwargs = dict(top)
    for name, (attr, cls) in ((n, s) for n, s in _SECTIONS.items() if s):
        if sections[name]:
            kwargs[attr] = cls(**sections[name])
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig):
    """Flat dotted-key document for persistence in checkpoints."""
    out = {}
    for key, (section, attr) in _KEYMAP.items():
        obj = cfg if not section else getattr(cfg, _SECTIONS[section][0])
        out[key] = getattr(obj, attr)
    return out


def load_config(path):
    if str(path).endswith(".toml"):
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    else:
        with open(path) as f:
            doc = json.load(f)
    return config_from_dict(doc)
