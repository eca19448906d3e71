"""Experiment configuration: one INI file with a section per stage.

Every default is the full-resolution setting. ``PROFILES["desk"]`` holds the
overrides used for 64x64 synthetic runs.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .conditional_ldm import EstimatorConfig
from .vq_compressor import CompressorConfig

OUTPUT_ENV = "BSLDM_OUTPUT"


@dataclass
class DataConfig:
    raw_dir: str = ""
    synthetic: int = 0
    synthetic_seed: int = 0
    size: int = 1024
    clahe: bool = True
    clip_limit: float = 2.0
    tile_grid: int = 8
    normalization: str = "minmax"
    jsrt: bool = False
    jsrt_gamma: float = 0.8
    blacklist: str = ""
    split_ratios: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 0.008
    beta_max: float = 0.02
    offset_lambda: float = 0.1


@dataclass
class SamplerConfig:
    kind: str = "temporal"
    omega: float = 0.003
    intercept: float = 1.4
    percentile: float = 99.5
    seed: int = 0
    batch_size: int = 64


@dataclass
class TrainConfig:
    seed: int = 0
    vqgan_epochs: int = 1000
    ldm_epochs: int = 2500
    threads: int = 0


@dataclass
class EvalConfig:
    extractor: str = "vgg16"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ENV, "runs"))

    SECTIONS = ("data", "compressor", "estimator", "schedule", "sampler", "train", "evaluate")

    # ---- overrides

    def set(self, dotted: str, value) -> None:
        """Set ``section.key`` from a string or typed value, re-validating the section."""
        if dotted == "output_dir":
            self.output_dir = str(value)
            return
        section, _, key = dotted.partition(".")
        if section not in self.SECTIONS or not key:
            raise KeyError(f"unknown config key {dotted!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if key not in fields:
            raise KeyError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        setattr(self, section, dataclasses.replace(obj, **{key: _coerce(value, current)}))

    def apply(self, overrides: dict) -> "ExperimentConfig":
        for k, v in overrides.items():
            self.set(k, v)
        return self

    # ---- serialization

    def to_dict(self) -> dict:
        out = {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}
        out["output_dir"] = self.output_dir
        return out

    def write(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for s in self.SECTIONS:
            cp[s] = {k: _format(v) for k, v in dataclasses.asdict(getattr(self, s)).items()}
        cp["output"] = {"dir": self.output_dir}
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def read(cls, path) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file {path} not found")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(path)
        cfg = cls()
        for s in cp.sections():
            if s == "output":
                if "dir" in cp[s]:
                    cfg.output_dir = cp[s]["dir"]
                continue
            if s not in cls.SECTIONS:
                raise KeyError(f"unknown config section [{s}] in {path}")
            for k, v in cp[s].items():
                cfg.set(f"{s}.{k}", v)
        return cfg

    # ---- fingerprints

    def data_fingerprint(self) -> str:
        return _hash(dataclasses.asdict(self.data))

    def compressor_fingerprint(self) -> str:
        comp = dataclasses.asdict(self.compressor)
        return _hash({"data": self.data_fingerprint(), "compressor": comp, "seed": self.train.seed})

    def ldm_fingerprint(self) -> str:
        return _hash({"compressor": self.compressor_fingerprint(),
                      "estimator": dataclasses.asdict(self.estimator),
                      "schedule": dataclasses.asdict(self.schedule), "seed": self.train.seed})

    def sample_fingerprint(self) -> str:
        return _hash({"ldm": self.ldm_fingerprint(), "sampler": dataclasses.asdict(self.sampler)})


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(value, current):
    if not isinstance(value, str):
        return tuple(value) if isinstance(current, tuple) else value
    value = value.strip()
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if not value:
            return ()
        elem = type(current[0]) if current else float
        return tuple(elem(x.strip()) for x in value.split(","))
    return value


PROFILES = {
    "desk": {
        "data.size": 64,
        "data.clahe": False,
        "data.normalization": "fixed",
        "compressor.r": 4,
        "compressor.hidden_channels": (16, 32, 64),
        "compressor.disc_layers": 2,
        "compressor.adv_warmup_steps": 250,
        "compressor.batch_size": 16,
        "compressor.perceptual": "random-conv",
        "compressor.lr_decay_epochs": 8,
        "estimator.base_channels": 32,
        "estimator.channel_mult": (1, 2, 2),
        "estimator.attention_resolutions": (8, 4),
        "estimator.num_res_blocks": 1,
        "estimator.time_embed_dim": 128,
        "estimator.latent_size": 16,
        "estimator.batch_size": 16,
        "estimator.lr_decay_epochs": 80,
        "train.vqgan_epochs": 10,
        "train.ldm_epochs": 100,
        "evaluate.extractor": "random-conv",
    },
}


def load_config(path=None, profile=None, overrides=None) -> ExperimentConfig:
    """Defaults, then profile, then file, then explicit overrides."""
    cfg = ExperimentConfig()
    if profile:
        if profile not in PROFILES:
            raise KeyError(f"unknown profile {profile!r}; available: {sorted(PROFILES)}")
        cfg.apply(PROFILES[profile])
    if path:
        file_cfg = ExperimentConfig.read(path)
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(path)
        for s in cp.sections():
            for k in cp[s]:
                if s == "output":
                    cfg.output_dir = file_cfg.output_dir
                else:
                    cfg.set(f"{s}.{k}", getattr(getattr(file_cfg, s), k))
    if overrides:
        cfg.apply(overrides)
    return cfg
