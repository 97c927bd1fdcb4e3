"""Pipeline configuration: nested dataclasses serialised as versioned JSON.

Unknown keys are rejected at every level so that a typo fails loudly instead
of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .ckpt import dump_json, fnv1a64, hex64
from .errors import ConfigurationError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    n_images: int = 2000
    image_size: int = 32


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 20
    lr: float = 2e-3
    batch: int = 64
    min_accuracy: float = 0.9


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_edit: int = 50
    grid_points: int = 50
    bottleneck_size: int = 4
    channels: int = 32
    epochs: int = 30
    lr: float = 2e-3
    batch: int = 32


@dataclass(frozen=True)
class CacheConfig:
    n_images: int = 1000  # train-split images inverted for SAE / probe activations
    n_align_states: int = 256  # of those, how many keep their window states for alignment


@dataclass(frozen=True)
class SaeConfig:
    expansion: int = 8
    lam: float = 16.0  # sparser than the 4.0 op default; fewer, more separable live latents
    lr: float = 5e-4
    epochs: int = 100
    batch_maps: int = 64
    n_train: int = 256
    n_heldout: int = 64
    tau: float = 0.01
    use_timestep_embedding: bool = True


@dataclass(frozen=True)
class AlignConfig:
    concepts: tuple[int, ...] = (0, 1, 2)
    lam_sem: float = 3.0
    lam_recon: float = 1.0
    margin: float = 2.0
    epochs: int = 10
    lr: float = 5e-3
    batch: int = 32


@dataclass(frozen=True)
class SteerDefaults:
    alpha: float = 2.0
    k: int = 1
    gamma: float = 1.0
    include_bias: bool = False
    symmetric: bool = False
    n_images: int = 4  # held-out images dumped as PGM pairs


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 32
    alphas: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    ks: tuple[int, ...] = (1, 16)
    probe_per_class: int = 400
    probe_ks: tuple[int, ...] = (1, 16)
    probe_random_draws: int = 5
    probe_pooling: str = "mean"
    random_draws: int = 8  # random-direction baseline draws pooled per concept
    sae_sweep_expansions: tuple[int, ...] = (4, 8, 16)
    sae_sweep_lams: tuple[float, ...] = (1.0, 8.0, 32.0)
    sae_sweep_lam: float = 4.0  # held fixed while the expansion ratio varies
    sae_sweep_epochs: int = 30
    sae_sweep_images: int = 128


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "casl-out"
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    sae: SaeConfig = field(default_factory=SaeConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    steer: SteerDefaults = field(default_factory=SteerDefaults)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {self.version}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        d = self.diffusion
        if not 0 <= d.t_edit <= d.T - 1:
            raise ConfigurationError(f"t_edit={d.t_edit} outside [0, {d.T - 1}]")
        if self.data.image_size % d.bottleneck_size:
            raise ConfigurationError("image size must be a multiple of the bottleneck size")
        if self.cache.n_align_states > self.cache.n_images:
            raise ConfigurationError("cache.n_align_states exceeds cache.n_images")
        if self.sae.n_train + self.sae.n_heldout > self.cache.n_images:
            raise ConfigurationError("SAE train + held-out images exceed the activation cache")
        if self.cache.n_images > (self.data.n_images * 4) // 5:
            raise ConfigurationError("activation cache larger than the training split")
        if not self.align.concepts or len(set(self.align.concepts)) != len(self.align.concepts):
            raise ConfigurationError("align.concepts must be a nonempty list of distinct attribute indices")
        if self.eval.random_draws < 1:
            raise ConfigurationError("eval.random_draws must be at least 1")
        if self.eval.probe_pooling not in ("mean", "max"):
            raise ConfigurationError("eval.probe_pooling must be 'mean' or 'max'")
        return self


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _to_plain(cfg)


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected an object")
        return _build(tp, value, where)
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list")
        (inner, _) = tp.__args__
        return tuple(_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string")
        return value
    raise ConfigurationError(f"{where}: unsupported field type {tp}")


def _build(cls, data: dict, where: str):
    import typing

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kw)


def from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    if "version" not in data:
        raise ConfigurationError("config is missing its 'version' field")
    return _build(PipelineConfig, data, "").validate()


def serialize(cfg: PipelineConfig) -> str:
    return dump_json(to_dict(cfg))


def parse(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}") from None
    return from_dict(data)


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        return parse(f.read())


def replace(cfg: PipelineConfig, **changes) -> PipelineConfig:
    """``dataclasses.replace`` that also accepts dotted section keys, e.g. ``**{"sae.epochs": 5}``."""
    top = {}
    nested: dict[str, dict] = {}
    for key, value in changes.items():
        if "." in key:
            sec, name = key.split(".", 1)
            nested.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    for sec, kw in nested.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **kw)
    return dataclasses.replace(cfg, **top).validate()


def section_hash(cfg: PipelineConfig, *sections: str) -> str:
    """Hash of the seed plus the named sections; what a stage's outputs depend on."""
    blob = {"seed": cfg.seed, **{s: to_dict(getattr(cfg, s)) for s in sections}}
    return hex64(fnv1a64(json.dumps(blob, sort_keys=True).encode("utf-8")))


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit stream seed for a (stage, item, ...) key."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint32)[0])
