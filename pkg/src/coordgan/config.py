"""Experiment configuration: dataclasses, TOML loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_t: float = 5.0
    lambda_s: float = 1.0
    lambda_warp: float = 5.0
    lambda_cham: float = 100.0
    lambda_gan: float = 2.0
    lambda_con: float = 10.0
    lambda_rec: float = 10.0
    lambda_bwd: float = 10.0

    def validate(self) -> None:
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ConfigError(f"weights.{k} must be >= 0, got {v}")

    def scaled(self, **factors: float) -> "LossWeights":
        return dataclasses.replace(self, **{k: getattr(self, k) * f for k, f in factors.items()})


@dataclass
class ModelConfig:
    resolution: int = 32
    latent_dim: int = 64
    mapping_depth: int = 4
    warp_hidden: int = 128
    embed_dim: int = 128
    posenc_scale: float = 4.0
    channels: int = 32
    layers: int = 6
    kernel_size: int = 1  # pixelwise synthesis: colour is a function of the local coordinate
    struc_mod: bool = True
    # per-layer override of where the raw correspondence map is concatenated
    concat_layers: list[bool] | None = None
    backward_mlp: bool = False
    d_channels: int = 16
    patch_channels: int = 16
    enc_channels: int = 32
    # two 2x upsampling blocks after the synthesis layers; not trained at desk scale
    highres_blocks: int = 0

    def concat_mask(self) -> list[bool]:
        if not self.struc_mod:
            return [False] * self.layers
        if self.concat_layers is None:
            return [True] * self.layers
        if len(self.concat_layers) != self.layers:
            raise ConfigError("model.concat_layers needs one entry per generator layer")
        return list(self.concat_layers)

    def validate(self) -> None:
        if self.resolution < 16 or self.resolution & (self.resolution - 1):
            raise ConfigError("model.resolution must be a power of two >= 16")
        if self.layers < 2 or self.layers % 2:
            raise ConfigError("model.layers must be an even number >= 2 (RGB taps every two layers)")
        if self.highres_blocks:
            raise ConfigError("model.highres_blocks is a stub; only 0 is supported")
        self.concat_mask()


@dataclass
class DataConfig:
    kind: str = "synthetic"  # or "folder"
    path: str | None = None
    train_size: int = 2000
    structure_seed: int = 1000
    texture_seed: int = 500000
    flip: bool = False


@dataclass
class EvalConfig:
    tau: float = 0.0  # 0 selects nearest-coordinate transfer
    runs: int = 5
    queries: int = 64
    heldout_structure_seed: int = 9_000_000
    heldout_texture_seed: int = 7_000_000
    baseline_permutations: int = 20
    swap_pairs: int = 200


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 8
    iterations: int = 3000
    warmup: int = 300
    tau: float = 0.01
    r1_interval: int = 16
    r1_gamma: float = 10.0
    r1_gamma_patch: float = 1.0
    mapping_lr_mul: float = 0.01
    patch_refs: int = 8
    patch_queries: int = 4
    use_warp_loss: bool = True
    use_structure_swap: bool = True
    use_texture_swap: bool = True
    warp_pairing: str = "independent"  # or "shared_texture"
    encoder_iterations: int = 1500
    encoder_batch_size: int = 8
    checkpoint_every: int = 500
    log_every: int = 1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        self.model.validate()
        self.weights.validate()
        if self.warmup > self.iterations:
            raise ConfigError("warmup must not exceed iterations")
        for k in ("lr", "tau", "batch_size", "iterations", "r1_interval"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if self.warp_pairing not in ("independent", "shared_texture"):
            raise ConfigError(f"unknown warp_pairing {self.warp_pairing!r}")
        if self.patch_refs < 1:
            raise ConfigError("patch_refs must be >= 1")
        if self.data.kind not in ("synthetic", "folder"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        if not self.eval.tau >= 0:
            raise ConfigError("eval.tau must be >= 0")
        if self.eval.runs < 1 or self.eval.queries < 1:
            raise ConfigError("eval.runs and eval.queries must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def training_digest(self) -> str:
        """Digest of the keys that shape trained parameters; evaluation and bookkeeping keys excluded."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("eval", "checkpoint_every", "log_every")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, prefix: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        ftype = fields[key].type
        sub = _NESTED.get((cls, key))
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a table")
            kwargs[key] = _build(sub, value, prefix=f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, ftype, f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value, ftype: str, name: str):
    if ftype == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if ftype == "float" and not isinstance(value, float):
        raise ConfigError(f"{name} expects a number, got {value!r}")
    if ftype == "int" and (not isinstance(value, int) or isinstance(value, bool)):
        raise ConfigError(f"{name} expects an integer, got {value!r}")
    if ftype == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{name} expects true/false, got {value!r}")
    return value


_NESTED = {
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "weights"): LossWeights,
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "eval"): EvalConfig,
}


def from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data).validate()


def _parse_value(raw: str) -> Any:
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` overrides in order; later ones win."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path=None, overrides: list[str] | None = None) -> TrainConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            data = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))
