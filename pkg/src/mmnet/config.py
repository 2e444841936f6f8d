"""Model, training and evaluation configuration plus the ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCALES = (2, 3, 4, 5)


@dataclass(frozen=True)
class GroupSpec:
    blocks: int
    channels: int
    stride: int = 2


@dataclass(frozen=True)
class EncoderConfig:
    groups: tuple[GroupSpec, ...] = tuple(GroupSpec(2, c) for c in (16, 32, 64, 96, 128))
    input_size: tuple[int, int] = (224, 320)

    def __post_init__(self):
        if len(self.groups) != 5:
            raise ValueError(f"encoder needs exactly 5 groups, got {len(self.groups)}")
        for g in self.groups:
            if g.blocks < 1 or g.channels < 1:
                raise ValueError(f"invalid group spec {g}")
            if g.stride != 2:
                raise ValueError("every group must halve the resolution (stride 2)")

    @classmethod
    def uniform(cls, channels, blocks: int = 2, input_size=(224, 320)) -> "EncoderConfig":
        return cls(tuple(GroupSpec(blocks, int(c)) for c in channels), tuple(input_size))


@dataclass(frozen=True)
class SEMConfig:
    dilations: tuple[int, ...] = (1, 4, 8, 12)
    branch_channels: int = 32


@dataclass(frozen=True)
class LSAConfig:
    r: int = 5
    inner_channels: int = 10

    def __post_init__(self):
        if self.r < 1 or self.r % 2 == 0:
            raise ValueError(f"LSA neighbourhood r must be odd and positive, got {self.r}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sem: SEMConfig = field(default_factory=SEMConfig)
    lsa: LSAConfig = field(default_factory=LSAConfig)
    channels: int = 21
    scales: tuple[int, ...] = SCALES
    lsa_enabled: bool = True
    dense_fusion_enabled: bool = True
    cross_scale_enabled: bool = True
    complement_enabled: bool = True
    scale: int | None = None  # scale used for matching; chosen on validation data when None

    def __post_init__(self):
        if not self.scales or any(s not in SCALES for s in self.scales):
            raise ValueError(f"scales must be a non-empty subset of {SCALES}, got {self.scales}")
        if list(self.scales) != list(range(self.scales[0], self.scales[0] + len(self.scales))):
            raise ValueError(f"scales must be consecutive and ascending, got {self.scales}")
        if self.scale is not None and self.scale not in self.scales:
            raise ValueError(f"selected scale {self.scale} not among {self.scales}")

    def stride(self, scale: int) -> int:
        return 2**scale

    def extent(self, scale: int) -> tuple[int, int]:
        h, w = self.encoder.input_size
        return h // 2**scale, w // 2**scale


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 0.0002
    lr_decay_factor: float = 0.1
    decay_interval: int = 10000
    batch_size: int = 5
    max_iters: int = 10000
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)  # alpha for scales 2..5
    supervised_scales: tuple[int, ...] = SCALES
    checkpoint_interval: int = 1000
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.lr, self.lr_decay_factor) <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and decay factor must be positive; momentum and weight decay >= 0")
        if self.decay_interval < 1 or self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("decay_interval and batch_size must be >= 1")
        if not self.supervised_scales or any(s not in SCALES for s in self.supervised_scales):
            raise ValueError(f"supervised_scales must be a non-empty subset of {SCALES}")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights holds one weight per scale 2..5")

    def alpha(self, scale: int) -> float:
        return self.loss_weights[scale - 2]

    def lr_at(self, iteration: int) -> float:
        """Step schedule: multiply by ``lr_decay_factor`` every ``decay_interval`` iterations."""
        return self.lr * self.lr_decay_factor ** (iteration // self.decay_interval)


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.1
    normalizer: str = "image"  # "image" or "bbox": longer side of either
    alphas: tuple[float, ...] = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.11, 0.12, 0.13, 0.14, 0.15)
    select_alpha: float = 0.1
    tps_lambda: float = 0.0

    def __post_init__(self):
        if self.normalizer not in ("image", "bbox"):
            raise ValueError(f"normalizer must be 'image' or 'bbox', got {self.normalizer!r}")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# --------------------------------------------------------------------------
# key = value files


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(p) for p in v.replace(" ", "").split(",") if p)


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


# key -> (section, field, parser)
_KEYS: dict[str, tuple[str, str, Any]] = {
    "model.channels": ("model", "channels", int),
    "model.scales": ("model", "scales", _ints),
    "model.scale": ("model", "scale", _opt_int),
    "model.lsa.enabled": ("model", "lsa_enabled", _bool),
    "model.dense_fusion.enabled": ("model", "dense_fusion_enabled", _bool),
    "model.cross_scale.enabled": ("model", "cross_scale_enabled", _bool),
    "model.complement.enabled": ("model", "complement_enabled", _bool),
    "model.lsa.r": ("lsa", "r", int),
    "model.lsa.inner_channels": ("lsa", "inner_channels", int),
    "model.sem.dilations": ("sem", "dilations", _ints),
    "model.sem.branch_channels": ("sem", "branch_channels", int),
    "model.encoder.channels": ("encoder", "channels", _ints),
    "model.encoder.blocks": ("encoder", "blocks", _ints),
    "model.input_size": ("encoder", "input_size", _ints),
    "train.lr": ("train", "lr", float),
    "train.momentum": ("train", "momentum", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.lr_decay_factor": ("train", "lr_decay_factor", float),
    "train.decay_interval": ("train", "decay_interval", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.max_iters": ("train", "max_iters", int),
    "train.loss_weights": ("train", "loss_weights", _floats),
    "train.supervised_scales": ("train", "supervised_scales", _ints),
    "train.checkpoint_interval": ("train", "checkpoint_interval", int),
    "train.seed": ("train", "seed", int),
    "train.dtype": ("train", "dtype", str),
    "eval.alpha": ("eval", "alpha", float),
    "eval.normalizer": ("eval", "normalizer", str),
    "eval.alphas": ("eval", "alphas", _floats),
    "eval.select_alpha": ("eval", "select_alpha", float),
    "tps.lambda": ("eval", "tps_lambda", float),
}

# un-namespaced ablation switches are accepted as aliases
_ALIASES = {
    k[len("model.") :]: k
    for k in ("model.lsa.enabled", "model.dense_fusion.enabled", "model.cross_scale.enabled", "model.complement.enabled")
}

KNOWN_KEYS = tuple(_KEYS)


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def build_config(values: dict[str, str], base: Config | None = None) -> Config:
    """Apply string overrides to ``base`` (defaults when omitted)."""
    base = base or Config()
    sections: dict[str, dict[str, Any]] = {"model": {}, "lsa": {}, "sem": {}, "encoder": {}, "train": {}, "eval": {}}
    for key, raw in values.items():
        key = _ALIASES.get(key, key)
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parser = _KEYS[key]
        try:
            sections[section][name] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    try:
        enc = base.model.encoder
        e = sections["encoder"]
        if e:
            channels = e.get("channels", tuple(g.channels for g in enc.groups))
            blocks = e.get("blocks", tuple(g.blocks for g in enc.groups))
            if len(blocks) == 1:
                blocks = blocks * len(channels)
            if len(blocks) != len(channels):
                raise ConfigError("model.encoder.blocks must give one count or one per group")
            size = e.get("input_size", enc.input_size)
            if len(size) != 2:
                raise ConfigError("model.input_size needs two values H,W")
            enc = EncoderConfig(tuple(GroupSpec(b, c) for b, c in zip(blocks, channels)), tuple(size))
        model = dataclasses.replace(
            base.model,
            encoder=enc,
            lsa=dataclasses.replace(base.model.lsa, **sections["lsa"]),
            sem=dataclasses.replace(base.model.sem, **sections["sem"]),
            **sections["model"],
        )
        train = dataclasses.replace(base.train, **sections["train"])
        ev = dataclasses.replace(base.eval, **sections["eval"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(model, train, ev)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> Config:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_kv_text(p.read_text(), str(p)))
    values.update(overrides or {})
    return build_config(values)


def model_config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    j = lambda xs: ",".join(str(x) for x in xs)  # noqa: E731
    return {
        "model.encoder.channels": j(g.channels for g in cfg.encoder.groups),
        "model.encoder.blocks": j(g.blocks for g in cfg.encoder.groups),
        "model.input_size": j(cfg.encoder.input_size),
        "model.channels": str(cfg.channels),
        "model.scales": j(cfg.scales),
        "model.scale": "auto" if cfg.scale is None else str(cfg.scale),
        "model.sem.dilations": j(cfg.sem.dilations),
        "model.sem.branch_channels": str(cfg.sem.branch_channels),
        "model.lsa.r": str(cfg.lsa.r),
        "model.lsa.inner_channels": str(cfg.lsa.inner_channels),
        "model.lsa.enabled": str(cfg.lsa_enabled).lower(),
        "model.dense_fusion.enabled": str(cfg.dense_fusion_enabled).lower(),
        "model.cross_scale.enabled": str(cfg.cross_scale_enabled).lower(),
        "model.complement.enabled": str(cfg.complement_enabled).lower(),
    }


def format_kv(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def config_to_kv(cfg: Config) -> dict[str, str]:
    """Every key of :data:`KNOWN_KEYS` rendered so that ``build_config`` restores ``cfg``."""
    j = lambda xs: ",".join(repr(x) if isinstance(x, float) else str(x) for x in xs)  # noqa: E731
    out = model_config_to_kv(cfg.model)
    t, e = cfg.train, cfg.eval
    out.update({
        "train.lr": repr(t.lr),
        "train.momentum": repr(t.momentum),
        "train.weight_decay": repr(t.weight_decay),
        "train.lr_decay_factor": repr(t.lr_decay_factor),
        "train.decay_interval": str(t.decay_interval),
        "train.batch_size": str(t.batch_size),
        "train.max_iters": str(t.max_iters),
        "train.loss_weights": j(t.loss_weights),
        "train.supervised_scales": j(t.supervised_scales),
        "train.checkpoint_interval": str(t.checkpoint_interval),
        "train.seed": str(t.seed),
        "train.dtype": t.dtype,
        "eval.alpha": repr(e.alpha),
        "eval.normalizer": e.normalizer,
        "eval.alphas": j(e.alphas),
        "eval.select_alpha": repr(e.select_alpha),
        "tps.lambda": repr(e.tps_lambda),
    })
    return out
