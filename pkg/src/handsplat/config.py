"""Run configuration, ablation presets and key=value overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    iterations: int = 3000
    # structural coordinates
    num_dynamic: int = 20
    tau: float = 0.08
    # consistency
    delta: float = 1.5
    ema_decay: float = 0.9
    train_phi: bool = True
    phi_hidden: int = 64
    phi_out: int = 32
    same_pose_prob: float = 0.3
    # loss weights
    lambda_mask: float = 0.1
    lambda_ssim: float = 0.01
    lambda_con: float = 0.01
    lambda_smooth: float = 1.0
    smooth_k: int = 5
    # networks / embeddings
    embed_dim: int = 16
    hidden_width: int = 64
    hidden_layers: int = 2
    offset_space: str = "canonical"
    template_count: int = 778
    # optimiser
    lr_net: float = 1e-3
    lr_embed: float = 1e-3
    lr_position: float = 1e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_color: float = 1e-2
    lr_opacity: float = 5e-2
    # density control
    densify_from: int = 200
    densify_until: int = 2000
    densify_every: int = 100
    densify_grad_threshold: float = 0.25
    split_scale: float = 0.004
    min_opacity: float = 0.005
    max_gaussians: int = 200_000
    # rendering
    train_scale: float = 0.5
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # run control
    checkpoint_every: int = 1000
    log_every: int = 10
    deterministic: bool = False
    threads: int = 0
    # ablations
    no_embeddings: bool = False
    no_intra_pose: bool = False
    no_inter_pose: bool = False
    no_static_bones: bool = False
    no_dynamic_bones: bool = False
    no_t: bool = False
    no_delta: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.offset_space not in ("canonical", "posed"):
            raise ConfigError("offset_space must be canonical or posed")
        if self.no_static_bones and self.no_dynamic_bones and not self.no_intra_pose:
            raise ConfigError("removing both static and dynamic bones leaves an empty basis; use no_intra_pose")
        if self.tau <= 0 or self.delta <= 0:
            raise ConfigError("tau and delta must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.iterations < 0 or self.num_dynamic < 0 or self.embed_dim < 1:
            raise ConfigError("iterations/num_dynamic must be >= 0 and embed_dim >= 1")
        if not 0 < self.train_scale <= 1:
            raise ConfigError("train_scale must be in (0, 1]")

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def with_overrides(self, overrides: list[str] | dict) -> "RunConfig":
        d = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (parse_override(s) for s in overrides)
        for k, v in items:
            if k not in d:
                raise ConfigError(f"unknown config key: {k}")
            d[k] = coerce(v, d[k])
        return RunConfig.from_dict(d)


def parse_override(s: str) -> tuple[str, str]:
    if "=" not in s:
        raise ConfigError(f"override must look like key=value: {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


def coerce(value, like):
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, list):
        return json.loads(value)
    return value


PRESETS = {
    "full": {},
    "baseline": {"no_embeddings": True, "no_intra_pose": True, "no_inter_pose": True},
    "embeddings": {"no_intra_pose": True, "no_inter_pose": True},
    "no_scs": {"no_intra_pose": True, "no_inter_pose": True},
    "inter_pose": {"no_intra_pose": True},
    "intra_pose": {"no_inter_pose": True},
    "no_intra_pose": {"no_intra_pose": True},
    "static_only": {"no_dynamic_bones": True},
    "dynamic_only": {"no_static_bones": True},
    "no_static_bones": {"no_static_bones": True},
    "no_dynamic_bones": {"no_dynamic_bones": True},
    "no_t": {"no_t": True},
    "no_delta": {"no_delta": True},
}


def preset(name: str, base: RunConfig | None = None) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown ablation preset {name!r}; choose from {', '.join(PRESETS)}")
    return (base or RunConfig()).with_overrides(PRESETS[name])
