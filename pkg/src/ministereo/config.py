"""Dataclass configs and the flat key=value config-file format.

Files use ``[section]`` headers with ``key = value`` lines and ``#`` comments.
Parsing is fail-closed: unknown sections or keys raise, so a typo in a knob
name can never be silently ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

AGG_VARIANTS = (
    "two-d-only",
    "bilateral",
    "two-d-then-three-d",
    "three-d-then-two-d",
    "interleaved",
)

SCALES = (4, 8, 16, 32)

TEXTURES = ("noise", "gradient", "checker")


class ConfigError(ValueError):
    """Bad config file or invalid field values."""


@dataclass(frozen=True)
class NetworkConfig:
    """Every architecture knob of the disparity network."""

    d_max: int = 64
    stem_channels: int = 16
    channels_per_scale: tuple[int, int, int, int] = (24, 32, 48, 64)
    blocks_per_scale: tuple[int, int, int, int] = (1, 2, 2, 1)
    expand_ratio: int = 4
    fused_channels: int = 48
    agg_variant: str = "three-d-then-two-d"
    agg_channels: int = 32
    two_d_layer_count: int = 6
    three_d_kernel: tuple[int, int, int] = (3, 3, 3)
    three_d_proportion: float = 0.048
    mask_head_channels: int = 32
    size_preset: str = "micro"

    def __post_init__(self):
        if self.d_max % 4:
            raise ConfigError(f"d_max must be divisible by 4, got {self.d_max}")
        if self.agg_variant not in AGG_VARIANTS:
            raise ConfigError(f"unknown agg_variant {self.agg_variant!r}; "
                              f"expected one of {AGG_VARIANTS}")
        if not 0.0 < self.three_d_proportion < 1.0:
            raise ConfigError("three_d_proportion must lie in (0, 1)")
        if len(self.channels_per_scale) != 4 or len(self.blocks_per_scale) != 4:
            raise ConfigError("channels_per_scale / blocks_per_scale need one entry "
                              "per scale {1/4, 1/8, 1/16, 1/32}")

    @property
    def d_levels(self) -> int:
        return self.d_max // 4

    @property
    def scales(self) -> tuple[int, int, int, int]:
        return SCALES


def micro_config(**overrides) -> NetworkConfig:
    """Small preset used for tests and desk-scale training (64x128 inputs)."""
    return replace(NetworkConfig(), **overrides)


def paper_like_config(**overrides) -> NetworkConfig:
    """Large preset used for MACs profiling only."""
    base = NetworkConfig(
        d_max=192,
        stem_channels=32,
        channels_per_scale=(48, 64, 96, 160),
        blocks_per_scale=(2, 3, 3, 2),
        fused_channels=96,
        agg_channels=96,
        two_d_layer_count=8,
        mask_head_channels=64,
        size_preset="paper-like",
    )
    return replace(base, **overrides)


PRESETS = {"micro": micro_config, "paper-like": paper_like_config}


@dataclass(frozen=True)
class StageConfig:
    """One training stage of the three-stage protocol."""

    stage: int = 1
    steps: int = 200
    batch_size: int = 2
    peak_lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic eval
    teacher_update: str = "fixed"  # fixed | ema | hard-copy
    ema_decay: float = 0.999
    lambda_disp: float = 1.0
    lambda_feat: float = 1.0
    perturb_strength: float = 1.0
    oracle_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.stage == 2 and self.teacher_update not in ("fixed", "ema", "hard-copy"):
            raise ConfigError(f"unknown teacher_update {self.teacher_update!r}")
        if self.lambda_disp <= 0:
            raise ConfigError("lambda_disp must be positive")
        if self.lambda_feat < 0:
            raise ConfigError("lambda_feat must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic dataset description."""

    count: int = 16
    height: int = 64
    width: int = 128
    disparity_min: int = 2
    disparity_max: int = 40
    texture: str = "noise"
    object_count: int = 3
    seed: int = 0
    perturb_strength: float = 0.0  # bake appearance perturbation into the images

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ConfigError("scene size must be divisible by 32")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        if not 0 <= self.disparity_min <= self.disparity_max:
            raise ConfigError("need 0 <= disparity_min <= disparity_max")
        if self.disparity_max >= self.width:
            raise ConfigError("disparity_max must be smaller than the image width")
        if self.count < 1 or self.object_count < 0:
            raise ConfigError("count must be >= 1 and object_count >= 0")


# --- file parsing ------------------------------------------------------------------

def parse_config_text(text: str, path: str = "<config>") -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{path}:{lineno}: empty section header")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in current:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        current[key] = value
    return sections


def parse_config_file(path) -> dict[str, dict[str, str]]:
    p = Path(path)
    return parse_config_text(p.read_text(), str(p))


def _coerce(value: str, ftype, key: str):
    try:
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is str:
            return value
        if ftype is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        # tuple[int, ...] styles: comma separated
        if ftype is tuple or getattr(ftype, "__origin__", None) is tuple:
            return tuple(int(v.strip()) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    raise ConfigError(f"unsupported config field type for {key!r}")


def _from_section(cls, section: dict[str, str], name: str, fixed: dict | None = None):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = dict(fixed or {})
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] has unknown key {key!r}")
        if fixed and key in fixed:
            raise ConfigError(f"[{name}] may not override {key!r}")
        ftype = cls.__dataclass_fields__[key].type
        # dataclass field types are strings under `from __future__ import annotations`
        kwargs[key] = _coerce(value, _TYPE_NAMES[ftype] if isinstance(ftype, str) else ftype, key)
    return cls(**kwargs)


_TYPE_NAMES = {
    "int": int,
    "float": float,
    "str": str,
    "bool": bool,
    "tuple[int, int, int]": tuple,
    "tuple[int, int, int, int]": tuple,
}


def network_config_from(sections: dict[str, dict[str, str]]) -> NetworkConfig:
    """Build a NetworkConfig from the [network] section (preset + overrides)."""
    sec = dict(sections.get("network", {}))
    preset = sec.pop("preset", "micro")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network preset {preset!r}; expected one of {tuple(PRESETS)}")
    base = PRESETS[preset]()
    overrides = {}
    known = {f.name for f in fields(NetworkConfig)}
    for key, value in sec.items():
        if key not in known:
            raise ConfigError(f"[network] has unknown key {key!r}")
        ftype = NetworkConfig.__dataclass_fields__[key].type
        overrides[key] = _coerce(value, _TYPE_NAMES[ftype] if isinstance(ftype, str) else ftype, key)
    return replace(base, **overrides)


def stage_config_from(sections: dict[str, dict[str, str]], stage: int) -> StageConfig:
    name = f"stage{stage}"
    return _from_section(StageConfig, sections.get(name, {}), name, fixed={"stage": stage})


def scene_spec_from(sections: dict[str, dict[str, str]]) -> SceneSpec:
    if "data" not in sections:
        raise ConfigError("config has no [data] section")
    return _from_section(SceneSpec, sections["data"], "data")
