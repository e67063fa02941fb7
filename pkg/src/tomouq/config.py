"""Experiment configuration: a flat dotted-key text format with strict
validation (unknown keys are errors) and canonical serialization so that
parse -> serialize -> parse is the identity.

Example:

    # lines starting with # are comments
    geometry.image_height = 16
    data.peak = 1e2
    train.T = 500
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad type or malformed syntax."""


@dataclass
class GeometryBlock:
    image_height: int = 16
    image_width: int = 16
    num_angles: int = 12
    num_bins: int = 0          # 0 -> default detector spanning the diagonal
    bin_spacing: float = 1.0


@dataclass
class DataBlock:
    peak: float = 1e4
    seed: int = 0
    num_phantoms: int = 10
    phantom_source: str = "synthetic-ellipses"   # or a grid-file directory
    tumour_index: int = -1     # phantom index to modify; -1 disables
    tumour_row: int = 0
    tumour_col: int = 0
    tumour_radius: float = 0.0


@dataclass
class ModelBlock:
    d_z: int = 6
    K: int = 10
    beta: float = 5e-3
    e_mode: str = "gradient"
    r_mode: str = "squared-l2"
    width: int = 32
    init_seed: int = 0


@dataclass
class TrainBlock:
    T: int = 500
    M: int = 10
    L: int = 1
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class SampleBlock:
    S: int = 1000
    seed: int = 0


@dataclass
class BaselineBlock:
    mlem_iterations: int = 20
    mlem_floor: float = 1e-12
    tv_alpha: float = 2e-1
    tv_iterations: int = 200
    tv_sigma: float = 0.0
    tv_tau: float = 0.0
    lgd_batches: int = 300
    lgd_lr: float = 2e-3
    lgd_seed: int = 0
    gm3_mean_batches: int = 300
    gm3_var_batches: int = 200
    gm3_lr: float = 2e-3
    gm3_seed: int = 0


@dataclass
class ToyBlock:
    components: int = 7
    radius: float = 5.0
    variance: float = 1.0
    epochs: int = 800
    seed: int = 0
    samples: int = 100000
    grid: int = 50


@dataclass
class OutputBlock:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    data: DataBlock = field(default_factory=DataBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    sample: SampleBlock = field(default_factory=SampleBlock)
    baseline: BaselineBlock = field(default_factory=BaselineBlock)
    toy: ToyBlock = field(default_factory=ToyBlock)
    output: OutputBlock = field(default_factory=OutputBlock)


_BLOCKS = {f.name: f.default_factory for f in fields(ExperimentConfig)}


def _field_map(block):
    return {f.name: f.type for f in fields(block)}


def known_keys():
    keys = []
    cfg = ExperimentConfig()
    for block_name in _BLOCKS:
        block = getattr(cfg, block_name)
        for f in fields(block):
            keys.append(f"{block_name}.{f.name}")
    return keys


def _parse_value(raw, current):
    if isinstance(current, bool):
        raise ConfigError("boolean fields are not used")
    if isinstance(current, int):
        try:
            as_float = float(raw)
        except ValueError as exc:
            raise ConfigError(f"expected integer, got {raw!r}") from exc
        if as_float != int(as_float):
            raise ConfigError(f"expected integer, got {raw!r}")
        return int(as_float)
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"expected number, got {raw!r}") from exc
    return raw


def set_key(config: ExperimentConfig, dotted, raw_value) -> None:
    if "." not in dotted:
        raise ConfigError(f"keys are block.field, got {dotted!r}")
    block_name, _, field_name = dotted.partition(".")
    if block_name not in _BLOCKS:
        raise ConfigError(f"unknown block {block_name!r} in key {dotted!r}")
    block = getattr(config, block_name)
    if field_name not in _field_map(block):
        raise ConfigError(f"unknown key {dotted!r}")
    current = getattr(block, field_name)
    setattr(block, field_name, _parse_value(raw_value, current))


def parse_config(text) -> ExperimentConfig:
    config = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            set_key(config, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    validate_config(config)
    return config


def serialize_config(config: ExperimentConfig) -> str:
    lines = []
    for block_name in _BLOCKS:
        block = getattr(config, block_name)
        for f in fields(block):
            value = getattr(block, f.name)
            if isinstance(value, float):
                lines.append(f"{block_name}.{f.name} = {value:.17g}")
            else:
                lines.append(f"{block_name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config_file(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply 'key=value' strings; re-validates afterwards."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_key(config, key.strip(), value.strip())
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    g = config.geometry
    if g.image_height < 2 or g.image_width < 2:
        raise ConfigError("geometry: image dims must be >= 2")
    if g.num_angles < 1:
        raise ConfigError("geometry: num_angles must be >= 1")
    if g.num_bins < 0:
        raise ConfigError("geometry: num_bins must be >= 0 (0 = auto)")
    if g.bin_spacing <= 0:
        raise ConfigError("geometry: bin_spacing must be positive")
    if config.data.peak <= 0:
        raise ConfigError("data: peak must be positive")
    if config.data.num_phantoms < 1:
        raise ConfigError("data: num_phantoms must be >= 1")
    m = config.model
    if m.d_z < 1 or m.K < 1 or m.beta <= 0:
        raise ConfigError("model: need d_z >= 1, K >= 1, beta > 0")
    if m.e_mode not in ("gradient", "residual-norm"):
        raise ConfigError(f"model: unknown e_mode {m.e_mode!r}")
    if m.r_mode not in ("squared-l2", "tv"):
        raise ConfigError(f"model: unknown r_mode {m.r_mode!r}")
    t = config.train
    if t.T < 1 or t.M < 1 or t.L < 1:
        raise ConfigError("train: T, M, L must be >= 1")
    if config.sample.S < 1:
        raise ConfigError("sample: S must be >= 1")
    b = config.baseline
    if b.mlem_iterations < 1 or b.tv_iterations < 1:
        raise ConfigError("baseline: iteration counts must be >= 1")
    toy = config.toy
    if toy.components < 1 or toy.radius <= 0 or toy.variance <= 0:
        raise ConfigError("toy: need components >= 1, radius > 0, variance > 0")
    if toy.grid < 20:
        raise ConfigError("toy: histogram grid must be at least 20")
