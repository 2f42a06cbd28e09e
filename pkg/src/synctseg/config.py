"""Experiment configuration: a flat, typed key-value file with dotted sections.

The on-disk format is one ``section.key = value`` per line, ``#`` comments,
and blank lines. Every key is declared in :data:`SCHEMA` with a type and a
default; unknown keys are errors, so a config file plus this schema fully
determines a run. ``render_config`` writes the fully resolved document
(every key, sorted) which the harness stores as ``config.resolved``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .augment import AugmentPolicy
from .translate import CycleLossWeights, CycleMode, DiscriminatorConfig, GeneratorConfig


class ConfigError(ValueError):
    """Unknown key, malformed value, or inconsistent configuration."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"dims need three integers, got {text!r}")
    return tuple(parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class DataParams:
    mr_cases: int = 24
    ct_cases: int = 24
    eval_ct_cases: int = 8
    dims: tuple[int, int, int] = (16, 64, 64)
    organ_count: int = 3
    organ_radius_min: float = 5.0
    organ_radius_max: float = 9.0
    mr_fov: float = 0.9
    ct_fov: float = 0.9
    mr_noise_sigma: float = 0.02
    ct_noise_sigma: float = 0.015
    mr_seed_start: int = 1000
    ct_seed_start: int = 2000
    eval_seed_start: int = 3000
    mr_norm_lo: float = 0.0
    mr_norm_hi: float = 1.1
    ct_crop: float = 1.0  # optional central crop of CT before training/eval


@dataclass
class WindowParams:
    enabled: bool = True
    lo: float = -500.0
    hi: float = 500.0


@dataclass
class AugmentParams:
    enabled: bool = True
    crop_min: float = 0.8
    crop_max: float = 1.0
    rotate: bool = True
    max_degrees: float = 10.0
    flip_horizontal: bool = True
    flip_vertical: bool = False

    def policy(self, seed: int = 0) -> AugmentPolicy:
        return AugmentPolicy(
            crop_ratio_range=(self.crop_min, self.crop_max),
            rotate=self.rotate,
            max_rotate_degrees=self.max_degrees,
            flip_horizontal=self.flip_horizontal,
            flip_vertical=self.flip_vertical,
            seed=seed,
        )


@dataclass
class TranslateParams:
    base_channels: int = 16
    downsample_stages: int = 2
    residual_blocks: int = 2
    disc_channels: int = 16
    disc_layers: int = 2
    steps: int = 2000
    lr: float = 2e-4
    lr_linear_decay: bool = False
    batch_size: int = 1
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0
    cycle_mode: str = "ssim"  # ssim | mse | both
    ssim_window: int = 7
    log_every: int = 50

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_channels=self.base_channels,
            downsample_stages=self.downsample_stages,
            residual_blocks=self.residual_blocks,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_channels=self.disc_channels, layers=self.disc_layers)

    def weights(self, mode: str) -> CycleLossWeights:
        return CycleLossWeights(
            lambda_cycle=self.lambda_cycle,
            cycle_mode=CycleMode(mode),
            lambda_identity=self.lambda_identity,
        )


@dataclass
class SegParams:
    context: int = 1
    depth: int = 3
    base_channels: int = 12
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 4
    threshold: float = 0.5
    augment: bool = True
    log_every: int = 1  # epochs


@dataclass
class EvalParams:
    folds: int = 6
    folds_to_run: int = 1
    include_mr_baseline: bool = True
    mr_baseline_steps: int = 0  # 0 means "same as seg.steps"


@dataclass
class ExperimentConfig:
    """Everything one run needs: data, preprocessing, models, schedules, seeds."""

    run_name: str = "run"
    seed: int = 0
    data: DataParams = field(default_factory=DataParams)
    window: WindowParams = field(default_factory=WindowParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    translate: TranslateParams = field(default_factory=TranslateParams)
    seg: SegParams = field(default_factory=SegParams)
    evaluation: EvalParams = field(default_factory=EvalParams)

    def validate(self):
        if self.translate.cycle_mode not in ("ssim", "mse", "both"):
            raise ConfigError(f"translate.cycle_mode must be ssim, mse, or both, "
                              f"got {self.translate.cycle_mode!r}")
        if not 0 <= self.seg.context <= 3:
            raise ConfigError("seg.context must be in 0..3")
        if self.evaluation.folds < 2:
            raise ConfigError("eval.folds must be >= 2")
        if not 1 <= self.evaluation.folds_to_run <= self.evaluation.folds:
            raise ConfigError("eval.folds_to_run must be in 1..eval.folds")
        if self.data.mr_cases < self.evaluation.folds:
            raise ConfigError("data.mr_cases must be >= eval.folds")
        if self.data.eval_ct_cases < 1:
            raise ConfigError("data.eval_ct_cases must be >= 1")
        d, h, w = self.data.dims
        stride = 2 ** max(self.translate.downsample_stages, self.seg.depth)
        if h % stride or w % stride:
            raise ConfigError(f"in-plane dims {h}x{w} must be divisible by {stride}")
        if not 0 < self.data.ct_crop <= 1.0:
            raise ConfigError("data.ct_crop must be in (0, 1]")


_SECTIONS = {
    "data": DataParams,
    "window": WindowParams,
    "augment": AugmentParams,
    "translate": TranslateParams,
    "seg": SegParams,
    "eval": EvalParams,
}

_SECTION_ATTR = {
    "data": "data",
    "window": "window",
    "augment": "augment",
    "translate": "translate",
    "seg": "seg",
    "eval": "evaluation",
}

_TOP_LEVEL = {"run.name": ("run_name", str), "seed": ("seed", int)}


def _field_parser(f) -> callable:
    if f.type in ("bool", bool):
        return _parse_bool
    if f.type in ("int", int):
        return int
    if f.type in ("float", float):
        return float
    if "tuple" in str(f.type):
        return _parse_dims
    return str


def _schema() -> dict[str, tuple[str, str, callable]]:
    """key -> (section attr, field name, parser) for every known key."""
    table: dict[str, tuple[str, str, callable]] = {}
    for key, (attr, parser) in _TOP_LEVEL.items():
        table[key] = ("", attr, parser)
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            table[f"{section}.{f.name}"] = (_SECTION_ATTR[section], f.name, _field_parser(f))
    return table


SCHEMA = _schema()


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        section_attr, field_name, parser = SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        target = cfg if not section_attr else getattr(cfg, section_attr)
        setattr(target, field_name, parsed)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path))


def render_config(cfg: ExperimentConfig) -> str:
    """Fully resolved, sorted key-value document (the ``config.resolved`` content)."""
    lines = []
    for key in sorted(SCHEMA):
        section_attr, field_name, _ = SCHEMA[key]
        target = cfg if not section_attr else getattr(cfg, section_attr)
        lines.append(f"{key} = {_fmt(getattr(target, field_name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
