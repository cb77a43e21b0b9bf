"""Experiment configuration: INI-style sections, preset defaults, env overrides.

Precedence, lowest first: section defaults, preset defaults, config file,
environment (``SCALEBIO_<SECTION>__<KEY>``), command-line flags.  Every layer
is validated against the schema below; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

PRESETS = ("denoise", "mixture", "quality", "hyperclean", "quad-verify", "baseline-compare")
MODEL_KINDS = ("linear_regression", "logistic_regression", "mlp1")
ENV_PREFIX = "SCALEBIO_"


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


@dataclass
class ExperimentSection:
    preset: str = "denoise"
    seed: int = 0
    out: str = "out"
    log_every: int = 100
    wallclock: bool = False


@dataclass
class ModelSection:
    kind: str = "logistic_regression"
    feature_dim: int = 10
    num_classes: int = 2
    ridge: float = 1e-3
    hyperclean_c: float = 1e-3


@dataclass
class ScheduleSection:
    steps: int = 3000
    alpha: float = 100.0
    eta_w: float = 5e-2
    eta_u: float = 5e-2
    eta_lambda: float = 2e-3
    rule: str = "adam"
    batch_size: int = 64
    blocks: int = 1


@dataclass
class DataSection:
    sizes: tuple[int, ...] = (1000, 9000)
    corruption: tuple[float, ...] = (0.0, 1.0)
    val_sizes: tuple[int, ...] = (1000, 0)
    test_size: int = 2000
    distinct_tasks: bool = False
    noise_std: float = 0.1
    planted_scale: float = 1.0


@dataclass
class CompareSection:
    target_ratio: float = 0.1
    check_every: int = 10
    repeats: int = 3
    inner_steps: int = 50
    outer_steps: int = 10
    outer_step_grid: tuple[float, ...] = (1000.0, 3000.0, 10000.0)
    scalebio_eta_grid: tuple[float, ...] = (0.3, 1.0)
    cg_tol: float = 1e-6
    cg_iterations: int = 500
    neumann_terms: int = 64
    quad_outer_step: float = 0.5


@dataclass
class QuadSection:
    dim_lambda: int = 3
    dim_w: int = 5
    alphas: tuple[float, ...] = (10.0, 20.0, 40.0, 80.0, 160.0)
    probes: int = 20
    trials: int = 100
    theorem_steps: tuple[int, ...] = (1000, 10000, 100000)
    eta0: float = 4.0
    eta0_lambda: float = 1.0


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "data": DataSection,
    "compare": CompareSection,
    "quad": QuadSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    compare: CompareSection = field(default_factory=CompareSection)
    quad: QuadSection = field(default_factory=QuadSection)

    @property
    def preset(self) -> str:
        return self.experiment.preset

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def out(self) -> Path:
        return Path(self.experiment.out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                if isinstance(value, (tuple, list)):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


# Preset defaults.  Values are in the same string form a config file uses.
PRESET_DEFAULTS = {
    "denoise": {},
    "mixture": {
        "model": {"kind": "linear_regression", "num_classes": "1"},
        "data": {"sizes": "4000, 4000", "corruption": "0, 0", "val_sizes": "6000, 4000",
                 "distinct_tasks": "true", "noise_std": "0.5"},
    },
    "quality": {
        "data": {"sizes": "1000, 9000", "corruption": "0, 0.5", "val_sizes": "1000, 0"},
    },
    "hyperclean": {
        "model": {"feature_dim": "20", "num_classes": "5", "ridge": "0"},
        "schedule": {"steps": "2000", "eta_w": "1e-2", "eta_u": "1e-2", "eta_lambda": "1e-2", "batch_size": "100"},
        "data": {"sizes": "1000", "corruption": "0.3", "val_sizes": "1000", "planted_scale": "3"},
    },
    "quad-verify": {},
    "baseline-compare": {
        "model": {"feature_dim": "20", "num_classes": "5", "ridge": "0"},
        "schedule": {"steps": "2000", "eta_w": "5e-2", "eta_u": "5e-2", "eta_lambda": "1.0", "batch_size": "2000"},
        "data": {"sizes": "20000", "corruption": "0.3", "val_sizes": "1000", "planted_scale": "3"},
    },
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(kind, text: str):
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text.strip())
    if kind is float:
        return float(text.strip())
    if kind is str:
        return text.strip()
    if typing.get_origin(kind) is tuple:
        elem = typing.get_args(kind)[0]
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        return tuple(_parse_value(elem, p) for p in parts)
    raise TypeError(kind)


def _section_types(cls):
    return typing.get_type_hints(cls)


def _apply(cfg: ExperimentConfig, layer: dict, origin: str):
    for section, values in layer.items():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        target = getattr(cfg, section)
        types = _section_types(SECTIONS[section])
        for key, text in values.items():
            if key not in types:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
            try:
                value = text if not isinstance(text, str) else _parse_value(types[key], text)
            except (ValueError, TypeError) as err:
                raise ConfigError(f"{origin}: bad value for {section}.{key}: {err}") from None
            setattr(target, key, value)


def read_ini(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def env_layer(environ) -> dict:
    layer: dict = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
        section, key = rest.split("__", 1)
        layer.setdefault(section.lower(), {})[key.lower()] = value
    return layer


def _validate(cfg: ExperimentConfig):
    e, m, s, d, c, q = cfg.experiment, cfg.model, cfg.schedule, cfg.data, cfg.compare, cfg.quad
    checks = [
        (e.preset in PRESETS, f"experiment.preset must be one of {', '.join(PRESETS)}"),
        (e.seed >= 0, "experiment.seed must be nonnegative"),
        (e.log_every >= 1, "experiment.log_every must be at least 1"),
        (m.kind in MODEL_KINDS, f"model.kind must be one of {', '.join(MODEL_KINDS)}"),
        (m.feature_dim >= 1, "model.feature_dim must be positive"),
        (m.ridge >= 0 and m.hyperclean_c > 0, "model.ridge must be >= 0 and model.hyperclean_c > 0"),
        (m.kind == "linear_regression" or m.num_classes >= 2, "classification needs model.num_classes >= 2"),
        (s.steps >= 1, "schedule.steps must be positive"),
        (min(s.alpha, s.eta_w, s.eta_u, s.eta_lambda) > 0, "schedule rates and alpha must be positive"),
        (s.rule in ("plain", "adam"), "schedule.rule must be plain or adam"),
        (s.batch_size >= 1 and s.blocks >= 1, "schedule.batch_size and schedule.blocks must be positive"),
        (len(d.sizes) >= 1 and min(d.sizes) >= 1, "data.sizes must list positive source sizes"),
        (len(d.corruption) == len(d.sizes), "data.corruption needs one entry per source"),
        (len(d.val_sizes) == len(d.sizes), "data.val_sizes needs one entry per source"),
        (all(0 <= f <= 1 for f in d.corruption), "data.corruption entries must lie in [0, 1]"),
        (min(d.val_sizes) >= 0 and sum(d.val_sizes) >= 1, "data.val_sizes must be nonnegative with a positive total"),
        (d.test_size >= 1 and d.noise_std >= 0, "data.test_size must be positive and data.noise_std nonnegative"),
        (0 < c.target_ratio < 1, "compare.target_ratio must lie in (0, 1)"),
        (c.check_every >= 1 and c.inner_steps >= 1 and c.outer_steps >= 1, "compare step counts must be positive"),
        (len(c.outer_step_grid) >= 1 and min(c.outer_step_grid) > 0, "compare.outer_step_grid must be positive"),
        (len(c.scalebio_eta_grid) >= 1 and min(c.scalebio_eta_grid) > 0, "compare.scalebio_eta_grid must be positive"),
        (c.repeats >= 1, "compare.repeats must be positive"),
        (len(q.alphas) >= 2 and min(q.alphas) > 0, "quad.alphas needs at least two positive values"),
        (len(q.theorem_steps) >= 2 and min(q.theorem_steps) >= 1, "quad.theorem_steps needs at least two positive values"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def load_config(path=None, environ=None, overrides=None) -> ExperimentConfig:
    """Build and validate a config.

    ``overrides`` is a ``{section: {key: value}}`` layer (values either
    strings or already-typed) applied last, used for command-line flags.
    """
    environ = os.environ if environ is None else environ
    layers = []
    if path is not None:
        layers.append((read_ini(path), str(path)))
    layers.append((env_layer(environ), "environment"))
    if overrides:
        layers.append((overrides, "command line"))

    preset = ExperimentSection.preset
    for layer, _ in layers:
        preset = layer.get("experiment", {}).get("preset", preset)
    if isinstance(preset, str):
        preset = preset.strip()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")

    cfg = ExperimentConfig()
    _apply(cfg, PRESET_DEFAULTS[preset], f"preset {preset}")
    for layer, origin in layers:
        _apply(cfg, layer, origin)
    cfg.experiment.preset = preset
    _validate(cfg)
    return cfg
