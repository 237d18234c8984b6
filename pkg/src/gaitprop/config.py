"""Experiment configuration: a sectioned ``key = value`` text format.

Grammar::

    file     := (blank | comment | section | entry)*
    comment  := '#' anything
    section  := '[' name ']'
    entry    := key '=' value        (an inline '#' starts a comment)

Keys are only valid inside their own section. ``[model] layers`` holds
comma-separated descriptors: ``dense <units>`` or
``conv <kernel> <stride> <out_channels> <forward_channels>``.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .credit import ALGORITHMS
from .errors import ConfigError


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _shape(text):
    parts = [p for p in text.lower().replace(" ", "").split("x") if p]
    shape = tuple(int(p) for p in parts)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"bad shape {text!r}")
    return shape


def _fmt_shape(shape):
    return "x".join(str(s) for s in shape)


def parse_layers(text):
    descriptors = []
    for chunk in text.split(","):
        words = chunk.split()
        if not words:
            continue
        kind = words[0].lower()
        if kind == "dense" and len(words) == 2:
            descriptors.append(("dense", int(words[1])))
        elif kind == "conv" and len(words) == 5:
            descriptors.append(("conv",) + tuple(int(w) for w in words[1:]))
        else:
            raise ValueError(
                f"bad layer descriptor {chunk.strip()!r}; expected 'dense N' or 'conv K S C_OUT C_FWD'"
            )
    if not descriptors:
        raise ValueError("at least one layer is required")
    return tuple(descriptors)


def format_layers(descriptors):
    return ", ".join(" ".join(str(v) for v in d) for d in descriptors)


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, formatter or None)
_SCHEMA = {
    "experiment": {
        "algorithm": (str, None),
        "seed": (int, None),
        "epochs": (int, None),
        "batch_size": (int, None),
        "precision": (int, None),
        "max_steps": (int, None),
    },
    "data": {
        "dataset": (str, None),
        "path": (str, None),
        "classes": (int, None),
        "features": (_shape, _fmt_shape),
        "per_class": (int, None),
        "test_per_class": (int, None),
        "separation": (float, None),
        "standardize": (_bool, None),
        "train_limit": (int, None),
    },
    "model": {
        "layers": (parse_layers, format_layers),
        "slope": (float, None),
        "overlap_correction": (str, None),
    },
    "credit": {
        "eta": (_opt_float, None),
        "gamma": (_opt_float, None),
        "beta": (float, None),
        "kappa": (float, None),
        "norm_power": (int, None),
        "feedback_seed": (int, None),
    },
    "optimizer": {
        "lr": (float, None),
        "beta1": (float, None),
        "beta2": (float, None),
        "adam_eps": (float, None),
    },
    "measure": {
        "angles": (_bool, None),
        "angle_stride": (int, None),
        "include_bias": (_bool, None),
    },
}


@dataclass
class ExperimentConfig:
    """Validated experiment settings.

    The numeric defaults are tuned for desk-scale runs; they are not values
    reported for the original experiments.
    """

    layers: tuple
    algorithm: str = "bp"
    seed: int = 0
    epochs: int = 5
    batch_size: int = 32
    precision: int = 64
    max_steps: int = 0
    dataset: str = "synthetic"
    path: str = ""
    classes: int = 10
    features: tuple = (64,)
    per_class: int = 100
    test_per_class: int = 50
    separation: float = 6.0
    standardize: bool = False
    train_limit: int = 0
    slope: float = 0.1
    overlap_correction: str = "subtract"
    eta: float = None
    gamma: float = None
    beta: float = 1.0
    kappa: float = 1.0
    norm_power: int = 2
    feedback_seed: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    angles: bool = True
    angle_stride: int = 1
    include_bias: bool = False
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def input_shape(self):
        if self.dataset == "synthetic":
            return tuple(self.features)
        if self.dataset in ("idx", "mnist5k"):
            return (1, 28, 28)
        if self.dataset == "cifar10":
            return (3, 32, 32)
        raise ConfigError(f"unknown dataset {self.dataset!r}", key="dataset")


def _section_of(key):
    for section, keys in _SCHEMA.items():
        if key in keys:
            return section
    return None


def parse_config(text):
    """Parse and validate a configuration text into an :class:`ExperimentConfig`."""
    values, lines = {}, {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=lineno)
            section = line[1:-1].strip().lower()
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if section is None:
            raise ConfigError("entry outside of any section", key=key, line=lineno)
        if key not in _SCHEMA[section]:
            home = _section_of(key)
            hint = f" (belongs in [{home}])" if home else ""
            raise ConfigError(f"unknown key in [{section}]{hint}", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        parser = _SCHEMA[section][key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(str(exc), key=key, line=lineno) from None
        lines[key] = lineno
    if "layers" not in values:
        raise ConfigError("missing required key", key="layers")
    cfg = ExperimentConfig(**values)
    cfg.lines = lines
    validate(cfg)
    return cfg


def _fail(cfg, key, message):
    raise ConfigError(message, key=key, line=cfg.lines.get(key))


def validate(cfg):
    if cfg.algorithm not in ALGORITHMS:
        _fail(cfg, "algorithm", f"unknown algorithm {cfg.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if cfg.algorithm == "gp" and (cfg.eta is None or not cfg.eta > 0):
        _fail(cfg, "eta", "algorithm=gp requires a positive eta (missing hyper-parameter)")
    if cfg.algorithm == "vgp" and (cfg.gamma is None or not cfg.gamma > 0):
        _fail(cfg, "gamma", "algorithm=vgp requires a positive gamma (missing hyper-parameter)")
    for key in ("epochs", "batch_size", "angle_stride"):
        if getattr(cfg, key) < 1:
            _fail(cfg, key, "must be >= 1")
    for key in ("max_steps", "train_limit"):
        if getattr(cfg, key) < 0:
            _fail(cfg, key, "must be >= 0")
    if cfg.precision not in (32, 64):
        _fail(cfg, "precision", "must be 32 or 64")
    if cfg.norm_power not in (1, 2):
        _fail(cfg, "norm_power", "must be 1 or 2")
    if not cfg.slope > 0:
        _fail(cfg, "slope", "leaky-ReLU slope must be positive")
    if not cfg.beta > 0:
        _fail(cfg, "beta", "must be positive")
    if cfg.kappa < 0:
        _fail(cfg, "kappa", "must be non-negative")
    if not cfg.lr > 0:
        _fail(cfg, "lr", "must be positive")
    if cfg.overlap_correction not in ("subtract", "divide"):
        _fail(cfg, "overlap_correction", "must be 'subtract' or 'divide'")
    if cfg.dataset not in ("synthetic", "idx", "mnist5k", "cifar10"):
        _fail(cfg, "dataset", f"unknown dataset {cfg.dataset!r}")
    if cfg.dataset in ("idx", "cifar10") and not cfg.path:
        _fail(cfg, "path", f"dataset={cfg.dataset} needs a path")
    if cfg.dataset == "synthetic":
        for key in ("classes", "per_class", "test_per_class"):
            if getattr(cfg, key) < 1:
                _fail(cfg, key, "must be >= 1")
    n_classes = cfg.classes if cfg.dataset == "synthetic" else 10
    check_architecture(cfg, cfg.input_shape, n_classes)
    return cfg


def check_architecture(cfg, input_shape, n_classes):
    """Walk the layer descriptors through the input shape, checking every
    invertibility and geometry constraint."""
    shape = tuple(input_shape)
    for i, desc in enumerate(cfg.layers):
        where = f"layer {i} ({' '.join(str(v) for v in desc)})"
        if desc[0] == "dense":
            n = int(np.prod(shape))
            units = desc[1]
            if not 1 <= units <= n:
                _fail(cfg, "layers", f"{where}: a square layer on a {n}-wide input can forward 1..{n} units")
            shape = (units,)
        else:
            _, k, stride, c_out, fwd = desc
            if len(shape) != 3:
                _fail(cfg, "layers", f"{where}: conv layers need a (C, H, W) input, got {shape}")
            c_in, h, w = shape
            if c_out != c_in * k * k:
                _fail(
                    cfg,
                    "layers",
                    f"{where}: invertibility constraint violated: C_out={c_out} != C_in*H*W={c_in * k * k}",
                )
            if not 1 <= stride <= k:
                _fail(cfg, "layers", f"{where}: stride must lie in [1, kernel]")
            for extent in (h, w):
                if extent < k or (extent - k) % stride:
                    _fail(cfg, "layers", f"{where}: input extent {extent} is not tiled exactly by kernel {k}, stride {stride}")
            if not 1 <= fwd <= c_out:
                _fail(cfg, "layers", f"{where}: forward channels must lie in [1, {c_out}]")
            shape = (fwd, (h - k) // stride + 1, (w - k) // stride + 1)
    if shape != (n_classes,):
        _fail(cfg, "layers", f"the last layer must be 'dense {n_classes}' to emit one logit per class, got shape {shape}")


def format_config(cfg):
    """Render a config back to text; ``parse_config(format_config(c)) == c``."""
    out = []
    for section, keys in _SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, formatter) in keys.items():
            value = getattr(cfg, key)
            out.append(f"{key} = {formatter(value) if formatter else _fmt(value)}")
        out.append("")
    return "\n".join(out)


def config_fields():
    return [f.name for f in fields(ExperimentConfig) if f.name != "lines"]
