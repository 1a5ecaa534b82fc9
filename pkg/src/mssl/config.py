"""Experiment configuration: loading, strict validation, digests, run manifest."""

import hashlib
import os
from dataclasses import dataclass, field, asdict

import yaml

from .errors import MissingFile, ParseError, ValidationError, IoError

CODE_VERSION = "0.1.0"


@dataclass(frozen=True)
class DataConfig:
    root_path: str = ""
    image_size: tuple = (384, 288)  # (width, height)
    val_fraction: float = 0.1
    labeled_ratio: float = 0.2


@dataclass(frozen=True)
class ModelConfig:
    family: str = "tiny_unet"
    levels: int = 4
    base_width: int = 16
    pretrained_encoder: bool = False
    encoder_weights: str = ""


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs_teacher: int = 50
    epochs_student: int = 50


@dataclass(frozen=True)
class LossConfig:
    tversky_fp_weight: float = 0.3
    tversky_fn_weight: float = 0.7
    smooth: float = 1.0


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    strong_prob: float = 0.5
    max_shift: float = 0.10
    scale_min: float = 0.9
    scale_max: float = 1.1
    max_rotate: float = 15.0
    rgb_shift: float = 0.08
    brightness: float = 0.2
    contrast: float = 0.2


@dataclass(frozen=True)
class SslConfig:
    mode: str = "online"
    momentum_ratio: float = 0.95
    ema_interval: object = "epoch"  # "epoch" or positive step count
    pseudo_threshold: float = 0.5
    unsup_loss_weight: float = 1.0
    student_init: str = "teacher"
    track_momentum_student: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "run"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    output_dir: str = "runs"

    def to_dict(self):
        d = asdict(self)
        d["data"]["image_size"] = list(self.data.image_size)
        return d

    def digest(self):
        return config_digest(self)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "loss": LossConfig,
    "augment": AugmentConfig,
    "ssl": SslConfig,
}
_TOP_SCALARS = {"run_id": str, "seed": int, "output_dir": str}


def _expand_dotted(d):
    """Turn {'a.b': v} keys into nested dicts, recursively."""
    out = {}
    for key, value in d.items():
        if isinstance(value, dict):
            value = _expand_dotted(value)
        parts = str(key).split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(key, "conflicts with a scalar value")
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(node.get(leaf), dict):
            node[leaf].update(value)
        else:
            node[leaf] = value
    return out


def _coerce_scalar(section, name, value, want_type):
    field_name = f"{section}.{name}" if section else name
    if want_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(field_name, f"expected a number, got {value!r}")
        return float(value)
    if want_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(field_name, f"expected an integer, got {value!r}")
        return int(value)
    if want_type is bool:
        if not isinstance(value, bool):
            raise ValidationError(field_name, f"expected a boolean, got {value!r}")
        return value
    if want_type is str:
        if not isinstance(value, str):
            raise ValidationError(field_name, f"expected a string, got {value!r}")
        return value
    return value


def _build_section(name, cls, raw):
    defaults = cls()
    known = {f: type(getattr(defaults, f)) for f in defaults.__dataclass_fields__}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValidationError(f"{name}.{key}", "unknown key")
        if name == "data" and key == "image_size":
            if (not isinstance(value, (list, tuple)) or len(value) != 2
                    or not all(isinstance(v, int) and v > 0 for v in value)):
                raise ValidationError("data.image_size", "expected [width, height] positive ints")
            kwargs[key] = (int(value[0]), int(value[1]))
        elif name == "ssl" and key == "ema_interval":
            if value != "epoch" and not (isinstance(value, int) and not isinstance(value, bool) and value > 0):
                raise ValidationError("ssl.ema_interval", 'expected "epoch" or a positive integer')
            kwargs[key] = value
        else:
            kwargs[key] = _coerce_scalar(name, key, value, known[key])
    return cls(**kwargs)


def config_from_dict(raw):
    """Build and validate an ExperimentConfig from a plain dict (strict keys)."""
    if not isinstance(raw, dict):
        raise ValidationError("<root>", "config must be a mapping")
    raw = _expand_dotted(raw)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValidationError(key, "expected a mapping")
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key in _TOP_SCALARS:
            kwargs[key] = _coerce_scalar("", key, value, _TOP_SCALARS[key])
        else:
            raise ValidationError(key, "unknown key")
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _require(cond, field_name, reason):
    if not cond:
        raise ValidationError(field_name, reason)


def _validate(cfg):
    _require(cfg.run_id != "", "run_id", "must be nonempty")
    _require(cfg.seed >= 0, "seed", "must be nonnegative")
    d = cfg.data
    _require(0.0 < d.val_fraction < 1.0, "data.val_fraction", "must be in (0,1)")
    _require(0.0 < d.labeled_ratio <= 1.0, "data.labeled_ratio", "must be in (0,1]")
    m = cfg.model
    _require(m.family in ("tiny_unet", "fpn_densenet169"), "model.family",
             f"unknown family {m.family!r}")
    _require(m.levels >= 1, "model.levels", "must be positive")
    _require(m.base_width >= 1, "model.base_width", "must be positive")
    o = cfg.optim
    _require(o.algorithm == "adam", "optim.algorithm", f"unsupported optimizer {o.algorithm!r}")
    _require(o.learning_rate > 0, "optim.learning_rate", "must be positive")
    _require(o.batch_size >= 1, "optim.batch_size", "must be positive")
    _require(o.epochs_teacher >= 0, "optim.epochs_teacher", "must be nonnegative")
    _require(o.epochs_student >= 0, "optim.epochs_student", "must be nonnegative")
    ls = cfg.loss
    _require(0.0 <= ls.tversky_fp_weight <= 1.0, "loss.tversky_fp_weight", "must be in [0,1]")
    _require(0.0 <= ls.tversky_fn_weight <= 1.0, "loss.tversky_fn_weight", "must be in [0,1]")
    _require(ls.smooth > 0, "loss.smooth", "must be positive")
    a = cfg.augment
    _require(0.0 <= a.flip_prob <= 1.0, "augment.flip_prob", "must be in [0,1]")
    _require(0.0 <= a.strong_prob <= 1.0, "augment.strong_prob", "must be in [0,1]")
    _require(0.0 < a.scale_min <= a.scale_max, "augment.scale_min", "need 0 < scale_min <= scale_max")
    s = cfg.ssl
    _require(s.mode in ("offline", "online"), "ssl.mode", 'must be "offline" or "online"')
    _require(0.0 <= s.momentum_ratio <= 1.0, "ssl.momentum_ratio", "alpha out of [0,1]")
    _require(0.0 < s.pseudo_threshold < 1.0, "ssl.pseudo_threshold", "must be in (0,1)")
    _require(s.unsup_loss_weight >= 0.0, "ssl.unsup_loss_weight", "must be nonnegative")
    _require(s.student_init in ("teacher", "fresh"), "ssl.student_init",
             'must be "teacher" or "fresh"')


def load_config(path):
    """Load a YAML config file (nested keys or dotted keys) and validate it."""
    if not os.path.isfile(path):
        raise MissingFile(f"config file not found: {path}")
    with open(path, "r") as fh:
        text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ParseError(str(exc), line=line)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def apply_overrides(cfg, overrides):
    """Apply dotted key=value override strings and revalidate."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValidationError(item, "override must be key=value")
        key, _, value = item.partition("=")
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError:
            parsed = value
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValidationError(key, "unknown key")
            node = node[p]
        node[parts[-1]] = parsed
    return config_from_dict(raw)


def canonical_yaml(d):
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=False)


def config_digest(cfg):
    return hashlib.sha256(canonical_yaml(cfg.to_dict()).encode()).hexdigest()


def run_dir(cfg):
    return os.path.join(cfg.output_dir, cfg.run_id)


def write_manifest(cfg, resolved=None):
    """Write the run manifest under output_dir/run_id; deterministic bytes."""
    doc = {
        "config": cfg.to_dict(),
        "config_digest": config_digest(cfg),
        "seed": cfg.seed,
        "code_version": CODE_VERSION,
        "resolved": dict(resolved or {}),
    }
    path = os.path.join(run_dir(cfg), "manifest.yaml")
    try:
        os.makedirs(run_dir(cfg), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(canonical_yaml(doc))
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}")
    return path


def load_manifest(path):
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    with open(path, "r") as fh:
        return yaml.safe_load(fh.read())
