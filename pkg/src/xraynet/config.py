"""Flat ``section.key = value`` run configuration.

Example::

    # comments start with '#'
    model.preset = default
    model.num_classes = 24
    train.epochs = 20
    train.decay_at = 0.5, 0.75
    augment.rotation_max_deg = 10
    svm.grid = 0.25, 1, 4

Every key is validated before anything runs; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .model import LayerSpec, ModelSpec, SpecError, default_spec, shape_chain
from .svm import SvmConfig, SvmError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_KEYS = {
    "preset": "default", "layers": "", "num_classes": 24, "input_shape": (1, 128, 128),
    "leaky_slope": 0.01, "pool_dropout": 0.25, "dense_dropout": 0.5, "output_gain": 0.1,
    "bn_momentum": 0.9, "bn_epsilon": 1e-5, "init_seed": 0,
}


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'section.key = value', got {line!r}")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {n}: key {key!r} lacks a section prefix")
        out[key] = value.strip()
    return out


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            elem = type(like[0]) if like else float
            return tuple(elem(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(like).__name__}") from None


def _fill(cls, section: str, values: dict[str, str], **fixed):
    defaults = cls(**fixed) if fixed else cls()
    kwargs = dict(fixed)
    names = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _convert(raw, getattr(defaults, key), f"{section}.{key}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=default_spec)
    model_options: dict = field(default_factory=lambda: dict(MODEL_KEYS))
    train: TrainConfig = field(default_factory=TrainConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    data: dict = field(default_factory=dict)

    @property
    def init_seed(self) -> int:
        return int(self.model_options["init_seed"])

    def dump(self) -> str:
        """Resolved configuration in the same format :func:`load_config` reads."""
        lines = []
        for k, v in self.model_options.items():
            if k == "layers":
                v = " ".join(l.token() for l in self.model.layers)
                lines.append(f"model.layers = {v}")
            else:
                lines.append(f"model.{k} = {_format(v)}")
        for k, v in self.train.to_dict().items():
            if k != "augment":
                lines.append(f"train.{k} = {_format(v)}")
        for k, v in self.train.augment.to_dict().items():
            lines.append(f"augment.{k} = {_format(v)}")
        for f in dataclasses.fields(self.svm):
            lines.append(f"svm.{f.name} = {_format(getattr(self.svm, f.name))}")
        for k, v in self.data.items():
            lines.append(f"data.{k} = {v}")
        return "\n".join(lines) + "\n"


def build_config(values: dict[str, str]) -> RunConfig:
    sections: dict[str, dict[str, str]] = {"model": {}, "train": {}, "augment": {}, "svm": {}, "data": {}}
    for key, raw in values.items():
        sec, _, name = key.partition(".")
        if sec not in sections:
            raise ConfigError(f"unknown section {sec!r} in key {key!r}")
        sections[sec][name] = raw

    opts = dict(MODEL_KEYS)
    for k, raw in sections["model"].items():
        if k not in MODEL_KEYS:
            raise ConfigError(f"unknown key model.{k}")
        opts[k] = _convert(raw, MODEL_KEYS[k], f"model.{k}")
    try:
        if opts["layers"]:
            tokens = [t for t in opts["layers"].replace(",", " ").split() if t]
            spec = ModelSpec(tuple(LayerSpec.parse(t) for t in tokens), tuple(opts["input_shape"]),
                             opts["num_classes"], opts["leaky_slope"], opts["bn_momentum"],
                             opts["bn_epsilon"], opts["output_gain"])
        elif opts["preset"] == "default":
            base = default_spec(opts["num_classes"], opts["input_shape"], opts["pool_dropout"],
                              opts["dense_dropout"], opts["leaky_slope"])
            spec = dataclasses.replace(base, bn_momentum=opts["bn_momentum"], bn_epsilon=opts["bn_epsilon"],
                                       output_gain=opts["output_gain"])
        else:
            raise ConfigError(f"model.preset {opts['preset']!r} unknown and model.layers not given")
        shape_chain(spec)
    except (SpecError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None

    augment = _fill(AugmentConfig, "augment", sections["augment"])
    train = _fill(TrainConfig, "train", sections["train"], augment=augment)
    try:
        svm = _fill(SvmConfig, "svm", sections["svm"])
    except SvmError as exc:
        raise ConfigError(f"svm: {exc}") from None
    return RunConfig(spec, opts, train, svm, dict(sections["data"]))


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides on top."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
    for item in overrides:
        values.update(parse_text(item))
    return build_config(values)
