"""Run configuration: one INI file plus flag overrides, echoed canonically.

Sections are ``[model]``, ``[train]`` and ``[loss]``; keys are the field
names of ModelConfig, TrainConfig and LossWeights. Tuples are written as
comma lists, nested tuples as ``;``-separated groups (``4,6; 5,7``), and
``none`` means None.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights
from .trainer import TrainConfig

VARIANT_FLAGS = {"stochastic": "stochastic", "det-short": "deterministic_short", "det-long": "deterministic_long"}


def _is_optional(hint) -> tuple[bool, object]:
    args = typing.get_args(hint)
    if type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return True, rest[0]
    return False, hint


def _coerce(text: str, hint, key: str):
    text = text.strip()
    optional, hint = _is_optional(hint)
    if optional and text.lower() in ("none", ""):
        return None
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            v = text.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            if typing.get_origin(inner) is tuple:
                return tuple(tuple(int(x) for x in g.replace(",", " ").split()) for g in text.split(";") if g.strip())
            if not text:
                return ()
            return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(",".join(str(x) for x in g) for g in value)
        return ",".join(str(x) for x in value)
    return str(value)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def weights(self) -> LossWeights:
        return self.train.weights

    @property
    def seed(self) -> int:
        return self.train.seed

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, dict[str, str]] | None = None,
                  variant: str | None = None, V: int | None = None, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        raw = {s: dict(cp.items(s)) for s in cp.sections()}
        for s, kv in (overrides or {}).items():
            raw.setdefault(s, {}).update({k: str(v) for k, v in kv.items()})
        unknown = set(raw) - {"model", "train", "loss"}
        if unknown:
            raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")

        def typed(section, cls_):
            hints = _hints(cls_)
            out = {}
            for k, v in raw.get(section, {}).items():
                if k not in hints or k == "weights":
                    raise ConfigError(f"{source}: unknown key {k!r} in [{section}]")
                out[k] = _coerce(v, hints[k], f"[{section}] {k}")
            return out

        mkw = typed("model", ModelConfig)
        if variant is not None:
            mkw["variant"] = VARIANT_FLAGS.get(variant, variant)
        if V is not None:
            if "V" in mkw and mkw["V"] != V:
                raise ConfigError(f"config sets V={mkw['V']} but the data skeleton has {V} joints")
            mkw["V"] = V
        v = mkw.pop("variant", "stochastic")
        model = ModelConfig.for_variant(v, **mkw)
        weights = LossWeights(**typed("loss", LossWeights))
        train = TrainConfig(weights=weights, **typed("train", TrainConfig))
        return cls(model, train)

    @classmethod
    def from_file(cls, path, **kw) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        return cls.from_text(text, source=str(p), **kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["model"] = {f.name: _render(getattr(self.model, f.name)) for f in dataclasses.fields(self.model)}
        cp["train"] = {f.name: _render(getattr(self.train, f.name)) for f in dataclasses.fields(self.train)
                       if f.name != "weights"}
        cp["loss"] = {f.name: _render(getattr(self.weights, f.name)) for f in dataclasses.fields(self.weights)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def echo(self, out_dir, name: str = "resolved_config.ini") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / name
        p.write_text(self.to_ini())
        return p
