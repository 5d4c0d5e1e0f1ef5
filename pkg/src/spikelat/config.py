"""Flat key=value configuration with a typed registry.

Every tunable lives in one registry of dotted keys with a type, a default,
and optionally a closed set of choices. A config file is plain text, one
``key = value`` pair per line, with ``#`` comments; parse errors carry the
line number. Unknown keys are rejected everywhere, including command-line
overrides. ``snapshot`` renders the fully resolved configuration back into
the same format, sorted, so a run directory records exactly what ran and
the file round-trips to an equal configuration.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import FormatError


@dataclass(frozen=True)
class ConfigKey:
    name: str
    type: type
    default: object
    choices: tuple = ()


REGISTRY = [
    ConfigKey("data.source", str, "blobs", ("blobs", "digits", "idx")),
    ConfigKey("data.train_images", str, ""),
    ConfigKey("data.train_labels", str, ""),
    ConfigKey("data.eval_images", str, ""),
    ConfigKey("data.eval_labels", str, ""),
    ConfigKey("data.train_count", int, 512),
    ConfigKey("data.eval_count", int, 128),
    ConfigKey("data.classes", int, 4),
    ConfigKey("data.size", int, 8),
    ConfigKey("data.noise", float, 0.10),
    ConfigKey("data.jitter", float, 0.5),
    ConfigKey("data.label_noise", float, 0.0),
    ConfigKey("data.seed", int, 0),
    ConfigKey("model.preset", str, "mlp-mini",
              ("mlp-mini", "vgg-mini", "sew-mini")),
    ConfigKey("model.timesteps", int, 8),
    ConfigKey("model.hidden", int, 128),
    ConfigKey("model.width", int, 8),
    ConfigKey("model.encoder_channels", int, 2),
    ConfigKey("model.seed", int, 0),
    ConfigKey("lif.tau_leak", float, 0.5),
    ConfigKey("lif.v_th", float, 1.0),
    ConfigKey("lif.surrogate_width", float, 1.0),
    ConfigKey("lif.detach_reset", bool, False),
    ConfigKey("train.epochs", int, 5),
    ConfigKey("train.batch_size", int, 64),
    ConfigKey("train.lr", float, 0.001),
    ConfigKey("train.weight_decay", float, 0.01),
    ConfigKey("train.loss", str, "tad", ("tad", "vanilla")),
    ConfigKey("train.tau", float, 2.0),
    ConfigKey("train.detach_weights", bool, True),
    ConfigKey("train.seed", int, 0),
    ConfigKey("decode.tiebreak", str, "spikers", ("spikers", "all")),
    ConfigKey("decode.mode", str, "first", ("first", "rate")),
    ConfigKey("analyze.batch", int, 64),
    ConfigKey("analyze.robustness", bool, True),
    ConfigKey("analyze.seed", int, 0),
]

_BY_NAME = {k.name: k for k in REGISTRY}

_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def _convert(key: ConfigKey, raw: str, where: str):
    raw = raw.strip()
    if key.type is bool:
        low = raw.lower()
        if low in _TRUE:
            value = True
        elif low in _FALSE:
            value = False
        else:
            raise FormatError(
                f"{where}: {key.name} expects a boolean, got {raw!r}"
            )
    elif key.type is int:
        try:
            value = int(raw)
        except ValueError:
            raise FormatError(
                f"{where}: {key.name} expects an integer, got {raw!r}"
            ) from None
    elif key.type is float:
        try:
            value = float(raw)
        except ValueError:
            raise FormatError(
                f"{where}: {key.name} expects a number, got {raw!r}"
            ) from None
    else:
        value = raw
    if key.choices and value not in key.choices:
        raise FormatError(
            f"{where}: {key.name} must be one of {list(key.choices)}, "
            f"got {value!r}"
        )
    return value


class Config:
    """Resolved values for every registry key; indexable by dotted name."""

    def __init__(self, values):
        self._values = dict(values)

    def __getitem__(self, name):
        if name not in _BY_NAME:
            raise KeyError(f"unknown config key {name!r}")
        return self._values[name]

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def items(self):
        return sorted(self._values.items())


def _parse_pairs(text, where_prefix):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(
                f"{where_prefix} line {lineno}: expected key = value, "
                f"got {body!r}"
            )
        name, raw = body.split("=", 1)
        pairs.append((name.strip(), raw, f"{where_prefix} line {lineno}"))
    return pairs


def load_config(path=None, overrides=()) -> Config:
    """Defaults, then the file (if given), then --set overrides, in order."""
    values = {k.name: k.default for k in REGISTRY}

    pairs = []
    if path is not None:
        with open(path) as f:
            pairs.extend(_parse_pairs(f.read(), str(path)))
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise FormatError(
                f"--set #{i}: expected key=value, got {item!r}"
            )
        name, raw = item.split("=", 1)
        pairs.append((name.strip(), raw, f"--set #{i}"))

    for name, raw, where in pairs:
        key = _BY_NAME.get(name)
        if key is None:
            raise FormatError(f"{where}: unknown key {name!r}")
        values[name] = _convert(key, raw, where)
    return Config(values)


def snapshot(cfg: Config) -> str:
    """Canonical text form of a resolved configuration; stable bytes."""
    lines = []
    for name, value in cfg.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"
