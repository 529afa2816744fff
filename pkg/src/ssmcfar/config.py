"""INI config files layered under command-line flags.

Sections map one-to-one onto the config dataclasses (``[scene]``,
``[model]``, ``[train]``, ``[cfar]``, ...).  Values are parsed against the
type of each field's default, so ``grid = 64, 32`` becomes ``(64, 32)``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from .errors import InvalidInputError


def read_config_file(path) -> dict:
    """Read an INI file into ``{section: {key: str}}``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidInputError(f"cannot parse config {path}: {exc}") from None
    return {section: dict(parser[section]) for section in parser.sections()}


def _scalar(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise InvalidInputError(f"cannot read {text!r} as {type(like).__name__}") from None
    return text


def parse_value(text, default):
    """Parse ``text`` shaped like ``default``; comma lists become tuples."""
    if not isinstance(text, str):
        return text
    if isinstance(default, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) == 1:
            return _scalar(parts[0], default[0])
        return tuple(_scalar(p, default[min(i, len(default) - 1)]) for i, p in enumerate(parts))
    if isinstance(default, str):
        # string fields that also accept numbers, e.g. pos_weight = auto | 5
        try:
            return float(text)
        except ValueError:
            return text.strip()
    if default is None:
        return text.strip()
    return _scalar(text, default)


def field_defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
    return out


def build(cls, *layers: dict):
    """Instantiate ``cls`` from layered overrides, later layers winning.

    ``None`` values in a layer mean "not given" and are skipped.
    """
    defaults = field_defaults(cls)
    kwargs = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            if value is None:
                continue
            if key not in defaults:
                raise InvalidInputError(f"unknown {cls.__name__} key {key!r}")
            kwargs[key] = parse_value(value, defaults[key])
    return cls(**kwargs)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(sections: dict) -> str:
    """Serialise ``{section: dataclass-or-dict}`` as INI text with sorted keys."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, obj in sections.items():
        values = obj if isinstance(obj, dict) else asdict(obj)
        parser[name] = {k: _format(v) for k, v in sorted(values.items())}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(path, sections: dict) -> Path:
    path = Path(path)
    path.write_text(render_config(sections))
    return path
