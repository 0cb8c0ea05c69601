"""Flat ``key = value`` configuration files and dataclass coercion.

Keys without a dot configure the evaluation run; dotted keys are routed to
their section (``scorer.method = Energy`` -> section ``scorer``).
"""
import dataclasses
import enum
from pathlib import Path

from .errors import ConfigError, ParseError


class StrEnum(str, enum.Enum):
    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        for member in cls:
            if text == member.value or text.lower() == member.value.lower() or text.lower() == member.name.lower():
                return member
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"{text!r} is not a valid {cls.__name__} (choose from {choices})")

    def __str__(self):
        return self.value


def parse_kv_text(text, path=None):
    """Parse ``key = value`` lines into {section: {key: raw string}}."""
    sections = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=lineno, path=path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno, path=path)
        section, _, name = key.rpartition(".")
        sections.setdefault(section, {})[name] = value
    return sections


def read_kv_file(path):
    path = Path(path)
    return parse_kv_text(path.read_text(), path=path)


def _coerce_value(default, raw, name):
    if isinstance(default, enum.Enum):
        return type(default).parse(raw)
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    try:
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = text.strip("()[] ").split(",") if isinstance(text, str) else list(text)
            if len(parts) != len(default):
                raise ValueError(text)
            return tuple(_coerce_value(d, p, name) for d, p in zip(default, parts))
        if default is None or isinstance(default, str):
            return None if text in (None, "", "none", "None") else str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return text


def from_mapping(cls, mapping, section=""):
    """Build dataclass ``cls`` from a {name: raw value} mapping; unknown keys are errors."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in mapping.items():
        if key not in known:
            where = f"{section}." if section else ""
            raise ConfigError(f"unknown config key {where}{key} for {cls.__name__}")
        kwargs[key] = _coerce_value(getattr(defaults, key), raw, key)
    return cls(**kwargs)


def to_mapping(obj):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        out[f.name] = v
    return out


def format_kv(sections):
    """Inverse of :func:`parse_kv_text` for {section: dataclass-or-mapping}."""
    lines = []
    for section, obj in sections.items():
        mapping = to_mapping(obj) if dataclasses.is_dataclass(obj) else obj
        for k, v in mapping.items():
            key = f"{section}.{k}" if section else k
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
