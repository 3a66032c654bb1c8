"""UTF-8 ``key=value`` config files and dataclass coercion."""

import dataclasses

from .errors import BadArgument


def parse_lines(text):
    """Ordered ``{key: raw string}``; blank lines and ``#`` comments are skipped."""
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise BadArgument(f"malformed config line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh.read())


def format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_lines(mapping):
    return "".join(f"{k}={format_value(v)}\n" for k, v in mapping.items())


def coerce(default, raw, key):
    """Parse ``raw`` to the type of ``default``."""
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [t for t in raw.replace(" ", "").split(",") if t]
            elem = default[0] if default else 0
            return tuple(coerce(elem, t, key) for t in items)
    except ValueError:
        raise BadArgument(f"bad value for {key}: {raw!r}") from None
    return raw


def build(cls, mapping):
    """Instantiate dataclass ``cls`` from a partial ``{key: value}`` mapping."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = [k for k in mapping if k not in names]
    if unknown:
        raise BadArgument(f"unknown config key(s): {', '.join(unknown)}")
    return dataclasses.replace(defaults, **{k: coerce(getattr(defaults, k), v, k) for k, v in mapping.items()})
