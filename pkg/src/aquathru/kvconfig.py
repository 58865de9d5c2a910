"""Flat ``key=value`` text configs.

One key per line, ``#`` starts a comment, blank lines ignored. Floats are
written with ``repr`` so a dump/load cycle is exact. Vector values are
comma separated.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def dump(items: dict, header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in items.items():
        lines.append(f"{key}={format_value(value)}")
    return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "tolist"):
        return format_value(value.tolist())
    return str(value)


def get_float(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except KeyError:
        raise ConfigError(f"missing key {key!r}") from None
    except ValueError:
        raise ConfigError(f"key {key!r}: not a number: {cfg[key]!r}") from None


def get_floats(cfg: dict[str, str], key: str) -> list[float]:
    try:
        return [float(v) for v in cfg[key].split(",")]
    except KeyError:
        raise ConfigError(f"missing key {key!r}") from None
    except ValueError:
        raise ConfigError(f"key {key!r}: not a number list: {cfg[key]!r}") from None


def check_keys(cfg: dict[str, str], allowed) -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")


def read(path) -> dict[str, str]:
    return parse(Path(path).read_text(encoding="utf-8"))


def write(path, items: dict, header: str | None = None) -> None:
    Path(path).write_text(dump(items, header), encoding="utf-8")
