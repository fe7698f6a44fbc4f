"""INI configuration files for the command line, with line-numbered errors.

Sections map onto dataclasses: ``[fit]`` -> FitConfig, ``[weights]`` ->
LossWeights, ``[scene]`` -> SceneSpec. Unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import re
from pathlib import Path

from .datagen import SceneSpec
from .fitter import FitConfig
from .objectives import LossWeights

SECTIONS = {"fit": FitConfig, "weights": LossWeights, "scene": SceneSpec}


class ConfigError(ValueError):
    pass


_SECTION = re.compile(r"^\[([A-Za-z_][\w]*)\]$")
_ENTRY = re.compile(r"^([A-Za-z_][\w]*)\s*=\s*(.*)$")


def parse_ini(text: str, source: str = "<config>") -> dict:
    """{section: {key: (raw value, line number)}}; ``#`` and ``;`` start comments."""
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.split(r"\s[#;]|^[#;]", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section in out:
                raise ConfigError(f"{source}:{lineno}: duplicate section [{section}]")
            out[section] = {}
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigError(f"{source}:{lineno}: cannot parse {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of a section")
        key, value = m.group(1), m.group(2).strip()
        if key in out[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[section][key] = (value, lineno)
    return out


def convert_value(value: str, default, where: str):
    """Parse a raw string into the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [t.strip() for t in value.strip("()").split(",") if t.strip()]
            if default and isinstance(default[0], tuple):
                raise ValueError("nested tuples are not configurable")
            return tuple(float(t) for t in items)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value {value!r} ({exc})") from None


def build(cls, entries: dict, source: str = "<config>", base=None):
    """Instantiate ``cls`` from parsed entries, starting from ``base`` or the defaults."""
    obj = base if base is not None else cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    changes = {}
    for key, (value, lineno) in entries.items():
        where = f"{source}:{lineno}"
        if key not in known or dataclasses.is_dataclass(getattr(obj, key)):
            raise ConfigError(f"{where}: unknown key {key!r} for {cls.__name__}")
        changes[key] = convert_value(value, getattr(obj, key), where)
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> dict:
    """Parsed dataclasses for every known section; missing sections take defaults."""
    path = Path(path)
    parsed = parse_ini(path.read_text(), str(path))
    for name, entries in parsed.items():
        if name not in SECTIONS:
            first = min((ln for _, ln in entries.values()), default=0)
            raise ConfigError(f"{path}:{first}: unknown section [{name}]")
    weights = build(LossWeights, parsed.get("weights", {}), str(path))
    fit = build(FitConfig, parsed.get("fit", {}), str(path), FitConfig(weights=weights))
    scene = build(SceneSpec, parsed.get("scene", {}), str(path))
    return {"fit": fit, "weights": weights, "scene": scene}
