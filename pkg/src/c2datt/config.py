"""INI-style key/value config files.

One file may hold any of the sections ``[model]``, ``[features]`` and
``[train]``.  Every problem found is reported at once through
:class:`ConfigError`.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .frontend import FeatureConfig
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def parse_text(text: str, source: str = "<string>") -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc
    return parser


def read_file(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def _section(parser: configparser.ConfigParser, name: str, problems: list[str], required: bool) -> dict:
    if not parser.has_section(name):
        if required:
            problems.append(f"missing [{name}] section")
        return {}
    return dict(parser.items(name))


def model_config(parser: configparser.ConfigParser, required: bool = True) -> ModelConfig:
    problems: list[str] = []
    values = _section(parser, "model", problems, required)
    cfg = None
    try:
        cfg = ModelConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        problems.append(f"[model] {exc}")
    if cfg is not None:
        problems.extend(f"[model] {e}" for e in cfg.errors())
    if problems:
        raise ConfigError(problems)
    return cfg


def feature_config(parser: configparser.ConfigParser) -> FeatureConfig:
    problems: list[str] = []
    values = _section(parser, "features", problems, required=False)
    cfg = None
    try:
        cfg = FeatureConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        problems.append(f"[features] {exc}")
    if cfg is not None:
        problems.extend(f"[features] {e}" for e in cfg.errors())
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_sections(sections: dict[str, dict]) -> str:
    """Canonical text: sections in the given order, keys sorted, ``key = value``."""
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(values[k])}" for k in sorted(values))
        lines.append("")
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)
