"""Run configuration files: ``[section]`` headers with ``key = value`` lines.

Top-level ``RunConfig`` fields live under ``[run]``; the nested models each get
their own section (``[toggles]``, ``[network]``, ``[data]``). Overrides use
``key=value`` or ``section.key=value``.
"""

from __future__ import annotations

import configparser
import re
from collections.abc import Iterable
from pathlib import Path
from typing import Any, get_args

from pydantic import BaseModel, ValidationError

from shared.errors import ConfigError
from shared.schemas import DataConfig, NetworkWidths, RunConfig, Toggles

RUN_SECTION = "run"
NESTED_SECTIONS: dict[str, type[BaseModel]] = {
    "toggles": Toggles,
    "network": NetworkWidths,
    "data": DataConfig,
}
_NONE_WORDS = {"", "none", "null"}
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to its 1-based line number."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if match := _SECTION_RE.match(line):
            section = match.group(1).strip()
            lines[(section, "")] = lineno
        elif match := _KEY_RE.match(line):
            lines[(section, match.group(1).strip())] = lineno
    return lines


def _split_key(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.rpartition(".")
    return (section or RUN_SECTION), key


def _is_known(section: str, key: str) -> bool:
    if section == RUN_SECTION:
        return key in RunConfig.model_fields and key not in NESTED_SECTIONS
    model = NESTED_SECTIONS.get(section)
    return model is not None and key in model.model_fields


def _accepts_none(section: str, key: str) -> bool:
    model = RunConfig if section == RUN_SECTION else NESTED_SECTIONS.get(section)
    field = model.model_fields.get(key) if model is not None else None
    return field is not None and type(None) in get_args(field.annotation)


def _coerce(section: str, key: str, value: str) -> str | None:
    """Map the none words to ``None`` only for fields that admit it."""
    text = value.strip()
    if text.lower() in _NONE_WORDS and _accepts_none(section, key):
        return None
    return text


def parse_overrides(overrides: Iterable[str]) -> list[tuple[str, str, str | None]]:
    """Validate ``key=value`` overrides against the config schema."""
    parsed = []
    for item in overrides:
        dotted, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        section, key = _split_key(dotted.strip())
        if not _is_known(section, key):
            raise ConfigError(f"--set {item!r}: unknown config key '{dotted.strip()}'")
        parsed.append((section, key, _coerce(section, key, value)))
    return parsed


def _describe(exc: ValidationError, path: str, lines: dict[tuple[str, str], int]) -> str:
    problems = []
    for error in exc.errors():
        loc = [str(part) for part in error["loc"]]
        if loc and loc[0] in NESTED_SECTIONS:
            section, key = loc[0], (loc[1] if len(loc) > 1 else "")
        else:
            section, key = RUN_SECTION, (loc[0] if loc else "")
        lineno = lines.get((section, key), lines.get((section, "")))
        where = f"{path}:{lineno}" if lineno else path
        problems.append(f"{where}: {'.'.join(loc) or '<root>'}: {error['msg']}")
    return "; ".join(problems)


def run_config_from_text(
    text: str, source: str = "<config>", overrides: Iterable[str] = ()
) -> RunConfig:
    parsed_overrides = parse_overrides(overrides)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    lines = _key_lines(text)
    raw: dict[str, Any] = {}
    for section in parser.sections():
        if section == RUN_SECTION:
            target = raw
        elif section in NESTED_SECTIONS:
            target = raw.setdefault(section, {})
        else:
            lineno = lines.get((section, ""), "?")
            raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
        for key, value in parser.items(section):
            target[key] = _coerce(section, key, value)

    for section, key, value in parsed_overrides:
        target = raw if section == RUN_SECTION else raw.setdefault(section, {})
        target[key] = value
        lines.pop((section, key), None)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc, source, lines)) from exc


def load_run_config(path: Path, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return run_config_from_text(text, source=str(path), overrides=overrides)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """Render a config in the same format ``load_run_config`` reads."""
    data = cfg.model_dump(mode="json")
    out = [f"[{RUN_SECTION}]"]
    out += [f"{k} = {_format(v)}" for k, v in data.items() if k not in NESTED_SECTIONS]
    for section in NESTED_SECTIONS:
        out += ["", f"[{section}]"]
        out += [f"{k} = {_format(v)}" for k, v in data[section].items()]
    return "\n".join(out) + "\n"
