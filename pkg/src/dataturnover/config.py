"""Plain-text key-value configuration dialect shared by schemas, generators and scenarios.

Files are INI-style: ``[section]`` headers with ``key = value`` lines. ``;`` and
``#`` start comments. Lists are comma separated.
"""

from __future__ import annotations

import configparser
import os
from typing import Iterable


class ConfigError(ValueError):
    pass


def read_config(source: str | os.PathLike | None = None, text: str | None = None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        inline_comment_prefixes=(";", "#"),
        comment_prefixes=(";", "#"),
        interpolation=None,
    )
    # keep key case: covariate and column names are case sensitive
    parser.optionxform = str  # type: ignore[assignment]
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(source, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return parser


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in split_list(value)]
    except ValueError as exc:
        raise ConfigError(f"expected a list of numbers, got {value!r}") from exc


def format_list(values: Iterable) -> str:
    return ", ".join(str(v) for v in values)


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "y", "t"):
        return True
    if v in ("0", "false", "no", "n", "f"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
