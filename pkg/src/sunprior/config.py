"""Flat key-value run configuration with one section per CLI stage.

Precedence: command-line flags, then the config file, then built-in defaults.

Example file::

    [prep]
    per_bin = 500

    [train-base]
    epochs = 200
    lr = 0.001
"""

from __future__ import annotations

import configparser

from .errors import ParseError


def load_config(path):
    """Return ``{section: {key: raw string}}``; keys use underscores."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from None
    return {s: {k.replace("-", "_"): v for k, v in parser.items(s)} for s in parser.sections()}


def resolve(options, defaults, file_values, cli_values):
    """Merge one stage's settings.

    ``options`` maps each key to a converter applied to file strings;
    ``cli_values`` holds ``None`` for flags the user did not pass.
    """
    out = dict(defaults)
    for key, raw in file_values.items():
        if key not in options:
            raise ParseError(f"unknown config key {key!r}")
        try:
            out[key] = options[key](raw)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"config key {key!r}: {exc}") from None
    for key, val in cli_values.items():
        if val is not None:
            out[key] = val
    return out


def parse_bool(text):
    low = str(text).strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")
