"""Sectioned key/value config files with schema validation.

Example::

    [model]
    n_events = 10
    n_layers = 2
    use_ncm = true
    use_nnm = true
    conv_channels = 4, 8, 16, 32

    [training]
    lr = 1e-3
    batch_size = 16
    epochs = 50
"""

from __future__ import annotations

import configparser
import re

from .exceptions import ConfigurationError
from .training import TrainConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text):
    return tuple(int(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _floats(text):
    return tuple(float(t) for t in re.split(r"[,\s]+", text.strip()) if t)


SCHEMA = {
    "model": {
        "n_events": int, "n_layers": int, "use_ncm": _bool, "use_nnm": _bool,
        "conv_channels": _ints, "n_scenes": int,
    },
    "training": {
        "lambda1": float, "lambda2": float, "lr": float, "batch_size": int, "epochs": int,
        "seed": int, "weight_decay": float, "betas": _floats, "adam_eps": float,
        "precision": str,
    },
}


def _key_lines(text):
    """Map (section, key) -> 1-based line number, and section -> line."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = lineno
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where[(section, key)] = lineno
    return where


def parse_config(text, source="<config>"):
    """Parse config text into a :class:`TrainConfig`; errors carry ``source:line``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        msg = str(exc).replace("\n", " ")
        raise ConfigurationError(f"{source}: {msg}") from None
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(
                f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]; "
                f"expected one of {sorted(SCHEMA)}"
            )
        for key, raw in parser.items(section):
            line = lines.get((section, key), "?")
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigurationError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigurationError(f"{source}:{line}: {key}: {exc}") from None
    try:
        return TrainConfig(**values)
    except ConfigurationError as exc:
        key = next((k for k in values if k in str(exc)), None)
        sect = next((s for s, keys in SCHEMA.items() if key in keys), None)
        line = lines.get((sect, key), "?")
        raise ConfigurationError(f"{source}:{line}: {exc}") from None


def read_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def format_config(cfg):
    d = cfg.to_dict()
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key in keys:
            v = d[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            out.append(f"{key} = {v}")
        out.append("")
    return "\n".join(out)
