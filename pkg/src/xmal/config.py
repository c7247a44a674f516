"""Run configuration: key=value config files, flag merging, content hashing,
deterministic seed splitting, and logging setup.

Config files are line-oriented: `[section]` headers and `key=value` pairs,
with `#` comments. Every section and key is checked against an explicit
schema; unknown names are hard errors so typos never pass silently.
"""

from __future__ import annotations

import hashlib
import logging
import os

import numpy as np

from .errors import ConfigError

# section -> key -> coercion type
SCHEMAS: dict[str, dict[str, type]] = {
    "data": {
        "pairs": int,
        "concepts": int,
        "K": int,
        "D": int,
        "N": int,
        "M": int,
        "sigma": float,
        "seed": int,
        "shared_projection": bool,
        "out": str,
        "threads": int,
    },
    "train": {
        "data": str,
        "out": str,
        "log": str,
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "optimizer": str,
        "beta1": float,
        "beta2": float,
        "opt_eps": float,
        "tau": float,
        "alpha": float,
        "beta": float,
        "mode": str,
        "temperature": float,
        "direction": str,
        "combine": str,
        "K": int,
        "hidden": int,
        "clip_norm": float,
        "checkpoint_interval": int,
        "seed": int,
        "resume": str,
        "threads": int,
    },
    "eval": {
        "ckpt": str,
        "data": str,
        "embeddings": str,
        "modes": str,
        "k": str,
        "out": str,
        "seed": int,
        "threads": int,
    },
    "sim": {
        "ckpt": str,
        "data": str,
        "embeddings": str,
        "item_a": int,
        "item_b": int,
        "threads": int,
    },
    "verify": {
        "h": float,
        "tol": float,
        "seeds": int,
        "threads": int,
    },
}


def parse_config_file(path: str) -> dict[str, dict[str, str]]:
    """Read a sectioned key=value file, rejecting unknown sections and keys."""
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in SCHEMAS:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{current}]")
                sections.setdefault(current, {})
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if current is None:
                raise ConfigError(f"{path}:{lineno}: key outside any [section]")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in SCHEMAS[current]:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{current}]")
            if key in sections[current]:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} in [{current}]")
            sections[current][key] = value
    return sections


def coerce(section: str, key: str, raw) -> object:
    kind = SCHEMAS[section][key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {kind.__name__}") from e


def merge_config(section: str, file_values: dict[str, str] | None, flag_values: dict) -> dict:
    """File values coerced per schema, then overridden by non-None flags."""
    out: dict = {}
    for key, raw in (file_values or {}).items():
        out[key] = coerce(section, key, raw)
    for key, val in flag_values.items():
        if val is None:
            continue
        if key not in SCHEMAS[section]:
            raise ConfigError(f"unknown key {key!r} for section [{section}]")
        out[key] = coerce(section, key, val)
    return out


def canonical_text(section: str, values: dict) -> str:
    lines = [f"[{section}]"]
    for key in sorted(values):
        lines.append(f"{key}={values[key]}")
    return "\n".join(lines) + "\n"


def config_hash(section: str, values: dict) -> str:
    """Short content digest of the resolved configuration."""
    digest = hashlib.sha256(canonical_text(section, values).encode("utf-8")).hexdigest()
    return digest[:12]


def subsystem_seed(seed: int, label: str) -> int:
    """Deterministic per-subsystem seed derived from the top-level seed."""
    digest = hashlib.sha256(f"{label}:{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def subsystem_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subsystem_seed(seed, label))


def setup_logging() -> logging.Logger:
    """Honor XMAL_LOG={error,info,debug}; defaults to error."""
    level_name = os.environ.get("XMAL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"XMAL_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logger = logging.getLogger("xmal")
    logger.setLevel(levels[level_name])
    return logger
