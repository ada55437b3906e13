"""Configuration files: loading, schema validation and hashing."""

from __future__ import annotations

import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_DIR = Path(__file__).parent / "data"
CONFIG_DIR_ENV = "GPMPCC_CONFIG_DIR"

VARIANTS = ("baseline", "gp-full", "gp-sparse", "reference")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def default_config_dir() -> Path:
    return Path(os.environ.get(CONFIG_DIR_ENV, DATA_DIR))


def config_hash(config: dict) -> str:
    """Stable digest of a config mapping, independent of key order."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- schema -----------------------------------------------------------------

@dataclass(frozen=True)
class Key:
    kind: type | tuple
    default: Any
    check: Callable[[Any], str | None] | None = None
    doc: str = ""


def _positive(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _nonneg_list(n):
    def check(v):
        if len(v) != n:
            return f"must have {n} entries"
        if any(not isinstance(e, (int, float)) or isinstance(e, bool) or e < 0 for e in v):
            return "entries must be non-negative numbers"
        return None
    return check


def _fraction(v):
    return None if 0 <= v < 1 else "must lie in [0, 1)"


def _variants(v):
    bad = [e for e in v if e not in VARIANTS]
    if bad or not v:
        return f"must be a non-empty subset of {list(VARIANTS)}, got {v}"
    return None


def _seeds(v):
    if not v or any(not isinstance(e, int) or isinstance(e, bool) for e in v):
        return "must be a non-empty list of integers"
    return None


SCHEMA: dict[str, dict[str, Key]] = {
    "experiment": {
        "track": Key(str, "demo_track.toml"),
        "vehicle": Key(str, "vehicle_default.toml"),
        "variants": Key(list, list(VARIANTS), _variants),
        "seeds": Key(list, [0], _seeds),
        "data_seed": Key(int, 0),
        "output_dir": Key(str, "runs"),
    },
    "plant": {
        "perturbation": Key(float, 0.15, _fraction),
        "perturbation_seed": Key(int, 9),
        "substeps": Key(int, 1, _positive),
    },
    "noise": {
        "enabled": Key(bool, False),
        "variance_per_step": Key(list, [0.001, 0.001, 0.1], _nonneg_list(3),
                                 "Q_w * Ts for [vx, vy, omega]"),
        "scale": Key(float, 1.0, _nonneg),
    },
    "mpcc": {
        "N": Key(int, 30, lambda v: None if v >= 2 else "must be >= 2"),
        "q_c": Key(float, 0.3, _nonneg),
        "q_l": Key(float, 200.0, _nonneg),
        "gamma": Key(float, 4.0, _nonneg),
        "r_u": Key(list, [0.01, 5.0], _nonneg_list(2)),
        "r_v": Key(float, 20.0, _nonneg),
        "q_s": Key(float, 1000.0, _nonneg),
        "c_s": Key(float, 100.0, _positive),
        "n_tight": Key(int, 15, _positive),
        "chi2_level": Key(float, 1.0, _nonneg),
        "v_max": Key(float, 4.0, _positive, "maximum progress speed [m/s]"),
    },
    "gp": {
        "n_data": Key(int, 350, _positive),
        "fit_hyperparameters": Key(bool, True),
        "hyper_budget": Key(int, 300, _nonneg),
    },
    "sparse": {
        "n_inducing": Key(int, 10, _positive),
        "decay": Key(float, 1.3, lambda v: None if v >= 1 else "must be >= 1"),
        "min_separation": Key(float, 1e-6, _nonneg),
        "incremental": Key(bool, True),
    },
    "tube": {
        "include_process_noise": Key(bool, True),
        "r_min_frac": Key(float, 0.1, _fraction),
    },
    "solver": {
        "max_iter": Key(int, 75, _positive),
        "tol": Key(float, 1e-6, _positive),
    },
    "sim": {
        "max_steps": Key(int, 600, _positive),
        "divergence_factor": Key(float, 5.0, _positive),
        "start_theta": Key(float, 0.0),
    },
}


def defaults() -> dict:
    return {sec: {k: _copy(key.default) for k, key in keys.items()} for sec, keys in SCHEMA.items()}


def _copy(v):
    return list(v) if isinstance(v, list) else v


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted keys to their line numbers in a TOML document."""
    lines: dict[str, int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\[\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            lines.setdefault(section, lineno)
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", stripped)
        if m:
            lines[f"{section}.{m.group(1)}" if section else m.group(1)] = lineno
    return lines


def _coerce(value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a ``--set section.key=value`` override; the value is TOML syntax."""
    if "=" not in text:
        raise ConfigError([f"override '{text}': expected key=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def validate(raw: dict, key_lines: dict[str, int] | None = None, source: str = "<config>") -> tuple[dict, list[str]]:
    """Validate ``raw`` against the schema, filling defaults.

    Returns the resolved config and the list of all errors (not fail-fast).
    """
    key_lines = key_lines or {}
    errors: list[str] = []

    def where(path):
        line = key_lines.get(path)
        return f"{source}:{line}: {path}" if line else f"{source}: {path}"

    resolved = defaults()
    for section, entries in raw.items():
        if section not in SCHEMA:
            errors.append(f"{where(section)}: unknown section")
            continue
        if not isinstance(entries, dict):
            errors.append(f"{where(section)}: must be a table")
            continue
        for name, value in entries.items():
            path = f"{section}.{name}"
            spec = SCHEMA[section].get(name)
            if spec is None:
                errors.append(f"{where(path)}: unknown key")
                continue
            value = _coerce(value, spec.kind)
            if not isinstance(value, spec.kind) or (spec.kind in (int, float) and isinstance(value, bool)):
                errors.append(f"{where(path)}: expected {spec.kind.__name__}, got {type(value).__name__}")
                continue
            if spec.check is not None:
                problem = spec.check(value)
                if problem:
                    errors.append(f"{where(path)}: {problem}")
                    continue
            resolved[section][name] = value
    mp = resolved["mpcc"]
    if not 1 <= mp["n_tight"] <= mp["N"]:
        errors.append(f"{where('mpcc.n_tight')}: must satisfy 1 <= n_tight <= N ({mp['N']})")
    sp = resolved["sparse"]
    if sp["n_inducing"] > mp["N"]:
        errors.append(f"{where('sparse.n_inducing')}: must not exceed mpcc.N ({mp['N']})")
    return resolved, errors


def set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2:
        raise ConfigError([f"override '{key}': expected section.key"])
    raw.setdefault(parts[0], {})[parts[1]] = value


def resolve_path(name: str, base: Path) -> Path:
    """Resolve a referenced file relative to the config file, then the default config directory."""
    p = Path(name)
    if p.is_absolute():
        return p
    if (base / p).exists():
        return base / p
    return default_config_dir() / p


def load_experiment_config(path: str | Path | None = None, overrides: list[str] | None = None,
                           check_files: bool = True) -> dict:
    """Load, override and validate an experiment config.

    The returned mapping carries the resolved file paths under
    ``experiment.track_path`` / ``experiment.vehicle_path`` and the
    content hash under ``hash``.

    Raises:
        ConfigError: With every problem found, each naming file, line and key.
    """
    if path is None:
        path = default_config_dir() / "experiment_default.toml"
    path = Path(path)
    source = str(path)
    if not path.exists():
        raise ConfigError([f"{source}: config file not found"])
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"{source}: {err}"]) from err
    lines = _key_lines(text)
    for item in overrides or []:
        key, value = parse_override(item)
        set_dotted(raw, key, value)
        lines.pop(key, None)  # overridden keys have no file line
    resolved, errors = validate(raw, lines, source)
    base = path.parent
    for key in ("track", "vehicle"):
        p = resolve_path(resolved["experiment"][key], base)
        if check_files and not p.exists():
            line = lines.get(f"experiment.{key}")
            loc = f"{source}:{line}" if line else source
            errors.append(f"{loc}: experiment.{key}: file not found: {p}")
        resolved["experiment"][f"{key}_path"] = str(p)
    if errors:
        raise ConfigError(errors)
    hashed = {k: v for k, v in resolved.items()}
    hashed["experiment"] = {k: v for k, v in resolved["experiment"].items()
                            if k not in ("track_path", "vehicle_path", "output_dir")}
    resolved["hash"] = config_hash(hashed)
    return resolved
