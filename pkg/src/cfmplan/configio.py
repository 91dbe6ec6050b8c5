"""Strict TOML run configuration.

Every key is checked against the schema below; unknown sections or keys
are hard errors so a typo in a hyperparameter name cannot silently fall
back to a default.  Numeric fields accept ints where floats are listed.
"""
from __future__ import annotations

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

from .errors import ConfigError
from .harness import TrainConfig
from .sampler import SamplerConfig
from .scenario import SCENE_KINDS

_BOOL = "bool"
_INT = "int"
_FLOAT = "float"
_STR = "str"
_INT_LIST = "int_list"
_FLOAT_LIST = "float_list"
_STR_LIST = "str_list"

# section -> key -> type tag.  [data] is special-cased: its keys are
# scene kinds and its values are record counts.
SCHEMA = {
    "": {"seed": _INT},
    "vocab": {"size": _INT},
    "train": {
        "epochs": _INT, "batch": _INT, "lr": _FLOAT, "mask_p": _FLOAT,
        "w_rfe": _FLOAT, "rfe_enabled": _BOOL, "rfe_warmup": _FLOAT,
        "rfe_k": _INT, "condition": _STR, "embed_dim": _INT,
    },
    "sampler": {
        "steps": _INT, "truncate_step": _INT, "lam": _FLOAT,
        "gamma": _FLOAT, "refine_steps": _INT, "eta_scale": _FLOAT,
        "cvf_enabled": _BOOL, "cf_enabled": _BOOL, "rfe_enabled": _BOOL,
        "cvf_sign": _STR,
    },
    "eval": {
        "samples_per_scene": _INT, "ras_reward": _FLOAT,
        "coverage_samples": _INT, "threads": _INT,
    },
    "ablate": {
        "modules": _STR_LIST, "lam": _FLOAT_LIST, "k_c": _INT_LIST,
        "steps": _INT_LIST,
    },
    "sample": {
        "kind": _STR, "scene_seed": _INT, "per_anchor": _BOOL,
    },
    "paths": {
        "dataset": _STR, "vocab": _STR, "model": _STR, "rfe_model": _STR,
    },
}


def _check_scalar(tag: str, value, where: str):
    if tag == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError("%s must be a boolean" % where)
        return value
    if tag == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("%s must be an integer" % where)
        return value
    if tag == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("%s must be a number" % where)
        return float(value)
    if tag == _STR:
        if not isinstance(value, str):
            raise ConfigError("%s must be a string" % where)
        return value
    raise ConfigError("internal: unknown schema tag %r" % tag)


def _check(tag: str, value, where: str):
    if tag in (_BOOL, _INT, _FLOAT, _STR):
        return _check_scalar(tag, value, where)
    if not isinstance(value, list):
        raise ConfigError("%s must be an array" % where)
    inner = {_INT_LIST: _INT, _FLOAT_LIST: _FLOAT, _STR_LIST: _STR}[tag]
    return [_check_scalar(inner, v, "%s[%d]" % (where, i))
            for i, v in enumerate(value)]


def _validate_data_section(raw: dict) -> dict:
    counts = {}
    for key, value in raw.items():
        if key not in SCENE_KINDS:
            raise ConfigError("[data] key %r is not a scene kind "
                              "(choose from %s)" % (key, SCENE_KINDS))
        counts[key] = _check_scalar(_INT, value, "[data] %s" % key)
    return counts


def parse_config(text: str) -> dict:
    """Parse and validate TOML text into a {section: {key: value}} dict."""
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError("config parse error: %s" % exc) from exc
    out: dict = {"": {}}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key == "data":
                out["data"] = _validate_data_section(value)
                continue
            if key not in SCHEMA:
                raise ConfigError("unknown config section [%s]" % key)
            section = {}
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    raise ConfigError("unknown key %r in section [%s]"
                                      % (k, key))
                section[k] = _check(SCHEMA[key][k], v, "[%s] %s" % (key, k))
            out[key] = section
        else:
            if key not in SCHEMA[""]:
                raise ConfigError("unknown top-level key %r" % key)
            out[""][key] = _check(SCHEMA[""][key], value, key)
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("cannot read config file %s: %s"
                          % (path, exc)) from exc
    return parse_config(text)


def master_seed(cfg: dict, override: int | None = None) -> int:
    if override is not None:
        return int(override)
    return int(cfg.get("", {}).get("seed", 0))


def train_config(cfg: dict, seed: int) -> TrainConfig:
    tc = TrainConfig(seed=seed)
    for key, value in cfg.get("train", {}).items():
        setattr(tc, key, value)
    tc.validate()
    return tc


def sampler_config(cfg: dict, seed: int) -> SamplerConfig:
    sc = SamplerConfig(seed=seed)
    for key, value in cfg.get("sampler", {}).items():
        setattr(sc, key, value)
    sc.validate()
    return sc
