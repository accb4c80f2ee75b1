"""Experiment configuration trees: defaults, TOML files and ``key=value`` overrides."""
from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .density import GaussianTransitionModel
from .env_slide import SlideParams
from .rl.train import TrainConfig


class ConfigError(ValueError):
    pass


def _model_defaults():
    params = GaussianTransitionModel().get_params()
    params["hidden"] = list(params["hidden"])
    params.pop("random_state")
    return params


def _plain(d):
    """Tuples to lists so the tree is TOML-serializable."""
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def defaults(command):
    env = _plain(asdict(SlideParams()))
    if command == "collect":
        return {"seed": 0, "episodes": 1000, "policies": ["random", "scripted"], "env": env}
    if command == "train-model":
        return {"seed": 0, "dataset": "", "resume": "", "target_scale": 1.0, "model": _model_defaults()}
    if command == "eval-detect":
        return {"seed": 0, "model": "", "dataset": "", "n_actions": 64,
                "noise_levels": [0.0, 0.05, 0.1, 0.2], "scorers": ["cai", "entropy"]}
    if command == "score":
        return {"seed": 0, "model": "", "states": "", "n_actions": 64}
    if command == "train-rl":
        train = _plain(TrainConfig().to_dict())
        train["stop_at"] = -1.0
        return {"seeds": [0], "variants": ["baseline"], "train": train}
    raise ConfigError(f"unknown command {command!r}")


def _coerce(default, value, where):
    # values must have the default's type; ints are accepted for floats
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(default, bool) and isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where!r} expects {type(default).__name__}, got {value!r}")
    return value


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            _merge(base[key], value, where + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{where!r} is not a table")
            base[key] = _coerce(base[key], value, where)
    return base


def parse_override(text):
    """``a.b=value`` to a nested dict; the value is read as a TOML value,
    falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def resolve(command, path=None, overrides=()):
    cfg = copy.deepcopy(defaults(command))
    if path:
        try:
            with Path(path).open("rb") as fh:
                _merge(cfg, tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for text in overrides:
        _merge(cfg, parse_override(text))
    return cfg


def write_snapshot(cfg, path):
    path = Path(path)
    path.write_text(tomli_w.dumps(_plain(cfg)))
    return path


def slide_params(env_cfg):
    env = dict(env_cfg)
    try:
        for key in ("agent_init", "obj_init"):
            env[key] = tuple(env[key])
        return SlideParams(**env)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad env settings: {exc}") from exc


def train_config(train_cfg):
    """Nested dict to ``TrainConfig``; a negative ``stop_at`` means never stop early."""
    t = copy.deepcopy(train_cfg)
    if t.get("stop_at") is not None and t["stop_at"] < 0:
        t["stop_at"] = None
    t["env"] = slide_params(t["env"])
    try:
        agent = t["agent"]
        agent["hidden"] = tuple(agent["hidden"])
        agent["clip_return"] = tuple(agent["clip_return"])
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc
