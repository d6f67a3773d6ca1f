"""Experiment configuration: flat key=value files with `#` comments.

Every training parameter is a scalar, so a flat file diffs cleanly across
experiment folders.  Unknown keys are rejected by name; missing required keys
are listed exhaustively in one error.  CLI flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .problems import build_problem, problem_names
from .training import MODELS, TrainConfig

REQUIRED = ("problem", "model", "num_epochs", "model_depth", "hidden_dim",
            "lr", "num_points")

# name -> (parser, default); None default means per-problem default applies
_SCHEMA = {
    "problem": (str, None),
    "model": (str, None),
    "num_epochs": (int, None),
    "model_depth": (int, None),
    "hidden_dim": (int, None),
    "lr": (float, None),
    "num_points": (int, None),
    "pinn_reg_factor": (float, None),
    "hardnet_reg_factor": (float, None),
    "taylor_offset": (float, None),
    "taylor_order": (int, None),
    "eta": (float, None),
    "newton_step_length": (float, None),
    "max_newton_iter": (int, None),
    "noise_std": (float, None),
    "noise_mean": (float, None),
    "noise_scale": (float, None),
    "seed": (int, 0),
    "eval_every": (int, 10),
    "residual_tol": (float, 1e-10),
    "jacobian_regularization": (float, 1e-10),
    "batch_size": (int, 0),
    "detach_projected_targets": (lambda s: s.lower() in ("1", "true", "yes"), False),
    "estimate_params": (str, ""),
    "problem_constants": (str, ""),
    "out_dir": (str, "."),
    "emit_plots": (lambda s: s.lower() in ("1", "true", "yes"), False),
    "inference_bypass_projection": (
        lambda s: s.lower() in ("1", "true", "yes"), False,
    ),
    "load_checkpoint": (str, ""),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig
    out_dir: str = "."
    emit_plots: bool = False
    inference_bypass_projection: bool = False
    load_checkpoint: str = ""

    def serialize(self) -> str:
        """Canonical key=value form; parse(serialize(x)) == x."""
        t = self.train
        lines = []
        for f in fields(TrainConfig):
            v = getattr(t, f.name)
            if f.name in ("estimate_params", "problem_constants"):
                v = ",".join(f"{k}={val}" for k, val in sorted(v.items()))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        lines.append(f"out_dir={self.out_dir}")
        lines.append(f"emit_plots={'true' if self.emit_plots else 'false'}")
        lines.append(
            "inference_bypass_projection="
            f"{'true' if self.inference_bypass_projection else 'false'}"
        )
        lines.append(f"load_checkpoint={self.load_checkpoint}")
        return "\n".join(lines) + "\n"


def _parse_kv_list(text, key):
    out = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"{key}: expected name=value items, got {item!r}")
        name, val = item.split("=", 1)
        try:
            out[name.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"{key}: non-numeric value in {item!r}") from None
    return out


def parse_config_text(text: str, overrides=None) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}")
        raw[key] = val
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = str(val)

    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    parsed = {}
    for key, val in raw.items():
        parser, _ = _SCHEMA[key]
        try:
            parsed[key] = parser(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot parse {val!r}") from None

    if parsed["model"] not in MODELS:
        raise ConfigError(f"model: must be one of {', '.join(MODELS)}")
    if parsed["problem"] not in problem_names():
        raise ConfigError(
            f"problem: unknown {parsed['problem']!r}; known: {', '.join(problem_names())}"
        )

    defaults = build_problem(parsed["problem"]).defaults
    train_kwargs = {}
    for f in fields(TrainConfig):
        if f.name in parsed:
            v = parsed[f.name]
        elif f.name in defaults:
            v = defaults[f.name]
        elif f.name in _SCHEMA and _SCHEMA[f.name][1] is not None:
            v = _SCHEMA[f.name][1]
        else:
            continue
        train_kwargs[f.name] = v
    train_kwargs["estimate_params"] = _parse_kv_list(
        parsed.get("estimate_params", ""), "estimate_params"
    )
    train_kwargs["problem_constants"] = _parse_kv_list(
        parsed.get("problem_constants", ""), "problem_constants"
    )
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(
        train=train,
        out_dir=parsed.get("out_dir", "."),
        emit_plots=parsed.get("emit_plots", False),
        inference_bypass_projection=parsed.get("inference_bypass_projection", False),
        load_checkpoint=parsed.get("load_checkpoint", ""),
    )


def parse_config(path, overrides=None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), overrides)
