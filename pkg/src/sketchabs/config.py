"""Run configuration: a TOML file with a fixed schema.

Sections and keys (all optional; defaults shown by ``sketchabs config``)::

    [data]       n_objects, d_z, d_obs, sigma, seed
    [model]      d, hidden, r, group_sizes
    [train]      batch_size, epochs, lr, seed, optimizer, loss, use_mask,
                 freeze_padding, gumbel_temperature, gumbel_hard, fixed_q
    [loss]       lambda1, lambda2, lambda3, tau1, tau2, mu
    [generator]  seed, d_img

Unknown sections or keys are rejected before any work starts. ``fixed_q``
absent means per-level q (10 / 5 / 1); ``d_img`` must equal ``d_obs`` since
the reconstruction target is the photo observation.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .accq import AccqConfig
from .core import InvalidInputError
from .losses import LossWeights, TripletConfig
from .model import ModelConfig
from .synth_data import DataParams
from .train import TrainConfig


class ConfigError(ValueError):
    pass


SCHEMA = {
    "data": {"n_objects": int, "d_z": int, "d_obs": int, "sigma": float, "seed": int},
    "model": {"d": int, "hidden": int, "r": int, "group_sizes": list},
    "train": {"batch_size": int, "epochs": int, "lr": float, "seed": int, "optimizer": str,
              "loss": str, "use_mask": bool, "freeze_padding": bool,
              "gumbel_temperature": float, "gumbel_hard": bool, "fixed_q": int},
    "loss": {"lambda1": float, "lambda2": float, "lambda3": float,
             "tau1": float, "tau2": float, "mu": float},
    "generator": {"seed": int, "d_img": int},
}


@dataclass(frozen=True)
class RunConfig:
    data: DataParams = field(default_factory=DataParams)
    d: int = 16
    hidden: int = 64
    r: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    generator_seed: int = 0
    d_img: int | None = field(default=None, compare=False)  # checked only

    def __post_init__(self):
        if self.d_img is not None and self.d_img != self.data.d_obs:
            raise ConfigError(
                f"generator.d_img={self.d_img} must equal data.d_obs={self.data.d_obs}")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(d_obs=self.data.d_obs, hidden=self.hidden, d=self.d, r=self.r)

    def as_dict(self) -> dict:
        t = self.train
        out = {
            "data": asdict(self.data),
            "model": {"d": self.d, "hidden": self.hidden, "r": self.r,
                      "group_sizes": list(t.group_sizes)},
            "train": {"batch_size": t.batch_size, "epochs": t.epochs, "lr": t.lr,
                      "seed": t.seed, "optimizer": t.optimizer, "loss": t.loss,
                      "use_mask": t.use_mask, "freeze_padding": t.freeze_padding,
                      "gumbel_temperature": t.gumbel_temperature,
                      "gumbel_hard": t.gumbel_hard, "fixed_q": t.fixed_q},
            "loss": {"lambda1": t.weights.recons, "lambda2": t.weights.accq,
                     "lambda3": t.weights.abs, "tau1": t.accq.tau1, "tau2": t.accq.tau2,
                     "mu": t.triplet.mu},
            "generator": {"seed": self.generator_seed, "d_img": self.data.d_obs},
        }
        if t.fixed_q is None:
            del out["train"]["fixed_q"]
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **train_overrides) -> "RunConfig":
        overrides = {k: v for k, v in train_overrides.items() if v is not None}
        return replace(self, train=replace(self.train, **overrides)) if overrides else self


def _check_types(raw: dict):
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            want = SCHEMA[section].get(key)
            if want is None:
                raise ConfigError(f"unknown key {section}.{key}")
            ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                ok = True
            if not ok:
                raise ConfigError(f"{section}.{key} must be {want.__name__}, got {value!r}")


def from_dict(raw: dict) -> RunConfig:
    _check_types(raw)
    data = raw.get("data", {})
    model = raw.get("model", {})
    tr = dict(raw.get("train", {}))
    loss = raw.get("loss", {})
    gen = raw.get("generator", {})
    try:
        weights = LossWeights(loss.get("lambda1", 0.5), loss.get("lambda2", 1.0),
                              loss.get("lambda3", 0.5))
        accq = AccqConfig(tau1=loss.get("tau1", 1.0), tau2=loss.get("tau2", 0.01))
        triplet = TripletConfig(loss.get("mu", 0.3))
        group_sizes = tuple(model.get("group_sizes", (3, 3, 3)))
        train = TrainConfig(weights=weights, accq=accq, triplet=triplet,
                            group_sizes=group_sizes, **tr)
        return RunConfig(data=DataParams(**data), d=model.get("d", 16),
                         hidden=model.get("hidden", 64), r=model.get("r", 4), train=train,
                         generator_seed=gen.get("seed", 0), d_img=gen.get("d_img"))
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def dump_toml(cfg: RunConfig) -> str:
    lines = []
    for section, body in cfg.as_dict().items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            if value is None:
                continue
            if isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = json.dumps(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
