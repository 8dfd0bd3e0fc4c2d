"""Run configuration: one JSON document with model, task and trainer sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .decisions import DECISION_SPACES
from .model import ModelConfig
from .tasks import TaskSpec
from .trainer import RewardSpec, TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    decision_space: str = "full"
    seed: int = 0
    out_dir: str | None = None

    def validate(self) -> None:
        if self.decision_space not in DECISION_SPACES:
            raise ConfigError(f"decision_space: must be one of {DECISION_SPACES}, got {self.decision_space!r}")
        try:
            self.trainer.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        need = max(self.task.n_max, self.task.max_target_len() + 1)
        if need > self.model.max_len:
            raise ConfigError(f"model.max_len: {self.model.max_len} is shorter than the task needs ({need})")
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigError(
                f"task.vocab_size: {self.task.vocab_size} differs from model.vocab_size {self.model.vocab_size}"
            )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def state_dict(self) -> dict[str, Any]:
        """The parts that shape a checkpoint (everything except ``out_dir``)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def digest(self) -> bytes:
        blob = json.dumps(self.state_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be an object")
        _reject_unknown(d, cls, "config")
        kw: dict[str, Any] = {}
        if "model" in d:
            kw["model"] = _build(ModelConfig, d["model"], "model")
        if "task" in d:
            kw["task"] = _build(TaskSpec, d["task"], "task")
        if "trainer" in d:
            t = dict(_require_obj(d["trainer"], "trainer"))
            reward = _build(RewardSpec, t.pop("reward", {}), "trainer.reward")
            kw["trainer"] = _build(TrainerConfig, t, "trainer", reward=reward)
        for key in ("decision_space", "seed", "out_dir"):
            if key in d:
                kw[key] = d[key]
        if "seed" in kw and not isinstance(kw["seed"], int):
            raise ConfigError("seed: must be an integer")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg


def _require_obj(v, path):
    if not isinstance(v, dict):
        raise ConfigError(f"{path}: must be an object")
    return v


def _reject_unknown(d, cls, path):
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"{path}.{k}: unknown field")


def _build(cls, d, path, **extra):
    d = _require_obj(d, path)
    _reject_unknown(d, cls, path)
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    for k, v in d.items():
        t = str(types[k])
        if t == "int" and (not isinstance(v, int) or isinstance(v, bool)):
            raise ConfigError(f"{path}.{k}: expected an integer, got {v!r}")
        if t == "float" and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            raise ConfigError(f"{path}.{k}: expected a number, got {v!r}")
        if t == "str" and not isinstance(v, str):
            raise ConfigError(f"{path}.{k}: expected a string, got {v!r}")
    try:
        return cls(**d, **extra)
    except ValueError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(path) else f"{path}: {msg}") from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
