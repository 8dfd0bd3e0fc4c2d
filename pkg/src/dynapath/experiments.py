"""Comparison studies: several training variants branched from one warmed-up backbone.

Every variant in a study starts from a deep copy of the same state after the
all-keep warm-up, sees the same number of post-warm-up steps, and is scored on
the same fixed test set. This is the protocol behind the acceptance runs and
the demos.
"""

from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .decisions import DecisionSpace
from .flops import keep_prob_for_fraction
from .model import ModelConfig
from .runner import train_steps
from .tasks import TaskSpec, fixed_set
from .trainer import RewardSpec, TrainerConfig, TrainState, evaluate

STUDY_MODEL = ModelConfig(vocab_size=16, e=32, d_ff=64, L_enc=2, L_dec=2, n_heads=2, max_len=20)
TASKS = {
    "prefix-extract": TaskSpec(kind="prefix-extract", n_min=8, n_max=16, k=4),
    # parity over longer inputs stays at chance for this model size within the budget
    "parity-classify": TaskSpec(kind="parity-classify", n_min=2, n_max=5),
}


@dataclass(frozen=True)
class StudySettings:
    model: ModelConfig = STUDY_MODEL
    warmup_steps: int = 1500
    post_steps: int = 1500
    batch_size: int = 32
    model_lr: float = 1e-3
    c_mode: str = "min-ema"
    test_size: int = 256


@dataclass
class VariantResult:
    name: str
    fraction: float
    loss: float
    token_accuracy: float
    c: float | None
    skip: dict = field(default_factory=dict)
    keep_prob: float | None = None
    seconds: float = 0.0

    def violates(self) -> bool:
        return self.c is not None and self.loss > self.c


def study_config(task: TaskSpec, seed: int, settings: StudySettings, reward: RewardSpec | None = None, space: str = "full") -> RunConfig:
    reward = reward or RewardSpec(c_mode=settings.c_mode)
    tr = TrainerConfig(
        reward=reward,
        model_lr=settings.model_lr,
        steps=settings.warmup_steps + settings.post_steps,
        batch_size=settings.batch_size,
        warmup_steps=settings.warmup_steps,
    )
    return RunConfig(model=settings.model, task=dataclasses.replace(task, seed=seed), trainer=tr, decision_space=space, seed=seed)


def variant_config(name: str, task: TaskSpec, seed: int, settings: StudySettings, keep_prob: float = 0.5) -> RunConfig:
    """``lexico``, ``random``, ``none`` (all-keep backbone) or ``fixed:<lambda>``."""
    cm = settings.c_mode
    if name == "lexico":
        return study_config(task, seed, settings)
    if name == "random":
        return study_config(task, seed, settings, RewardSpec("random", c_mode=cm, random_keep_prob=keep_prob))
    if name == "none":
        return study_config(task, seed, settings, space="none")
    if name.startswith("fixed:"):
        return study_config(task, seed, settings, RewardSpec("fixed", float(name[6:]), c_mode=cm))
    raise ValueError(f"unknown variant {name!r}")


class Study:
    """Warm a backbone once, then train and score variants from copies of it."""

    def __init__(self, task: TaskSpec, seed: int, settings: StudySettings = StudySettings()):
        self.task, self.seed, self.settings = task, seed, settings
        base = study_config(task, seed, settings)
        self.test = fixed_set(base.task, "test", settings.test_size)
        t0 = time.perf_counter()
        self.warm = TrainState.create(base.model, base.trainer, base.decision_space, seed, base.task.seed)
        train_steps(self.warm, base, settings.warmup_steps)
        self.warmup_seconds = time.perf_counter() - t0
        self.results: dict[str, VariantResult] = {}

    def test_shapes(self) -> list[tuple[int, int]]:
        return [(int(n), int(m)) for b in self.test for n, m in zip(b.src_len, b.tgt_len)]

    def run(self, name: str, match_fraction: float | None = None) -> VariantResult:
        """Train variant ``name``; for ``random``, ``match_fraction`` calibrates the keep probability."""
        keep_prob = None
        if name == "random":
            target = match_fraction if match_fraction is not None else self.results["lexico"].fraction
            keep_prob = keep_prob_for_fraction(target, self.test_shapes(), self.settings.model)
        cfg = variant_config(name, self.task, self.seed, self.settings, keep_prob if keep_prob is not None else 0.5)
        t0 = time.perf_counter()
        state = copy.deepcopy(self.warm)
        if cfg.decision_space != state.space.name:
            state.space = DecisionSpace.build(cfg.decision_space, cfg.model.L_enc, cfg.model.L_dec)
        records = train_steps(state, cfg, self.settings.post_steps)
        if name == "random":
            ev = evaluate(state.model, state.policy, self.test, state.space, "random", rng=np.random.default_rng([self.seed, 99]), keep_prob=keep_prob)
        else:
            ev = evaluate(state.model, state.policy, self.test, state.space, "greedy")
        res = VariantResult(
            name=name,
            fraction=ev["fraction"],
            loss=ev["loss"],
            token_accuracy=ev["token_accuracy"],
            c=records[-1]["c"],
            skip={k: ev[k] for k in ("att", "ffn", "token")},
            keep_prob=keep_prob,
            seconds=time.perf_counter() - t0,
        )
        self.results[name] = res
        return res
