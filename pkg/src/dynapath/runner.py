"""Training / evaluation driver shared by the CLI, the demos and the acceptance tests."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, save_config
from .tasks import fixed_set, make_batches
from .trainer import TrainState, current_c, evaluate, joint_train_step

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "step", "loss", "greedy_loss", "full_loss", "fraction", "greedy_fraction",
    "lambda", "phi", "c", "att", "ffn", "token", "eval_accuracy",
)  # fmt: skip


class MetricsWriter:
    """Append-only JSON-lines stream, flushed after every record."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self._fh = open(self.path, "a" if append else "w")
        self._last = 0

    def write(self, record: dict) -> None:
        if record["step"] <= self._last:
            raise ValueError(f"metrics steps must increase: {record['step']} after {self._last}")
        self._last = record["step"]
        self._fh.write(json.dumps({k: record.get(k) for k in METRIC_KEYS}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics stream, ignoring a trailing partial line."""
    out = []
    with open(path) as fh:
        for line in fh:
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return out


def train_steps(
    state: TrainState,
    cfg: RunConfig,
    n_steps: int,
    on_record: Callable[[dict], None] | None = None,
    val=None,
) -> list[dict]:
    """Advance ``state`` by ``n_steps`` joint steps; returns the metrics records."""
    tr = cfg.trainer
    if val is None and tr.eval_every:
        val = fixed_set(cfg.task, "val", tr.eval_size)
    records = []
    for _ in range(n_steps):
        batch = next(make_batches(cfg.task, tr.batch_size, 1, state.data_rng))
        rec = joint_train_step(state, batch, tr)
        rec["eval_accuracy"] = None
        if tr.eval_every and state.step % tr.eval_every == 0:
            rec["eval_accuracy"] = evaluate(state.model, state.policy, val, state.space, "greedy")["token_accuracy"]
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return records


def summarize(state: TrainState, cfg: RunConfig, split: str = "test", size: int | None = None, generate: bool = True) -> dict:
    data = fixed_set(cfg.task, split, size or cfg.trainer.eval_size)
    greedy = evaluate(state.model, state.policy, data, state.space, "greedy", generate=generate)
    full = evaluate(state.model, state.policy, data, state.space, "all-keep", generate=generate)
    return {"step": state.step, "split": split, "greedy": greedy, "all_keep": full, "c": current_c(state, cfg.trainer.reward)}


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, state: TrainState | None = None) -> tuple[TrainState, dict]:
    """Run the configured number of steps (resuming ``state`` if given).

    With ``out_dir``: writes ``config.json``, ``metrics.jsonl``, periodic
    ``ckpt-<step>.sdck``, ``final.sdck`` and ``summary.json``.
    """
    cfg.validate()
    state = state or TrainState.create(cfg.model, cfg.trainer, cfg.decision_space, cfg.seed, cfg.task.seed)
    out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
    writer = None
    tr = cfg.trainer
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
        writer = MetricsWriter(out / "metrics.jsonl", append=state.step > 0)
        writer._last = state.step

    def on_record(rec):
        if writer is not None:
            writer.write(rec)
            if tr.checkpoint_every and rec["step"] % tr.checkpoint_every == 0:
                save_checkpoint(state, cfg, out / f"ckpt-{rec['step']}.sdck")

    try:
        train_steps(state, cfg, tr.steps - state.step, on_record)
    finally:
        if writer is not None:
            writer.close()
    summary = summarize(state, cfg)
    if out is not None:
        save_checkpoint(state, cfg, out / "final.sdck")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    log.info("finished %d steps: greedy fraction %.3f", state.step, summary["greedy"]["fraction"])
    return state, summary


def trailing_mean(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")
