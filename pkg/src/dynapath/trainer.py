"""Joint training of the transformer and the policy.

Each step trains the model on the sampled path, then moves the policy either
along a fixed-lambda reward gradient or along the lexicographic direction::

    e = grad E[fraction] + lam * grad E[loss]
    lam = max((phi - grad_f . grad_q) / |grad_q|^2, 0),   phi = E[loss] - c

which minimizes computation only as far as it does not stall the descent of
the loss constraint. Both gradients are score-function estimates with the
greedy path as a self-critical baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decisions import J, DecisionSpace, sample_batch
from .flops import path_stats
from .model import TransformerModel, batch_nll, encode_first, forward_batch, token_correct
from .policy import PolicyNetwork, pool_hidden, score_function_grad
from .tensor import Adam, Tensor

LAMBDA_MODES = ("lexico", "fixed", "random")
C_MODES = ("ema", "min-ema", "fixed")
LEXICO_VARIANTS = ("prose", "literal")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``diagnostics`` holds the offending decisions and lambda."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class RewardSpec:
    lambda_mode: str = "lexico"
    fixed_lambda: float = 0.0
    c_mode: str = "ema"
    c_value: float = 0.0
    ema_decay: float = 0.99
    margin: float = 0.02
    lexico_variant: str = "prose"
    random_keep_prob: float = 0.5

    def validate(self, prefix: str = "reward") -> None:
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"{prefix}.lambda_mode: must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}")
        if self.c_mode not in C_MODES:
            raise ValueError(f"{prefix}.c_mode: must be one of {C_MODES}, got {self.c_mode!r}")
        if self.lexico_variant not in LEXICO_VARIANTS:
            raise ValueError(f"{prefix}.lexico_variant: must be one of {LEXICO_VARIANTS}, got {self.lexico_variant!r}")
        if self.fixed_lambda < 0:
            raise ValueError(f"{prefix}.fixed_lambda: must be >= 0")
        if self.margin < 0:
            raise ValueError(f"{prefix}.margin: must be >= 0")
        if not 0 <= self.random_keep_prob <= 1:
            raise ValueError(f"{prefix}.random_keep_prob: must lie in [0, 1]")
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"{prefix}.ema_decay: must lie in (0, 1)")


@dataclass
class TrainerConfig:
    reward: RewardSpec = field(default_factory=RewardSpec)
    model_lr: float = 3e-4
    policy_lr: float = 1e-3
    policy_optimizer: str = "adam"
    steps: int = 1000
    batch_size: int = 32
    n_samples: int = 1
    warmup_steps: int = 0
    warmup_decisions: str = "all-keep"
    eval_every: int = 0
    eval_size: int = 256
    checkpoint_every: int = 0

    def validate(self, prefix: str = "trainer") -> None:
        self.reward.validate(prefix + ".reward")
        for name in ("model_lr", "policy_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{prefix}.{name}: must be > 0")
        if self.warmup_decisions not in ("all-keep", "random"):
            raise ValueError(f"{prefix}.warmup_decisions: must be 'all-keep' or 'random'")
        if self.policy_optimizer not in ("adam", "sgd"):
            raise ValueError(f"{prefix}.policy_optimizer: must be 'adam' or 'sgd'")
        for name in ("steps", "batch_size", "n_samples", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{prefix}.{name}: must be >= 1")
        for name in ("warmup_steps", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{prefix}.{name}: must be >= 0")


# --------------------------------------------------------------------------
# Reward and lambda
# --------------------------------------------------------------------------


def reward(loss, flops_fraction, lam: float):
    """``-loss + lam * (1 - fraction)``: quality plus the share of FLOPs saved."""
    return -np.asarray(loss) + lam * (1.0 - np.asarray(flops_fraction))


def lexico_lambda(grad_f: np.ndarray, grad_q: np.ndarray, phi: float) -> float:
    """Multiplier on ``grad_q`` so that the update still descends ``q`` at rate ``phi``."""
    grad_f, grad_q = np.ravel(grad_f), np.ravel(grad_q)
    if grad_f.shape != grad_q.shape:
        raise T.DimensionError(f"lexico_lambda: {grad_f.shape} vs {grad_q.shape}")
    nq = float(grad_q @ grad_q)
    if nq == 0.0:
        return 0.0
    return max((phi - float(grad_f @ grad_q)) / nq, 0.0)


def lexico_direction(grad_comp: np.ndarray, grad_quality: np.ndarray, phi: float, variant: str = "prose") -> tuple[np.ndarray, float]:
    """Update direction and lambda.

    ``prose``: computation is minimized subject to the loss constraint.
    ``literal``: the printed form, ``grad_q + lam * grad_f`` with lambda
    normalized by ``|grad_f|^2``.
    """
    if variant == "prose":
        lam = lexico_lambda(grad_comp, grad_quality, phi)
        return grad_comp + lam * grad_quality, lam
    lam = lexico_lambda(grad_quality, grad_comp, phi)
    return grad_quality + lam * grad_comp, lam


def lexico_descent(grad_f, q_fn, c: float, theta0, lr: float, steps: int, margin: float = 0.0) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """Deterministic lexicographic descent on a differentiable toy problem.

    ``grad_f(theta)`` is the secondary objective's gradient and ``q_fn(theta)``
    returns ``(q, grad_q)``. Plain steps ``theta -= lr * e`` with the constraint
    ``q <= c - margin``; returns the final iterate and the ``(q, lambda)`` trace.
    """
    theta = np.array(theta0, dtype=np.float64)
    trace = []
    for _ in range(steps):
        q, gq = q_fn(theta)
        e, lam = lexico_direction(np.asarray(grad_f(theta)), np.asarray(gq), q - (c - margin))
        theta = theta - lr * e
        trace.append((float(q), lam))
    return theta, trace


def flatten(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)


def unflatten(vec: np.ndarray, like: list[Tensor]) -> list[np.ndarray]:
    out, i = [], 0
    for p in like:
        out.append(vec[i : i + p.size].reshape(p.shape))
        i += p.size
    return out


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


class SGD:
    """Plain ``p -= lr * g``; mirrors the parts of :class:`Adam` the trainer uses."""

    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g


@dataclass
class TrainState:
    model: TransformerModel
    policy: PolicyNetwork
    model_opt: Adam
    policy_opt: Adam | SGD
    space: DecisionSpace
    rng: np.random.Generator
    data_rng: np.random.Generator
    step: int = 0
    c_ema: float | None = None
    c_min: float | None = None
    policy_calls: int = 0

    @classmethod
    def create(cls, model_config, trainer: TrainerConfig, decision_space: str, seed: int, task_seed: int = 0) -> "TrainState":
        model = TransformerModel(model_config, np.random.default_rng([seed, 1]))
        policy = PolicyNetwork(model_config.e, model_config.D, np.random.default_rng([seed, 2]))
        popt = (Adam if trainer.policy_optimizer == "adam" else SGD)(policy.parameters(), lr=trainer.policy_lr)
        return cls(
            model=model,
            policy=policy,
            model_opt=Adam(model.parameters(), lr=trainer.model_lr),
            policy_opt=popt,
            space=DecisionSpace.build(decision_space, model_config.L_enc, model_config.L_dec),
            rng=np.random.default_rng([seed, 3]),
            data_rng=np.random.default_rng([seed, task_seed, 0, 0x5D]),
        )


# --------------------------------------------------------------------------
# Decisions for a batch
# --------------------------------------------------------------------------


def policy_probs(
    state_or_policy, x: np.ndarray, random_policy: bool = False, keep_prob: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    policy = state_or_policy.policy if isinstance(state_or_policy, TrainState) else state_or_policy
    B = x.shape[0]
    if random_policy:
        return np.full((B, policy.D), keep_prob), np.full((B, J), 1.0 / J)
    with T.no_grad():
        g, h = policy.forward(x)
    return g.data, h.data


def greedy_arrays(g: np.ndarray, h: np.ndarray, space: DecisionSpace | None = None) -> tuple[np.ndarray, np.ndarray]:
    keep, strat = g >= 0.5, np.argmax(h, axis=-1)
    return space.force(keep, strat) if space is not None else (keep, strat)


def batch_path_stats(keep: np.ndarray, strategy: np.ndarray, batch, config) -> np.ndarray:
    """[B, 4] of (fraction, att %, ffn %, token %) per example."""
    tl = batch.tgt_len
    return np.array([path_stats(keep[b], strategy[b], batch.src_len[b], tl[b], config) for b in range(len(strategy))])


def _losses_no_grad(model, batch, keep, strategy, first: Tensor) -> tuple[np.ndarray, Tensor]:
    with T.no_grad():
        logits = forward_batch(model, batch, keep, strategy, Tensor(first.data))
        _, per = batch_nll(logits, batch)
    return per, logits


# --------------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------------


@dataclass
class ObjectiveEstimate:
    L_quality: float
    L_comp: float
    grad_quality: list[np.ndarray]
    grad_comp: list[np.ndarray]
    sample_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))
    greedy_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    greedy_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))


def self_critical_baseline(model, policy, src, tgt, lam: float = 0.0, space: DecisionSpace | None = None) -> float:
    """Reward of the argmax path for one example (the advantage baseline)."""
    from .tasks import collate

    batch = collate([list(src)], [list(tgt)])
    with T.no_grad():
        first = encode_first(model, batch.src, batch.src_len)
    x = pool_hidden(first.data, batch.src_len).x
    g, h = policy_probs(policy, x)
    keep, strat = greedy_arrays(g, h, space)
    loss, _ = _losses_no_grad(model, batch, keep, strat, first)
    frac = batch_path_stats(keep, strat, batch, model.config)[:, 0]
    return float(reward(loss, frac, lam)[0])


def policy_gradients(policy, x, keep, strategy, loss_adv, frac_adv, space=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Score-function gradients of E[loss] and E[fraction] from advantage arrays."""
    gq = score_function_grad(policy, x, keep, strategy, loss_adv, space, accumulate=False)
    gc = score_function_grad(policy, x, keep, strategy, frac_adv, space, accumulate=False)
    return gq, gc


def estimate_objectives(
    model, policy, batch, n_samples: int, rng: np.random.Generator, space: DecisionSpace | None = None
) -> ObjectiveEstimate:
    """Expected loss / FLOPs fraction under the policy and their score-function gradients."""
    if n_samples < 1:
        raise ValueError("estimate_objectives: n_samples must be >= 1")
    cfg = model.config
    with T.no_grad():
        first = encode_first(model, batch.src, batch.src_len)
    x = pool_hidden(first.data, batch.src_len).x
    g, h = policy_probs(policy, x)
    kg, ag = greedy_arrays(g, h, space)
    loss_g, _ = _losses_no_grad(model, batch, kg, ag, first)
    frac_g = batch_path_stats(kg, ag, batch, cfg)[:, 0]
    gq_sum = gc_sum = None
    losses, fracs = [], []
    for _ in range(n_samples):
        ks, as_ = sample_batch(g, h, rng)
        if space is not None:
            ks, as_ = space.force(ks, as_)
        loss_s, _ = _losses_no_grad(model, batch, ks, as_, first)
        frac_s = batch_path_stats(ks, as_, batch, cfg)[:, 0]
        gq, gc = policy_gradients(policy, x, ks, as_, loss_s - loss_g, frac_s - frac_g, space)
        gq_sum = gq if gq_sum is None else [a + b for a, b in zip(gq_sum, gq)]
        gc_sum = gc if gc_sum is None else [a + b for a, b in zip(gc_sum, gc)]
        losses.append(loss_s)
        fracs.append(frac_s)
    losses, fracs = np.stack(losses), np.stack(fracs)
    return ObjectiveEstimate(
        L_quality=float(losses.mean()),
        L_comp=float(fracs.mean()),
        grad_quality=[a / n_samples for a in gq_sum],
        grad_comp=[a / n_samples for a in gc_sum],
        sample_loss=losses,
        sample_fraction=fracs,
        greedy_loss=loss_g,
        greedy_fraction=frac_g,
    )


def current_c(state: TrainState, spec: RewardSpec) -> float | None:
    """Constraint threshold: fixed, or the (lowest seen) EMA of the all-keep loss plus the margin."""
    if spec.c_mode == "fixed":
        return spec.c_value
    if state.c_ema is None:
        return None
    track = state.c_min if spec.c_mode == "min-ema" and state.c_min is not None else state.c_ema
    return track + spec.margin


def lexico_update(state: TrainState, estimate: ObjectiveEstimate, spec: RewardSpec, gamma: float | None = None) -> dict:
    """Move the policy along the lexicographic direction; returns lambda, phi, c."""
    c = current_c(state, spec)
    if c is None:
        raise ValueError("lexico_update: constraint threshold is not initialized")
    phi = estimate.L_quality - c
    e, lam = lexico_direction(flatten(estimate.grad_comp), flatten(estimate.grad_quality), phi, spec.lexico_variant)
    _policy_step(state, e, gamma)
    return {"lambda": lam, "phi": phi, "c": c}


def _policy_step(state: TrainState, direction: np.ndarray, gamma: float | None) -> None:
    opt = state.policy_opt
    if gamma is not None:
        opt.lr = gamma
    opt.step(unflatten(direction, state.policy.parameters()))
    state.policy_calls += 1


# --------------------------------------------------------------------------
# One joint step
# --------------------------------------------------------------------------


def joint_train_step(state: TrainState, batch, trainer: TrainerConfig) -> dict:
    """Model step on the sampled path, then a policy step; returns the metrics record.

    During the first ``trainer.warmup_steps`` steps the policy is frozen and
    the model trains on all-keep (or uniformly random) paths.
    """
    spec = trainer.reward
    model, cfg, space = state.model, state.model.config, state.space
    warm = state.step < trainer.warmup_steps
    random_policy = spec.lambda_mode == "random" or (warm and trainer.warmup_decisions == "random")
    learn_policy = not random_policy and not space.is_empty and not warm

    tape = T.Tape()
    with tape:
        first = encode_first(model, batch.src, batch.src_len)
    x = pool_hidden(first.data, batch.src_len).x
    g, h = policy_probs(state, x, random_policy, spec.random_keep_prob if spec.lambda_mode == "random" else 0.5)
    ks, as_ = space.force(*sample_batch(g, h, state.rng))
    kg, ag = greedy_arrays(g, h, space)
    if warm and trainer.warmup_decisions == "all-keep":
        ks, as_ = np.ones_like(ks), np.zeros_like(as_)

    with tape:
        logits = forward_batch(model, batch, ks, as_, first)
        loss_t, loss_s = batch_nll(logits, batch)
    B = batch.size
    all_keep = np.ones((B, cfg.D), dtype=bool)
    loss_g, _ = _losses_no_grad(model, batch, kg, ag, first)
    loss_f, _ = _losses_no_grad(model, batch, all_keep, np.zeros(B, dtype=np.int64), first)
    st_s = batch_path_stats(ks, as_, batch, cfg)
    st_g = batch_path_stats(kg, ag, batch, cfg)

    if not np.isfinite(loss_t.data).all():
        raise TrainingDiverged(
            f"non-finite loss at step {state.step + 1}",
            {
                "step": state.step + 1,
                "loss": float(loss_t.data),
                "decisions": ["".join("1" if b else "0" for b in k) + f"|{a}" for k, a in zip(ks, as_)],
                "lambda": spec.fixed_lambda if spec.lambda_mode == "fixed" else None,
            },
        )

    model.zero_grad()
    tape.backward(loss_t)
    state.model_opt.step()

    if state.c_ema is None:
        state.c_ema = float(loss_f.mean())
    c = current_c(state, spec)
    L_q, L_c = float(loss_s.mean()), float(st_s[:, 0].mean())
    phi = L_q - c
    lam = spec.fixed_lambda if spec.lambda_mode == "fixed" else 0.0
    if learn_policy:
        gq, gc = policy_gradients(state.policy, x, ks, as_, loss_s - loss_g, st_s[:, 0] - st_g[:, 0], space)
        gq, gc = flatten(gq), flatten(gc)
        if spec.lambda_mode == "lexico":
            e, lam = lexico_direction(gc, gq, phi, spec.lexico_variant)
        else:
            # descent on -E[R] = E[loss] + lam * E[fraction] - lam
            e = gq + lam * gc
        _policy_step(state, e, None)
    if spec.c_mode != "fixed":
        d = spec.ema_decay
        state.c_ema = d * state.c_ema + (1.0 - d) * float(loss_f.mean())
        state.c_min = state.c_ema if state.c_min is None else min(state.c_min, state.c_ema)
    state.step += 1
    return {
        "step": state.step,
        "loss": L_q,
        "greedy_loss": float(loss_g.mean()),
        "full_loss": float(loss_f.mean()),
        "fraction": L_c,
        "greedy_fraction": float(st_g[:, 0].mean()),
        "lambda": float(lam),
        "phi": float(phi),
        "c": float(c),
        "att": float(st_s[:, 1].mean()),
        "ffn": float(st_s[:, 2].mean()),
        "token": float(st_s[:, 3].mean()),
    }


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def decide(state_or_policy, x, mode: str, space: DecisionSpace, rng=None, keep_prob: float = 0.5, strategy_probs=None):
    """Decision arrays for an eval pass.

    ``greedy`` takes the policy argmax, ``all-keep`` forces the full path,
    ``sample`` samples the policy, and ``random`` samples input-independent
    decisions with keep probability ``keep_prob``.
    """
    B = x.shape[0]
    policy = state_or_policy.policy if isinstance(state_or_policy, TrainState) else state_or_policy
    if mode == "all-keep":
        return np.ones((B, policy.D), dtype=bool), np.zeros(B, dtype=np.int64)
    if mode == "random":
        hp = np.full(J, 1.0 / J) if strategy_probs is None else np.asarray(strategy_probs)
        k, a = sample_batch(np.full((B, policy.D), keep_prob), np.tile(hp, (B, 1)), rng)
        return space.force(k, a)
    g, h = policy_probs(policy, x)
    if mode == "greedy":
        return greedy_arrays(g, h, space)
    if mode == "sample":
        return space.force(*sample_batch(g, h, rng))
    raise ValueError(f"unknown decision mode {mode!r}")


def evaluate(
    model, policy, batches, space: DecisionSpace, mode: str = "greedy", rng=None, generate: bool = False, **decide_kw
) -> dict:
    """Loss, teacher-forced token accuracy, FLOPs fraction and skip stats over ``batches``.

    ``fraction`` is the mean of per-example path fractions (a corpus average).
    """
    from .model import greedy_generate_batch

    cfg = model.config
    losses, stats, correct, total, exact, n = [], [], 0, 0, 0, 0
    for batch in batches:
        with T.no_grad():
            first = encode_first(model, batch.src, batch.src_len)
            x = pool_hidden(first.data, batch.src_len).x
            keep, strat = decide(policy, x, mode, space, rng, **decide_kw)
            logits = forward_batch(model, batch, keep, strat, first)
            _, per = batch_nll(logits, batch)
        hits = token_correct(logits, batch)
        correct += int(hits.sum())
        total += int(batch.label_mask.sum())
        losses.append(per)
        stats.append(batch_path_stats(keep, strat, batch, cfg))
        if generate:
            outs = greedy_generate_batch(model, batch, keep, strat, max_steps=batch.labels.shape[1] + 2)
            exact += sum(o == t for o, t in zip(outs, batch.targets))
        n += batch.size
    st = np.concatenate(stats)
    out = {
        "examples": n,
        "loss": float(np.concatenate(losses).mean()),
        "token_accuracy": correct / total,
        "fraction": float(st[:, 0].mean()),
        "att": float(st[:, 1].mean()),
        "ffn": float(st[:, 2].mean()),
        "token": float(st[:, 3].mean()),
    }
    if generate:
        out["exact_match"] = exact / n
    return out
