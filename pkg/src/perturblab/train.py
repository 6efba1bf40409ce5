"""Losses, Adam, the training step, and throughput instrumentation.

A step times everything from perturbation construction through the
optimizer update, so the cost of computing a perturbation lands inside the
measured region.  Replacement and dropout strategies minimize the NLL on
perturbed inputs; adversarial strategies minimize clean NLL plus a weighted
KL consistency term between the clean and offset-perturbed output
distributions (two forwards and two backwards per step in total).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, add, backward, mul, reduce_sum, scale
from .data import Batch
from .model import ModelParams, forward, watch_params
from .perturb import PerturbationStrategy, PerturbedBatch, apply_strategy


@dataclass
class LossReport:
    """Loss components of one step; fields not computed by the strategy are None."""

    clean_nll: float | None
    perturbed_nll: float | None
    vat_kl: float | None
    objective: float
    token_count: int


@dataclass
class OptimizerState:
    """Adam moments plus step counter and learning-rate settings."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 5e-4, warmup: int = 0) -> "OptimizerState":
        return cls(
            lr=lr,
            warmup=warmup,
            m={n: np.zeros_like(a) for n, a in params.tensors.items()},
            v={n: np.zeros_like(a) for n, a in params.tensors.items()},
        )


@dataclass
class StepMetrics:
    step: int
    seconds: float
    tokens: int
    loss: LossReport
    replaced_src: int
    replaced_tgt: int


def nll_loss(
    log_probs: Tensor,
    gold_targets: np.ndarray,
    pad_mask: np.ndarray | None = None,
    normalizer: int | None = None,
) -> Tensor:
    """Mean negative log-likelihood of gold tokens over real positions.

    ``normalizer`` overrides the denominator so per-row losses can be summed
    into a batch token-mean.  All-PAD targets yield a constant 0 with zero
    weight.
    """
    gold = np.asarray(gold_targets, dtype=np.int64)
    if log_probs.data.ndim != 2:
        raise ValueError(f"log_probs must be (positions, vocab), got shape {log_probs.shape}")
    n_pos, vocab = log_probs.shape
    if gold.shape != (n_pos,):
        raise ValueError(f"gold shape {gold.shape} does not match {n_pos} positions")
    if pad_mask is None:
        real = np.ones(n_pos, dtype=bool)
    else:
        real = np.asarray(pad_mask) > 0
    rows = np.flatnonzero(real)
    if rows.size and (gold[rows].min() < 0 or gold[rows].max() >= vocab):
        raise ValueError(f"gold id out of range [0, {vocab})")
    n = int(rows.size) if normalizer is None else int(normalizer)
    if n == 0:
        return Tensor(0.0)
    weights = np.zeros((n_pos, vocab))
    weights[rows, gold[rows]] = -1.0 / n
    return reduce_sum(mul(log_probs, Tensor(weights)))


def vat_loss(
    clean_log_probs,
    perturbed_log_probs: Tensor,
    pad_mask: np.ndarray | None = None,
    normalizer: int | None = None,
) -> Tensor:
    """Mean KL(clean || perturbed) over real positions; clean side is detached.

    The clean distribution enters only as constant weights, so gradients
    flow exclusively through the perturbed branch.
    """
    clean = clean_log_probs.data if isinstance(clean_log_probs, Tensor) else clean_log_probs
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != perturbed_log_probs.shape:
        raise ValueError(
            f"clean shape {clean.shape} != perturbed shape {perturbed_log_probs.shape}"
        )
    if clean.ndim != 2:
        raise ValueError(f"log-prob tensors must be 2-D, got shape {clean.shape}")
    if np.isnan(clean).any() or np.isposinf(clean).any():
        raise ValueError("clean log-probabilities contain NaN or +Inf")
    n_pos = clean.shape[0]
    if pad_mask is None:
        real = np.ones(n_pos, dtype=bool)
    else:
        real = np.asarray(pad_mask) > 0
    n = int(real.sum()) if normalizer is None else int(normalizer)
    if n == 0:
        return Tensor(0.0)
    p = np.exp(clean)
    weights = np.where(real[:, None], p, 0.0) / n
    entropy_term = float(np.where(weights > 0.0, weights * clean, 0.0).sum())
    cross = reduce_sum(mul(perturbed_log_probs, Tensor(weights)))
    return add(Tensor(entropy_term), scale(cross, -1.0))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place if their global norm exceeds max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adam_update(
    params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState
) -> ModelParams:
    """Standard Adam with bias correction and optional linear warmup; mutates in place."""
    state.step += 1
    t = state.step
    lr = state.lr * min(1.0, t / state.warmup) if state.warmup > 0 else state.lr
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params.tensors):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    step: int = 0
    clip_norm: float = 1.0


def _perturbed_objective(
    state: TrainState, batch: Batch, pb: PerturbedBatch, is_baseline: bool
) -> tuple[dict[str, np.ndarray], LossReport]:
    tape = Tape()
    taped = watch_params(tape, state.params)
    n_tok = int(batch.tgt_mask.sum())
    total = None
    for r in range(batch.size):
        sl = int(batch.src_lens[r])
        tl = int(batch.tgt_lens[r])
        lp = forward(
            state.params,
            pb.src[r, :sl],
            pb.tgt_in[r, :tl],
            pb.injection("src", r, sl),
            pb.injection("tgt", r, tl),
            tape=tape,
            taped=taped,
        )
        loss_r = nll_loss(lp, batch.tgt_out[r, :tl], normalizer=n_tok)
        total = loss_r if total is None else add(total, loss_r)
    grad_map = backward(tape, total)
    grads = {name: grad_map.wrt(t) for name, t in taped.items()}
    value = float(total.data)
    report = LossReport(
        clean_nll=value if is_baseline else None,
        perturbed_nll=value,
        vat_kl=None,
        objective=value,
        token_count=n_tok,
    )
    return grads, report


def _adversarial_objective(
    state: TrainState, batch: Batch, pb: PerturbedBatch, lam: float
) -> tuple[dict[str, np.ndarray], LossReport]:
    cache = pb.adv_cache
    tape = Tape()
    taped = watch_params(tape, state.params)
    n_tok = cache.token_count
    kl_total = None
    pert_nll = 0.0
    for r in range(batch.size):
        sl = int(batch.src_lens[r])
        tl = int(batch.tgt_lens[r])
        lp = forward(
            state.params,
            pb.src[r, :sl],
            pb.tgt_in[r, :tl],
            pb.injection("src", r, sl),
            pb.injection("tgt", r, tl),
            tape=tape,
            taped=taped,
        )
        kl_r = vat_loss(cache.clean_log_probs[r], lp, normalizer=n_tok)
        kl_total = kl_r if kl_total is None else add(kl_total, kl_r)
        gold = batch.tgt_out[r, :tl]
        pert_nll += -lp.data[np.arange(tl), gold].sum()
    grad_map = backward(tape, kl_total)
    kl_value = float(kl_total.data)
    objective = cache.nll_clean + lam * kl_value
    grads = {
        name: cache.param_grads[name] + lam * grad_map.wrt(t) for name, t in taped.items()
    }
    report = LossReport(
        clean_nll=cache.nll_clean,
        perturbed_nll=pert_nll / max(n_tok, 1),
        vat_kl=kl_value,
        objective=objective,
        token_count=n_tok,
    )
    return grads, report


def train_step(
    state: TrainState,
    batch: Batch,
    strategy: PerturbationStrategy,
    rng: np.random.Generator,
) -> tuple[TrainState, StepMetrics]:
    """One optimization step; wall-clock covers perturbation through update."""
    t0 = time.perf_counter()
    pb = apply_strategy(strategy, batch, state.params, state.step, rng)
    if strategy.adversarial is not None:
        grads, report = _adversarial_objective(state, batch, pb, strategy.adversarial.lam)
    else:
        grads, report = _perturbed_objective(state, batch, pb, strategy.is_baseline)
    clip_gradients(grads, state.clip_norm)
    adam_update(state.params, grads, state.opt)
    state.step += 1
    seconds = time.perf_counter() - t0
    metrics = StepMetrics(
        step=state.step - 1,
        seconds=seconds,
        tokens=batch.real_token_count(),
        loss=report,
        replaced_src=pb.replaced_src,
        replaced_tgt=pb.replaced_tgt,
    )
    return state, metrics


def throughput(metrics: list[StepMetrics], warmup_steps: int = 10) -> float:
    """Processed tokens per second over the window, first warmup steps excluded."""
    window = metrics[warmup_steps:]
    if not window:
        raise ValueError("window too short: nothing left after warmup exclusion")
    tokens = sum(m.tokens for m in window)
    seconds = sum(m.seconds for m in window)
    return tokens / seconds


def median_step_rate(metrics: list[StepMetrics], warmup_steps: int = 10) -> float:
    """Median per-step tokens/sec; robust to scheduler hiccups in benchmarks."""
    window = metrics[warmup_steps:]
    if not window:
        raise ValueError("window too short: nothing left after warmup exclusion")
    return float(np.median([m.tokens / m.seconds for m in window]))
