"""Shared fixtures: tiny model setups and the session-trained copy model.

The acceptance suite registers one pass/fail line per criterion; the
terminal summary prints them together at the end of the run.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from perturblab import data, evaluate, model, perturb, train
from perturblab.rng import RngStreams

_CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    _CRITERIA.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(_CRITERIA):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{name}: {status} ({detail})")


def tiny_config(vocab: int = 9, d_model: int = 4, max_len: int = 8) -> model.ModelConfig:
    return model.ModelConfig(
        vocab_size_src=vocab,
        vocab_size_tgt=vocab,
        d_model=d_model,
        n_heads=2,
        n_layers_enc=1,
        n_layers_dec=1,
        d_ffn=8,
        max_len=max_len,
    )


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    params = model.init_params(cfg, np.random.default_rng(0))
    return params


def train_copy_model(
    seed: int,
    strategy: perturb.PerturbationStrategy,
    steps: int,
    *,
    vocab: int = 32,
    len_range: tuple[int, int] = (4, 10),
    n_train: int = 2000,
    batch_size: int = 32,
    stop_check=None,
):
    """Train a copy-task model; returns (state, metrics, streams).

    ``stop_check(state) -> bool`` is polled every 200 steps to support
    early stopping once a target accuracy is reached.
    """
    streams = RngStreams(seed)
    cfg = model.ModelConfig(
        vocab_size_src=vocab,
        vocab_size_tgt=vocab,
        d_model=64,
        n_heads=2,
        n_layers_enc=2,
        n_layers_dec=2,
        d_ffn=128,
        max_len=len_range[1] + 2,
    )
    params = model.init_params(cfg, streams.stream("init"))
    train_ds = data.generate_task(
        "copy", n_train, vocab, len_range, seed=streams.child_seed("data", 0)
    )
    shuffle = streams.stream("shuffle")
    prng = streams.stream("perturb")
    state = train.TrainState(
        params=params, opt=train.OptimizerState.fresh(params, lr=5e-4, warmup=100)
    )
    metrics = []
    done = False
    while state.step < steps and not done:
        for b in data.make_batches(train_ds, batch_size, shuffle):
            if state.step >= steps:
                break
            _, m = train.train_step(state, b, strategy, prng)
            metrics.append(m)
            if stop_check is not None and state.step % 200 == 0 and stop_check(state):
                done = True
                break
    return state, metrics, streams


@pytest.fixture(scope="session")
def copy_model():
    """Baseline copy model trained to >= 0.99 sequence accuracy (A2 setup)."""
    seed = 7
    streams = RngStreams(seed)
    heldout = data.generate_task("copy", 500, 32, (4, 10), seed=streams.child_seed("data", 2))

    def reached_target(state) -> bool:
        probe = evaluate.evaluate_pairs(state.params, heldout.pairs[:100])
        return probe.sequence_accuracy >= 0.99

    t0 = time.perf_counter()
    state, metrics, streams = train_copy_model(
        seed, perturb.PerturbationStrategy(), steps=3000, stop_check=reached_target
    )
    result = evaluate.evaluate_pairs(state.params, heldout.pairs)
    return {
        "state": state,
        "params": state.params,
        "metrics": metrics,
        "heldout": heldout,
        "result": result,
        "steps": state.step,
        "seconds": time.perf_counter() - t0,
        "seed": seed,
        "streams": streams,
    }
