"""Experiment runner: config parsing, train / evaluate / robustness /
bench-speed / report subcommands, and CSV report emission.

All randomness flows from ``training.seed`` through named streams; the CLI
has no other entropy source, so a config fully determines a run.  Speed
benchmarks execute strategies strictly sequentially for timing isolation.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, generate_task, make_batches
from .evaluate import (
    eval_csv_lines,
    evaluate_pairs,
    robustness_csv_lines,
    robustness_sweep,
)
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .perturb import (
    AdversarialSpec,
    DecaySchedule,
    PerturbationStrategy,
    ReplacementSpec,
    WordDropoutSpec,
    strategy_from_name,
)
from .rng import RngStreams
from .train import OptimizerState, TrainState, median_step_rate, throughput, train_step

SENTINEL = "INCOMPLETE"
METRICS_HEADER = (
    "step,wall_s,tokens,nll_clean,nll_perturbed,vat_kl,objective,replaced_src,replaced_tgt"
)
SPEED_HEADER = "strategy,position,tokens_per_sec,ratio_vs_baseline"


class ConfigError(ValueError):
    """Config file violates the schema; message carries the path to the field."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "copy"
    vocab_size: int = 32
    len_min: int = 4
    len_max: int = 10
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 500


@dataclass(frozen=True)
class TrainingConfig:
    seed: int
    steps: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    warmup: int = 100
    clip_norm: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    ratios: tuple[float, ...] = (0.0, 0.01, 0.05, 0.10)
    eval_every: int = 0
    corruption_mode: str = "independent"


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig
    model: ModelConfig
    strategy: PerturbationStrategy
    training: TrainingConfig
    eval: EvalConfig


def _mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return dict(node)


def _reject_unknown(remaining: dict, path: str) -> None:
    if remaining:
        key = sorted(remaining)[0]
        raise ConfigError(f"{path}.{key}: unknown key")


def _pop(section: dict, key: str, default, path: str, caster):
    if key not in section:
        if default is _REQUIRED:
            raise ConfigError(f"{path}.{key}: required")
        return default
    raw = section.pop(key)
    try:
        return caster(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.{key}: {exc}") from None


_REQUIRED = object()


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _as_float(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _as_str(v) -> str:
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _parse_task(raw, path="task") -> TaskConfig:
    section = _mapping(raw, path)
    kind = _pop(section, "kind", "copy", path, _as_str)
    if kind not in ("copy", "reverse", "sort"):
        raise ConfigError(f"{path}.kind: unknown task kind {kind!r}")
    vocab_size = _pop(section, "vocab_size", 32, path, _as_int)
    if vocab_size < 4:
        raise ConfigError(f"{path}.vocab_size: must be at least 4")
    len_range = section.pop("len_range", [4, 10])
    if (
        not isinstance(len_range, (list, tuple))
        or len(len_range) != 2
        or not all(isinstance(x, int) and not isinstance(x, bool) for x in len_range)
    ):
        raise ConfigError(f"{path}.len_range: expected [min, max] integers")
    len_min, len_max = int(len_range[0]), int(len_range[1])
    if len_min < 1 or len_max < len_min:
        raise ConfigError(f"{path}.len_range: invalid range [{len_min}, {len_max}]")
    n_train = _pop(section, "n_train", 2000, path, _as_int)
    n_valid = _pop(section, "n_valid", 200, path, _as_int)
    n_test = _pop(section, "n_test", 500, path, _as_int)
    for name, val in (("n_train", n_train), ("n_valid", n_valid), ("n_test", n_test)):
        if val < 1:
            raise ConfigError(f"{path}.{name}: must be positive")
    _reject_unknown(section, path)
    return TaskConfig(kind, vocab_size, len_min, len_max, n_train, n_valid, n_test)


def _parse_model(raw, task: TaskConfig, path="model") -> ModelConfig:
    section = _mapping(raw, path)
    d_model = _pop(section, "d_model", 64, path, _as_int)
    n_heads = _pop(section, "n_heads", 2, path, _as_int)
    n_layers_enc = _pop(section, "n_layers_enc", 2, path, _as_int)
    n_layers_dec = _pop(section, "n_layers_dec", 2, path, _as_int)
    d_ffn = _pop(section, "d_ffn", 128, path, _as_int)
    max_len = _pop(section, "max_len", task.len_max + 2, path, _as_int)
    _reject_unknown(section, path)
    if max_len < task.len_max + 2:
        raise ConfigError(f"{path}.max_len: must be at least len_max + 2 = {task.len_max + 2}")
    try:
        return ModelConfig(
            vocab_size_src=task.vocab_size,
            vocab_size_tgt=task.vocab_size,
            d_model=d_model,
            n_heads=n_heads,
            n_layers_enc=n_layers_enc,
            n_layers_dec=n_layers_dec,
            d_ffn=d_ffn,
            max_len=max_len,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_strategy(raw, path="strategy") -> PerturbationStrategy:
    section = _mapping(raw, path)
    if "name" in section:
        name = _pop(section, "name", _REQUIRED, path, _as_str)
        _reject_unknown(section, path)
        try:
            return strategy_from_name(name)
        except ValueError as exc:
            raise ConfigError(f"{path}.name: {exc}") from None
    replacement = word_dropout = adversarial = None
    if "replacement" in section:
        sub = _mapping(section.pop("replacement"), f"{path}.replacement")
        kind = _pop(sub, "kind", _REQUIRED, f"{path}.replacement", _as_str)
        position = _pop(sub, "position", "both", f"{path}.replacement", _as_str)
        q = _pop(sub, "q", None, f"{path}.replacement", _as_float)
        k = _pop(sub, "k", None, f"{path}.replacement", _as_float)
        _reject_unknown(sub, f"{path}.replacement")
        try:
            schedule = DecaySchedule(
                q=q if q is not None else DecaySchedule.q,
                k=k if k is not None else DecaySchedule.k,
            )
            replacement = ReplacementSpec(kind=kind, position=position, schedule=schedule)
        except ValueError as exc:
            raise ConfigError(f"{path}.replacement: {exc}") from None
    if "word_dropout" in section:
        sub = _mapping(section.pop("word_dropout"), f"{path}.word_dropout")
        beta = _pop(sub, "beta", WordDropoutSpec.beta, f"{path}.word_dropout", _as_float)
        position = _pop(sub, "position", "both", f"{path}.word_dropout", _as_str)
        _reject_unknown(sub, f"{path}.word_dropout")
        try:
            word_dropout = WordDropoutSpec(beta=beta, position=position)
        except ValueError as exc:
            raise ConfigError(f"{path}.word_dropout: {exc}") from None
    if "adversarial" in section:
        sub = _mapping(section.pop("adversarial"), f"{path}.adversarial")
        epsilon = _pop(sub, "epsilon", AdversarialSpec.epsilon, f"{path}.adversarial", _as_float)
        lam = _pop(sub, "lam", AdversarialSpec.lam, f"{path}.adversarial", _as_float)
        position = _pop(sub, "position", "both", f"{path}.adversarial", _as_str)
        _reject_unknown(sub, f"{path}.adversarial")
        try:
            adversarial = AdversarialSpec(epsilon=epsilon, lam=lam, position=position)
        except ValueError as exc:
            raise ConfigError(f"{path}.adversarial: {exc}") from None
    _reject_unknown(section, path)
    return PerturbationStrategy(replacement, word_dropout, adversarial)


def _parse_training(raw, path="training") -> TrainingConfig:
    section = _mapping(raw, path)
    seed = _pop(section, "seed", _REQUIRED, path, _as_int)
    if seed < 0:
        raise ConfigError(f"{path}.seed: must be non-negative")
    steps = _pop(section, "steps", 1000, path, _as_int)
    batch_size = _pop(section, "batch_size", 32, path, _as_int)
    lr = _pop(section, "lr", 5e-4, path, _as_float)
    warmup = _pop(section, "warmup", 100, path, _as_int)
    clip_norm = _pop(section, "clip_norm", 1.0, path, _as_float)
    _reject_unknown(section, path)
    if steps < 1 or batch_size < 1:
        raise ConfigError(f"{path}: steps and batch_size must be positive")
    if lr <= 0 or warmup < 0 or clip_norm < 0:
        raise ConfigError(f"{path}: lr must be positive, warmup/clip_norm non-negative")
    return TrainingConfig(seed, steps, batch_size, lr, warmup, clip_norm)


def _parse_eval(raw, path="eval") -> EvalConfig:
    section = _mapping(raw, path)
    ratios = section.pop("ratios", [0.0, 0.01, 0.05, 0.10])
    if not isinstance(ratios, (list, tuple)) or not ratios:
        raise ConfigError(f"{path}.ratios: expected a non-empty list of numbers")
    try:
        ratios = tuple(float(r) for r in ratios)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.ratios: expected a non-empty list of numbers") from None
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError(f"{path}.ratios: ratios must lie in [0, 1]")
    eval_every = _pop(section, "eval_every", 0, path, _as_int)
    mode = _pop(section, "corruption_mode", "independent", path, _as_str)
    if mode not in ("independent", "fixed_count"):
        raise ConfigError(f"{path}.corruption_mode: expected 'independent' or 'fixed_count'")
    _reject_unknown(section, path)
    return EvalConfig(ratios=ratios, eval_every=eval_every, corruption_mode=mode)


def config_from_dict(data: dict) -> ExperimentConfig:
    root = _mapping(data, "config")
    task = _parse_task(root.pop("task", None))
    model = _parse_model(root.pop("model", None), task)
    strategy = _parse_strategy(root.pop("strategy", None))
    training = _parse_training(root.pop("training", None))
    eval_cfg = _parse_eval(root.pop("eval", None))
    if root:
        raise ConfigError(f"{sorted(root)[0]}: unknown key")
    return ExperimentConfig(task, model, strategy, training, eval_cfg)


def parse_config(path) -> ExperimentConfig:
    """Load and fully validate a YAML config; unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(p, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return config_from_dict(data)


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Canonical fully-defaulted form of a config, for echoing and checkpoints."""
    strategy: dict = {}
    if cfg.strategy.replacement is not None:
        r = cfg.strategy.replacement
        strategy["replacement"] = {
            "kind": r.kind,
            "position": r.position,
            "q": r.schedule.q,
            "k": r.schedule.k,
        }
    if cfg.strategy.word_dropout is not None:
        w = cfg.strategy.word_dropout
        strategy["word_dropout"] = {"beta": w.beta, "position": w.position}
    if cfg.strategy.adversarial is not None:
        a = cfg.strategy.adversarial
        strategy["adversarial"] = {
            "epsilon": a.epsilon,
            "lam": a.lam,
            "position": a.position,
        }
    return {
        "task": {
            "kind": cfg.task.kind,
            "vocab_size": cfg.task.vocab_size,
            "len_range": [cfg.task.len_min, cfg.task.len_max],
            "n_train": cfg.task.n_train,
            "n_valid": cfg.task.n_valid,
            "n_test": cfg.task.n_test,
        },
        "model": {
            "d_model": cfg.model.d_model,
            "n_heads": cfg.model.n_heads,
            "n_layers_enc": cfg.model.n_layers_enc,
            "n_layers_dec": cfg.model.n_layers_dec,
            "d_ffn": cfg.model.d_ffn,
            "max_len": cfg.model.max_len,
        },
        "strategy": strategy,
        "training": {
            "seed": cfg.training.seed,
            "steps": cfg.training.steps,
            "batch_size": cfg.training.batch_size,
            "lr": cfg.training.lr,
            "warmup": cfg.training.warmup,
            "clip_norm": cfg.training.clip_norm,
        },
        "eval": {
            "ratios": list(cfg.eval.ratios),
            "eval_every": cfg.eval.eval_every,
            "corruption_mode": cfg.eval.corruption_mode,
        },
    }


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    streams = RngStreams(cfg.training.seed)
    parts = []
    for idx, n in ((0, cfg.task.n_train), (1, cfg.task.n_valid), (2, cfg.task.n_test)):
        parts.append(
            generate_task(
                cfg.task.kind,
                n,
                cfg.task.vocab_size,
                (cfg.task.len_min, cfg.task.len_max),
                streams.child_seed("data", idx),
            )
        )
    return tuple(parts)


def _write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _fmt_opt(value: float | None) -> str:
    return "" if value is None else repr(value)


def metrics_csv_lines(metrics) -> list[str]:
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(
            f"{m.step},{m.seconds!r},{m.tokens},{_fmt_opt(m.loss.clean_nll)},"
            f"{_fmt_opt(m.loss.perturbed_nll)},{_fmt_opt(m.loss.vat_kl)},"
            f"{m.loss.objective!r},{m.replaced_src},{m.replaced_tgt}"
        )
    return lines


def run_training(cfg: ExperimentConfig, progress=None):
    """Train per config; returns (state, metrics list, datasets)."""
    train_ds, valid_ds, test_ds = build_datasets(cfg)
    streams = RngStreams(cfg.training.seed)
    params = init_params(cfg.model, streams.stream("init"))
    state = TrainState(
        params=params,
        opt=OptimizerState.fresh(params, lr=cfg.training.lr, warmup=cfg.training.warmup),
        clip_norm=cfg.training.clip_norm,
    )
    shuffle_rng = streams.stream("shuffle")
    perturb_rng = streams.stream("perturb")
    metrics = []
    valid_rows = []
    while state.step < cfg.training.steps:
        for batch in make_batches(train_ds, cfg.training.batch_size, shuffle_rng):
            if state.step >= cfg.training.steps:
                break
            _, m = train_step(state, batch, cfg.strategy, perturb_rng)
            metrics.append(m)
            if cfg.eval.eval_every > 0 and state.step % cfg.eval.eval_every == 0:
                res = evaluate_pairs(state.params, valid_ds.pairs)
                valid_rows.append(
                    f"{state.step},{res.token_accuracy!r},"
                    f"{res.sequence_accuracy!r},{res.bleu!r}"
                )
            if progress is not None:
                progress(state.step, m)
    return state, metrics, (train_ds, valid_ds, test_ds), valid_rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.touch()
    _write_lines(
        out / "config.yaml",
        yaml.safe_dump(resolved_dict(cfg), sort_keys=True, default_flow_style=False)
        .rstrip("\n")
        .split("\n"),
    )
    state, metrics, (_, _, test_ds), valid_rows = run_training(cfg)
    _write_lines(out / "metrics.csv", metrics_csv_lines(metrics))
    if valid_rows:
        _write_lines(out / "valid.csv", ["step,token_acc,seq_acc,bleu"] + valid_rows)
    save_checkpoint(out / "checkpoint.ptlb", state.params, resolved_dict(cfg))
    result = evaluate_pairs(state.params, test_ds.pairs)
    _write_lines(out / "final_eval.csv", eval_csv_lines(result))
    sentinel.unlink()
    print(f"trained {cfg.training.steps} steps; final objective "
          f"{metrics[-1].loss.objective:.6f}; test seq acc {result.sequence_accuracy:.4f}")
    return 0


def _load_for_eval(checkpoint_path):
    params, echoed = load_checkpoint(checkpoint_path)
    if echoed is None:
        raise ValueError(f"{checkpoint_path}: checkpoint carries no experiment config")
    cfg = config_from_dict(echoed)
    return params, cfg


def cmd_evaluate(args) -> int:
    params, cfg = _load_for_eval(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.touch()
    _, _, test_ds = build_datasets(cfg)
    result = evaluate_pairs(params, test_ds.pairs)
    _write_lines(out / "final_eval.csv", eval_csv_lines(result))
    sentinel.unlink()
    print(f"token acc {result.token_accuracy:.4f}, seq acc "
          f"{result.sequence_accuracy:.4f}, bleu {result.bleu:.4f}")
    return 0


def _parse_float_list(items) -> list[float]:
    out = []
    for item in items:
        for piece in str(item).split(","):
            piece = piece.strip()
            if piece:
                out.append(float(piece))
    return out


def cmd_robustness(args) -> int:
    params, cfg = _load_for_eval(args.checkpoint)
    ratios = _parse_float_list(args.ratios) if args.ratios else list(cfg.eval.ratios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.touch()
    _, _, test_ds = build_datasets(cfg)
    table = robustness_sweep(
        params,
        test_ds,
        ratios,
        RngStreams(cfg.training.seed),
        corruption_mode=cfg.eval.corruption_mode,
    )
    _write_lines(out / "robustness.csv", robustness_csv_lines(table))
    sentinel.unlink()
    for ratio in sorted(table.rows):
        row = table.rows[ratio]
        print(f"ratio {ratio:.2f}: token acc {row.token_accuracy:.4f}, "
              f"bleu {row.bleu:.4f}")
    return 0


def _parse_str_list(items) -> list[str]:
    out = []
    for item in items:
        for piece in str(item).split(","):
            piece = piece.strip()
            if piece:
                out.append(piece)
    return out


def bench_speed(cfg: ExperimentConfig, strategy_names: list[str], steps: int):
    """Median per-step token rate per strategy on identical data and init."""
    if "none" not in strategy_names:
        raise ValueError("bench-speed needs the 'none' baseline among the strategies")
    if steps < 1:
        raise ValueError("bench-speed needs a positive step budget")
    warmup = 10
    rates: dict[str, float] = {}
    strategies: dict[str, PerturbationStrategy] = {}
    for name in strategy_names:
        strategy = strategy_from_name(name)
        strategies[name] = strategy
        streams = RngStreams(cfg.training.seed)
        train_ds = generate_task(
            cfg.task.kind,
            cfg.task.n_train,
            cfg.task.vocab_size,
            (cfg.task.len_min, cfg.task.len_max),
            streams.child_seed("data", 0),
        )
        params = init_params(cfg.model, streams.stream("init"))
        state = TrainState(
            params=params,
            opt=OptimizerState.fresh(params, lr=cfg.training.lr, warmup=cfg.training.warmup),
            clip_norm=cfg.training.clip_norm,
        )
        shuffle_rng = streams.stream("shuffle")
        perturb_rng = streams.stream("perturb")
        metrics = []
        while state.step < warmup + steps:
            for batch in make_batches(train_ds, cfg.training.batch_size, shuffle_rng):
                if state.step >= warmup + steps:
                    break
                _, m = train_step(state, batch, strategy, perturb_rng)
                metrics.append(m)
        rates[name] = median_step_rate(metrics, warmup_steps=warmup)
    return rates, strategies


def speed_csv_lines(rates: dict[str, float], strategies) -> list[str]:
    base = rates["none"]
    lines = [SPEED_HEADER]
    for name, rate in rates.items():
        lines.append(
            f"{name},{strategies[name].positions()},{rate!r},{rate / base!r}"
        )
    return lines


def cmd_bench_speed(args) -> int:
    cfg = parse_config(args.config)
    names = _parse_str_list(args.strategies)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.touch()
    rates, strategies = bench_speed(cfg, names, args.steps)
    _write_lines(out / "speed.csv", speed_csv_lines(rates, strategies))
    sentinel.unlink()
    for name, rate in rates.items():
        print(f"{name}: {rate:.1f} tokens/s ({rate / rates['none']:.2f}x baseline)")
    return 0


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_run(run_dir: Path) -> dict:
    cfg_path = run_dir / "config.yaml"
    eval_path = run_dir / "final_eval.csv"
    metrics_path = run_dir / "metrics.csv"
    if (run_dir / SENTINEL).exists():
        raise ValueError(f"{run_dir}: run is incomplete (sentinel file present)")
    for p in (cfg_path, eval_path, metrics_path):
        if not p.is_file():
            raise ValueError(f"{run_dir}: missing artifact {p.name}")
    with open(cfg_path, encoding="utf-8") as fh:
        cfg = config_from_dict(yaml.safe_load(fh))
    eval_row = _read_csv_rows(eval_path)[0]
    metric_rows = _read_csv_rows(metrics_path)
    toks = sum(int(r["tokens"]) for r in metric_rows[10:])
    secs = sum(float(r["wall_s"]) for r in metric_rows[10:])
    if not metric_rows[10:]:
        raise ValueError(f"{run_dir}: too few steps for throughput accounting")
    return {
        "strategy": cfg.strategy.label(),
        "seed": cfg.training.seed,
        "token_acc": float(eval_row["token_acc"]),
        "seq_acc": float(eval_row["seq_acc"]),
        "bleu": float(eval_row["bleu"]),
        "tokens_per_sec": toks / secs,
    }


REPORT_FIELDS = ("token_acc", "seq_acc", "bleu", "tokens_per_sec")


def report_lines(runs: list[dict], baseline: str | None) -> list[str]:
    groups: dict[str, list[dict]] = {}
    for run in runs:
        groups.setdefault(run["strategy"], []).append(run)
    header = "strategy,n_runs"
    for f in REPORT_FIELDS:
        header += f",{f}_mean,{f}_range"
    if baseline is not None:
        if baseline not in groups:
            raise ValueError(f"baseline strategy {baseline!r} not among the runs")
        header += ",speed_ratio_vs_baseline"
        base_speed = float(
            np.mean([r["tokens_per_sec"] for r in groups[baseline]])
        )
    lines = [header]
    for name in sorted(groups):
        rows = groups[name]
        line = f"{name},{len(rows)}"
        for f in REPORT_FIELDS:
            vals = [r[f] for r in rows]
            mean = float(np.mean(vals))
            spread = (max(vals) - min(vals)) / 2.0
            line += f",{mean!r},{spread!r}"
        if baseline is not None:
            speed = float(np.mean([r["tokens_per_sec"] for r in rows]))
            line += f",{speed / base_speed!r}"
        lines.append(line)
    return lines


def cmd_report(args) -> int:
    runs = [_load_run(Path(d)) for d in args.runs]
    lines = report_lines(runs, args.baseline)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_lines(out, lines)
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perturblab",
        description="Train and compare perturbation strategies for seq2seq models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per the config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on its test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("robustness", help="corrupted-input robustness sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratios", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("bench-speed", help="sequential throughput benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_speed)

    p = sub.add_parser("report", help="aggregate run directories into one table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--baseline", default=None, help="strategy label for speed ratios")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
