"""Decoding-based evaluation: accuracy, corpus BLEU, and the robustness sweep.

The robustness sweep corrupts test sources at a list of ratios, decodes
greedily, and scores against the ORIGINAL references; the 0.0 row is the
uncorrupted baseline.  Corruption draws come from per-example counter-keyed
streams, so evaluation order cannot change results.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import Dataset, corrupt_source
from .model import ModelParams, greedy_decode
from .rng import RngStreams


@dataclass
class EvalResult:
    token_accuracy: float
    sequence_accuracy: float
    bleu: float
    n_examples: int


@dataclass
class RobustnessTable:
    """Corruption ratio -> EvalResult; always includes the 0.0 baseline row."""

    rows: dict[float, EvalResult]


def accuracy(hypotheses, references) -> tuple[float, float]:
    """Corpus-pooled token accuracy and exact-match sequence accuracy."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not references:
        raise ValueError("empty corpus")
    matched = 0
    ref_tokens = 0
    exact = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = np.asarray(hyp)
        ref = np.asarray(ref)
        m = min(len(hyp), len(ref))
        matched += int((hyp[:m] == ref[:m]).sum())
        ref_tokens += len(ref)
        if len(hyp) == len(ref) and m == len(ref) and (hyp == ref).all():
            exact += 1
    token_acc = matched / ref_tokens if ref_tokens else 0.0
    return token_acc, exact / len(references)


def _ngrams(seq, n: int) -> Counter:
    seq = [int(t) for t in seq]
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1]: clipped n-gram precisions, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not references:
        raise ValueError("empty corpus")
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    log_precisions = []
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for hyp, ref in zip(hypotheses, references):
            counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total += sum(counts.values())
            clipped += sum(min(c, ref_counts[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(sum(log_precisions) / max_n)


def evaluate_pairs(params: ModelParams, pairs) -> EvalResult:
    """Greedy-decode every source and score against the paired targets."""
    hyps = [greedy_decode(params, src) for src, _ in pairs]
    refs = [tgt for _, tgt in pairs]
    token_acc, seq_acc = accuracy(hyps, refs)
    return EvalResult(
        token_accuracy=token_acc,
        sequence_accuracy=seq_acc,
        bleu=bleu(hyps, refs),
        n_examples=len(refs),
    )


def robustness_sweep(
    params: ModelParams,
    testset: Dataset,
    ratios,
    rng: RngStreams,
    corruption_mode: str = "independent",
) -> RobustnessTable:
    """Evaluate under source corruption at each ratio; scores use original references.

    The 0.0 row is added when missing; it performs no corruption draws, so
    it equals plain evaluation exactly.
    """
    ratio_list = sorted({float(r) for r in ratios} | {0.0})
    rows: dict[float, EvalResult] = {}
    for ri, ratio in enumerate(ratio_list):
        hyps = []
        for i, (src, _) in enumerate(testset.pairs):
            if ratio == 0.0:
                corrupted = src
            else:
                corrupted = corrupt_source(
                    src,
                    ratio,
                    rng.substream("eval_corrupt", ri, i),
                    testset.vocab_size,
                    mode=corruption_mode,
                )
            hyps.append(greedy_decode(params, corrupted))
        refs = [tgt for _, tgt in testset.pairs]
        token_acc, seq_acc = accuracy(hyps, refs)
        rows[ratio] = EvalResult(token_acc, seq_acc, bleu(hyps, refs), len(refs))
    return RobustnessTable(rows=rows)


EVAL_CSV_HEADER = "token_acc,seq_acc,bleu,n_examples"
ROBUSTNESS_CSV_HEADER = "ratio,token_acc,seq_acc,bleu,n_examples"


def eval_csv_lines(result: EvalResult) -> list[str]:
    return [
        EVAL_CSV_HEADER,
        f"{result.token_accuracy!r},{result.sequence_accuracy!r},"
        f"{result.bleu!r},{result.n_examples}",
    ]


def robustness_csv_lines(table: RobustnessTable) -> list[str]:
    lines = [ROBUSTNESS_CSV_HEADER]
    for ratio in sorted(table.rows):
        r = table.rows[ratio]
        lines.append(
            f"{ratio!r},{r.token_accuracy!r},{r.sequence_accuracy!r},"
            f"{r.bleu!r},{r.n_examples}"
        )
    return lines
