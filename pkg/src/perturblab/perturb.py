"""Training-time perturbations: token replacement, word dropout, adversarial offsets.

The three components are orthogonal and composable.  A strategy lists which
components apply and to which side of the encoder-decoder; applying it to a
batch yields replaced token matrices, dropout masks, and adversarial offset
rows packaged for the embedding layer.  PAD, BOS, and EOS positions are
never replaced, dropped, or offset: corrupting control tokens would break
the sequence protocol itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, add, backward
from .data import Batch, N_SPECIALS
from .model import EmbeddingInjection, ModelParams, forward, forward_with_trace, watch_params

POSITIONS = ("enc", "dec", "both")
REPLACEMENT_KINDS = ("uniform", "similarity", "scheduled")

DEFAULT_Q = 0.9
DEFAULT_K = 1000.0
DEFAULT_BETA = 0.9
DEFAULT_EPSILON = 1.0
DEFAULT_LAMBDA = 1.0

SCHEDULED_ENCODER_ERROR = (
    "scheduled-sampling replacement is decoder-only: the decoder's output "
    "distribution defines no sampling distribution for encoder-side tokens"
)


@dataclass(frozen=True)
class DecaySchedule:
    """Inverse sigmoid decay of the keep-probability: max(q, k / (k + e^(t/k)))."""

    q: float = DEFAULT_Q
    k: float = DEFAULT_K

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be in [0, 1], got {self.q}")
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")


def decay_alpha(schedule: DecaySchedule, t: int) -> float:
    """Keep-probability at training step t; decays from ~1 toward the floor q."""
    if t < 0:
        raise ValueError(f"step index must be non-negative, got {t}")
    try:
        raw = schedule.k / (schedule.k + math.exp(t / schedule.k))
    except OverflowError:
        raw = 0.0
    return max(schedule.q, raw)


# ---------------------------------------------------------------------------
# Replacement distributions (tagged union via one small class per kind).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformReplacement:
    """Uniform over real token ids of one vocabulary."""

    vocab_size: int

    def sample(self, rng: np.random.Generator, clean_token: int, position: int) -> int:
        return int(rng.integers(N_SPECIALS, self.vocab_size))


class SimilarityReplacement:
    """Draws tokens with probability softmax(E @ e(clean)) over real ids.

    Holds a live reference to the embedding matrix, so the distribution
    tracks parameter updates.  The clean token stays in the support;
    drawing it is a no-op replacement.
    """

    def __init__(self, embedding: np.ndarray):
        if embedding.ndim != 2 or embedding.shape[0] <= N_SPECIALS:
            raise ValueError("embedding matrix must be (vocab, d) with real tokens present")
        self.embedding = embedding

    def probabilities(self, clean_token: int) -> np.ndarray:
        logits = self.embedding[N_SPECIALS:] @ self.embedding[clean_token]
        shifted = logits - logits.max()
        p = np.exp(shifted)
        return p / p.sum()

    def sample(self, rng: np.random.Generator, clean_token: int, position: int) -> int:
        p = self.probabilities(clean_token)
        return N_SPECIALS + int(rng.choice(p.size, p=p))


class ScheduledReplacement:
    """Samples from the decoder's own output distribution per position.

    ``log_probs`` comes from one teacher-forced, gradient-free forward pass
    (see ``scheduled_distribution``); row j is the distribution over the
    token at decoder-input position j + 1.  Draws are restricted to real
    token ids and renormalized.
    """

    def __init__(self, log_probs: np.ndarray):
        log_probs = np.asarray(log_probs, dtype=np.float64)
        if log_probs.ndim != 2 or log_probs.shape[1] <= N_SPECIALS:
            raise ValueError("log_probs must be (positions, vocab) with real tokens present")
        self.log_probs = log_probs

    def sample(self, rng: np.random.Generator, clean_token: int, position: int) -> int:
        if position < 1 or position > self.log_probs.shape[0]:
            raise ValueError(f"no output distribution for decoder-input position {position}")
        p = np.exp(self.log_probs[position - 1, N_SPECIALS:])
        total = p.sum()
        if total <= 0.0:
            raise ValueError("output distribution has no mass on real tokens")
        return N_SPECIALS + int(rng.choice(p.size, p=p / total))


def scheduled_distribution(
    params: ModelParams, src_tokens: np.ndarray, tgt_in_tokens: np.ndarray
) -> ScheduledReplacement:
    """One gradient-free teacher-forced pass; its first decoding result only."""
    log_probs = forward(params, src_tokens, tgt_in_tokens)
    return ScheduledReplacement(log_probs.data)


@dataclass(frozen=True)
class ReplacementContext:
    """Where a replacement draw happens: which side, which sequence position."""

    side: str
    position: int


def sample_replacement(dist, clean_token: int, context: ReplacementContext, rng) -> int:
    """Draw a replacement token for one position; never returns PAD/BOS/EOS."""
    if clean_token < N_SPECIALS:
        raise ValueError(f"cannot replace control token id {clean_token}")
    if isinstance(dist, ScheduledReplacement) and context.side == "src":
        raise ValueError(SCHEDULED_ENCODER_ERROR)
    return dist.sample(rng, clean_token, context.position)


def replace_tokens(
    seq: np.ndarray, dist, alpha: float, rng: np.random.Generator, side: str = "src"
) -> tuple[np.ndarray, int]:
    """Keep each real token with probability alpha, else resample it from dist.

    Decisions are independent Bernoulli draws per position.  The replaced
    count tallies positions whose coin fired, even if the fresh sample
    happens to equal the original token.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    seq = np.asarray(seq, dtype=np.int64)
    out = seq.copy()
    real = np.flatnonzero(seq >= N_SPECIALS)
    if real.size == 0:
        return out, 0
    coins = rng.random(real.size)
    fired = real[coins >= alpha]
    if fired.size == 0:
        return out, 0
    if isinstance(dist, UniformReplacement):
        # bulk draws are distributed identically to per-position draws
        out[fired] = rng.integers(N_SPECIALS, dist.vocab_size, size=fired.size)
        return out, int(fired.size)
    for pos in fired:
        ctx = ReplacementContext(side=side, position=int(pos))
        out[pos] = sample_replacement(dist, int(seq[pos]), ctx, rng)
    return out, int(fired.size)


def word_dropout_mask(
    seq_len: int, beta: float, protected_positions, rng: np.random.Generator
) -> np.ndarray:
    """Per-position keep mask: 1 with probability beta, protected positions always 1."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    mask = (rng.random(seq_len) < beta).astype(np.float64)
    for pos in protected_positions:
        mask[pos] = 1.0
    return mask


def adversarial_offsets(embedding_grads: np.ndarray, epsilon: float) -> np.ndarray:
    """Each gradient row rescaled to Euclidean norm epsilon; zero rows stay zero."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    g = np.asarray(embedding_grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"gradients must be (positions, d), got shape {g.shape}")
    norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
    return np.where(norms > 0.0, epsilon * g / np.where(norms > 0.0, norms, 1.0), 0.0)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def _check_position(position: str) -> None:
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}, got {position!r}")


@dataclass(frozen=True)
class ReplacementSpec:
    kind: str
    position: str = "both"
    schedule: DecaySchedule = DecaySchedule()

    def __post_init__(self):
        if self.kind not in REPLACEMENT_KINDS:
            raise ValueError(
                f"replacement kind must be one of {REPLACEMENT_KINDS}, got {self.kind!r}"
            )
        _check_position(self.position)
        if self.kind == "scheduled" and self.position != "dec":
            raise ValueError(SCHEDULED_ENCODER_ERROR)


@dataclass(frozen=True)
class WordDropoutSpec:
    beta: float = DEFAULT_BETA
    position: str = "both"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        _check_position(self.position)


@dataclass(frozen=True)
class AdversarialSpec:
    epsilon: float = DEFAULT_EPSILON
    lam: float = DEFAULT_LAMBDA
    position: str = "both"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        _check_position(self.position)


@dataclass(frozen=True)
class PerturbationStrategy:
    """Which perturbations apply and where; all components absent = baseline."""

    replacement: ReplacementSpec | None = None
    word_dropout: WordDropoutSpec | None = None
    adversarial: AdversarialSpec | None = None

    @property
    def is_baseline(self) -> bool:
        return self.replacement is None and self.word_dropout is None and self.adversarial is None

    def label(self) -> str:
        if self.is_baseline:
            return "none"
        parts = []
        if self.replacement is not None:
            short = {"uniform": "rep_uni", "similarity": "rep_sim", "scheduled": "rep_ss"}
            parts.append(f"{short[self.replacement.kind]}@{self.replacement.position}")
        if self.word_dropout is not None:
            parts.append(f"wdrop@{self.word_dropout.position}")
        if self.adversarial is not None:
            parts.append(f"adv@{self.adversarial.position}")
        return "+".join(parts)

    def positions(self) -> str:
        if self.is_baseline:
            return "-"
        pos = []
        for comp in (self.replacement, self.word_dropout, self.adversarial):
            if comp is not None and comp.position not in pos:
                pos.append(comp.position)
        return "/".join(pos)


_NAME_KINDS = {"rep_uni": "uniform", "rep_sim": "similarity", "rep_ss": "scheduled"}


def strategy_from_name(name: str) -> PerturbationStrategy:
    """Build a standard strategy from a compact name.

    Grammar: ``none`` or ``part(+part)*`` where each part is one of
    rep_uni / rep_sim / rep_ss / wdrop / adv, optionally suffixed with
    ``@enc``, ``@dec``, or ``@both``.  Defaults: both sides, except rep_ss
    which is decoder-only.
    """
    name = name.strip()
    if name == "none":
        return PerturbationStrategy()
    replacement = word_dropout = adversarial = None
    for part in name.split("+"):
        part = part.strip()
        base, _, pos = part.partition("@")
        if base in _NAME_KINDS:
            if replacement is not None:
                raise ValueError(f"strategy {name!r} lists more than one replacement kind")
            position = pos or ("dec" if base == "rep_ss" else "both")
            replacement = ReplacementSpec(kind=_NAME_KINDS[base], position=position)
        elif base == "wdrop":
            if word_dropout is not None:
                raise ValueError(f"strategy {name!r} lists word dropout twice")
            word_dropout = WordDropoutSpec(position=pos or "both")
        elif base == "adv":
            if adversarial is not None:
                raise ValueError(f"strategy {name!r} lists adversarial twice")
            adversarial = AdversarialSpec(position=pos or "both")
        else:
            raise ValueError(
                f"unknown strategy component {base!r}; expected one of "
                "none, rep_uni, rep_sim, rep_ss, wdrop, adv"
            )
    return PerturbationStrategy(replacement, word_dropout, adversarial)


# ---------------------------------------------------------------------------
# Batch-level application
# ---------------------------------------------------------------------------


@dataclass
class AdvCache:
    """Byproducts of the offset-defining clean pass, reused by the training step.

    The clean forward+backward that defines the adversarial direction also
    yields the clean NLL, its parameter gradients, and the detached clean
    output distributions, so a step costs exactly two forwards and two
    backwards rather than three forwards.
    """

    clean_log_probs: list[np.ndarray]
    nll_clean: float
    param_grads: dict[str, np.ndarray]
    token_count: int


@dataclass
class PerturbedBatch:
    """A clean batch after strategy application; shapes match the clean batch."""

    src: np.ndarray
    tgt_in: np.ndarray
    src_dropout: np.ndarray | None
    tgt_dropout: np.ndarray | None
    src_offsets: np.ndarray | None
    tgt_offsets: np.ndarray | None
    replaced_src: int
    replaced_tgt: int
    adv_cache: AdvCache | None = None

    def injection(self, side: str, row: int, length: int) -> EmbeddingInjection | None:
        drop = self.src_dropout if side == "src" else self.tgt_dropout
        offs = self.src_offsets if side == "src" else self.tgt_offsets
        if drop is None and offs is None:
            return None
        return EmbeddingInjection(
            dropout_mask=None if drop is None else drop[row, :length],
            additive_offsets=None if offs is None else offs[row, :length],
        )


def _make_distribution(kind: str, side: str, params: ModelParams | None):
    if params is None:
        raise ValueError(f"replacement kind {kind!r} needs model state")
    if kind == "uniform":
        vocab = params.config.vocab_size_src if side == "src" else params.config.vocab_size_tgt
        return UniformReplacement(vocab)
    if kind == "similarity":
        return SimilarityReplacement(params.tensors["src_embed" if side == "src" else "tgt_embed"])
    raise ValueError(SCHEDULED_ENCODER_ERROR if side == "src" else f"bad kind {kind!r}")


def apply_strategy(
    strategy: PerturbationStrategy,
    batch: Batch,
    params: ModelParams | None,
    step: int,
    rng: np.random.Generator,
) -> PerturbedBatch:
    """Apply replacement, then word dropout, then adversarial offsets.

    Replacement uses the decayed keep-probability for the given step; the
    adversarial component runs the offset-defining clean forward+backward
    here and caches its byproducts for the training step.
    """
    src = batch.src.copy()
    tgt_in = batch.tgt_in.copy()
    replaced_src = replaced_tgt = 0

    rep = strategy.replacement
    if rep is not None:
        alpha = decay_alpha(rep.schedule, step)
        if rep.position in ("enc", "both"):
            dist = _make_distribution(rep.kind, "src", params)
            for r in range(batch.size):
                n = int(batch.src_lens[r])
                src[r, :n], cnt = replace_tokens(src[r, :n], dist, alpha, rng, side="src")
                replaced_src += cnt
        if rep.position in ("dec", "both"):
            for r in range(batch.size):
                n = int(batch.tgt_lens[r])
                if rep.kind == "scheduled":
                    if params is None:
                        raise ValueError("scheduled replacement needs model state")
                    dist = scheduled_distribution(
                        params, batch.src[r, : int(batch.src_lens[r])], batch.tgt_in[r, :n]
                    )
                else:
                    dist = _make_distribution(rep.kind, "tgt", params)
                tgt_in[r, :n], cnt = replace_tokens(tgt_in[r, :n], dist, alpha, rng, side="tgt")
                replaced_tgt += cnt

    src_dropout = tgt_dropout = None
    wd = strategy.word_dropout
    if wd is not None:
        if wd.position in ("enc", "both"):
            src_dropout = np.ones(batch.src.shape)
            for r in range(batch.size):
                n = int(batch.src_lens[r])
                protected = np.flatnonzero(src[r, :n] < N_SPECIALS)
                src_dropout[r, :n] = word_dropout_mask(n, wd.beta, protected, rng)
        if wd.position in ("dec", "both"):
            tgt_dropout = np.ones(batch.tgt_in.shape)
            for r in range(batch.size):
                n = int(batch.tgt_lens[r])
                protected = np.flatnonzero(tgt_in[r, :n] < N_SPECIALS)
                tgt_dropout[r, :n] = word_dropout_mask(n, wd.beta, protected, rng)

    pb = PerturbedBatch(
        src=src,
        tgt_in=tgt_in,
        src_dropout=src_dropout,
        tgt_dropout=tgt_dropout,
        src_offsets=None,
        tgt_offsets=None,
        replaced_src=replaced_src,
        replaced_tgt=replaced_tgt,
    )

    adv = strategy.adversarial
    if adv is not None:
        if params is None:
            raise ValueError("adversarial perturbation needs model state")
        _attach_adversarial(pb, batch, params, adv)
    return pb


def _attach_adversarial(
    pb: PerturbedBatch, batch: Batch, params: ModelParams, adv: AdversarialSpec
) -> None:
    """Offset-defining pass: forward and backward on the offset-free inputs."""
    from .train import nll_loss

    d = params.config.d_model
    tape = Tape()
    taped = watch_params(tape, params)
    n_tok = int(batch.tgt_mask.sum())
    total = None
    traces = []
    clean_lps = []
    for r in range(batch.size):
        sl = int(batch.src_lens[r])
        tl = int(batch.tgt_lens[r])
        lp, trace = forward_with_trace(
            params,
            pb.src[r, :sl],
            pb.tgt_in[r, :tl],
            pb.injection("src", r, sl),
            pb.injection("tgt", r, tl),
            tape=tape,
            taped=taped,
        )
        loss_r = nll_loss(lp, batch.tgt_out[r, :tl], normalizer=n_tok)
        total = loss_r if total is None else add(total, loss_r)
        traces.append(trace)
        clean_lps.append(lp.data.copy())
    grad_map = backward(tape, total)

    if adv.position in ("enc", "both"):
        pb.src_offsets = np.zeros(batch.src.shape + (d,))
    if adv.position in ("dec", "both"):
        pb.tgt_offsets = np.zeros(batch.tgt_in.shape + (d,))
    for r in range(batch.size):
        if pb.src_offsets is not None:
            sl = int(batch.src_lens[r])
            g = grad_map.wrt(traces[r]["src"])
            off = adversarial_offsets(g, adv.epsilon)
            off[pb.src[r, :sl] < N_SPECIALS] = 0.0
            pb.src_offsets[r, :sl] = off
        if pb.tgt_offsets is not None:
            tl = int(batch.tgt_lens[r])
            g = grad_map.wrt(traces[r]["tgt"])
            off = adversarial_offsets(g, adv.epsilon)
            off[pb.tgt_in[r, :tl] < N_SPECIALS] = 0.0
            pb.tgt_offsets[r, :tl] = off
    pb.adv_cache = AdvCache(
        clean_log_probs=clean_lps,
        nll_clean=float(total.data),
        param_grads={name: grad_map.wrt(t) for name, t in taped.items()},
        token_count=n_tok,
    )
