"""Vocabularies, synthetic tasks, batching, and evaluation-time corruption.

Token id conventions used everywhere: 0 = PAD, 1 = BOS, 2 = EOS, real
tokens start at id 3.  ``vocab_size`` always counts the three specials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIALS = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

TASK_KINDS = ("copy", "reverse", "sort")


class Vocabulary:
    """Bijective token-string <-> id mapping with reserved special ids."""

    def __init__(self, tokens: list[str]):
        full = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN] + list(tokens)
        if len(set(full)) != len(full):
            dupes = sorted({t for t in full if full.count(t) > 1})
            raise ValueError(f"duplicate tokens in vocabulary: {dupes}")
        if len(full) < 4:
            raise ValueError("vocabulary needs at least one real token")
        self._tokens = full
        self._ids = {t: i for i, t in enumerate(full)}

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        """Vocabulary of ``vocab_size`` ids total; real token i is the string str(i)."""
        if vocab_size < 4:
            raise ValueError("vocab_size must be at least 4 (3 specials + 1 real token)")
        return cls([str(i) for i in range(N_SPECIALS, vocab_size)])

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def real_ids(self) -> range:
        return range(N_SPECIALS, len(self._tokens))

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self._tokens[int(i)] for i in ids]


@dataclass
class Dataset:
    """Pairs of (source ids, target ids); regenerable from (kind, size, seed)."""

    pairs: list[tuple[np.ndarray, np.ndarray]]
    kind: str
    seed: int
    vocab_size: int

    def __len__(self) -> int:
        return len(self.pairs)


def generate_task(
    kind: str,
    n_pairs: int,
    vocab_size: int,
    len_range: tuple[int, int],
    seed: int,
) -> Dataset:
    """Synthetic seq2seq pairs: copy, reverse, or ascending sort of the source."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    lo, hi = int(len_range[0]), int(len_range[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range [{lo}, {hi}]")
    if vocab_size < 4:
        raise ValueError("vocab_size must be at least 4")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(lo, hi + 1))
        src = rng.integers(N_SPECIALS, vocab_size, size=length, dtype=np.int64)
        if kind == "copy":
            tgt = src.copy()
        elif kind == "reverse":
            tgt = src[::-1].copy()
        else:
            tgt = np.sort(src)
        pairs.append((src, tgt))
    return Dataset(pairs=pairs, kind=kind, seed=int(seed), vocab_size=int(vocab_size))


@dataclass
class Batch:
    """Right-padded id matrices with BOS/EOS attached and real-token masks.

    ``tgt_in[r, j]`` is the decoder input whose prediction target is
    ``tgt_out[r, j]``; masks hold 1.0 exactly at real (non-PAD) entries.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    src_lens: np.ndarray = field(repr=False, default=None)
    tgt_lens: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    def real_token_count(self) -> int:
        """Source + target real tokens, the unit of throughput accounting."""
        return int(self.src_mask.sum() + self.tgt_mask.sum())


def _pad_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return out, mask


def make_batch(pairs: list[tuple[np.ndarray, np.ndarray]]) -> Batch:
    src_rows = [src for src, _ in pairs]
    tgt_in_rows = [np.concatenate(([BOS_ID], tgt)) for _, tgt in pairs]
    tgt_out_rows = [np.concatenate((tgt, [EOS_ID])) for _, tgt in pairs]
    src, src_mask = _pad_rows(src_rows)
    tgt_in, _ = _pad_rows(tgt_in_rows)
    tgt_out, tgt_mask = _pad_rows(tgt_out_rows)
    return Batch(
        src=src,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        src_mask=src_mask,
        tgt_mask=tgt_mask,
        src_lens=np.array([len(r) for r in src_rows], dtype=np.int64),
        tgt_lens=np.array([len(r) for r in tgt_in_rows], dtype=np.int64),
    )


def make_batches(
    dataset: Dataset, batch_size: int, shuffle_rng: np.random.Generator | None
) -> list[Batch]:
    """Shuffle (when a generator is given), group, pad; the short tail batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(dataset.pairs))
    if shuffle_rng is not None:
        shuffle_rng.shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [dataset.pairs[i] for i in order[start : start + batch_size]]
        batches.append(make_batch(chunk))
    return batches


def corrupt_source(
    seq: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    vocab_size: int,
    mode: str = "independent",
) -> np.ndarray:
    """Replace real tokens with uniform draws for robustness evaluation.

    ``independent`` replaces each real position with probability ``ratio``;
    ``fixed_count`` replaces exactly ceil(ratio * n_real) positions chosen
    without replacement.  PAD/BOS/EOS positions are never touched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if mode not in ("independent", "fixed_count"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    seq = np.asarray(seq, dtype=np.int64)
    out = seq.copy()
    if ratio == 0.0:
        return out
    real = np.flatnonzero(seq >= N_SPECIALS)
    if real.size == 0:
        return out
    if mode == "independent":
        hit = real[rng.random(real.size) < ratio]
    else:
        n_hit = min(real.size, int(np.ceil(ratio * real.size)))
        hit = rng.choice(real, size=n_hit, replace=False)
    for pos in hit:
        out[pos] = int(rng.integers(N_SPECIALS, vocab_size))
    return out


def load_tsv(path, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Dataset:
    """One pair per line: source and target token strings separated by one tab."""
    pairs = []
    unknown: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected exactly one tab separator")
            src_toks, tgt_toks = parts[0].split(), parts[1].split()
            if not src_toks or not tgt_toks:
                raise ValueError(f"{path}:{lineno}: empty source or target sequence")
            for vocab, toks in ((src_vocab, src_toks), (tgt_vocab, tgt_toks)):
                unknown.update(t for t in toks if t not in vocab._ids)
            if unknown:
                continue
            pairs.append((src_vocab.encode(src_toks), tgt_vocab.encode(tgt_toks)))
    if unknown:
        raise ValueError(f"tokens not in vocabulary: {sorted(unknown)}")
    return Dataset(pairs=pairs, kind="tsv", seed=0, vocab_size=len(src_vocab))
