"""Minimal pre-norm transformer encoder-decoder over the autodiff engine.

One forward pass handles one sequence pair; training loops over batch rows
on a shared tape so parameter gradients accumulate.  Embedding injections
(word-dropout masks and additive offsets) are applied to the word-embedding
rows before the positional encoding is added, so a dropped word keeps its
position signal and offsets target the word vector itself.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    embedding_lookup,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    relu,
    scale,
    slice_axis,
    softmax,
    transpose,
)
from .data import BOS_ID, EOS_ID, N_SPECIALS, PAD_ID

MASK_VALUE = -1e9

CHECKPOINT_MAGIC = b"PTLBCKP1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size_src: int
    vocab_size_tgt: int
    d_model: int = 64
    n_heads: int = 2
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ffn: int = 128
    max_len: int = 32

    def __post_init__(self):
        for name in ("vocab_size_src", "vocab_size_tgt", "d_model", "n_heads",
                     "n_layers_enc", "n_layers_dec", "d_ffn", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.vocab_size_src < N_SPECIALS + 1 or self.vocab_size_tgt < N_SPECIALS + 1:
            raise ValueError("vocab sizes must cover the specials plus one real token")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size_src": self.vocab_size_src,
            "vocab_size_tgt": self.vocab_size_tgt,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers_enc": self.n_layers_enc,
            "n_layers_dec": self.n_layers_dec,
            "d_ffn": self.d_ffn,
            "max_len": self.max_len,
        }


@dataclass
class ModelParams:
    """All learnable weights, addressable by name, plus their config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class EmbeddingInjection:
    """Optional per-position word-dropout mask (0/1) and additive offset rows."""

    dropout_mask: np.ndarray | None = None
    additive_offsets: np.ndarray | None = None


def _layer_names(config: ModelConfig) -> list[tuple[str, tuple[int, int] | tuple[int]]]:
    d, f = config.d_model, config.d_ffn
    names: list[tuple[str, tuple]] = [
        ("src_embed", (config.vocab_size_src, d)),
        ("tgt_embed", (config.vocab_size_tgt, d)),
    ]

    def norm(prefix):
        names.append((f"{prefix}.gain", (d,)))
        names.append((f"{prefix}.bias", (d,)))

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            names.append((f"{prefix}.{w}", (d, d)))

    for i in range(config.n_layers_enc):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        names.append((f"enc{i}.ffn.w1", (d, f)))
        names.append((f"enc{i}.ffn.w2", (f, d)))
    for i in range(config.n_layers_dec):
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        names.append((f"dec{i}.ffn.w1", (d, f)))
        names.append((f"dec{i}.ffn.w2", (f, d)))
    norm("enc_norm")
    norm("dec_norm")
    names.append(("out_proj", (d, config.vocab_size_tgt)))
    return names


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; must match what init_params allocates."""
    d, f = config.d_model, config.d_ffn
    embeddings = d * (config.vocab_size_src + config.vocab_size_tgt)
    enc_layer = 4 * d * d + 2 * d * f + 4 * d
    dec_layer = 8 * d * d + 2 * d * f + 6 * d
    final_norms = 4 * d
    out = d * config.vocab_size_tgt
    return (
        embeddings
        + config.n_layers_enc * enc_layer
        + config.n_layers_dec * dec_layer
        + final_norms
        + out
    )


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Xavier-uniform projections, scaled-normal embeddings, identity layer norms."""
    d = config.d_model
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _layer_names(config):
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name.endswith("_embed"):
            tensors[name] = rng.normal(0.0, d**-0.5, size=shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config=config, tensors=tensors)


@lru_cache(maxsize=8)
def _positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def watch_params(tape: Tape, params: ModelParams) -> dict[str, Tensor]:
    """Register every parameter as a leaf; share the result across one step."""
    return {name: tape.watch(arr) for name, arr in params.tensors.items()}


def _as_taped(params: ModelParams, tape: Tape | None, taped: dict | None) -> dict:
    if taped is not None:
        return taped
    if tape is not None:
        return watch_params(tape, params)
    return {name: Tensor(arr) for name, arr in params.tensors.items()}


def embed(
    params: ModelParams,
    tokens: np.ndarray,
    side: str,
    injection: EmbeddingInjection | None = None,
    tape: Tape | None = None,
    taped: dict | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Word embeddings with injections applied, then positional encoding.

    Row i is ``mask_i * e(token_i) + offset_i + pos_i``.  When ``trace`` is
    given, the pre-positional word-embedding tensor is stored under
    ``trace[side]`` so its tape gradient (the per-position input-embedding
    gradient) can be read back after a backward pass.
    """
    if side not in ("src", "tgt"):
        raise ValueError(f"side must be 'src' or 'tgt', got {side!r}")
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab = params.config.vocab_size_src if side == "src" else params.config.vocab_size_tgt
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"{side} token id out of range [0, {vocab})")
    n = tokens.shape[0]
    d = params.config.d_model
    taped = _as_taped(params, tape, taped)
    x = embedding_lookup(taped["src_embed" if side == "src" else "tgt_embed"], tokens)
    if injection is not None and injection.dropout_mask is not None:
        m = np.asarray(injection.dropout_mask, dtype=np.float64)
        if m.shape != (n,):
            raise ValueError(f"dropout mask shape {m.shape} does not match length {n}")
        x = mul(x, Tensor(np.repeat(m[:, None], d, axis=1)))
    if injection is not None and injection.additive_offsets is not None:
        r = np.asarray(injection.additive_offsets, dtype=np.float64)
        if r.shape != (n, d):
            raise ValueError(f"offsets shape {r.shape} does not match ({n}, {d})")
        x = add(x, Tensor(r))
    if trace is not None:
        trace[side] = x
    pe = _positional_encoding(params.config.max_len, d)[:n]
    return add(x, Tensor(pe))


def _mha(x, kv, mask_rows, prefix, taped, n_heads):
    d = x.shape[1]
    dh = d // n_heads
    q = matmul(x, taped[f"{prefix}.wq"])
    k = matmul(kv, taped[f"{prefix}.wk"])
    v = matmul(kv, taped[f"{prefix}.wv"])
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_axis(q, 1, lo, hi)
        kh = slice_axis(k, 1, lo, hi)
        vh = slice_axis(v, 1, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), dh**-0.5)
        if mask_rows is not None:
            scores = add(scores, Tensor(mask_rows))
        heads.append(matmul(softmax(scores), vh))
    merged = heads[0] if n_heads == 1 else concat(heads, axis=1)
    return matmul(merged, taped[f"{prefix}.wo"])


def _ffn(x, prefix, taped):
    return matmul(relu(matmul(x, taped[f"{prefix}.w1"])), taped[f"{prefix}.w2"])


def _ln(x, prefix, taped):
    return layer_norm(x, taped[f"{prefix}.gain"], taped[f"{prefix}.bias"])


def _key_pad_mask(n_q: int, n_k: int, k_len: int) -> np.ndarray | None:
    if k_len >= n_k:
        return None
    mask = np.zeros((n_q, n_k))
    mask[:, k_len:] = MASK_VALUE
    return mask


def forward_with_trace(
    params: ModelParams,
    src_tokens: np.ndarray,
    tgt_in_tokens: np.ndarray,
    src_injection: EmbeddingInjection | None = None,
    tgt_injection: EmbeddingInjection | None = None,
    src_len: int | None = None,
    tgt_len: int | None = None,
    tape: Tape | None = None,
    taped: dict | None = None,
) -> tuple[Tensor, dict]:
    """Log-probabilities (tgt_len, vocab_tgt) plus the embedding trace.

    Row j of the output is the log distribution over the token following
    decoder prefix positions 0..j.  ``src_len`` / ``tgt_len`` mark the real
    prefix of right-padded inputs; positions beyond them are masked out of
    attention and cannot influence real rows.
    """
    src_tokens = np.asarray(src_tokens, dtype=np.int64)
    tgt_in_tokens = np.asarray(tgt_in_tokens, dtype=np.int64)
    if src_tokens.size == 0:
        raise ValueError("source sequence is empty")
    cfg = params.config
    if src_tokens.shape[0] > cfg.max_len or tgt_in_tokens.shape[0] > cfg.max_len:
        raise ValueError(
            f"sequence longer than max_len={cfg.max_len}: "
            f"src {src_tokens.shape[0]}, tgt_in {tgt_in_tokens.shape[0]}"
        )
    n_src = src_tokens.shape[0]
    n_tgt = tgt_in_tokens.shape[0]
    src_len = n_src if src_len is None else int(src_len)
    tgt_len = n_tgt if tgt_len is None else int(tgt_len)
    taped = _as_taped(params, tape, taped)
    trace: dict = {}

    x = embed(params, src_tokens, "src", src_injection, taped=taped, trace=trace)
    enc_mask = _key_pad_mask(n_src, n_src, src_len)
    for i in range(cfg.n_layers_enc):
        p = f"enc{i}"
        normed = _ln(x, f"{p}.ln1", taped)
        x = add(x, _mha(normed, normed, enc_mask, f"{p}.attn", taped, cfg.n_heads))
        x = add(x, _ffn(_ln(x, f"{p}.ln2", taped), f"{p}.ffn", taped))
    enc_out = _ln(x, "enc_norm", taped)

    causal = np.triu(np.full((n_tgt, n_tgt), MASK_VALUE), k=1)
    pad = _key_pad_mask(n_tgt, n_tgt, tgt_len)
    self_mask = causal if pad is None else causal + pad
    cross_mask = _key_pad_mask(n_tgt, n_src, src_len)

    y = embed(params, tgt_in_tokens, "tgt", tgt_injection, taped=taped, trace=trace)
    for i in range(cfg.n_layers_dec):
        p = f"dec{i}"
        normed = _ln(y, f"{p}.ln1", taped)
        y = add(y, _mha(normed, normed, self_mask, f"{p}.self", taped, cfg.n_heads))
        y = add(y, _mha(_ln(y, f"{p}.ln2", taped), enc_out, cross_mask,
                        f"{p}.cross", taped, cfg.n_heads))
        y = add(y, _ffn(_ln(y, f"{p}.ln3", taped), f"{p}.ffn", taped))
    y = _ln(y, "dec_norm", taped)
    return log_softmax(matmul(y, taped["out_proj"])), trace


def forward(
    params: ModelParams,
    src_tokens: np.ndarray,
    tgt_in_tokens: np.ndarray,
    src_injection: EmbeddingInjection | None = None,
    tgt_injection: EmbeddingInjection | None = None,
    src_len: int | None = None,
    tgt_len: int | None = None,
    tape: Tape | None = None,
    taped: dict | None = None,
) -> Tensor:
    log_probs, _ = forward_with_trace(
        params, src_tokens, tgt_in_tokens, src_injection, tgt_injection,
        src_len, tgt_len, tape, taped,
    )
    return log_probs


def greedy_decode(
    params: ModelParams, src_tokens: np.ndarray, max_len: int | None = None
) -> np.ndarray:
    """Feed the argmax token back until EOS or the length cap; no BOS/EOS in the output."""
    src_tokens = np.asarray(src_tokens, dtype=np.int64)
    cap = params.config.max_len - 1 if max_len is None else int(max_len)
    out: list[int] = []
    tgt = [BOS_ID]
    while len(out) < cap and len(tgt) < params.config.max_len:
        log_probs = forward(params, src_tokens, np.array(tgt, dtype=np.int64))
        nxt = int(np.argmax(log_probs.data[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        tgt.append(nxt)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Checkpoint format (stable, byte-deterministic):
#   magic "PTLBCKP1" | uint32 LE header length | UTF-8 JSON header
#   | concatenated float64 little-endian row-major tensor data.
# The JSON header holds the model config, an optional experiment config
# echo, and the ordered tensor index (name and shape per entry).
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, experiment_config: dict | None = None) -> None:
    names = sorted(params.tensors)
    header = {
        "model_config": params.config.to_dict(),
        "experiment_config": experiment_config,
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict | None]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["model_config"])
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor data for {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after tensor data")
    expected = {name for name, _ in _layer_names(config)}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise ValueError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    return ModelParams(config=config, tensors=tensors), header["experiment_config"]
