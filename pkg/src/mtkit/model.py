"""Word-level LSTM encoder-decoder with global attention.

Forward pass, per-token negative log-likelihood, and a fully hand-derived
backward pass over float64 numpy arrays. No autograd anywhere: every
gradient below is written out analytically and validated against central
finite differences by :func:`gradient_check`.

Layout conventions
------------------
* Vectors are 1-D float64 arrays; weight matrices act by ``W @ x``.
* LSTM gate blocks are stacked in the order input, forget, cell candidate,
  output inside the ``4H`` dimension.
* The encoder consumes the source ids followed by the end-of-sequence id;
  its final hidden/cell states per layer initialize the decoder. Attention
  runs over the hidden states of the real source positions (the appended
  end marker is excluded), so attention rows line up one-to-one with the
  source tokens that unknown-word replacement copies from.
* Inverted dropout is applied between stacked layers only, never on
  recurrent connections, and only when ``train_mode`` is set.

Teacher forcing scores ``len(target) + 1`` positions: the decoder reads
BOS + target and is scored against target + EOS.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import corpus as corpus_mod
from .corpus import BOS_ID, EOS_ID, Truecaser, Vocabulary
from .errors import (
    CheckpointError,
    DropoutActive,
    EmptyInput,
    InvalidEpsilon,
    MissingCache,
    ShapeMismatch,
)

ATTENTION_KINDS = ("concat", "general")


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    layers: int = 4
    hidden_size: int = 1000
    embed_size: int = 1000
    dropout: float = 0.3
    attention_kind: str = "concat"
    attention_dim: int | None = None  # concat score width; defaults to hidden_size
    input_feeding: bool = False
    max_train_len: int = 50

    def __post_init__(self) -> None:
        if self.layers < 1 or self.hidden_size < 1 or self.embed_size < 1:
            raise ShapeMismatch("layers, hidden_size and embed_size must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ShapeMismatch("dropout must lie in [0, 1)")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ShapeMismatch(f"unknown attention kind: {self.attention_kind}")
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ShapeMismatch("vocabularies must cover the 4 reserved ids")

    @property
    def attn_dim(self) -> int:
        return self.attention_dim if self.attention_dim is not None else self.hidden_size


@dataclass
class LSTMCellParams:
    W_x: np.ndarray  # [4H, input_dim]
    W_h: np.ndarray  # [4H, H]
    b: np.ndarray  # [4H]


@dataclass
class AttentionParams:
    kind: str
    W_a: np.ndarray  # concat: [A, 2H]; general: [H, H]
    v_a: np.ndarray | None  # concat only: [A]
    W_c: np.ndarray  # [H, 2H] combination layer


@dataclass
class ModelParams:
    src_embed: np.ndarray  # [V_src, E]
    tgt_embed: np.ndarray  # [V_tgt, E]
    encoder: list[LSTMCellParams]
    decoder: list[LSTMCellParams]
    attention: AttentionParams
    W_out: np.ndarray  # [V_tgt, H]
    b_out: np.ndarray  # [V_tgt]

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "src_embed", self.src_embed
        yield "tgt_embed", self.tgt_embed
        for prefix, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for l, cell in enumerate(stack):
                yield f"{prefix}.{l}.W_x", cell.W_x
                yield f"{prefix}.{l}.W_h", cell.W_h
                yield f"{prefix}.{l}.b", cell.b
        yield "attention.W_a", self.attention.W_a
        if self.attention.v_a is not None:
            yield "attention.v_a", self.attention.v_a
        yield "attention.W_c", self.attention.W_c
        yield "out.W", self.W_out
        yield "out.b", self.b_out

    def tensor(self, name: str) -> np.ndarray:
        for n, t in self.named_tensors():
            if n == name:
                return t
        raise KeyError(name)


# Gradients share the exact tree shape of the parameters.
Gradients = ModelParams


def _decoder_input_dim(cfg: ModelConfig) -> int:
    return cfg.embed_size + (cfg.hidden_size if cfg.input_feeding else 0)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform [-0.1, 0.1] everywhere except the forget-gate bias, set to +1."""
    rng = np.random.default_rng(seed)
    H, E = cfg.hidden_size, cfg.embed_size

    def u(*shape: int) -> np.ndarray:
        return rng.uniform(-0.1, 0.1, size=shape)

    def cell(input_dim: int) -> LSTMCellParams:
        b = u(4 * H)
        b[H : 2 * H] = 1.0
        return LSTMCellParams(u(4 * H, input_dim), u(4 * H, H), b)

    encoder = [cell(E if l == 0 else H) for l in range(cfg.layers)]
    decoder = [cell(_decoder_input_dim(cfg) if l == 0 else H) for l in range(cfg.layers)]
    if cfg.attention_kind == "concat":
        attn = AttentionParams("concat", u(cfg.attn_dim, 2 * H), u(cfg.attn_dim), u(H, 2 * H))
    else:
        attn = AttentionParams("general", u(H, H), None, u(H, 2 * H))
    return ModelParams(
        src_embed=u(cfg.src_vocab, E),
        tgt_embed=u(cfg.tgt_vocab, E),
        encoder=encoder,
        decoder=decoder,
        attention=attn,
        W_out=u(cfg.tgt_vocab, H),
        b_out=u(cfg.tgt_vocab),
    )


def zeros_like_params(p: ModelParams) -> Gradients:
    return ModelParams(
        src_embed=np.zeros_like(p.src_embed),
        tgt_embed=np.zeros_like(p.tgt_embed),
        encoder=[
            LSTMCellParams(np.zeros_like(c.W_x), np.zeros_like(c.W_h), np.zeros_like(c.b))
            for c in p.encoder
        ],
        decoder=[
            LSTMCellParams(np.zeros_like(c.W_x), np.zeros_like(c.W_h), np.zeros_like(c.b))
            for c in p.decoder
        ],
        attention=AttentionParams(
            p.attention.kind,
            np.zeros_like(p.attention.W_a),
            None if p.attention.v_a is None else np.zeros_like(p.attention.v_a),
            np.zeros_like(p.attention.W_c),
        ),
        W_out=np.zeros_like(p.W_out),
        b_out=np.zeros_like(p.b_out),
    )


def clone_params(p: ModelParams) -> ModelParams:
    out = zeros_like_params(p)
    for (_, src), (_, dst) in zip(p.named_tensors(), out.named_tensors()):
        dst[...] = src
    return out


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total for a configuration."""
    H, E = cfg.hidden_size, cfg.embed_size

    def cell(input_dim: int) -> int:
        return 4 * H * input_dim + 4 * H * H + 4 * H

    total = (cfg.src_vocab + cfg.tgt_vocab) * E
    total += cell(E) + (cfg.layers - 1) * cell(H)
    total += cell(_decoder_input_dim(cfg)) + (cfg.layers - 1) * cell(H)
    if cfg.attention_kind == "concat":
        total += cfg.attn_dim * 2 * H + cfg.attn_dim
    else:
        total += H * H
    total += H * 2 * H  # combination layer
    total += cfg.tgt_vocab * H + cfg.tgt_vocab
    return total


def count_params(p: ModelParams) -> int:
    return sum(t.size for _, t in p.named_tensors())


# ---------------------------------------------------------------------------
# numerics


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def _dropout_mask(rng: np.random.Generator, p_drop: float, size: int) -> np.ndarray:
    keep = 1.0 - p_drop
    return (rng.random(size) < keep).astype(np.float64) / keep


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def _cell_forward(
    x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, p: LSTMCellParams
) -> tuple[np.ndarray, np.ndarray, CellCache]:
    H = h_prev.shape[0]
    z = p.W_x @ x + p.W_h @ h_prev + p.b
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = _sigmoid(z[3 * H :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, CellCache(x, h_prev, c_prev, i, f, g, o, c, tanh_c)


def _cell_backward(
    dh: np.ndarray,
    dc: np.ndarray,
    cc: CellCache,
    p: LSTMCellParams,
    grads: LSTMCellParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_input, d_h_prev, d_c_prev) and accumulates weight grads."""
    do = dh * cc.tanh_c
    dc_total = dc + dh * cc.o * (1.0 - cc.tanh_c**2)
    di = dc_total * cc.g
    df = dc_total * cc.c_prev
    dg = dc_total * cc.i
    dc_prev = dc_total * cc.f
    dz = np.concatenate(
        [
            di * cc.i * (1.0 - cc.i),
            df * cc.f * (1.0 - cc.f),
            dg * (1.0 - cc.g**2),
            do * cc.o * (1.0 - cc.o),
        ]
    )
    grads.W_x += np.outer(dz, cc.x)
    grads.W_h += np.outer(dz, cc.h_prev)
    grads.b += dz
    return p.W_x.T @ dz, p.W_h.T @ dz, dc_prev


def lstm_cell_forward(
    x: np.ndarray, h: np.ndarray, c: np.ndarray, p: LSTMCellParams
) -> tuple[np.ndarray, np.ndarray, CellCache]:
    """One LSTM step: gates sigma/sigma/tanh/sigma on W_x x + W_h h + b."""
    fourH, in_dim = p.W_x.shape
    H = p.W_h.shape[1]
    if fourH != 4 * H or p.W_h.shape[0] != 4 * H or p.b.shape != (4 * H,):
        raise ShapeMismatch("inconsistent cell parameter shapes")
    if x.shape != (in_dim,) or h.shape != (H,) or c.shape != (H,):
        raise ShapeMismatch(
            f"cell inputs {x.shape}/{h.shape}/{c.shape} do not fit parameters "
            f"expecting ({in_dim},)/({H},)/({H},)"
        )
    h2, c2, cache = _cell_forward(x, h, c, p)
    return h2, c2, cache


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttnCache:
    h_t: np.ndarray
    src_states: np.ndarray  # [S, H]
    weights: np.ndarray  # [S]
    context: np.ndarray
    comb: np.ndarray  # [2H] = concat(context, h_t)
    h_tilde: np.ndarray
    act: np.ndarray | None  # concat: tanh(U) [S, A]
    proj: np.ndarray | None  # general: src_states @ W_a.T [S, H]


def _attention_forward(
    h_t: np.ndarray, src_states: np.ndarray, ap: AttentionParams
) -> AttnCache:
    H = h_t.shape[0]
    if ap.kind == "concat":
        # score_s = v_a . tanh(W_a [h_t; h_s])
        U = src_states @ ap.W_a[:, H:].T + (ap.W_a[:, :H] @ h_t)
        act = np.tanh(U)
        scores = act @ ap.v_a
        proj = None
    else:
        # score_s = h_t . (W_a h_s)
        proj = src_states @ ap.W_a.T
        scores = proj @ h_t
        act = None
    weights = softmax(scores)
    context = weights @ src_states
    comb = np.concatenate([context, h_t])
    h_tilde = np.tanh(ap.W_c @ comb)
    return AttnCache(h_t, src_states, weights, context, comb, h_tilde, act, proj)


def _attention_backward(
    d_htilde: np.ndarray, ac: AttnCache, ap: AttentionParams, grads: AttentionParams
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (d_h_t, d_src_states) and accumulates attention grads."""
    H = ac.h_t.shape[0]
    d_pre = d_htilde * (1.0 - ac.h_tilde**2)
    grads.W_c += np.outer(d_pre, ac.comb)
    d_comb = ap.W_c.T @ d_pre
    d_context = d_comb[:H]
    d_ht = d_comb[H:].copy()
    # context = weights @ src_states
    d_w = ac.src_states @ d_context
    d_src = np.outer(ac.weights, d_context)
    # softmax jacobian
    d_scores = ac.weights * (d_w - ac.weights @ d_w)
    if ap.kind == "concat":
        grads.v_a += ac.act.T @ d_scores
        d_act = np.outer(d_scores, ap.v_a)
        d_U = d_act * (1.0 - ac.act**2)
        d_U_sum = d_U.sum(axis=0)
        grads.W_a[:, :H] += np.outer(d_U_sum, ac.h_t)
        grads.W_a[:, H:] += d_U.T @ ac.src_states
        d_ht += ap.W_a[:, :H].T @ d_U_sum
        d_src += d_U @ ap.W_a[:, H:]
    else:
        d_ht += ac.proj.T @ d_scores
        d_proj = np.outer(d_scores, ac.h_t)
        grads.W_a += d_proj.T @ ac.src_states
        d_src += d_proj @ ap.W_a
    return d_ht, d_src


def attention_step(
    h_t: np.ndarray,
    source_states: np.ndarray,
    p: AttentionParams,
    kind: str | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, AttnCache]:
    """Alignment weights, context vector and combined state for one step."""
    if kind is not None and kind != p.kind:
        raise ShapeMismatch(f"parameters are for kind {p.kind!r}, not {kind!r}")
    if source_states.ndim != 2 or source_states.shape[0] < 1:
        raise ShapeMismatch("source_states must be a non-empty [T, H] matrix")
    if source_states.shape[1] != h_t.shape[0]:
        raise ShapeMismatch("hidden size of h_t and source states differ")
    cache = _attention_forward(h_t, source_states, p)
    return cache.weights, cache.context, cache.h_tilde, cache


# ---------------------------------------------------------------------------
# encoder


@dataclass
class StackStep:
    cells: list[CellCache]
    masks: list[np.ndarray | None]  # between layer l and l+1, length layers-1


@dataclass
class EncoderCache:
    ids: list[int]
    steps: list[StackStep]


def _run_stack(
    x: np.ndarray,
    states: list[tuple[np.ndarray, np.ndarray]],
    stack: list[LSTMCellParams],
    cfg: ModelConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], StackStep]:
    cells: list[CellCache] = []
    masks: list[np.ndarray | None] = []
    new_states = list(states)
    for l, cell in enumerate(stack):
        h, c = new_states[l]
        h2, c2, cc = _cell_forward(x, h, c, cell)
        new_states[l] = (h2, c2)
        cells.append(cc)
        x = h2
        if l < len(stack) - 1:
            if train_mode and cfg.dropout > 0.0:
                m = _dropout_mask(rng, cfg.dropout, cfg.hidden_size)
                x = x * m
                masks.append(m)
            else:
                masks.append(None)
    return new_states, StackStep(cells, masks)


def _run_encoder(
    ids: Sequence[int],
    p: ModelParams,
    cfg: ModelConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]], EncoderCache]:
    H = cfg.hidden_size
    states = [(np.zeros(H), np.zeros(H)) for _ in range(cfg.layers)]
    steps: list[StackStep] = []
    tops: list[np.ndarray] = []
    for tok in ids:
        states, step = _run_stack(p.src_embed[tok], states, p.encoder, cfg, train_mode, rng)
        steps.append(step)
        tops.append(states[-1][0])
    return np.stack(tops), states, EncoderCache(list(ids), steps)


def encoder_forward(
    ids: Sequence[int],
    p: ModelParams,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng_seed: int | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]], EncoderCache]:
    """Embed and run the stacked LSTM left to right.

    Returns the top-layer hidden states for every input position, the final
    (h, c) per layer, and the cache needed by the backward pass.
    """
    if len(ids) == 0:
        raise EmptyInput("encoder needs at least one token")
    if any(t < 0 or t >= cfg.src_vocab for t in ids):
        raise ShapeMismatch("source id out of vocabulary range")
    rng = np.random.default_rng(rng_seed) if train_mode and cfg.dropout > 0 else None
    return _run_encoder(ids, p, cfg, train_mode, rng)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    layers: list[tuple[np.ndarray, np.ndarray]]
    h_tilde: np.ndarray  # previous combined state (input feeding)


def init_decoder_state(
    finals: list[tuple[np.ndarray, np.ndarray]], cfg: ModelConfig
) -> DecoderState:
    return DecoderState([(h.copy(), c.copy()) for h, c in finals], np.zeros(cfg.hidden_size))


@dataclass
class DecoderStepCache:
    y_prev: int
    stack: StackStep
    attn: AttnCache
    probs: np.ndarray | None = None
    gold: int | None = None


def _run_decoder_step(
    y_prev: int,
    state: DecoderState,
    attn_states: np.ndarray,
    p: ModelParams,
    cfg: ModelConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, DecoderState, DecoderStepCache]:
    e = p.tgt_embed[y_prev]
    x = np.concatenate([e, state.h_tilde]) if cfg.input_feeding else e
    layer_states, step = _run_stack(x, state.layers, p.decoder, cfg, train_mode, rng)
    ac = _attention_forward(layer_states[-1][0], attn_states, p.attention)
    logits = p.W_out @ ac.h_tilde + p.b_out
    return logits, DecoderState(layer_states, ac.h_tilde), DecoderStepCache(y_prev, step, ac)


def decoder_step(
    y_prev_id: int,
    state: DecoderState,
    source_states: np.ndarray,
    p: ModelParams,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng_seed: int | None = None,
) -> tuple[np.ndarray, DecoderState, np.ndarray, DecoderStepCache]:
    """One decoding step: embed previous token, run the stack, attend, project."""
    if not (0 <= y_prev_id < cfg.tgt_vocab):
        raise ShapeMismatch("target id out of vocabulary range")
    if len(state.layers) != cfg.layers:
        raise ShapeMismatch("decoder state does not match the configured layer count")
    rng = np.random.default_rng(rng_seed) if train_mode and cfg.dropout > 0 else None
    logits, new_state, cache = _run_decoder_step(
        y_prev_id, state, source_states, p, cfg, train_mode, rng
    )
    return logits, new_state, cache.attn.weights, cache


# ---------------------------------------------------------------------------
# loss


@dataclass
class ForwardCache:
    src: list[int]  # without the appended EOS
    tgt: list[int]
    enc: EncoderCache
    attn_len: int
    steps: list[DecoderStepCache]
    input_feeding: bool


def forward_loss(
    pair: tuple[Sequence[int], Sequence[int]],
    p: ModelParams,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng_seed: int | None = None,
) -> tuple[float, int, ForwardCache]:
    """Summed NLL and scored-token count for one sentence pair.

    The source ids get EOS appended before encoding; the decoder is teacher
    forced on BOS + target and scored against target + EOS.
    """
    src, tgt = pair
    src = list(src)
    tgt = list(tgt)
    if not src:
        raise EmptyInput("source sentence is empty")
    if not tgt:
        raise EmptyInput("target sentence is empty")
    if any(t < 0 or t >= cfg.src_vocab for t in src):
        raise ShapeMismatch("source id out of vocabulary range")
    if any(t < 0 or t >= cfg.tgt_vocab for t in tgt):
        raise ShapeMismatch("target id out of vocabulary range")
    rng = np.random.default_rng(rng_seed) if train_mode and cfg.dropout > 0 else None

    src_states, finals, enc_cache = _run_encoder(src + [EOS_ID], p, cfg, train_mode, rng)
    attn_states = src_states[: len(src)]
    state = init_decoder_state(finals, cfg)

    nll = 0.0
    steps: list[DecoderStepCache] = []
    for y_prev, gold in zip([BOS_ID] + tgt, tgt + [EOS_ID]):
        logits, state, cache = _run_decoder_step(
            y_prev, state, attn_states, p, cfg, train_mode, rng
        )
        logp = log_softmax(logits)
        nll -= float(logp[gold])
        cache.probs = np.exp(logp)
        cache.gold = gold
        steps.append(cache)
    return nll, len(tgt) + 1, ForwardCache(src, tgt, enc_cache, len(src), steps, cfg.input_feeding)


# ---------------------------------------------------------------------------
# backward


def backward(
    caches: ForwardCache, p: ModelParams, cfg: ModelConfig, out: Gradients | None = None
) -> Gradients:
    """Analytic gradient of the summed NLL with respect to every parameter.

    Walks the decoder steps in reverse (output projection, combination layer,
    attention, stacked cells, embeddings, and the input-feeding edge when
    enabled), hands the decoder-initialization gradients to the encoder's
    final states, then runs encoder BPTT with the attention gradients folded
    into the top layer position by position. Accumulates into ``out`` when
    given, so batch code can sum per-sentence gradients without reallocating.
    """
    if not isinstance(caches, ForwardCache) or not caches.steps:
        raise MissingCache("backward needs the caches returned by forward_loss")
    if caches.input_feeding != cfg.input_feeding:
        raise MissingCache("caches were produced under a different input_feeding setting")
    g = out if out is not None else zeros_like_params(p)
    H, E, L = cfg.hidden_size, cfg.embed_size, cfg.layers
    S = caches.attn_len

    d_states: list[tuple[np.ndarray, np.ndarray]] = [
        (np.zeros(H), np.zeros(H)) for _ in range(L)
    ]
    d_attn_states = np.zeros((S, H))
    d_htilde_feed = np.zeros(H)

    for sc in reversed(caches.steps):
        d_logits = sc.probs.copy()
        d_logits[sc.gold] -= 1.0
        g.W_out += np.outer(d_logits, sc.attn.h_tilde)
        g.b_out += d_logits
        d_htilde = p.W_out.T @ d_logits
        if cfg.input_feeding:
            d_htilde = d_htilde + d_htilde_feed
        d_ht, d_src = _attention_backward(d_htilde, sc.attn, p.attention, g.attention)
        d_attn_states += d_src

        dh = d_ht + d_states[L - 1][0]
        dc = d_states[L - 1][1]
        dx = None
        for l in range(L - 1, -1, -1):
            dxl, dh_prev, dc_prev = _cell_backward(
                dh, dc, sc.stack.cells[l], p.decoder[l], g.decoder[l]
            )
            d_states[l] = (dh_prev, dc_prev)
            if l > 0:
                mask = sc.stack.masks[l - 1]
                dh = dxl * mask if mask is not None else dxl
                dh = dh + d_states[l - 1][0]
                dc = d_states[l - 1][1]
            else:
                dx = dxl
        if cfg.input_feeding:
            g.tgt_embed[sc.y_prev] += dx[:E]
            d_htilde_feed = dx[E:]
        else:
            g.tgt_embed[sc.y_prev] += dx

    # decoder init copied the encoder finals, so those gradients carry over
    enc_steps = caches.enc.steps
    for t in range(len(enc_steps) - 1, -1, -1):
        dh = d_states[L - 1][0]
        if t < S:
            dh = dh + d_attn_states[t]
        dc = d_states[L - 1][1]
        for l in range(L - 1, -1, -1):
            dxl, dh_prev, dc_prev = _cell_backward(
                dh, dc, enc_steps[t].cells[l], p.encoder[l], g.encoder[l]
            )
            d_states[l] = (dh_prev, dc_prev)
            if l > 0:
                mask = enc_steps[t].masks[l - 1]
                dh = dxl * mask if mask is not None else dxl
                dh = dh + d_states[l - 1][0]
                dc = d_states[l - 1][1]
            else:
                g.src_embed[caches.enc.ids[t]] += dxl
    return g


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(
    p: ModelParams,
    cfg: ModelConfig,
    pair: tuple[Sequence[int], Sequence[int]],
    epsilon: float = 1e-5,
    total_coords: int = 240,
    sample_seed: int = 12345,
    mutate: str | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples a deterministic set of coordinates spanning every parameter
    tensor (at least one per tensor, ``total_coords`` overall). ``mutate``
    names a tensor whose analytic gradient is zeroed first; a correct
    backward pass must then fail the check, which makes the check itself
    testable.
    """
    if cfg.dropout > 0.0:
        raise DropoutActive("gradient_check requires dropout 0 for a deterministic loss")
    if not np.isfinite(epsilon) or epsilon <= 0.0:
        raise InvalidEpsilon(f"epsilon must be positive and finite, got {epsilon}")

    _, _, caches = forward_loss(pair, p, cfg)
    analytic = backward(caches, p, cfg)
    if mutate is not None:
        analytic.tensor(mutate)[...] = 0.0

    names = [name for name, _ in p.named_tensors()]
    per_tensor = max(1, total_coords // len(names))
    rng = np.random.default_rng(sample_seed)
    worst = 0.0
    for name in names:
        tensor = p.tensor(name)
        grad = analytic.tensor(name).reshape(-1)
        flat = tensor.reshape(-1)
        k = min(per_tensor, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + epsilon
            lo_hi, _, _ = forward_loss(pair, p, cfg)
            flat[j] = orig - epsilon
            lo_lo, _, _ = forward_loss(pair, p, cfg)
            flat[j] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * epsilon)
            err = abs(grad[j] - numeric) / max(abs(grad[j]), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (all integers little-endian):
#   magic            8 bytes  b"MTKCHKP1"
#   version          uint32
#   config block     uint32 length + UTF-8 "key = value" lines
#   source vocab     uint32 length + UTF-8 vocabulary file text (0 = absent)
#   target vocab     uint32 length + UTF-8 vocabulary file text (0 = absent)
#   truecase table   uint32 length + UTF-8 TSV (0 = absent)
#   tensor count     uint32
#   per tensor:      uint16 name length + UTF-8 name,
#                    uint8 rank, uint32 per dimension,
#                    row-major float64 little-endian values

CHECKPOINT_MAGIC = b"MTKCHKP1"
CHECKPOINT_VERSION = 1

_CONFIG_FIELDS = (
    "src_vocab",
    "tgt_vocab",
    "layers",
    "hidden_size",
    "embed_size",
    "dropout",
    "attention_kind",
    "attention_dim",
    "input_feeding",
    "max_train_len",
)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    src_vocab: Vocabulary | None = None
    tgt_vocab: Vocabulary | None = None
    truecaser: Truecaser | None = None


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        lines.append(f"{name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad config line: {line!r}")
        kv[key.strip()] = value.strip()
    def parse(name, conv, default=None):
        if name not in kv or kv[name] == "none":
            return default
        raw = kv[name]
        if conv is bool:
            return raw.lower() in ("true", "1", "yes", "on")
        return conv(raw)
    try:
        return ModelConfig(
            src_vocab=parse("src_vocab", int),
            tgt_vocab=parse("tgt_vocab", int),
            layers=parse("layers", int, 4),
            hidden_size=parse("hidden_size", int, 1000),
            embed_size=parse("embed_size", int, 1000),
            dropout=parse("dropout", float, 0.3),
            attention_kind=parse("attention_kind", str, "concat"),
            attention_dim=parse("attention_dim", int),
            input_feeding=parse("input_feeding", bool, False),
            max_train_len=parse("max_train_len", int, 50),
        )
    except TypeError as exc:
        raise CheckpointError(f"incomplete model config: {exc}") from exc


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    cfg: ModelConfig,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
    truecaser: Truecaser | None = None,
) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_block(buf, config_to_text(cfg).encode("utf-8"))
    for vocab in (src_vocab, tgt_vocab):
        text = corpus_mod.vocabulary_to_text(vocab) if vocab is not None else ""
        _write_block(buf, text.encode("utf-8"))
    tc_text = corpus_mod.truecaser_to_text(truecaser) if truecaser is not None else ""
    _write_block(buf, tc_text.encode("utf-8"))
    tensors = list(params.named_tensors())
    buf.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        cfg = config_from_text(_read_block(f).decode("utf-8"))
        src_text = _read_block(f).decode("utf-8")
        tgt_text = _read_block(f).decode("utf-8")
        tc_text = _read_block(f).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)
            )
            n_values = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 8 * n_values), dtype="<f8")
            tensors[name] = data.astype(np.float64).reshape(shape)

    params = init_params(cfg, seed=0)
    for name, target in params.named_tensors():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != target.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"config implies {target.shape}"
            )
        target[...] = tensors[name]
    return Checkpoint(
        params=params,
        config=cfg,
        src_vocab=corpus_mod.vocabulary_from_text(src_text, str(path)) if src_text else None,
        tgt_vocab=corpus_mod.vocabulary_from_text(tgt_text, str(path)) if tgt_text else None,
        truecaser=corpus_mod.truecaser_from_text(tc_text) if tc_text else None,
    )
