"""Translation generation and unknown-word copy postprocessing.

Greedy search is the reference decoder; beam search is opt-in and must
coincide with greedy at width 1. Each emitted token keeps its attention row
over the source positions, which is what lets the postprocessor replace a
generated ``<unk>`` by the source token holding the maximal alignment
weight (ties resolve to the leftmost position).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus as corpus_mod
from . import model as model_mod
from .corpus import BOS_ID, EOS_ID, UNK, UNK_ID, Sentence, Vocabulary
from .errors import CorpusFormatError, DimensionMismatch, EmptyInput, MtkitError
from .model import Checkpoint, DecoderState, ModelConfig, ModelParams


@dataclass
class Hypothesis:
    """A decoded sentence: ids (no BOS/EOS), surface tokens, summed
    log-probability, and one attention row per emitted token."""

    ids: list[int]
    tokens: list[str]
    score: float
    attention: np.ndarray  # [len(ids), source_len]
    finished: bool  # True when the end token terminated the decode

    def __post_init__(self) -> None:
        if self.attention.shape[0] != len(self.ids):
            raise DimensionMismatch("one attention row per emitted token required")


def _length_cap(source_len: int, max_len_factor: float, max_len: int | None) -> int:
    if max_len is not None:
        return max_len
    return math.ceil(max_len_factor * source_len) + 5


def _encode_source(
    p: ModelParams, cfg: ModelConfig, source: Sequence[int]
) -> tuple[np.ndarray, DecoderState]:
    if len(source) == 0:
        raise EmptyInput("cannot decode an empty source")
    states, finals, _ = model_mod.encoder_forward(list(source) + [EOS_ID], p, cfg)
    return states[: len(source)], model_mod.init_decoder_state(finals, cfg)


def _tokens_for(ids: Sequence[int], vocab: Vocabulary | None) -> list[str]:
    if vocab is None:
        return [UNK if i == UNK_ID else f"<{i}>" for i in ids]
    return vocab.tokens_of(ids)


def greedy_decode(
    p: ModelParams,
    cfg: ModelConfig,
    source: Sequence[int],
    max_len_factor: float = 2.0,
    max_len: int | None = None,
    tgt_vocab: Vocabulary | None = None,
) -> Hypothesis:
    """Argmax decoding until EOS or the length cap.

    Ties pick the lowest id. The cap is ceil(max_len_factor * len(source)) + 5
    unless ``max_len`` overrides it explicitly.
    """
    attn_states, state = _encode_source(p, cfg, source)
    cap = _length_cap(len(source), max_len_factor, max_len)
    ids: list[int] = []
    rows: list[np.ndarray] = []
    score = 0.0
    finished = False
    y_prev = BOS_ID
    while len(ids) < cap:
        logits, state, weights, _ = model_mod.decoder_step(y_prev, state, attn_states, p, cfg)
        logp = model_mod.log_softmax(logits)
        nxt = int(np.argmax(logits))
        score += float(logp[nxt])
        if nxt == EOS_ID:
            finished = True
            break
        ids.append(nxt)
        rows.append(weights)
        y_prev = nxt
    attention = np.stack(rows) if rows else np.zeros((0, len(source)))
    return Hypothesis(ids, _tokens_for(ids, tgt_vocab), score, attention, finished)


@dataclass
class _Beam:
    score: float
    ids: list[int]
    rows: list[np.ndarray]
    state: DecoderState
    y_prev: int


def beam_decode(
    p: ModelParams,
    cfg: ModelConfig,
    source: Sequence[int],
    beam: int = 5,
    max_len_factor: float = 2.0,
    max_len: int | None = None,
    tgt_vocab: Vocabulary | None = None,
) -> Hypothesis:
    """Length-capped beam search over summed log-probabilities.

    Completed hypotheses (EOS emitted) retire from the beam and are never
    pruned; survivors still alive at the cap compete as they stand. Width 1
    reproduces greedy decoding exactly.
    """
    if beam < 1:
        raise MtkitError("beam width must be >= 1")
    attn_states, state = _encode_source(p, cfg, source)
    cap = _length_cap(len(source), max_len_factor, max_len)
    live = [_Beam(0.0, [], [], state, BOS_ID)]
    done: list[Hypothesis] = []

    def hyp_of(score, ids, rows, finished):
        attention = np.stack(rows) if rows else np.zeros((0, len(source)))
        return Hypothesis(list(ids), _tokens_for(ids, tgt_vocab), score, attention, finished)

    for _ in range(cap):
        candidates: list[tuple[float, int, _Beam]] = []
        for b in live:
            logits, new_state, weights, _ = model_mod.decoder_step(
                b.y_prev, b.state, attn_states, p, cfg
            )
            logp = model_mod.log_softmax(logits)
            expanded = _Beam(b.score, b.ids, b.rows + [weights], new_state, -1)
            for tok in range(cfg.tgt_vocab):
                candidates.append((b.score + float(logp[tok]), tok, expanded))
        # highest score first; ties prefer the lower token id for determinism
        candidates.sort(key=lambda c: (-c[0], c[1]))
        next_live: list[_Beam] = []
        for score, tok, src_beam in candidates:
            if tok == EOS_ID:
                done.append(hyp_of(score, src_beam.ids, src_beam.rows[:-1], True))
            else:
                next_live.append(
                    _Beam(score, src_beam.ids + [tok], src_beam.rows, src_beam.state, tok)
                )
            if len(next_live) >= beam:
                break
        live = next_live
        if not live:
            break
        # log-probabilities only shrink scores, so once the best finished
        # hypothesis matches the best live score nothing can overtake it
        if done and max(h.score for h in done) >= max(b.score for b in live):
            live = []
            break
    for b in live:
        done.append(hyp_of(b.score, b.ids, b.rows, False))
    return max(done, key=lambda h: h.score)


def replace_unk(h: Hypothesis, source_tokens: Sentence | Sequence[str]) -> Sentence:
    """Substitute each unknown output token by the source token under the
    maximal attention weight of that output position (leftmost on ties)."""
    toks = list(source_tokens)
    if h.attention.shape[1] != len(toks):
        raise DimensionMismatch(
            f"attention spans {h.attention.shape[1]} source positions, "
            f"got {len(toks)} source tokens"
        )
    out = []
    for pos, (tid, tok) in enumerate(zip(h.ids, h.tokens)):
        if tid == UNK_ID:
            out.append(toks[int(np.argmax(h.attention[pos]))])
        else:
            out.append(tok)
    return Sentence(tuple(out))


# ---------------------------------------------------------------------------
# file pipeline


@dataclass
class TranslateOptions:
    beam: int = 1
    max_len_factor: float = 2.0
    unk_replace: bool = True
    truecase: bool = True
    attn_sidecar: str | Path | None = None
    threads: int | None = None  # >1 decodes lines through a worker pool


def translate_line(line: str, ck: Checkpoint, opts: TranslateOptions) -> tuple[str, Hypothesis | None]:
    """Tokenize, truecase, encode, decode, unk-replace and detokenize one line."""
    sent = corpus_mod.tokenize(line)
    if len(sent) == 0:
        return "", None
    if opts.truecase and ck.truecaser is not None:
        sent = corpus_mod.apply_truecase(sent, ck.truecaser)
    ids = corpus_mod.encode(sent, ck.src_vocab)
    if opts.beam > 1:
        hyp = beam_decode(
            ck.params, ck.config, ids, beam=opts.beam,
            max_len_factor=opts.max_len_factor, tgt_vocab=ck.tgt_vocab,
        )
    else:
        hyp = greedy_decode(
            ck.params, ck.config, ids,
            max_len_factor=opts.max_len_factor, tgt_vocab=ck.tgt_vocab,
        )
    if opts.unk_replace:
        out_sent = replace_unk(hyp, sent)
    else:
        out_sent = Sentence(tuple(hyp.tokens))
    return corpus_mod.detokenize(out_sent), hyp


def translate_file(
    model_path: str | Path,
    source_file: str | Path,
    out_file: str | Path,
    opts: TranslateOptions | None = None,
) -> int:
    """Translate a file line by line, preserving alignment.

    Returns the number of lines written. With ``opts.attn_sidecar`` set, each
    line's attention matrix is written as one JSON object per line:
    {"rows": [[...]], "src_len": n}.
    """
    opts = opts or TranslateOptions()
    ck = model_mod.load_checkpoint(model_path)
    if ck.src_vocab is None or ck.tgt_vocab is None:
        raise CorpusFormatError(f"{model_path}: checkpoint carries no vocabularies")
    lines = Path(source_file).read_text(encoding="utf-8").splitlines()

    def work(numbered: tuple[int, str]) -> tuple[str, Hypothesis | None]:
        lineno, line = numbered
        try:
            return translate_line(line, ck, opts)
        except MtkitError as exc:
            raise type(exc)(f"{source_file}:{lineno}: {exc}") from exc

    numbered = list(enumerate(lines, start=1))
    if opts.threads is not None and opts.threads > 1:
        # decoding only reads the parameters, so lines can fan out to workers;
        # map() keeps the output in input order
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(work, numbered))
    else:
        results = [work(n) for n in numbered]

    outputs: list[str] = []
    sidecar: list[str] = []
    for text, hyp in results:
        outputs.append(text)
        if opts.attn_sidecar is not None:
            rows = hyp.attention.tolist() if hyp is not None else []
            src_len = hyp.attention.shape[1] if hyp is not None else 0
            sidecar.append(json.dumps({"rows": rows, "src_len": src_len}))
    Path(out_file).write_text("".join(s + "\n" for s in outputs), encoding="utf-8")
    if opts.attn_sidecar is not None:
        Path(opts.attn_sidecar).write_text(
            "".join(s + "\n" for s in sidecar), encoding="utf-8"
        )
    return len(outputs)
