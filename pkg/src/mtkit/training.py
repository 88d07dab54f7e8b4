"""SGD training loop with validation-driven learning-rate halving.

Batches are length-bucketed and padded with the blank id; padded target
positions carry zero loss weight. After every epoch the loop measures
validation perplexity and greedy-decode BLEU, halves the learning rate
whenever perplexity fails to strictly decrease, writes a checkpoint, and
stops at the epoch cap or when BLEU has not improved for ``patience``
epochs. Everything is reproducible from the seeds in the config.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import decode as decode_mod
from . import evaluation
from . import model as model_mod
from .corpus import BLANK_ID, ParallelCorpus, Sentence, Truecaser, Vocabulary
from .corpus import detokenize, encode
from .errors import EmptyCorpus, NonFiniteGradient, ShapeMismatch
from .model import Gradients, ModelConfig, ModelParams

HALVING_RULES = ("best", "previous")


@dataclass
class TrainConfig:
    batch_size: int = 250
    initial_lr: float = 1.0
    max_epochs: int = 13
    grad_clip_norm: float | None = 5.0  # None disables clipping
    seed: int = 1
    halving_rule: str = "best"  # compare against best so far or previous epoch
    patience: int = 3  # epochs without a BLEU improvement before stopping

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ShapeMismatch("batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ShapeMismatch("initial_lr must be positive")
        if self.max_epochs < 1:
            raise ShapeMismatch("max_epochs must be >= 1")
        if self.halving_rule not in HALVING_RULES:
            raise ShapeMismatch(f"halving_rule must be one of {HALVING_RULES}")


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float  # per scored token, training mode
    val_ppl: float
    val_bleu: float
    lr: float
    wall_seconds: float = 0.0


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_val_ppl: float = math.inf
    prev_val_ppl: float = math.inf
    best_val_bleu: float = -math.inf
    rule: str = "best"  # perplexity comparison baseline for halving
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class Batch:
    src: np.ndarray  # [B, S_max] int64, blank-padded
    tgt: np.ndarray  # [B, T_max] int64, blank-padded
    src_lengths: list[int]
    tgt_lengths: list[int]
    target_mask: np.ndarray  # [B, T_max] float, 1 on real target positions

    def __len__(self) -> int:
        return self.src.shape[0]

    def pair(self, i: int) -> tuple[list[int], list[int]]:
        return (
            [int(x) for x in self.src[i, : self.src_lengths[i]]],
            [int(x) for x in self.tgt[i, : self.tgt_lengths[i]]],
        )


def make_batches(
    pairs: list[tuple[list[int], list[int]]], batch_size: int, seed: int
) -> list[Batch]:
    """Shuffle, bucket by source length, pad, and shuffle batch order.

    The stable length sort keeps the shuffled order among equal lengths, so
    the whole procedure is a pure function of (pairs, batch_size, seed).
    """
    if batch_size < 1:
        raise ShapeMismatch("batch_size must be >= 1")
    import random as _random

    rng = _random.Random(seed)
    order = list(range(len(pairs)))
    rng.shuffle(order)
    order.sort(key=lambda i: len(pairs[i][0]))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)

    batches = []
    for chunk in chunks:
        members = [pairs[i] for i in chunk]
        s_max = max(len(s) for s, _ in members)
        t_max = max(len(t) for _, t in members)
        src = np.full((len(members), s_max), BLANK_ID, dtype=np.int64)
        tgt = np.full((len(members), t_max), BLANK_ID, dtype=np.int64)
        mask = np.zeros((len(members), t_max))
        s_lens, t_lens = [], []
        for row, (s, t) in enumerate(members):
            src[row, : len(s)] = s
            tgt[row, : len(t)] = t
            mask[row, : len(t)] = 1.0
            s_lens.append(len(s))
            t_lens.append(len(t))
        batches.append(Batch(src, tgt, s_lens, t_lens, mask))
    return batches


def global_grad_norm(g: Gradients) -> float:
    total = 0.0
    for _, t in g.named_tensors():
        total += float(np.sum(t * t))
    return math.sqrt(total)


def sgd_step(
    p: ModelParams, g: Gradients, lr: float, clip_norm: float | None = 5.0
) -> ModelParams:
    """In-place update p <- p - lr * g after global-norm clipping."""
    for name, t in g.named_tensors():
        if not np.all(np.isfinite(t)):
            raise NonFiniteGradient(f"non-finite entries in gradient {name}")
    scale = 1.0
    if clip_norm is not None and clip_norm > 0:
        norm = global_grad_norm(g)
        if norm > clip_norm:
            scale = clip_norm / norm
    for (_, pt), (_, gt) in zip(p.named_tensors(), g.named_tensors()):
        pt -= lr * scale * gt
    return p


# ---------------------------------------------------------------------------
# validation


@dataclass
class DevSet:
    """Everything validation needs: encoded pairs plus the surface forms."""

    pairs: list[tuple[list[int], list[int]]]
    src_sentences: list[Sentence]
    ref_lines: list[str]
    tgt_vocab: Vocabulary
    truecase: bool = False


def build_dev_set(
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    truecase: bool = False,
) -> DevSet:
    if len(corpus) == 0:
        raise EmptyCorpus("validation corpus is empty")
    pairs = [
        (encode(s, src_vocab), encode(t, tgt_vocab)) for s, t in corpus.pairs
    ]
    return DevSet(
        pairs=pairs,
        src_sentences=[s for s, _ in corpus.pairs],
        ref_lines=[detokenize(t) for _, t in corpus.pairs],
        tgt_vocab=tgt_vocab,
        truecase=truecase,
    )


def validate(p: ModelParams, cfg: ModelConfig, dev: DevSet) -> tuple[float, float]:
    """(perplexity, greedy-decode BLEU) on the dev set, dropout off.

    Hypotheses go through unknown-word replacement and detokenization, then
    BLEU runs on re-tokenized text against the detokenized references.
    """
    if not dev.pairs:
        raise EmptyCorpus("validation needs at least one pair")
    total_nll = 0.0
    total_tok = 0
    for pair in dev.pairs:
        nll, count, _ = model_mod.forward_loss(pair, p, cfg, train_mode=False)
        total_nll += nll
        total_tok += count
    ppl = math.exp(total_nll / total_tok)

    hyp_lines = []
    for (src_ids, _), src_sent in zip(dev.pairs, dev.src_sentences):
        hyp = decode_mod.greedy_decode(p, cfg, src_ids, tgt_vocab=dev.tgt_vocab)
        sent = decode_mod.replace_unk(hyp, src_sent)
        hyp_lines.append(detokenize(sent))
    bleu = evaluation.bleu_from_lines(hyp_lines, dev.ref_lines, truecase=dev.truecase).bleu
    return ppl, bleu


def update_lr(state: TrainState, new_val_ppl: float) -> TrainState:
    """Halve the learning rate when validation perplexity did not strictly
    decrease against the baseline chosen by ``state.rule`` (best so far or
    previous epoch); ties count as not decreased."""
    baseline = state.best_val_ppl if state.rule == "best" else state.prev_val_ppl
    if new_val_ppl >= baseline:
        state.lr /= 2.0
    state.best_val_ppl = min(state.best_val_ppl, new_val_ppl)
    state.prev_val_ppl = new_val_ppl
    return state


# ---------------------------------------------------------------------------
# the loop


def _sentence_seed(base: int, epoch: int, counter: int) -> int:
    return (base * 1_000_003 + epoch * 8191 + counter) % (2**63 - 1)


def train(
    train_pairs: list[tuple[list[int], list[int]]],
    dev: DevSet,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    params: ModelParams | None = None,
    out_dir: str | Path | None = None,
    src_vocab: Vocabulary | None = None,
    truecaser: Truecaser | None = None,
    probe_sentences: list[str] | None = None,
    log=None,
) -> tuple[ModelParams, TrainState, list[Path]]:
    """Run SGD over the encoded corpus and return the final parameters,
    the training state with its per-epoch history, and checkpoint paths.

    Writes one checkpoint per epoch plus a ``best.json`` pointer record and
    a ``history.jsonl`` line per epoch when ``out_dir`` is given.
    """
    if not train_pairs:
        raise EmptyCorpus("training corpus is empty")
    p = params if params is not None else model_mod.init_params(cfg, tcfg.seed)
    state = TrainState(lr=tcfg.initial_lr, rule=tcfg.halving_rule)
    checkpoints: list[Path] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        history_file = out_path / "history.jsonl"
        history_file.write_text("", encoding="utf-8")
    epochs_since_best_bleu = 0
    counter = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        start = time.monotonic()
        epoch_nll = 0.0
        epoch_tokens = 0
        batches = make_batches(train_pairs, tcfg.batch_size, seed=tcfg.seed + epoch)
        for batch in batches:
            grads = model_mod.zeros_like_params(p)
            for i in range(len(batch)):
                counter += 1
                nll, count, caches = model_mod.forward_loss(
                    batch.pair(i), p, cfg, train_mode=True,
                    rng_seed=_sentence_seed(tcfg.seed, epoch, counter),
                )
                if not math.isfinite(nll):
                    raise NonFiniteGradient(
                        f"non-finite loss at epoch {epoch}, sentence {counter} "
                        f"(lr={state.lr}, pair={batch.pair(i)})"
                    )
                epoch_nll += nll
                epoch_tokens += count
                model_mod.backward(caches, p, cfg, out=grads)
            for _, t in grads.named_tensors():
                t /= len(batch)
            sgd_step(p, grads, state.lr, tcfg.grad_clip_norm)

        val_ppl, val_bleu = validate(p, cfg, dev)
        update_lr(state, val_ppl)
        state.epoch = epoch
        record = EpochRecord(
            epoch=epoch,
            train_nll=epoch_nll / max(epoch_tokens, 1),
            val_ppl=val_ppl,
            val_bleu=val_bleu,
            lr=state.lr,
            wall_seconds=time.monotonic() - start,
        )
        state.history.append(record)
        if log is not None:
            log(
                f"epoch {epoch}: train_nll {record.train_nll:.4f} "
                f"val_ppl {val_ppl:.4f} val_bleu {val_bleu:.2f} lr {state.lr}"
            )
        if probe_sentences:
            _print_probes(p, cfg, probe_sentences, src_vocab, dev.tgt_vocab, truecaser)

        if out_path is not None:
            ck = out_path / f"epoch_{epoch:03d}.ckpt"
            model_mod.save_checkpoint(
                ck, p, cfg, src_vocab=src_vocab, tgt_vocab=dev.tgt_vocab, truecaser=truecaser
            )
            checkpoints.append(ck)
            with open(out_path / "history.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps({
                    "epoch": record.epoch,
                    "train_nll_per_token": record.train_nll,
                    "val_ppl": record.val_ppl,
                    "val_bleu": record.val_bleu,
                    "lr": record.lr,
                    "wall_seconds": round(record.wall_seconds, 3),
                }) + "\n")

        if val_bleu > state.best_val_bleu:
            state.best_val_bleu = val_bleu
            epochs_since_best_bleu = 0
            if out_path is not None:
                (out_path / "best.json").write_text(
                    json.dumps({
                        "epoch": epoch,
                        "checkpoint": f"epoch_{epoch:03d}.ckpt",
                        "val_ppl": val_ppl,
                        "val_bleu": val_bleu,
                    }, indent=2) + "\n",
                    encoding="utf-8",
                )
        else:
            epochs_since_best_bleu += 1
            if epochs_since_best_bleu >= tcfg.patience:
                break
    return p, state, checkpoints


def _print_probes(p, cfg, lines, src_vocab, tgt_vocab, truecaser):
    if src_vocab is None:
        return
    from . import corpus as corpus_mod

    for line in lines:
        sent = corpus_mod.tokenize(line)
        if len(sent) == 0:
            continue
        if truecaser is not None:
            sent = corpus_mod.apply_truecase(sent, truecaser)
        hyp = decode_mod.greedy_decode(p, cfg, encode(sent, src_vocab), tgt_vocab=tgt_vocab)
        out = decode_mod.replace_unk(hyp, sent)
        print(f"probe: {line} -> {detokenize(out)}", file=sys.stderr)
