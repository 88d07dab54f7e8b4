import json
import math
import random

import numpy as np
import pytest

from mtkit import model as M
from mtkit import training as T
from mtkit.corpus import BLANK_ID, ParallelCorpus, Sentence, Vocabulary, build_vocabulary, encode
from mtkit.errors import EmptyCorpus, NonFiniteGradient, ShapeMismatch


def toy_vocab(words):
    return Vocabulary([(w, 1) for w in sorted(words)], size_limit=len(words))


def copy_corpus(n_pairs, words, seed, min_len=2, max_len=4, reverse=False):
    rng = random.Random(seed)
    pairs = []
    for _ in range(n_pairs):
        toks = [rng.choice(words) for _ in range(rng.randint(min_len, max_len))]
        out = list(reversed(toks)) if reverse else list(toks)
        pairs.append((Sentence.from_tokens(toks), Sentence.from_tokens(out)))
    return ParallelCorpus(tuple(pairs))


# ---------------------------------------------------------------------------
# batching


def test_make_batches_sizes():
    pairs = [([4] * (i + 1), [5]) for i in range(5)]
    batches = T.make_batches(pairs, 2, seed=0)
    assert sorted(len(b) for b in batches) == [1, 2, 2]


def test_make_batches_padding_and_mask():
    pairs = [([4, 4, 4], [6, 6, 6]), ([4, 4, 4, 4, 4], [6, 6, 6, 6, 6])]
    (batch,) = T.make_batches(pairs, 2, seed=1)
    assert batch.src.shape == (2, 5)
    assert batch.tgt.shape == (2, 5)
    short = batch.tgt_lengths.index(3)
    assert list(batch.tgt[short, 3:]) == [BLANK_ID, BLANK_ID]
    assert batch.target_mask.sum() == 8  # 3 + 5 real positions, 2 masked
    assert batch.pair(short) == ([4, 4, 4], [6, 6, 6])


def test_make_batches_token_conservation():
    rng = random.Random(2)
    pairs = [
        ([4] * rng.randint(1, 9), [5] * rng.randint(1, 9)) for _ in range(37)
    ]
    batches = T.make_batches(pairs, 5, seed=3)
    total_mask = sum(float(b.target_mask.sum()) for b in batches)
    assert total_mask == sum(len(t) for _, t in pairs)
    assert sum(len(b) for b in batches) == 37


def test_make_batches_deterministic():
    pairs = [([4] * (1 + i % 7), [5] * (1 + i % 5)) for i in range(23)]
    a = T.make_batches(pairs, 4, seed=9)
    b = T.make_batches(pairs, 4, seed=9)
    assert all(np.array_equal(x.src, y.src) for x, y in zip(a, b))
    c = T.make_batches(pairs, 4, seed=10)
    assert any(not np.array_equal(x.src, y.src) for x, y in zip(a, c))


def test_make_batches_buckets_by_length():
    pairs = [([4] * ln, [5]) for ln in (1, 9, 1, 9, 1, 9)]
    batches = T.make_batches(pairs, 3, seed=0)
    for b in batches:
        assert len(set(b.src_lengths)) == 1  # identical lengths bucket together


# ---------------------------------------------------------------------------
# sgd


def one_scalar_params():
    cfg = M.ModelConfig(src_vocab=5, tgt_vocab=5, layers=1, hidden_size=1, embed_size=1)
    p = M.init_params(cfg, 0)
    return cfg, p


def test_sgd_basic_update():
    cfg, p = one_scalar_params()
    g = M.zeros_like_params(p)
    p.b_out[...] = 1.0
    g.b_out[...] = 0.5
    T.sgd_step(p, g, lr=1.0, clip_norm=None)
    assert p.b_out == pytest.approx([0.5] * 5)


def test_sgd_clipping_scales_by_half():
    cfg, p = one_scalar_params()
    g = M.zeros_like_params(p)
    before = p.b_out.copy()
    g.b_out[0] = 10.0  # global norm 10, clip 5 -> effective 5
    T.sgd_step(p, g, lr=1.0, clip_norm=5.0)
    assert before[0] - p.b_out[0] == pytest.approx(5.0)


def test_sgd_zero_lr_is_identity():
    cfg, p = one_scalar_params()
    snapshot = [t.copy() for _, t in p.named_tensors()]
    g = M.zeros_like_params(p)
    for _, t in g.named_tensors():
        t[...] = 3.0
    T.sgd_step(p, g, lr=0.0)
    for (_, t), s in zip(p.named_tensors(), snapshot):
        assert np.array_equal(t, s)


def test_sgd_rejects_non_finite():
    cfg, p = one_scalar_params()
    g = M.zeros_like_params(p)
    g.b_out[0] = math.nan
    with pytest.raises(NonFiniteGradient):
        T.sgd_step(p, g, lr=1.0)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_trace_paper_rule():
    state = T.TrainState(lr=1.0, rule="best")
    trace = []
    for ppl in (20.0, 15.0, 16.0, 14.0, 14.0):
        T.update_lr(state, ppl)
        trace.append(state.lr)
    assert trace == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_lr_tie_counts_as_not_decreased():
    state = T.TrainState(lr=1.0, rule="best")
    T.update_lr(state, 10.0)
    T.update_lr(state, 10.0)
    assert state.lr == 0.5


def test_lr_monotone_decrease_keeps_lr():
    state = T.TrainState(lr=1.0, rule="best")
    for ppl in (9.0, 8.0, 7.0, 6.5):
        T.update_lr(state, ppl)
    assert state.lr == 1.0


def test_lr_previous_epoch_rule_differs():
    # sequence 20, 15, 16, 14: "previous" compares 14 < 16 (keeps), while
    # "best" compares 14 < 15 (keeps) -- they diverge on 15.5 after 16
    best = T.TrainState(lr=1.0, rule="best")
    prev = T.TrainState(lr=1.0, rule="previous")
    for ppl in (20.0, 15.0, 16.0, 15.5):
        T.update_lr(best, ppl)
        T.update_lr(prev, ppl)
    assert best.lr == 0.25  # 15.5 >= best 15 halves again
    assert prev.lr == 0.5  # 15.5 < previous 16 keeps


def test_lr_always_power_of_two_fraction():
    rng = random.Random(4)
    state = T.TrainState(lr=1.0, rule="best")
    for _ in range(30):
        T.update_lr(state, rng.uniform(1, 50))
    assert math.log2(1.0 / state.lr) == int(math.log2(1.0 / state.lr))


# ---------------------------------------------------------------------------
# validation


def uniform_setup(v_total=7):
    words = [f"w{i}" for i in range(v_total - 4)]
    corpus = copy_corpus(6, words, seed=5)
    vocab = build_vocabulary(corpus, "source", size_limit=len(words))
    cfg = M.ModelConfig(
        src_vocab=len(vocab), tgt_vocab=len(vocab), layers=1, hidden_size=3, embed_size=2,
        dropout=0.0,
    )
    p = M.init_params(cfg, 0)
    for _, t in p.named_tensors():
        t[...] = 0.0
    dev = T.build_dev_set(corpus, vocab, vocab)
    return p, cfg, dev


def test_validate_uniform_model_ppl_equals_vocab():
    p, cfg, dev = uniform_setup(7)
    ppl, _ = T.validate(p, cfg, dev)
    assert ppl == pytest.approx(7.0, rel=1e-9)


def test_validate_ppl_matches_direct_recomputation():
    words = ["a", "b", "c"]
    corpus = copy_corpus(5, words, seed=6)
    vocab = build_vocabulary(corpus, "source", size_limit=3)
    cfg = M.ModelConfig(
        src_vocab=len(vocab), tgt_vocab=len(vocab), layers=1, hidden_size=4, embed_size=3,
        dropout=0.0,
    )
    p = M.init_params(cfg, 7)
    dev = T.build_dev_set(corpus, vocab, vocab)
    ppl, _ = T.validate(p, cfg, dev)
    total = [M.forward_loss(pair, p, cfg) for pair in dev.pairs]
    expect = math.exp(sum(t[0] for t in total) / sum(t[1] for t in total))
    assert ppl == pytest.approx(expect, rel=1e-12)


def test_validate_memorizer_reaches_bleu_100():
    # overfit three short pairs until greedy decoding reproduces them
    words = ["a", "b", "c", "d"]
    corpus = ParallelCorpus(
        tuple(
            (Sentence.from_tokens(s), Sentence.from_tokens(t))
            for s, t in [(["a", "b"], ["b", "a"]), (["c"], ["c"]), (["d", "a"], ["a", "d"])]
        )
    )
    vocab = build_vocabulary(corpus, "source", size_limit=4)
    cfg = M.ModelConfig(
        src_vocab=len(vocab), tgt_vocab=len(vocab), layers=1, hidden_size=24,
        embed_size=12, dropout=0.0,
    )
    pairs = [(encode(s, vocab), encode(t, vocab)) for s, t in corpus.pairs]
    dev = T.build_dev_set(corpus, vocab, vocab)
    p = M.init_params(cfg, 1)
    for _ in range(150):
        grads = M.zeros_like_params(p)
        for pair in pairs:
            _, _, caches = M.forward_loss(pair, p, cfg, train_mode=True)
            M.backward(caches, p, cfg, out=grads)
        for _, t in grads.named_tensors():
            t /= len(pairs)
        T.sgd_step(p, grads, lr=1.0, clip_norm=5.0)
    ppl, bleu = T.validate(p, cfg, dev)
    assert bleu == 100.0
    assert ppl < 1.3


def test_validate_empty_dev_rejected():
    p, cfg, dev = uniform_setup()
    dev.pairs = []
    with pytest.raises(EmptyCorpus):
        T.validate(p, cfg, dev)


# ---------------------------------------------------------------------------
# the loop


def small_train_setup(seed=11):
    words = ["a", "b", "c", "d", "e"]
    corpus = copy_corpus(30, words, seed=seed)
    vocab = build_vocabulary(corpus, "source", size_limit=5)
    cfg = M.ModelConfig(
        src_vocab=len(vocab), tgt_vocab=len(vocab), layers=1, hidden_size=8,
        embed_size=6, dropout=0.0,
    )
    pairs = [(encode(s, vocab), encode(t, vocab)) for s, t in corpus.pairs]
    dev = T.build_dev_set(corpus, vocab, vocab)
    return pairs, dev, cfg, vocab


def test_train_history_and_reproducibility(tmp_path):
    pairs, dev, cfg, vocab = small_train_setup()
    tcfg = T.TrainConfig(batch_size=10, initial_lr=0.5, max_epochs=3, seed=7, patience=10)
    _, s1, cks = T.train(pairs, dev, cfg, tcfg, out_dir=tmp_path / "run1", src_vocab=vocab)
    _, s2, _ = T.train(pairs, dev, cfg, tcfg, out_dir=tmp_path / "run2", src_vocab=vocab)
    assert len(s1.history) == 3
    assert len(cks) == 3
    # bit-for-bit reproducible apart from wall-clock timing
    strip = lambda recs: [(r.epoch, r.train_nll, r.val_ppl, r.val_bleu, r.lr) for r in recs]
    assert strip(s1.history) == strip(s2.history)
    lines = (tmp_path / "run1" / "history.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "train_nll_per_token", "val_ppl", "val_bleu", "lr", "wall_seconds"}


def test_train_lr_never_increases(tmp_path):
    pairs, dev, cfg, vocab = small_train_setup(12)
    tcfg = T.TrainConfig(batch_size=8, initial_lr=1.0, max_epochs=4, seed=3, patience=10)
    _, state, _ = T.train(pairs, dev, cfg, tcfg)
    lrs = [r.lr for r in state.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for lr in lrs:
        assert math.log2(1.0 / lr) == int(math.log2(1.0 / lr))


def test_train_zero_lr_validation_constant():
    pairs, dev, cfg, vocab = small_train_setup(13)
    # lr must be > 0 by contract, so emulate a no-op by clipping to zero? no:
    # instead check that two validations of untouched params agree exactly
    p = M.init_params(cfg, 5)
    a = T.validate(p, cfg, dev)
    b = T.validate(p, cfg, dev)
    assert a == b


def test_train_checkpoint_reproduces_validation(tmp_path):
    pairs, dev, cfg, vocab = small_train_setup(14)
    tcfg = T.TrainConfig(batch_size=10, initial_lr=0.5, max_epochs=2, seed=9, patience=10)
    p, state, cks = T.train(pairs, dev, cfg, tcfg, out_dir=tmp_path, src_vocab=vocab)
    ck = M.load_checkpoint(cks[-1])
    ppl, bleu = T.validate(ck.params, ck.config, dev)
    assert ppl == state.history[-1].val_ppl
    assert bleu == state.history[-1].val_bleu
    best = json.loads((tmp_path / "best.json").read_text())
    assert best["checkpoint"] in {c.name for c in cks}


def test_train_bleu_patience_stops_early():
    pairs, dev, cfg, vocab = small_train_setup(15)
    # lr tiny: BLEU will not move, so patience=2 stops after 3 epochs
    tcfg = T.TrainConfig(
        batch_size=10, initial_lr=1e-9, max_epochs=10, seed=2, patience=2
    )
    _, state, _ = T.train(pairs, dev, cfg, tcfg)
    assert state.epoch < 10
