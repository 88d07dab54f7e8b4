"""Automatic translation quality measurement.

Corpus-level BLEU (clipped n-gram precisions n=1..4, brevity penalty, no
smoothing, single reference, case-sensitive, punctuation included), word
error rate as unit-cost Levenshtein edits over reference length, and a
length-binned breakdown of both. Reports serialize to CSV or canonical JSON.

The text-level entry points re-tokenize detokenized lines with the corpus
tokenizer and can truecase both sides (case table built from the references)
so scoring runs under the same conditions end to end.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from . import corpus
from .corpus import Sentence
from .errors import EmptyCorpus, EmptyReference, LengthMismatch, TooFewSentences

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


@dataclass(frozen=True)
class WerReport:
    edits: int
    ref_len: int

    @property
    def wer(self) -> float:
        return self.edits / self.ref_len

    @property
    def neg_wer(self) -> float:
        return -self.wer


@dataclass(frozen=True)
class LengthBin:
    min_len: int
    max_len: int
    count: int
    bleu: float
    neg_wer: float


@dataclass(frozen=True)
class LengthBinReport:
    bins: tuple[LengthBin, ...]


def ngram_counts(s: Sentence | Sequence[str], n: int) -> Counter:
    """Multiset of all contiguous n-token subsequences."""
    if n < 1:
        raise ValueError("n must be >= 1")
    toks = tuple(s)
    return Counter(toks[i : i + n] for i in range(len(toks) - n + 1))


def bleu_corpus(hyps: Sequence[Sentence], refs: Sequence[Sentence]) -> BleuReport:
    """Corpus BLEU against a single reference per hypothesis.

    Clipping is per sentence (each hypothesis n-gram counts at most as often
    as it appears in its reference); matches and totals are summed over the
    corpus before taking ratios. Any zero precision zeroes the score. An
    order with no hypothesis n-grams at all (every sentence shorter than n)
    counts as vacuously perfect so identical corpora always score 100.
    """
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("bleu_corpus needs at least one sentence pair")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hc = ngram_counts(hyp, n)
            if not hc:
                continue
            rc = ngram_counts(ref, n)
            totals[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    precisions = tuple(
        (matches[i] / totals[i]) if totals[i] else 1.0 for i in range(MAX_ORDER)
    )
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if all(p > 0.0 for p in precisions):
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER) * 100.0
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def _levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Minimal unit-cost insertions + deletions + substitutions a -> b."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, start=1):
        cur = [i]
        for j, tb in enumerate(b, start=1):
            cur.append(
                min(
                    prev[j] + 1,  # delete from a
                    cur[j - 1] + 1,  # insert into a
                    prev[j - 1] + (ta != tb),
                )
            )
        prev = cur
    return prev[-1]


def wer(hyp: Sentence | Sequence[str], ref: Sentence | Sequence[str]) -> WerReport:
    ref_toks = tuple(ref)
    if not ref_toks:
        raise EmptyReference("per-sentence WER needs a non-empty reference")
    return WerReport(_levenshtein(tuple(hyp), ref_toks), len(ref_toks))


def wer_corpus(hyps: Sequence[Sentence], refs: Sequence[Sentence]) -> WerReport:
    """Micro-averaged WER: edits and reference lengths summed over sentences."""
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    edits = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        edits += _levenshtein(tuple(hyp), tuple(ref))
        ref_len += len(tuple(ref))
    if ref_len == 0:
        raise EmptyReference("corpus reference side is empty")
    return WerReport(edits, ref_len)


def assign_length_bins(sources: Sequence[Sentence], k: int) -> list[int]:
    """Bin index per sentence: sort by (source length, original index), then
    cut the sorted order into k contiguous groups, larger groups first."""
    n = len(sources)
    if k < 1:
        raise TooFewSentences("need at least one bin")
    if n < k:
        raise TooFewSentences(f"{n} sentences cannot fill {k} bins")
    order = sorted(range(n), key=lambda i: (len(sources[i]), i))
    base, extra = divmod(n, k)
    assignment = [0] * n
    pos = 0
    for b in range(k):
        size = base + (1 if b < extra else 0)
        for i in order[pos : pos + size]:
            assignment[i] = b
        pos += size
    return assignment


def binned_quality(
    hyps: Sequence[Sentence],
    refs: Sequence[Sentence],
    sources: Sequence[Sentence],
    k: int = 10,
) -> LengthBinReport:
    """BLEU and negative WER per source-length bin."""
    if not (len(hyps) == len(refs) == len(sources)):
        raise LengthMismatch("hyps, refs and sources must be aligned")
    assignment = assign_length_bins(sources, k)
    bins = []
    for b in range(k):
        idx = [i for i, a in enumerate(assignment) if a == b]
        bh = [hyps[i] for i in idx]
        br = [refs[i] for i in idx]
        lens = [len(sources[i]) for i in idx]
        bleu = bleu_corpus(bh, br).bleu
        neg = wer_corpus(bh, br).neg_wer
        bins.append(LengthBin(min(lens), max(lens), len(idx), bleu, neg))
    return LengthBinReport(tuple(bins))


# ---------------------------------------------------------------------------
# text-level protocol wrappers


def _prepare(lines: Sequence[str], tc: corpus.Truecaser | None) -> list[Sentence]:
    sents = [corpus.tokenize(line) for line in lines]
    if tc is not None:
        sents = [corpus.apply_truecase(s, tc) for s in sents]
    return sents


def _ref_truecaser(ref_lines: Sequence[str]) -> corpus.Truecaser:
    ref_corpus = corpus.ParallelCorpus(
        tuple((corpus.tokenize(line), Sentence(())) for line in ref_lines)
    )
    return corpus.build_truecaser(ref_corpus, "source")


def bleu_from_lines(
    hyp_lines: Sequence[str], ref_lines: Sequence[str], truecase: bool = True
) -> BleuReport:
    tc = _ref_truecaser(ref_lines) if truecase else None
    return bleu_corpus(_prepare(hyp_lines, tc), _prepare(ref_lines, tc))


def wer_from_lines(
    hyp_lines: Sequence[str], ref_lines: Sequence[str], truecase: bool = True
) -> WerReport:
    tc = _ref_truecaser(ref_lines) if truecase else None
    return wer_corpus(_prepare(hyp_lines, tc), _prepare(ref_lines, tc))


def binned_quality_from_lines(
    hyp_lines: Sequence[str],
    ref_lines: Sequence[str],
    src_lines: Sequence[str],
    k: int = 10,
    truecase: bool = True,
) -> LengthBinReport:
    tc = _ref_truecaser(ref_lines) if truecase else None
    return binned_quality(
        _prepare(hyp_lines, tc),
        _prepare(ref_lines, tc),
        [corpus.tokenize(line) for line in src_lines],
        k,
    )


# ---------------------------------------------------------------------------
# report emission


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def report_to_json(report: BleuReport | WerReport | LengthBinReport) -> str:
    if isinstance(report, LengthBinReport):
        payload = {
            "bins": [
                {
                    "bin_index": i,
                    "min_len": b.min_len,
                    "max_len": b.max_len,
                    "count": b.count,
                    "bleu": b.bleu,
                    "neg_wer": b.neg_wer,
                }
                for i, b in enumerate(report.bins)
            ]
        }
    elif isinstance(report, WerReport):
        payload = {
            "edits": report.edits,
            "ref_len": report.ref_len,
            "wer": report.wer,
            "neg_wer": report.neg_wer,
        }
    else:
        payload = asdict(report)
        payload["precisions"] = list(report.precisions)
    return _canonical_json(payload)


def length_bins_to_csv(report: LengthBinReport) -> str:
    lines = ["bin_index,min_len,max_len,count,bleu,neg_wer"]
    for i, b in enumerate(report.bins):
        lines.append(f"{i},{b.min_len},{b.max_len},{b.count},{b.bleu:.2f},{b.neg_wer:.4f}")
    return "\n".join(lines) + "\n"


def emit_report(
    report: BleuReport | WerReport | LengthBinReport,
    format: str,
    path: str | Path,
) -> None:
    """Write a report as CSV (length bins only) or canonical JSON."""
    if format == "csv":
        if not isinstance(report, LengthBinReport):
            raise ValueError("CSV output is defined for length-bin reports")
        Path(path).write_text(length_bins_to_csv(report), encoding="utf-8")
    elif format == "json":
        Path(path).write_text(report_to_json(report), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format: {format}")
