"""Parallel-text preparation.

Tokenization/detokenization, truecasing, vocabulary construction, integer
encoding, length filtering, seeded splitting, and corpus statistics. All
operations are pure functions over immutable inputs; the only randomness
comes through explicit seeds.

Tokenization is reversible: splitting happens on whitespace and on a fixed
set of punctuation characters, and every token remembers (via an ``attach``
flag) whether it was glued to the previous token in the raw text. Sentences
built from bare token lists (e.g. decoder output) carry no flags and are
detokenized with a punctuation heuristic instead.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Literal

from .errors import CorpusFormatError, EmptyCorpus, InsufficientData

# Reserved tokens, in id order.
BOS = "<s>"
EOS = "</s>"
BLANK = "<blank>"
UNK = "<unk>"
SPECIALS = (BOS, EOS, BLANK, UNK)
BOS_ID, EOS_ID, BLANK_ID, UNK_ID = 0, 1, 2, 3

Side = Literal["source", "target"]

# Characters split off into their own tokens. Hyphens and apostrophes are
# deliberately absent so intra-word ones stay attached.
_SPLIT_PUNCT = frozenset('.,;:!?"()')
# Heuristic spacing for marker-less sentences.
_LEFT_ATTACH = frozenset('.,;:!?)')
_RIGHT_ATTACH = frozenset('(')


@dataclass(frozen=True)
class Sentence:
    """A tokenized segment.

    ``attach[i]`` is True when token i immediately followed token i-1 in the
    raw text (no whitespace between them); ``attach`` is None for sentences
    that never went through :func:`tokenize`.
    """

    tokens: tuple[str, ...]
    attach: tuple[bool, ...] | None = None

    def __post_init__(self) -> None:
        for tok in self.tokens:
            if not tok:
                raise CorpusFormatError("empty token in sentence")
            if any(ch.isspace() for ch in tok):
                raise CorpusFormatError(f"token contains whitespace: {tok!r}")
        if self.attach is not None and len(self.attach) != len(self.tokens):
            raise CorpusFormatError("attach flags do not match token count")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Sentence":
        return cls(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def __getitem__(self, i: int) -> str:
        return self.tokens[i]


@dataclass(frozen=True)
class ParallelCorpus:
    """Pairwise-aligned source/target sentences."""

    pairs: tuple[tuple[Sentence, Sentence], ...]
    language_pair: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[Sentence, Sentence]]:
        return iter(self.pairs)

    def side(self, side: Side) -> list[Sentence]:
        idx = 0 if side == "source" else 1
        return [pair[idx] for pair in self.pairs]


@dataclass
class Vocabulary:
    """Ranked closed word list plus the four reserved tokens.

    Ids 0..3 belong to the specials; entry i maps to id 4 + i. Entries are
    sorted by corpus count descending, ties broken by the token string.
    """

    entries: list[tuple[str, int]]
    size_limit: int
    _token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.size_limit < 0:
            raise CorpusFormatError("size_limit must be >= 0")
        if len(self.entries) > self.size_limit:
            raise CorpusFormatError("more entries than size_limit")
        mapping = {tok: i for i, tok in enumerate(SPECIALS)}
        for i, (tok, _count) in enumerate(self.entries):
            if tok in mapping:
                raise CorpusFormatError(f"duplicate or reserved token in entries: {tok!r}")
            mapping[tok] = 4 + i
        self._token_to_id = mapping

    def __len__(self) -> int:
        return 4 + len(self.entries)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_of(self, idx: int) -> str:
        if 0 <= idx < 4:
            return SPECIALS[idx]
        if 4 <= idx < len(self):
            return self.entries[idx - 4][0]
        raise CorpusFormatError(f"id {idx} out of range for vocabulary of size {len(self)}")

    def tokens_of(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]


@dataclass(frozen=True)
class CorpusStats:
    sentence_count: int
    word_count: int
    vocab_size: int
    asl: Fraction


@dataclass
class Truecaser:
    """Maps each lowercased word to its most frequent surface form."""

    case_table: dict[str, str]

    def surface(self, token: str) -> str:
        return self.case_table.get(token.lower(), token)


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> Sentence:
    """Split one raw line into tokens.

    Whitespace separates tokens; each character in ``.,;:!?"()`` becomes its
    own token. Tokens cut from the same whitespace chunk as their predecessor
    get an attach flag so :func:`detokenize` can restore the original spacing.
    """
    tokens: list[str] = []
    attach: list[bool] = []
    for chunk in text.split():
        first = True
        run: list[str] = []
        for ch in chunk:
            if ch in _SPLIT_PUNCT:
                if run:
                    tokens.append("".join(run))
                    attach.append(not first)
                    first = False
                    run = []
                tokens.append(ch)
                attach.append(not first)
                first = False
            else:
                run.append(ch)
        if run:
            tokens.append("".join(run))
            attach.append(not first)
    return Sentence(tuple(tokens), tuple(attach))


def detokenize(s: Sentence) -> str:
    """Rebuild a raw line from tokens.

    Sentences produced by :func:`tokenize` restore their exact spacing (up to
    whitespace normalization). Marker-less sentences fall back to a heuristic:
    closing punctuation attaches left, an opening parenthesis attaches right,
    and straight quotes alternate open/close.
    """
    if not s.tokens:
        return ""
    if s.attach is not None:
        parts = [s.tokens[0]]
        for tok, glued in zip(s.tokens[1:], s.attach[1:]):
            parts.append(tok if glued else " " + tok)
        return "".join(parts)

    out = [s.tokens[0]]
    quote_open = s.tokens[0] == '"'
    no_space_after = s.tokens[0] in _RIGHT_ATTACH or quote_open
    for tok in s.tokens[1:]:
        if tok == '"':
            glued = quote_open  # a closing quote hugs the word before it
            quote_open = not quote_open
            next_no_space = quote_open
        else:
            glued = tok in _LEFT_ATTACH
            next_no_space = tok in _RIGHT_ATTACH
        out.append(tok if (glued or no_space_after) else " " + tok)
        no_space_after = next_no_space
    return "".join(out)


# ---------------------------------------------------------------------------
# truecasing


def build_truecaser(corpus: ParallelCorpus, side: Side) -> Truecaser:
    """Count surface forms per lowercased key; keep the most frequent.

    Ties are broken by the lexicographically smallest surface form.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("cannot build a truecaser from an empty corpus")
    counts: Counter[tuple[str, str]] = Counter()
    for sent in corpus.side(side):
        for tok in sent:
            counts[(tok.lower(), tok)] += 1
    best: dict[str, tuple[int, str]] = {}
    for (low, surf), n in counts.items():
        cur = best.get(low)
        if cur is None or (-n, surf) < (-cur[0], cur[1]):
            best[low] = (n, surf)
    return Truecaser({low: surf for low, (_n, surf) in best.items()})


def apply_truecase(s: Sentence, tc: Truecaser, position_aware: bool = True) -> Sentence:
    """Replace the sentence-initial token by its most frequent surface form.

    With ``position_aware`` False, every token is mapped through the case
    table instead of only the first.
    """
    if not s.tokens:
        return s
    if position_aware:
        new = (tc.surface(s.tokens[0]),) + s.tokens[1:]
    else:
        new = tuple(tc.surface(t) for t in s.tokens)
    return Sentence(new, s.attach)


# ---------------------------------------------------------------------------
# vocabulary and encoding


def build_vocabulary(corpus: ParallelCorpus, side: Side, size_limit: int = 50000) -> Vocabulary:
    """Keep the ``size_limit`` most frequent tokens of one side.

    Ordering is count descending with lexicographic tie-break; the four
    reserved tokens are excluded from the ranked list and always present.
    """
    counts: Counter[str] = Counter()
    for sent in corpus.side(side):
        counts.update(sent.tokens)
    for sp in SPECIALS:
        counts.pop(sp, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(ranked[:size_limit], size_limit)


def encode(s: Sentence, vocab: Vocabulary, add_boundaries: bool = False) -> list[int]:
    """Map tokens to ids; out-of-vocabulary tokens become the UNK id."""
    ids = [vocab.id_of(t) for t in s.tokens]
    if add_boundaries:
        return [BOS_ID] + ids + [EOS_ID]
    return ids


# ---------------------------------------------------------------------------
# filtering, splitting, statistics


def filter_by_length(corpus: ParallelCorpus, max_len: int = 50) -> ParallelCorpus:
    """Keep pairs where both sides have at most ``max_len`` tokens."""
    if max_len < 1:
        raise CorpusFormatError("max_len must be >= 1")
    kept = tuple(
        (src, tgt) for src, tgt in corpus.pairs if len(src) <= max_len and len(tgt) <= max_len
    )
    return ParallelCorpus(kept, corpus.language_pair)


def corpus_stats(corpus: ParallelCorpus, side: Side) -> CorpusStats:
    sents = corpus.side(side)
    word_count = sum(len(s) for s in sents)
    distinct: set[str] = set()
    for s in sents:
        distinct.update(s.tokens)
    n = len(sents)
    asl = Fraction(word_count, n) if n else Fraction(0)
    return CorpusStats(n, word_count, len(distinct), asl)


def split_corpus(
    corpus: ParallelCorpus, dev_size: int, test_size: int, seed: int
) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Seeded shuffle, then partition into (train, dev, test)."""
    if dev_size < 0 or test_size < 0:
        raise InsufficientData("split sizes must be non-negative")
    if dev_size + test_size > len(corpus):
        raise InsufficientData(
            f"dev {dev_size} + test {test_size} exceeds corpus size {len(corpus)}"
        )
    idx = list(range(len(corpus)))
    random.Random(seed).shuffle(idx)
    dev = idx[:dev_size]
    test = idx[dev_size : dev_size + test_size]
    train = idx[dev_size + test_size :]
    pick = lambda ks: ParallelCorpus(tuple(corpus.pairs[k] for k in ks), corpus.language_pair)
    return pick(train), pick(dev), pick(test)


# ---------------------------------------------------------------------------
# file I/O

# Parallel text: two UTF-8 files, one segment per line, line i aligned.
# Blank lines are forbidden.


def read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            raise CorpusFormatError(f"{path}: blank line {i} (blank lines are forbidden)")
    return lines


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_parallel(src_path: str | Path, tgt_path: str | Path, language_pair: str = "") -> ParallelCorpus:
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusFormatError(
            f"misaligned corpus: {src_path} has {len(src_lines)} lines, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    pairs = tuple((tokenize(s), tokenize(t)) for s, t in zip(src_lines, tgt_lines))
    return ParallelCorpus(pairs, language_pair)


def vocabulary_to_text(vocab: Vocabulary) -> str:
    """Vocabulary file: 4 header lines naming the specials, then token<TAB>count."""
    lines = list(SPECIALS) + [f"{tok}\t{count}" for tok, count in vocab.entries]
    return "".join(line + "\n" for line in lines)


def vocabulary_from_text(text: str, origin: str = "vocabulary") -> Vocabulary:
    lines = text.splitlines()
    if len(lines) < 4 or tuple(lines[:4]) != SPECIALS:
        raise CorpusFormatError(f"{origin}: missing or wrong 4-line specials header")
    entries: list[tuple[str, int]] = []
    for i, line in enumerate(lines[4:], start=5):
        tok, sep, count = line.partition("\t")
        if not sep:
            raise CorpusFormatError(f"{origin}: line {i} is not token<TAB>count")
        entries.append((tok, int(count)))
    return Vocabulary(entries, size_limit=max(len(entries), 1))


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(vocabulary_to_text(vocab), encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    return vocabulary_from_text(Path(path).read_text(encoding="utf-8"), str(path))


def truecaser_to_text(tc: Truecaser) -> str:
    return "".join(f"{low}\t{tc.case_table[low]}\n" for low in sorted(tc.case_table))


def truecaser_from_text(text: str) -> Truecaser:
    table: dict[str, str] = {}
    for line in text.splitlines():
        low, _, surf = line.partition("\t")
        table[low] = surf
    return Truecaser(table)


def save_truecaser(tc: Truecaser, path: str | Path) -> None:
    Path(path).write_text(truecaser_to_text(tc), encoding="utf-8")


def load_truecaser(path: str | Path) -> Truecaser:
    return truecaser_from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# report formatting


def abbreviate_count(n: int) -> str:
    """1234 -> '1.23K', 10_500_000 -> '10.5M', small values verbatim."""
    if n >= 1_000_000:
        return f"{n / 1e6:.3g}M"
    if n >= 1_000:
        return f"{n / 1e3:.3g}K"
    return str(n)


def format_stats_table(rows: list[tuple[str, CorpusStats]], abbreviate: bool = True) -> str:
    """Aligned text table with Sent./Words/Voc./ASL columns."""
    header = ("Language", "Sent.", "Words", "Voc.", "ASL")
    fmt_n = abbreviate_count if abbreviate else str
    body = [
        (
            name,
            fmt_n(st.sentence_count),
            fmt_n(st.word_count),
            fmt_n(st.vocab_size),
            f"{float(st.asl):.1f}",
        )
        for name, st in rows
    ]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(5)]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])] + [row[i].rjust(widths[i]) for i in range(1, 5)]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)
