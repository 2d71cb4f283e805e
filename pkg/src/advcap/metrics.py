"""Caption diversity and corpus statistics.

Every function works on token sequences (lists of strings or ints); callers
normalize text with :func:`advcap.data.tokenize` first so corpora stay
comparable.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

Tokens = Sequence[Hashable]


def ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def div_n(caption_set: Sequence[Tokens], n: int) -> float:
    """Distinct n-grams across the set divided by the total word count.

    The denominator is the word count for every n, not the n-gram count.
    """
    if not caption_set:
        raise ContractError("div_n needs a non-empty caption set")
    if any(len(c) == 0 for c in caption_set):
        raise ContractError("div_n needs non-empty captions")
    distinct = set()
    words = 0
    for caption in caption_set:
        distinct.update(ngrams(caption, n))
        words += len(caption)
    return len(distinct) / words


def _closest_ref_length(c: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> float:
    """Sentence BLEU with clipped counts and the closest-length brevity penalty.

    A zero modified precision at any order is replaced by
    ``1 / (2 * len(candidate))`` before taking the geometric mean.
    """
    if not references:
        raise ContractError("bleu needs at least one reference")
    c = len(candidate)
    if c == 0:
        return 0.0
    prod = 1.0
    for n in range(1, max_n + 1):
        cand = Counter(ngrams(candidate, n))
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in Counter(ngrams(ref, n)).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand.items())
        total = max(c - n + 1, 0)
        precision = clipped / total if total else 0.0
        if precision == 0.0:
            precision = 1.0 / (2 * c)
        prod *= precision
    r = _closest_ref_length(c, (len(ref) for ref in references))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    # product then root: precisions are >= 1/(2c), so no underflow and one rounding fewer than exp-log
    return bp * prod ** (1.0 / max_n)


def mbleu(caption_set: Sequence[Tokens], max_n: int = 4) -> float:
    """Mean BLEU of each caption scored against the rest of its set."""
    p = len(caption_set)
    if p < 2:
        raise ContractError(f"mbleu needs at least two captions, got {p}")
    scores = [bleu(caption_set[i], [caption_set[j] for j in range(p) if j != i], max_n)
              for i in range(p)]
    return sum(scores) / p


def vocab_curve(word_counts: Mapping[Hashable, int],
                thresholds: Iterable[int] | None = None) -> dict[int, int]:
    """Number of words whose count is at least k, for each threshold k."""
    counts = np.array(sorted(word_counts.values()), dtype=np.int64)
    if thresholds is None:
        top = int(counts[-1]) if counts.size else 0
        thresholds = range(1, top + 2)
    return {int(k): int(counts.size - np.searchsorted(counts, k, side="left"))
            for k in thresholds}


@dataclass
class CorpusStats:
    vocab_size: int
    pct_novel: float
    vocab_curve: dict


def corpus_stats(generated: Sequence[Tokens], training: Iterable[Tokens],
                 thresholds: Iterable[int] | None = None) -> CorpusStats:
    if not generated:
        raise ContractError("corpus_stats needs at least one generated caption")
    counts = Counter(w for caption in generated for w in caption)
    seen = {tuple(c) for c in training}
    novel = sum(tuple(c) not in seen for c in generated)
    return CorpusStats(len(counts), 100.0 * novel / len(generated),
                       vocab_curve(counts, thresholds))


@dataclass
class CountRatioRow:
    ngram: tuple
    n: int
    train_count: int
    test_count: int
    expected: float
    ratio: float


@dataclass
class CountRatioTable:
    n: int
    min_train_count: int
    n_train: int
    n_test: int
    rows: list = field(default_factory=list)
    bins: list = field(default_factory=list)          # (train-count bin centre, mean ratio, rows)
    hist_edges: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    def mean_ratio(self) -> float:
        return float(self.ratios.mean()) if self.rows else float("nan")


def count_ratios(generated: Sequence[Tokens], training: Sequence[Tokens], n: int,
                 min_train_count: int = 5, hist_max: float = 3.0,
                 hist_bins: int = 30) -> CountRatioTable:
    """Observed generated-corpus n-gram counts against training-scaled expectations.

    An n-gram seen ``m`` times in training is expected ``m * |gen| / |train|``
    times in the generated corpus, with corpus sizes counted in captions.
    Only n-grams with ``m >= min_train_count`` are tabulated; unseen ones get
    ratio 0.
    """
    if not generated or not training:
        raise ContractError("count_ratios needs non-empty corpora")
    if min_train_count < 1:
        raise ContractError("min_train_count must be >= 1")
    train_counts = Counter(g for c in training for g in ngrams(c, n))
    test_counts = Counter(g for c in generated for g in ngrams(c, n))
    scale = len(generated) / len(training)
    table = CountRatioTable(n, min_train_count, len(training), len(generated))
    for gram in sorted(train_counts, key=lambda g: tuple(map(str, g))):
        m = train_counts[gram]
        if m < min_train_count:
            continue
        expected = m * scale
        observed = test_counts.get(gram, 0)
        table.rows.append(CountRatioRow(gram, n, m, observed, expected, observed / expected))
    if table.rows:
        m_all = np.array([r.train_count for r in table.rows], dtype=np.float64)
        ratios = table.ratios
        # log2-spaced training-count bins
        idx = np.floor(np.log2(m_all / min_train_count)).astype(int)
        for b in np.unique(idx):
            sel = idx == b
            lo = min_train_count * 2.0 ** b
            table.bins.append((lo * math.sqrt(2.0), float(ratios[sel].mean()),
                               int(sel.sum())))
        edges = np.linspace(0.0, hist_max, hist_bins + 1)
        counts, _ = np.histogram(np.minimum(ratios, hist_max), bins=edges)
        table.hist_edges = edges.tolist()
        table.hist_counts = counts.tolist()
    return table


def repeated_caption_table(generated: Iterable[Tokens | str]) -> list[tuple[str, int]]:
    """Exact-duplicate counts, most frequent first, ties by caption text."""
    texts = [g if isinstance(g, str) else " ".join(map(str, g)) for g in generated]
    counts = Counter(texts)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class DiversityReport:
    """Per-image diversity (averaged with equal image weight) plus corpus stats."""

    variant: str
    n_images: int
    div1: float | None
    div2: float | None
    mbleu4: float | None
    vocab_size: int
    pct_novel: float
    vocab_curve: dict
    per_image: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"variant": self.variant, "n_images": self.n_images, "div1": self.div1,
                "div2": self.div2, "mbleu4": self.mbleu4, "vocab_size": self.vocab_size,
                "pct_novel": self.pct_novel}


def diversity_report(sets: Mapping[Hashable, Sequence[Tokens]], training: Iterable[Tokens],
                     variant: str = "5 of 5") -> DiversityReport:
    """Report for caption sets keyed by image.

    ``"1 of 5"`` keeps only the first (best-ranked) caption per image and
    reports corpus statistics only.
    """
    training = list(training)
    if variant.startswith("1 of"):
        flat = [caps[0] for caps in sets.values()]
        cs = corpus_stats(flat, training)
        return DiversityReport(variant, len(sets), None, None, None,
                               cs.vocab_size, cs.pct_novel, cs.vocab_curve)
    per_image = {}
    for image_id, caps in sets.items():
        caps = [c for c in caps if len(c)]
        if not caps:
            continue
        per_image[image_id] = (div_n(caps, 1), div_n(caps, 2),
                               mbleu(caps) if len(caps) >= 2 else None)
    flat = [c for caps in sets.values() for c in caps]
    cs = corpus_stats(flat, training)
    vals = list(per_image.values())
    mb = [v[2] for v in vals if v[2] is not None]
    return DiversityReport(
        variant, len(sets),
        float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])),
        float(np.mean(mb)) if mb else None,
        cs.vocab_size, cs.pct_novel, cs.vocab_curve, per_image)
