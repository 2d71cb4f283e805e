"""Token normalization, the Vocabulary and the Caption value type."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import ConfigError, ContractError, DataError

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = range(4)

# bump when tokenize() changes; corpora tokenized by different versions
# are not comparable
TOKENIZER_VERSION = "1"

_FINAL_PUNCT = re.compile(r"[\s.!?;,:]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip sentence-final punctuation, split on whitespace."""
    return _FINAL_PUNCT.sub("", text.strip().lower()).split()


@dataclass(frozen=True)
class Caption:
    """Word ids between START and END (neither sentinel is stored)."""

    tokens: tuple[int, ...]
    truncated: bool = False

    def __len__(self):
        return len(self.tokens)


class Vocabulary:
    def __init__(self, tokens: Sequence[str], object_words: Sequence[str] = ()):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ConfigError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted(t for t, c in Counter(tokens).items() if c > 1)
            raise ConfigError(f"duplicate vocabulary tokens: {dupes[:5]}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        missing = [w for w in object_words if w not in self.index]
        if missing:
            raise ConfigError(f"object words missing from vocabulary: {missing}")
        self.object_words = list(object_words)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    @property
    def object_ids(self) -> list[int]:
        return [self.index[w] for w in self.object_words]

    def encode(self, text_or_tokens, max_words: int | None = None) -> Caption:
        words = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else list(text_or_tokens)
        ids = tuple(self.id(w) for w in words)
        if max_words is not None and len(ids) > max_words:
            return Caption(ids[:max_words], truncated=True)
        return Caption(ids)

    def decode(self, caption: Caption | Sequence[int]) -> str:
        ids = caption.tokens if isinstance(caption, Caption) else caption
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DataError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
        return " ".join(self.tokens[i] for i in ids)

    def hash(self) -> str:
        payload = "\n".join(self.tokens) + "\n#objects\n" + "\n".join(self.object_words)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path, object_words: Sequence[str] = ()) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines, object_words)


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 1,
                     object_words: Sequence[str] = (), extra_words: Sequence[str] = ()) -> Vocabulary:
    """Ids by descending count, ties alphabetical; rare tokens fall to UNK.

    Object words below ``min_count`` are appended after the counted tokens so
    the object subset is always addressable, then any ``extra_words`` not yet
    present, in the given order.
    """
    if min_count < 1:
        raise ContractError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    n_captions = 0
    for caption in corpus:
        n_captions += 1
        counts.update(caption)
    if n_captions == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    seen = set(kept)
    for w in list(object_words) + list(extra_words):
        if w not in seen and w not in RESERVED:
            kept.append(w)
            seen.add(w)
    return Vocabulary(list(RESERVED) + kept, object_words)
