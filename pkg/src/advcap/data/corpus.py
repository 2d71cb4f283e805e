"""Readers for caption corpora: COCO annotation JSON and line-delimited records."""
from __future__ import annotations

import json
import warnings
from collections import defaultdict
from pathlib import Path

from ..errors import DataError, SchemaError
from .vocab import UNK, Vocabulary, tokenize


def _parse_json(text: str, path) -> object:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from exc


def _require(record: dict, key: str, where: str):
    if not isinstance(record, dict) or key not in record:
        raise SchemaError(f"{where}: missing key {key!r}")
    return record[key]


def load_coco_captions(path, vocab: Vocabulary | None = None) -> dict[int, list[list[str]]]:
    """Tokenized captions keyed by image id.

    With ``vocab``, out-of-vocabulary words become ``<unk>``. Annotations
    whose image id is absent from ``images`` are kept with a warning.
    """
    path = Path(path)
    doc = _parse_json(path.read_text(encoding="utf-8"), path)
    annotations = _require(doc, "annotations", str(path))
    images = _require(doc, "images", str(path))
    known = {_require(img, "id", f"{path}: images[{i}]") for i, img in enumerate(images)}
    corpus: dict[int, list[list[str]]] = defaultdict(list)
    for i, ann in enumerate(annotations):
        where = f"{path}: annotations[{i}]"
        image_id = _require(ann, "image_id", where)
        caption = _require(ann, "caption", where)
        _require(ann, "id", where)
        if image_id not in known:
            warnings.warn(f"{where} references image id {image_id} not listed in images",
                          stacklevel=2)
        words = tokenize(caption)
        if vocab is not None:
            words = [w if w in vocab else UNK for w in words]
        corpus[image_id].append(words)
    return dict(corpus)


def load_caption_records(path) -> list[dict]:
    """Generated-caption records ``{image_id, caption, [rank], [log_prob]}``.

    Accepts line-delimited JSON, or a COCO annotation file (rank is then the
    annotation order within the image, starting at 1).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{") and '"annotations"' in stripped[:4096]:
        corpus = load_coco_captions(path)
        return [{"image_id": image_id, "caption": " ".join(words), "rank": r + 1}
                for image_id, caps in corpus.items() for r, words in enumerate(caps)]
    records = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON at byte offset "
                                f"{offset + len(line[: exc.pos].encode('utf-8'))}") from exc
            _require(rec, "image_id", f"{path}:{lineno}")
            _require(rec, "caption", f"{path}:{lineno}")
            records.append(rec)
        offset += len(line.encode("utf-8"))
    return records


def group_by_image(records: list[dict]) -> dict:
    """Captions per image, ordered by rank when ranks are present."""
    groups: dict = defaultdict(list)
    for order, rec in enumerate(records):
        groups[rec["image_id"]].append((rec.get("rank", order), order, rec["caption"]))
    return {k: [c for _, _, c in sorted(v)] for k, v in groups.items()}
