"""Okapi BM25 over a local passage corpus.

Tokenization is deliberately simple and deterministic: Unicode lowercase,
non-alphanumerics mapped to spaces, whitespace split. No stemming, no
stopword removal. IDF uses the +1-smoothed form so scores stay
non-negative.
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import FormatError, ParseError, ValidationError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 5

INDEX_MAGIC = b"EIBM"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Passage:
    """One retrievable text chunk."""

    doc_id: str
    text: str
    title: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise ValidationError(f"passage {self.doc_id!r} has empty text")


def tokenize(text: str) -> list[str]:
    chars = [(c.lower() if c.isalnum() else " ") for c in text]
    return "".join(chars).split()


@dataclass
class BM25Index:
    """Inverted index with Okapi BM25 scoring."""

    passages: list[Passage]
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc ordinal, tf)]
    doc_lengths: list[int]
    k1: float
    b: float
    avg_doc_len: float = field(init=False)

    def __post_init__(self):
        self.avg_doc_len = sum(self.doc_lengths) / len(self.doc_lengths)

    @property
    def n_docs(self) -> int:
        return len(self.passages)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(
    corpus: Sequence[Passage], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> BM25Index:
    """Index the corpus over tokens of title+text."""
    if not corpus:
        raise ValidationError("corpus is empty")
    if k1 <= 0:
        raise ValidationError(f"k1 must be > 0, got {k1}")
    if not (0.0 <= b <= 1.0):
        raise ValidationError(f"b must be in [0, 1], got {b}")
    seen = set()
    for p in corpus:
        if p.doc_id in seen:
            raise ValidationError(f"duplicate doc_id {p.doc_id!r}")
        seen.add(p.doc_id)

    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths = []
    for ordinal, p in enumerate(corpus):
        text = f"{p.title} {p.text}" if p.title else p.text
        tokens = tokenize(text)
        doc_lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((ordinal, tf))
    return BM25Index(
        passages=list(corpus), postings=postings, doc_lengths=doc_lengths, k1=k1, b=b
    )


def search(index: BM25Index, query: str, k: int = DEFAULT_TOP_K) -> list[tuple[Passage, float]]:
    """Top-k passages by BM25 score.

    Sorted by score descending, ties by ascending doc_id; zero-score
    documents are excluded, so an all-out-of-vocabulary query returns [].
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    scores: dict[int, float] = {}
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            dl = index.doc_lengths[ordinal]
            denom = tf + index.k1 * (1.0 - index.b + index.b * dl / index.avg_doc_len)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (index.k1 + 1.0) / denom
    ranked = [
        (index.passages[ordinal], score) for ordinal, score in scores.items() if score > 0.0
    ]
    ranked.sort(key=lambda ps: (-ps[1], ps[0].doc_id))
    return ranked[:k]


def load_corpus(path) -> list[Passage]:
    """Read passages from JSONL: {"doc_id": str, "title": str?, "text": str}."""
    passages = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if "doc_id" not in obj or "text" not in obj:
                raise ParseError("passage needs 'doc_id' and 'text'", line=line_no)
            passages.append(
                Passage(doc_id=str(obj["doc_id"]), text=str(obj["text"]), title=obj.get("title"))
            )
    return passages


def save_index(index: BM25Index, path) -> None:
    """Persist the index: magic `EIBM`, u32 version, u64 length, JSON payload."""
    payload = json.dumps(
        {
            "k1": index.k1,
            "b": index.b,
            "doc_lengths": index.doc_lengths,
            "postings": {t: p for t, p in index.postings.items()},
            "passages": [
                {"doc_id": p.doc_id, "text": p.text, "title": p.title} for p in index.passages
            ],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IQ", INDEX_VERSION, len(payload)))
        fh.write(payload)


def load_index(path) -> BM25Index:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != INDEX_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {INDEX_MAGIC!r}")
    try:
        version, length = struct.unpack_from("<IQ", data, 4)
    except struct.error as exc:
        raise FormatError("truncated header") from exc
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    payload = data[16 : 16 + length]
    if len(payload) != length:
        raise FormatError("truncated index payload")
    obj = json.loads(payload.decode("utf-8"))
    return BM25Index(
        passages=[Passage(doc_id=p["doc_id"], text=p["text"], title=p.get("title")) for p in obj["passages"]],
        postings={t: [tuple(pair) for pair in plist] for t, plist in obj["postings"].items()},
        doc_lengths=obj["doc_lengths"],
        k1=obj["k1"],
        b=obj["b"],
    )
