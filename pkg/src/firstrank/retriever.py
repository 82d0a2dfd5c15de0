"""In-memory inverted index with BM25 scoring.

Scoring uses the Lucene idf variant ``ln(1 + (N - df + 0.5) / (df + 0.5))``
with k1=0.9, b=0.4 by default. No stemming and no stopword removal.
"""

from __future__ import annotations

import bisect
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .core import CandidateList, ContractError, Document, Query, ScoredDoc, ranking_key

INDEX_FORMAT = "firstrank-bm25-index"
INDEX_VERSION = 1

DEFAULT_DEPTH = 100

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self) -> None:
        if not self.k1 >= 0:
            raise ContractError(f"k1 must be >= 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise ContractError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class RetrievalConfig:
    depth: int = DEFAULT_DEPTH

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ContractError(f"retrieval depth must be >= 1, got {self.depth}")


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    doc_lengths: list[int] = field(default_factory=list)
    doc_ids: list[str] = field(default_factory=list)
    avg_doc_length: float = 0.0

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def vocabulary_size(self) -> int:
        return len(self.postings)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, ordinal: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, ordinal, key=lambda p: p[0])
        if i < len(plist) and plist[i][0] == ordinal:
            return plist[i][1]
        return 0

    def idf(self, term: str) -> float:
        n, df = self.doc_count, self.df(term)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_index(docs: Iterable[Document]) -> InvertedIndex:
    index = InvertedIndex()
    seen: set[str] = set()
    for ordinal, doc in enumerate(docs):
        if doc.id in seen:
            raise ContractError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
        terms = tokenize(doc.text)
        index.doc_ids.append(doc.id)
        index.doc_lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            index.postings.setdefault(term, []).append((ordinal, tf))
    if index.doc_lengths:
        index.avg_doc_length = sum(index.doc_lengths) / len(index.doc_lengths)
    return index


def _term_weight(idf: float, tf: int, doc_len: int, avg_len: float, params: Bm25Params) -> float:
    # Zero-length corpora have avg_len 0; the length ratio is then taken as 1.
    ratio = doc_len / avg_len if avg_len > 0 else 1.0
    return idf * tf * (params.k1 + 1) / (tf + params.k1 * (1 - params.b + params.b * ratio))


def bm25_score(
    index: InvertedIndex, params: Bm25Params, query_terms: Sequence[str], ordinal: int
) -> float:
    """BM25 score of one document. Repeated query terms contribute once per occurrence."""
    if not 0 <= ordinal < index.doc_count:
        raise ContractError(f"document ordinal {ordinal} out of range")
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, ordinal)
        if tf:
            score += _term_weight(
                index.idf(term), tf, index.doc_lengths[ordinal], index.avg_doc_length, params
            )
    return score


def search(
    index: InvertedIndex,
    params: Bm25Params,
    query: Query | str,
    config: RetrievalConfig = RetrievalConfig(),
) -> CandidateList:
    """Top-k documents by BM25 score, term-at-a-time over the postings."""
    qid, text = (query.id, query.text) if isinstance(query, Query) else ("q", query)
    terms = tokenize(text)
    acc: dict[int, float] = {}
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            acc[ordinal] = acc.get(ordinal, 0.0) + _term_weight(
                idf, tf, index.doc_lengths[ordinal], index.avg_doc_length, params
            )
    hits = [ScoredDoc(index.doc_ids[o], s) for o, s in acc.items() if s > 0]
    hits.sort(key=ranking_key)
    return CandidateList(qid, tuple(hits[: config.depth]))


def save_index(index: InvertedIndex, sink: TextIO) -> None:
    header = {"format": INDEX_FORMAT, "version": INDEX_VERSION}
    sink.write(json.dumps(header) + "\n")
    body = {
        "doc_ids": index.doc_ids,
        "doc_lengths": index.doc_lengths,
        "avg_doc_length": index.avg_doc_length,
        "postings": {t: [list(p) for p in plist] for t, plist in index.postings.items()},
    }
    json.dump(body, sink, ensure_ascii=False, separators=(",", ":"))
    sink.write("\n")


def load_index(source: TextIO) -> InvertedIndex:
    header_line = source.readline()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError:
        raise ValueError("not an index file: missing header") from None
    if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
        raise ValueError("not an index file: unexpected header")
    if header.get("version") != INDEX_VERSION:
        raise ValueError(f"unsupported index version {header.get('version')}")
    body = json.loads(source.read())
    return InvertedIndex(
        postings={t: [(int(o), int(tf)) for o, tf in plist] for t, plist in body["postings"].items()},
        doc_lengths=[int(n) for n in body["doc_lengths"]],
        doc_ids=list(body["doc_ids"]),
        avg_doc_length=float(body["avg_doc_length"]),
    )
