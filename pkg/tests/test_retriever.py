import io
import math
import random
from collections import Counter

import pytest

from firstrank.core import ContractError, Document, Query
from firstrank.retriever import (
    Bm25Params,
    RetrievalConfig,
    bm25_score,
    build_index,
    load_index,
    save_index,
    search,
    tokenize,
)

PARAMS = Bm25Params()


def brute_force_search(docs, query_text, params=PARAMS, k=100):
    """Score every document straight from its text, then sort."""
    tokenized = [tokenize(d.text) for d in docs]
    n = len(docs)
    avg = sum(map(len, tokenized)) / n if n else 0.0
    q_terms = tokenize(query_text)
    scored = []
    for doc, terms in zip(docs, tokenized):
        counts = Counter(terms)
        score = 0.0
        for t in q_terms:
            tf = counts[t]
            if not tf:
                continue
            df = sum(1 for other in tokenized if t in other)
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            ratio = len(terms) / avg if avg > 0 else 1.0
            score += idf * tf * (params.k1 + 1) / (tf + params.k1 * (1 - params.b + params.b * ratio))
        if score > 0:
            scored.append((doc.id, score))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


@pytest.mark.parametrize("text,expected", [
    ("Hello, World!", ["hello", "world"]),
    ("", []),
    ("BM25-based re-rank", ["bm25", "based", "re", "rank"]),
    ("  multiple   spaces\tand_underscores ", ["multiple", "spaces", "and", "underscores"]),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


def test_build_index_single_doc():
    index = build_index([Document("d1", "a b a")])
    assert index.postings == {"a": [(0, 2)], "b": [(0, 1)]}
    assert index.doc_lengths == [3]
    assert index.avg_doc_length == 3.0


def test_build_index_three_doc_hand_counts():
    docs = [
        Document("d1", "the cat sat"),
        Document("d2", "the cat and the dog"),
        Document("d3", "a dog"),
    ]
    index = build_index(docs)
    assert index.doc_count == 3
    assert index.df("the") == 2 and index.tf("the", 1) == 2 and index.tf("the", 0) == 1
    assert index.df("cat") == 2 and index.df("dog") == 2 and index.df("a") == 1
    assert index.tf("dog", 0) == 0
    assert index.doc_lengths == [3, 5, 2]
    assert index.avg_doc_length == pytest.approx(10 / 3)
    for plist in index.postings.values():
        assert [o for o, _ in plist] == sorted(o for o, _ in plist)


def test_empty_corpus():
    index = build_index([])
    assert index.doc_count == 0
    assert len(search(index, PARAMS, Query("q", "anything"))) == 0


def test_duplicate_doc_id_rejected():
    with pytest.raises(ContractError):
        build_index([Document("d1", "a"), Document("d1", "b")])


def test_bm25_single_doc_value():
    index = build_index([Document("d1", "x")])
    assert bm25_score(index, PARAMS, ["x"], 0) == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert bm25_score(index, PARAMS, ["x"], 0) == pytest.approx(0.28768, abs=1e-5)


def test_bm25_absent_term_is_zero():
    index = build_index([Document("d1", "x y"), Document("d2", "z")])
    assert bm25_score(index, PARAMS, ["z"], 0) == 0.0


def test_bm25_k1_invariance_at_unit_tf_and_average_length():
    index = build_index([Document("d1", "x y"), Document("d2", "x z")])
    a = bm25_score(index, Bm25Params(0.9, 0.4), ["x"], 0)
    b = bm25_score(index, Bm25Params(1.8, 0.4), ["x"], 0)
    assert a == pytest.approx(b, rel=1e-12)


def test_bm25_params_validation():
    with pytest.raises(ContractError):
        Bm25Params(-0.1, 0.4)
    with pytest.raises(ContractError):
        Bm25Params(0.9, 1.5)


def test_search_depth_and_empty_queries():
    docs = [Document(f"d{i}", "alpha beta" if i % 2 else "gamma") for i in range(6)]
    index = build_index(docs)
    hits = search(index, PARAMS, Query("q", "alpha"), RetrievalConfig(100))
    assert hits.doc_ids == ["d1", "d3", "d5"]
    assert len(search(index, PARAMS, Query("q", "omega"))) == 0
    assert len(search(index, PARAMS, Query("q", "alpha"), RetrievalConfig(1))) == 1


def _random_corpus(rng, n_docs, vocab):
    return [
        Document(f"doc{i:03d}", " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 12))))
        for i in range(n_docs)
    ]


def test_search_matches_brute_force_on_20_docs():
    rng = random.Random(11)
    vocab = [f"w{i}" for i in range(15)]
    docs = _random_corpus(rng, 20, vocab)
    index = build_index(docs)
    for _ in range(10):
        q = " ".join(rng.choice(vocab) for _ in range(3))
        got = search(index, PARAMS, Query("q", q), RetrievalConfig(20))
        expected = brute_force_search(docs, q, k=20)
        assert got.doc_ids == [d for d, _ in expected]
        for entry, (_, score) in zip(got.entries, expected):
            assert entry.score == pytest.approx(score, rel=1e-12)


def test_disjoint_vocabulary_documents_do_not_change_results():
    rng = random.Random(5)
    docs = _random_corpus(rng, 30, [f"a{i}" for i in range(10)])
    extra = [Document(f"zz{i}", "b1 b2 b3") for i in range(10)]
    small, big = build_index(docs), build_index(docs + extra)
    q = Query("q", "a1 a2 a3")
    assert set(search(small, PARAMS, q).doc_ids) == set(search(big, PARAMS, q).doc_ids)
    # One query term and no length normalisation: idf is a shared factor, order is fixed.
    flat = Bm25Params(0.9, 0.0)
    single = Query("q", "a4")
    assert search(small, flat, single).doc_ids == search(big, flat, single).doc_ids


def test_index_save_load_roundtrip():
    rng = random.Random(2)
    docs = _random_corpus(rng, 40, [f"t{i}" for i in range(25)] + ["ünï", "çafé"])
    index = build_index(docs)
    buf = io.StringIO()
    save_index(index, buf)
    buf.seek(0)
    assert load_index(buf) == index


def test_load_index_rejects_foreign_file():
    with pytest.raises(ValueError):
        load_index(io.StringIO('{"format": "other"}\n{}'))
    with pytest.raises(ValueError):
        load_index(io.StringIO("garbage"))
