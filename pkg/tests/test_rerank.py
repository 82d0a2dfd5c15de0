import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from firstrank.backend import BackendError, OracleBackend, PromptWindow, ScriptedBackend
from firstrank.core import CandidateList, ContractError, IdentifierScheme, WindowConfig
from firstrank.rerank import (
    PermutationParseError,
    RerankConfig,
    RerankError,
    RerankMode,
    build_prompt,
    order_by_logits,
    parse_permutation,
    rank_window_single_token,
    rerank_run,
    slide_rerank,
    window_starts,
)

LETTERS = IdentifierScheme()


def first_stage(qid, n, rng=None):
    """n candidates d000.. in first-stage order."""
    return CandidateList.from_order(qid, [f"d{i:03d}" for i in range(n)])


def simulate_schedule(doc_ids, scores, m, s):
    """Independent re-derivation of the back-to-front schedule with a perfect sorter."""
    docs = list(doc_ids)
    n = len(docs)
    start = max(0, n - m)
    while True:
        docs[start:start + m] = sorted(docs[start:start + m], key=lambda d: -scores[d])
        if start == 0:
            break
        start = max(0, start - s)
    return docs


# -- prompt ---------------------------------------------------------------------

def test_build_prompt_lists_identifiers_in_order():
    w = build_prompt("q1", "what is bm25", [("d1", "first\npassage"), ("d2", "second")], LETTERS)
    lines = w.rendered_prompt.splitlines()
    assert "A. first passage" in lines and "B. second" in lines
    assert lines.index("A. first passage") + 1 == lines.index("B. second")
    assert not any(line.startswith("C. ") for line in lines)
    assert w.identifiers == ["A", "B"] and w.doc_ids == ("d1", "d2")


def test_build_prompt_truncates_and_flags():
    w = build_prompt("q1", "q", [("d1", "x" * 1500), ("d2", "short")], LETTERS)
    assert w.truncated == ("d1",)
    assert ("A", "x" * 1000) in w.passages


def test_build_prompt_deterministic():
    args = ("q1", "query", [("d1", "alpha"), ("d2", "beta")], LETTERS)
    assert build_prompt(*args).rendered_prompt.encode() == build_prompt(*args).rendered_prompt.encode()


# -- single-token ---------------------------------------------------------------

def _window(k):
    return build_prompt("q", "q", [(f"d{i}", "") for i in range(k)], LETTERS)


def test_order_by_logits_examples():
    assert order_by_logits(_window(3), {"A": 0.2, "B": 0.9, "C": 0.5}).order == (1, 2, 0)
    assert order_by_logits(_window(4), {"A": 1.0, "B": 1.0, "C": 1.0, "D": 1.0}).order == (0, 1, 2, 3)


def test_missing_identifier_in_logits_is_contract_error():
    with pytest.raises(ContractError):
        order_by_logits(_window(3), {"A": 0.2, "B": 0.9})
    with pytest.raises(ContractError):
        order_by_logits(_window(2), {"A": 0.2, "B": 0.9, "Z": 1.0})


def test_single_token_matches_argsort_with_oracle():
    rng = random.Random(1)
    scores = {f"d{i}": rng.random() for i in range(20)}
    w = build_prompt("q", "q", [(d, "") for d in scores], LETTERS)
    perm = rank_window_single_token(w, OracleBackend.from_doc_scores(scores))
    ids = list(scores)
    assert list(perm.order) == sorted(range(20), key=lambda i: -scores[ids[i]])


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=26))
def test_monotone_transform_invariance(values):
    w = _window(len(values))
    base = {LETTERS.alphabet[i]: v for i, v in enumerate(values)}
    for f in (lambda x: x + 7.0, lambda x: 3.0 * x, math.atan, lambda x: x ** 3):
        transformed = {k: f(v) for k, v in base.items()}
        # a strictly increasing map keeps equal inputs equal and distinct inputs ordered
        if len(set(transformed.values())) == len(set(base.values())):
            assert order_by_logits(w, transformed) == order_by_logits(w, base)


# -- parsing ----------------------------------------------------------------------

def test_parse_examples():
    assert parse_permutation("B > A > C", 3, LETTERS).order == (1, 0, 2)
    repairs = []
    assert parse_permutation("C > C > A", 3, LETTERS, "repair", repairs).order == (2, 0, 1)
    assert repairs
    with pytest.raises(PermutationParseError):
        parse_permutation("B > A", 3, LETTERS, "strict")


def test_parse_accepts_brackets_and_tight_separators():
    assert parse_permutation("[B] > [A] > [C]", 3, LETTERS, "strict").order == (1, 0, 2)
    assert parse_permutation("B>A>C", 3, LETTERS, "strict").order == (1, 0, 2)


@pytest.mark.parametrize("text", ["", "B > A > C > D", "B > A > A > C", "B, A, C", "B > a > C", "B > > A > C"])
def test_strict_rejects_malformed(text):
    with pytest.raises(PermutationParseError):
        parse_permutation(text, 3, LETTERS, "strict")


def test_repair_empty_text_is_identity_with_note():
    notes = []
    assert parse_permutation("", 4, LETTERS, "repair", notes).order == (0, 1, 2, 3)
    assert notes == ["no valid identifiers; kept window order"]


def test_repair_drops_garbage_and_out_of_window_ids():
    notes = []
    assert parse_permutation("Sure! D > Z > B ?? 7", 4, LETTERS, "repair", notes).order == (3, 1, 0, 2)
    assert any("dropped unknown" in n for n in notes)


def test_parse_rejects_bad_k():
    with pytest.raises(ContractError):
        parse_permutation("A", 0, LETTERS)
    with pytest.raises(ContractError):
        parse_permutation("A", 27, LETTERS)


# -- sliding window -------------------------------------------------------------

@pytest.mark.parametrize("n,m,s,expected", [
    (100, 20, 10, [80, 70, 60, 50, 40, 30, 20, 10, 0]),
    (4, 2, 1, [2, 1, 0]),
    (5, 20, 10, [0]),
    (25, 20, 10, [5, 0]),
    (23, 5, 5, [18, 13, 8, 3, 0]),
    (0, 20, 10, []),
])
def test_window_starts(n, m, s, expected):
    assert window_starts(n, m, s) == expected
    if n > m:
        assert len(expected) == 1 + math.ceil((n - m) / s)


def test_n4_m2_s1_bubbles_max_to_front():
    clist = first_stage("q", 4)
    scores = {"d000": 0.1, "d001": 0.4, "d002": 0.2, "d003": 0.9}
    cfg = RerankConfig(window=WindowConfig(2, 1))
    out, traces = slide_rerank(clist, OracleBackend.from_doc_scores(scores), cfg)
    # windows at 2, 1, 0 worked by hand
    assert out.doc_ids == ["d003", "d000", "d001", "d002"]
    assert out.doc_ids == simulate_schedule(clist.doc_ids, scores, 2, 1)
    assert len(traces) == 3


def test_short_list_single_window():
    clist = first_stage("q", 5)
    scores = {d: float(i) for i, d in enumerate(clist.doc_ids)}
    out, traces = slide_rerank(clist, OracleBackend.from_doc_scores(scores))
    assert len(traces) == 1
    assert out.doc_ids == list(reversed(clist.doc_ids))


def test_top10_of_100_exact():
    rng = random.Random(9)
    clist = first_stage("q", 100)
    scores = {d: rng.random() for d in clist.doc_ids}
    out, traces = slide_rerank(clist, OracleBackend.from_doc_scores(scores))
    assert len(traces) == 9
    assert out.doc_ids[:10] == sorted(scores, key=lambda d: -scores[d])[:10]
    assert out.doc_ids == simulate_schedule(clist.doc_ids, scores, 20, 10)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=1, max_value=60),
    st.integers(min_value=2, max_value=20).flatmap(
        lambda m: st.tuples(st.just(m), st.integers(min_value=1, max_value=m - 1))),
    st.integers(min_value=0, max_value=2**31),
)
def test_top_m_minus_s_guarantee(n, ms, seed):
    m, s = ms
    rng = random.Random(seed)
    clist = first_stage("q", n)
    scores = {d: rng.random() for d in clist.doc_ids}
    out, _ = slide_rerank(clist, OracleBackend.from_doc_scores(scores), RerankConfig(window=WindowConfig(m, s)))
    top = m - s
    assert out.doc_ids[:top] == sorted(scores, key=lambda d: -scores[d])[:top]
    assert sorted(out.doc_ids) == sorted(clist.doc_ids)


def test_modes_agree_with_oracle():
    rng = random.Random(4)
    for _ in range(20):
        n = rng.randint(1, 100)
        clist = first_stage("q", n)
        scores = {d: rng.random() for d in clist.doc_ids}
        backend = OracleBackend.from_doc_scores(scores)
        single, _ = slide_rerank(clist, backend, RerankConfig(mode=RerankMode.SINGLE_TOKEN))
        gen, _ = slide_rerank(clist, backend, RerankConfig(mode=RerankMode.GENERATION, repair_policy="strict"))
        assert single.doc_ids == gen.doc_ids


def test_traces_record_decode_steps():
    clist = first_stage("q", 100)
    backend = OracleBackend.from_doc_scores({d: 1.0 for d in clist.doc_ids})
    _, single = slide_rerank(clist, backend, RerankConfig(mode="single_token"))
    _, gen = slide_rerank(clist, backend, RerankConfig(mode="generation"))
    assert [t.decode_steps for t in single] == [1] * 9
    assert [t.decode_steps for t in gen] == [39] * 9
    for t in gen:
        assert sorted(t.input_doc_ids) == sorted(t.output_doc_ids)


def test_adversarial_generations_keep_permutation():
    rng = random.Random(13)
    junk = ["", "A", "Z > Z", "C > C > A", "I cannot rank these.", "B > 7 > [Q] > D", "A > B > C > D > E > F"]
    clist = first_stage("q", 57)
    backend = ScriptedBackend(lambda w: rng.choice(junk))
    out, traces = slide_rerank(clist, backend, RerankConfig(mode="generation", window=WindowConfig(8, 3)))
    assert sorted(out.doc_ids) == sorted(clist.doc_ids)
    assert any(t.repairs_applied for t in traces)


def test_strict_failure_aborts_query_with_partial_trace():
    clist = first_stage("q", 30)
    calls = iter(["A > B > C > D > E > F > G > H > I > J > K > L > M > N > O > P > Q > R > S > T",
                  "nonsense"])
    backend = ScriptedBackend(lambda w: next(calls))
    with pytest.raises(RerankError) as err:
        slide_rerank(clist, backend, RerankConfig(mode="generation", repair_policy="strict"))
    assert err.value.query_id == "q"
    assert len(err.value.traces) == 1
    assert isinstance(err.value.cause, PermutationParseError)


def test_empty_candidates_rejected():
    with pytest.raises(ContractError):
        slide_rerank(CandidateList("q", ()), OracleBackend.from_doc_scores({}))


def test_prompt_receives_passage_text():
    seen = []

    def script(window: PromptWindow):
        seen.append(window.rendered_prompt)
        return "A"

    clist = first_stage("q", 2)
    slide_rerank(clist, ScriptedBackend(script), RerankConfig(mode="generation"),
                 query_text="solar", texts={"d000": "sun power", "d001": "wind"})
    assert "A. sun power" in seen[0] and "B. wind" in seen[0] and "solar" in seen[0]


# -- whole runs -----------------------------------------------------------------

def test_rerank_run_two_queries_top10():
    rng = random.Random(21)
    run = {q: first_stage(q, 100) for q in ("q1", "q2")}
    hidden = {(q, d): rng.random() for q in run for d in run[q].doc_ids}
    backend = OracleBackend(lambda q, d: hidden[(q, d)])
    result = rerank_run(run, backend)
    assert result.ok and list(result.run) == ["q1", "q2"]
    for q in run:
        brute = sorted(run[q].doc_ids, key=lambda d: -hidden[(q, d)])
        assert result.run[q].doc_ids[:10] == brute[:10]


def test_rerank_run_empty():
    result = rerank_run({}, OracleBackend.from_doc_scores({}))
    assert result.run == {} and result.ok


def test_rerank_run_isolates_failed_query():
    run = {"good": first_stage("good", 10), "bad": first_stage("bad", 10)}

    def relevance(q, d):
        if q == "bad":
            raise BackendError("connection reset")
        return int(d[1:]) * 1.0

    result = rerank_run(run, OracleBackend(relevance))
    assert set(result.failures) == {"bad"}
    assert list(result.run) == ["good"]
    assert result.run["good"].doc_ids == list(reversed(run["good"].doc_ids))


def test_rerank_run_depth_cap_keeps_tail():
    clist = first_stage("q", 30)
    scores = {d: float(i) for i, d in enumerate(clist.doc_ids)}
    result = rerank_run({"q": clist}, OracleBackend.from_doc_scores(scores), RerankConfig(depth=10))
    out = result.run["q"].doc_ids
    assert out[:10] == list(reversed(clist.doc_ids[:10]))
    assert out[10:] == clist.doc_ids[10:]


def test_rerank_run_parallel_matches_serial():
    rng = random.Random(2)
    run = {f"q{i}": first_stage(f"q{i}", rng.randint(1, 60)) for i in range(12)}
    backend = OracleBackend(lambda q, d: (hash((q, d)) % 1000) / 1000)
    serial = rerank_run(run, backend, RerankConfig(parallelism=1))
    parallel = rerank_run(run, backend, RerankConfig(parallelism=4))
    assert list(serial.run) == list(parallel.run)
    assert all(serial.run[q] == parallel.run[q] for q in run)
