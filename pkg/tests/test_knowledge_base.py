import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrag.core import Frequency, Series, znormalize
from tsrag.errors import DataError, KBFormatError
from tsrag.knowledge_base import (
    Clustering,
    KBConfig,
    Segment,
    build_kb,
    default_k,
    dump_kb,
    kmeans_cluster,
    load_kb,
    parse_kb,
    save_kb,
    select_representatives,
    slice_count,
    slice_series,
)


def _series(n, sid="s", start=0.0):
    return Series(sid, Frequency.WEEKLY, [start + i * i % 7 for i in range(n)])


def _segs(contexts):
    return [Segment(i, "s", i, tuple(map(float, c)), (), 0.0, 1.0) for i, c in enumerate(contexts)]


def _enumerated_offsets(n, L, S):
    out, off = [], 0
    while off + L <= n:
        out.append(off)
        off += S
    return out


@pytest.mark.parametrize("n, L, S, H, offsets, with_cont", [
    (10, 4, 2, 0, [0, 2, 4, 6], []),
    (5, 5, 3, 0, [0], []),
    (10, 4, 2, 3, [0, 2, 4, 6], [0, 2]),
])
def test_slice_examples(n, L, S, H, offsets, with_cont):
    segs = slice_series(_series(n), L, S, H)
    assert [s.start_offset for s in segs] == offsets
    assert [s.start_offset for s in segs if s.continuation] == with_cont
    assert all(len(s.continuation) in (0, H) for s in segs)


def test_slice_errors():
    with pytest.raises(DataError, match="too short"):
        slice_series(_series(3), 4, 1)
    with pytest.raises(DataError):
        slice_series(_series(5), 2, 0)


@settings(max_examples=200)
@given(st.integers(1, 40), st.data())
def test_slice_count_property(n, data):
    L = data.draw(st.integers(1, n))
    S = data.draw(st.integers(1, 10))
    segs = slice_series(_series(n), L, S)
    assert len(segs) == slice_count(n, L, S) == len(_enumerated_offsets(n, L, S))


def test_segments_recover_raw_slices():
    s = Series("x", Frequency.DAILY, np.random.default_rng(0).normal(10, 3, 40))
    for seg in slice_series(s, 8, 3, 4):
        raw = np.asarray(s.values[seg.start_offset:seg.start_offset + 8])
        assert np.allclose(np.asarray(seg.context) * seg.norm_std + seg.norm_mean, raw, atol=1e-9)
        z, m, sd = znormalize(raw)
        assert seg.context == tuple(z) and (m, sd) == (seg.norm_mean, seg.norm_std)
        if seg.continuation:
            end = seg.start_offset + 8
            assert seg.continuation == s.values[end:end + 4]


def test_kmeans_separable():
    segs = _segs([[0, 0]] * 3 + [[9, 9]] * 3)
    for seed in range(5):
        c = kmeans_cluster(segs, 2, seed=seed)
        assert sorted(map(tuple, c.centroids.tolist())) == [(0, 0), (9, 9)]
        assert c.sse == 0


def test_kmeans_k_equals_n():
    segs = _segs([[1, 2], [3, 4], [5, 7]])
    c = kmeans_cluster(segs, 3, seed=1)
    assert c.sse == 0 and len(set(c.assignments.tolist())) == 3


def _best_two_partition(points):
    best = None
    for mask in itertools.product([0, 1], repeat=len(points)):
        if len(set(mask)) < 2:
            continue
        sse = 0.0
        for g in (0, 1):
            members = np.array([p for p, m in zip(points, mask) if m == g], dtype=float)
            sse += ((members - members.mean(axis=0)) ** 2).sum()
        best = sse if best is None else min(best, sse)
    return best


def test_kmeans_three_points_any_seed():
    assert _best_two_partition([[0], [2], [10]]) == 2.0
    segs = _segs([[0], [2], [10]])
    for seed in range(20):
        c = kmeans_cluster(segs, 2, seed=seed)
        assert c.sse == 2.0
        assert sorted(c.centroids.ravel().tolist()) == [1.0, 10.0]
        assert c.assignments[0] == c.assignments[1] != c.assignments[2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_kmeans_sse_non_increasing(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(5, 60)), int(rng.integers(1, 6))))
    k = int(rng.integers(1, len(pts) + 1))
    c = kmeans_cluster(pts, k, seed=seed)
    assert all(b <= a for a, b in zip(c.sse_history, c.sse_history[1:]))


def test_kmeans_deterministic_and_plusplus():
    pts = np.random.default_rng(5).normal(size=(80, 4))
    for init in ("random", "kmeans++"):
        a = kmeans_cluster(pts, 7, seed=11, init=init)
        b = kmeans_cluster(pts, 7, seed=11, init=init)
        assert np.array_equal(a.assignments, b.assignments)
        assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_errors():
    segs = _segs([[0], [1]])
    with pytest.raises(DataError):
        kmeans_cluster(segs, 3)
    with pytest.raises(DataError):
        kmeans_cluster(segs, 0)
    with pytest.raises(DataError):
        kmeans_cluster(segs, 1, init="bogus")


def test_select_representatives_examples():
    # tie at distance 1 from centroid 2 -> smaller kb_id
    segs = [Segment(7, "s", 0, (3.0,), (), 0, 1), Segment(4, "s", 1, (1.0,), (), 0, 1)]
    cl = Clustering(np.array([0, 0]), np.array([[2.0]]), 2.0, 1)
    assert select_representatives(segs, cl)[0].kb_id == 4

    segs = _segs([[0, 0], [4, 4], [5, 5]])
    cl = Clustering(np.array([0, 0, 0]), np.array([[3.0, 3.0]]), 0.0, 1)
    assert select_representatives(segs, cl)[0].context == (4.0, 4.0)

    segs = _segs([[1], [9]])
    cl = Clustering(np.array([0, 1]), np.array([[1.0], [9.0]]), 0.0, 1)
    assert [s.kb_id for s in select_representatives(segs, cl)] == [0, 1]


def test_select_skips_empty_clusters():
    segs = _segs([[1], [2]])
    cl = Clustering(np.array([2, 2]), np.array([[0.0], [5.0], [1.5]]), 0.5, 1)
    reps = select_representatives(segs, cl)
    assert [s.kb_id for s in reps] == [0]


def test_build_single_segment():
    s = Series("only", Frequency.WEEKLY, [1, 3, 2, 5])
    kb = build_kb([s], KBConfig(window_length=4, step=1, horizon=2, k=1))
    assert len(kb) == 1
    assert kb.entries[0].source_series_id == "only" and kb.entries[0].start_offset == 0
    assert kb.entries[0].continuation == ()


def _corpus(n=12, length=40, seed=0):
    rng = np.random.default_rng(seed)
    return [Series(f"W{i}", Frequency.WEEKLY, rng.normal(i, 1 + i % 3, length)) for i in range(n)]


def test_build_invariants():
    corpus = _corpus()
    cfg = KBConfig(window_length=8, step=4, horizon=3, k=10, seed=3)
    kb = build_kb(corpus, cfg)
    assert len(kb) <= 10
    assert [e.kb_id for e in kb.entries] == list(range(len(kb)))
    by_id = {s.id: s for s in corpus}
    keys = set()
    for e in kb.entries:
        raw = np.asarray(by_id[e.source_series_id].values[e.start_offset:e.start_offset + 8])
        assert np.allclose(np.asarray(e.context) * e.norm_std + e.norm_mean, raw, atol=1e-9)
        keys.add((e.source_series_id, e.start_offset))
    assert len(keys) == len(kb)


def test_build_default_k_and_short_series(caplog):
    corpus = _corpus(n=5) + [Series("tiny", Frequency.WEEKLY, [1, 2])]
    kb = build_kb(corpus, KBConfig(window_length=8, step=4, horizon=3))
    pool = 5 * slice_count(40, 8, 4)
    assert kb.build_meta.k == default_k(pool) == 5
    assert "skipped 1 series" in caplog.text


def test_build_errors():
    with pytest.raises(DataError, match="empty segment pool"):
        build_kb([Series("t", Frequency.WEEKLY, [1, 2])], KBConfig(4, 1, 1, k=1))
    with pytest.raises(DataError):
        build_kb(_corpus(n=1), KBConfig(window_length=8, step=4, horizon=3, k=100))
    with pytest.raises(DataError):
        build_kb([], KBConfig(4, 1, 1))


def test_build_determinism_bytes(tmp_path):
    cfg = KBConfig(window_length=8, step=2, horizon=4, k=9, seed=42)
    save_kb(build_kb(_corpus(), cfg), tmp_path / "a.kb")
    save_kb(build_kb(_corpus(), cfg), tmp_path / "b.kb")
    assert (tmp_path / "a.kb").read_bytes() == (tmp_path / "b.kb").read_bytes()


def test_round_trip(tmp_path):
    kb = build_kb(_corpus(), KBConfig(window_length=8, step=2, horizon=4, k=9, seed=1))
    save_kb(kb, tmp_path / "x.kb")
    assert load_kb(tmp_path / "x.kb") == kb
    single = build_kb([Series("only", Frequency.WEEKLY, [1, 3, 2, 5])], KBConfig(4, 1, 2, k=1))
    assert parse_kb(dump_kb(single)) == single


def test_float_formatting_round_trips():
    kb = build_kb(_corpus(n=3), KBConfig(window_length=5, step=5, horizon=2, k=2))
    text = dump_kb(kb)
    assert parse_kb(text) == kb
    assert dump_kb(parse_kb(text)) == text


@pytest.fixture
def kb_text():
    kb = build_kb(_corpus(n=4), KBConfig(window_length=6, step=3, horizon=2, k=4))
    return dump_kb(kb)


def test_load_wrong_context_length(kb_text):
    lines = kb_text.splitlines()
    lines[2] = lines[2].replace('"context":[', '"context":[0.5,', 1)
    with pytest.raises(KBFormatError) as exc:
        parse_kb("\n".join(lines))
    assert exc.value.line == 3 and exc.value.field == "context"


def test_load_truncated(kb_text):
    lines = kb_text.splitlines()
    with pytest.raises(KBFormatError, match="truncated"):
        parse_kb("\n".join(lines[:-1]) + "\n")
    cut = kb_text[: len(kb_text) - 40]
    with pytest.raises(KBFormatError) as exc:
        parse_kb(cut)
    assert exc.value.line == len(lines)


def test_load_version_mismatch(kb_text):
    with pytest.raises(KBFormatError, match="version"):
        parse_kb(kb_text.replace('"format_version":1', '"format_version":2', 1))


def test_load_missing_and_bad_fields(kb_text):
    lines = kb_text.splitlines()
    bad = lines[:]
    bad[1] = bad[1].replace('"source"', '"src"')
    with pytest.raises(KBFormatError) as exc:
        parse_kb("\n".join(bad))
    assert exc.value.line == 2 and exc.value.field == "source"
    bad = lines[:]
    bad[1] = bad[1].replace('"continuation":[', '"continuation":["x",')
    with pytest.raises(KBFormatError, match="continuation"):
        parse_kb("\n".join(bad))
    with pytest.raises(KBFormatError, match="empty"):
        parse_kb("")


def test_with_segments_assigns_fresh_ids():
    kb = build_kb(_corpus(n=4), KBConfig(window_length=6, step=3, horizon=2, k=4))
    extra = slice_series(_corpus(n=1)[0], 6, 10, 2)
    kb2 = kb.with_segments(extra)
    assert len(kb2) == len(kb) + len(extra)
    assert [e.kb_id for e in kb2.entries] == list(range(len(kb2)))
