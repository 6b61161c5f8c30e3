import math

import numpy as np
import pytest

from transducer_fsa.fsa import (
    Arc,
    Fsa,
    best_path,
    estimate_bigram_arpa,
    intersect_linear,
    ngram_graph_from_arpa,
    parse_fsa_text,
    total_logprob,
    trivial_graph,
)
from transducer_fsa.fsa_search import (
    FsaSearchParams,
    SearchConsistencyError,
    expand_arcs,
    fsa_beam_search,
    get_contexts,
    init_streams,
    lattice_to_best_seq,
    lattice_to_text,
    prune_streams,
)
from transducer_fsa.search import viterbi_oracle_s1

from conftest import random_feats, s1_logadd_dp, small_model

UNPRUNED = FsaSearchParams.unpruned()


def set_states(stream, ctx, gstate, score):
    n = len(ctx)
    stream.ctx = np.asarray(ctx, dtype=np.int64)
    stream.gstate = np.asarray(gstate, dtype=np.int64)
    stream.score = np.asarray(score, dtype=np.float64)
    stream.node = np.arange(n, dtype=np.int64)
    stream.num_nodes = n


def uniform_lp(rows, V):
    return np.full((rows, V), -math.log(V))


def lattice_frames(lat):
    """Frame index of each lattice node; asserts all paths agree."""
    frame = {0: 0}
    changed = True
    while changed:
        changed = False
        for a in lat.arcs:
            if a.src in frame:
                f = frame[a.src] + 1
                if a.dst in frame:
                    assert frame[a.dst] == f
                else:
                    frame[a.dst] = f
                    changed = True
    return frame


def random_graph(rng, V, n_states=3, n_arcs=8):
    arcs = [Arc(int(rng.integers(n_states)), int(rng.integers(n_states)), int(rng.integers(1, V)), float(-rng.random())) for _ in range(n_arcs)]
    # keep every token reachable from every state so decoding never dead-ends
    arcs += [Arc(s, 0, k, -2.0) for s in range(n_states) for k in range(1, V)]
    return Fsa(n_states, tuple(arcs), {s: 0.0 for s in range(n_states)})


# -- init / get_contexts -----------------------------------------------------------


def test_init_single_stream():
    (s,) = init_streams([trivial_graph(3)], FsaSearchParams())
    (st,) = s.active_states()
    assert (st.context, st.graph_state, st.score) == (0, 0, 0.0)


def test_init_rejects_blank_arcs():
    g = Fsa(1, (Arc(0, 0, 0, 0.0),), {0: 0.0})
    with pytest.raises(ValueError):
        init_streams([g], FsaSearchParams())


def test_streams_are_independent():
    streams = init_streams([trivial_graph(3)] * 3, FsaSearchParams())
    set_states(streams[1], [4, 5], [0, 0], [-1.0, -2.0])
    assert len(streams[0].ctx) == 1 and len(streams[2].ctx) == 1
    assert streams[0].ctx is not streams[2].ctx


def test_get_contexts_dedups():
    (s,) = init_streams([Fsa(2, (Arc(0, 1, 2, 0.0), Arc(1, 0, 1, 0.0)), {0: 0.0})], FsaSearchParams())
    set_states(s, [0, 0, 1 * 3 + 2], [0, 1, 0], [0.0, -1.0, -2.0])
    shape, ctx = get_contexts([s], 3)
    assert shape.row_splits.tolist() == [0, 2]
    assert ctx.tolist() == [[0, 0], [1, 2]]


def test_get_contexts_all_done():
    streams = init_streams([trivial_graph(3)] * 2, FsaSearchParams(), num_frames=[0, 0])
    shape, ctx = get_contexts(streams, 3)
    assert shape.num_rows == 2 and shape.tot_size == 0
    assert ctx.shape == (0, 2)


def test_get_contexts_ragged_consistency():
    rng = np.random.default_rng(0)
    streams = init_streams([trivial_graph(4)] * 5, FsaSearchParams())
    for s in streams:
        n = int(rng.integers(1, 6))
        set_states(s, rng.integers(0, 16, size=n), np.zeros(n), -rng.random(n))
    shape, ctx = get_contexts(streams, 4)
    for i, s in enumerate(streams):
        rows = ctx[shape.row_splits[i] : shape.row_splits[i + 1]]
        assert sorted(a * 4 + b for a, b in rows) == sorted(set(s.ctx.tolist()))
    assert np.array_equal(shape.row_ids, np.repeat(np.arange(5), np.diff(shape.row_splits)))


# -- expand -------------------------------------------------------------------------


def test_expand_trivial_v2():
    (s,) = init_streams([trivial_graph(2)], UNPRUNED)
    get_contexts([s], 2)
    expand_arcs([s], uniform_lp(1, 2))
    cands = s.candidates()
    assert len(cands) == 2 and s.num_candidate_arcs() == 2
    assert sorted(c.context for c in cands) == [0, 1]


def test_expand_merges_duplicate_targets_keeping_arcs():
    g = Fsa(3, (Arc(0, 2, 1, -0.5), Arc(1, 2, 1, -0.25)), {2: 0.0})
    (s,) = init_streams([g], UNPRUNED)
    set_states(s, [0, 0], [0, 1], [-1.0, -3.0])
    get_contexts([s], 2)
    lp = np.log([[0.6, 0.4]])
    expand_arcs([s], lp)
    merged = [c for c in s.candidates() if c.graph_state == 2]
    assert len(merged) == 1
    assert merged[0].context == 1
    assert merged[0].score == pytest.approx(max(-1.0 - 0.5, -3.0 - 0.25) + math.log(0.4))
    assert s.num_candidate_arcs() == 4  # two blanks plus two token arcs


def test_expand_scores_hand_computed():
    V = 3
    g = Fsa(2, (Arc(0, 1, 1, -0.1), Arc(0, 0, 2, -0.2), Arc(1, 0, 2, -0.3)), {0: 0.0, 1: 0.0})
    (s,) = init_streams([g], UNPRUNED)
    set_states(s, [0, 1], [0, 1], [-1.0, -2.0])
    get_contexts([s], V)
    lp = np.log([[0.5, 0.3, 0.2], [0.6, 0.1, 0.3]])  # rows for contexts 0 and 1
    expand_arcs([s], lp)
    got = {(c.context, c.graph_state): c.score for c in s.candidates()}
    want = {
        (0, 0): -1.0 + math.log(0.5),
        (1, 1): max(-1.0 - 0.1 + math.log(0.3), -2.0 + math.log(0.6)),
        (2, 0): -1.0 - 0.2 + math.log(0.2),
        (1 * V + 2, 0): -2.0 - 0.3 + math.log(0.3),
    }
    assert got.keys() == want.keys()
    for k in want:
        assert got[k] == pytest.approx(want[k])


def test_expand_row_mismatch():
    (s,) = init_streams([trivial_graph(3)], UNPRUNED)
    get_contexts([s], 3)
    with pytest.raises(SearchConsistencyError):
        expand_arcs([s], uniform_lp(2, 3))


# -- prune ---------------------------------------------------------------------------


def _five_candidates(params):
    V = 5
    (s,) = init_streams([trivial_graph(V)], params)
    get_contexts([s], V)
    expand_arcs([s], np.log([[0.05, 0.4, 0.1, 0.3, 0.15]]))
    return s


def test_prune_noop_when_unlimited():
    s = _five_candidates(UNPRUNED)
    n = len(s.candidates())
    prune_streams([s])
    assert len(s.ctx) == n == 5


def test_prune_top_k():
    s = _five_candidates(FsaSearchParams(math.inf, 2, None))
    prune_streams([s])
    assert sorted(s.ctx.tolist()) == [1, 3]


def test_prune_ties_prefer_smaller_context():
    V = 4
    (s,) = init_streams([trivial_graph(V)], FsaSearchParams(math.inf, 2, None))
    get_contexts([s], V)
    expand_arcs([s], np.log([[0.1, 0.3, 0.3, 0.3]]))
    prune_streams([s])
    assert s.ctx.tolist() == [1, 2]


def test_prune_soundness_and_cardinality():
    rng = np.random.default_rng(1)
    params = FsaSearchParams(beam=3.0, max_states=6, max_contexts=3)
    for seed in range(10):
        m = small_model(seed, V=4, scale=2.0)
        f = random_feats(rng, 8)
        (s,) = init_streams([random_graph(rng, 4)], params, [8])
        enc = m.encode(f)
        for t in range(8):
            shape, ctx = get_contexts([s], 4)
            dec = m.decode(ctx[:, 0] * 4 + ctx[:, 1])
            expand_arcs([s], m.join(enc[np.full(len(ctx), t)], dec))
            best = max(c.score for c in s.candidates())
            prune_streams([s])
            assert len(s.ctx) <= 6
            assert len(set(s.ctx.tolist())) <= 3
            assert np.all(s.score >= best - 3.0)


# -- full search ---------------------------------------------------------------------


def test_total_equals_s1_dp_and_best_path_equals_viterbi():
    rng = np.random.default_rng(2)
    for seed in range(10):
        V = int(rng.integers(2, 6))
        m = small_model(seed, V=V, scale=2.0)
        f = random_feats(rng, int(rng.integers(1, 9)))
        (lat,) = fsa_beam_search(m, [f], [trivial_graph(V)], UNPRUNED)
        assert abs(total_logprob(lat) - s1_logadd_dp(m, f)) <= 1e-6
        ys, score = viterbi_oracle_s1(m, f)
        p = best_path(lat)
        assert [x for x in p.labels if x] == ys
        assert p.score == pytest.approx(score, abs=1e-6)


def test_lattice_invariants():
    rng = np.random.default_rng(3)
    m = small_model(3, V=4, scale=2.0)
    lens = [5, 9, 1]
    lats = fsa_beam_search(m, [random_feats(rng, T) for T in lens], [trivial_graph(4)] * 3, FsaSearchParams())
    for lat, T in zip(lats, lens):
        frame = lattice_frames(lat)
        assert all(frame[s] == T for s in lat.finals)
        assert all(v == 0.0 for v in lat.finals.values())
        assert len(best_path(lat).labels) == T


def test_batching_transparency():
    rng = np.random.default_rng(4)
    m = small_model(4, V=5, scale=2.0)
    feats = [random_feats(rng, int(T)) for T in rng.integers(2, 12, size=8)]
    graphs = [random_graph(rng, 5) for _ in feats]
    params = FsaSearchParams(beam=6.0, max_states=8, max_contexts=4)
    batched = fsa_beam_search(m, feats, graphs, params)
    assert batched == [fsa_beam_search(m, [f], [g], params)[0] for f, g in zip(feats, graphs)]
    order = rng.permutation(8)
    shuffled = fsa_beam_search(m, [feats[i] for i in order], [graphs[i] for i in order], params)
    assert [shuffled[list(order).index(i)] for i in range(8)] == batched


def _path_scores(lat):
    """label sequence (with blanks) -> sorted complete-path scores."""
    found: dict = {}
    out = lat.out_arcs()

    def rec(s, labels, score):
        if s in lat.finals:
            found.setdefault(tuple(labels), []).append(score + lat.finals[s])
        for i in out[s]:
            a = lat.arcs[i]
            rec(a.dst, labels + [a.label], score + a.score)

    rec(0, [], 0.0)
    return {k: sorted(v) for k, v in found.items()}


def test_graph_weight_shift():
    rng = np.random.default_rng(5)
    delta = -0.75
    for seed in range(5):
        m = small_model(seed, V=3, scale=2.0)
        f = random_feats(rng, 4)
        g = random_graph(rng, 3)
        shifted = Fsa(g.num_states, tuple(Arc(a.src, a.dst, a.label, a.score + delta) for a in g.arcs), g.finals)
        (a,) = fsa_beam_search(m, [f], [g], UNPRUNED)
        (b,) = fsa_beam_search(m, [f], [shifted], UNPRUNED)
        pa, pb = _path_scores(a), _path_scores(b)
        assert pa.keys() == pb.keys()
        for labels, scores in pa.items():
            shift = delta * sum(1 for x in labels if x)
            assert np.allclose(np.array(pb[labels]) - np.array(scores), shift, atol=1e-9)


def test_best_path_monotone_in_pruning():
    rng = np.random.default_rng(6)
    for seed in range(5):
        m = small_model(seed, V=5, scale=2.0)
        f = random_feats(rng, 8)
        g = random_graph(rng, 5)
        prev = -math.inf
        for beam, ms, mc in [(1.0, 2, 1), (2.0, 4, 2), (4.0, 8, 4), (8.0, 32, 8), (math.inf, None, None)]:
            (lat,) = fsa_beam_search(m, [f], [g], FsaSearchParams(beam, ms, mc))
            score = best_path(lat).score
            assert score >= prev - 1e-9
            prev = score


def test_outputs_accepted_by_ngram_graph():
    rng = np.random.default_rng(7)
    vocab = ["a", "b", "c", "d", "e"]
    corpus = [[vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 5))] for _ in range(50)]
    g = ngram_graph_from_arpa(estimate_bigram_arpa(corpus, vocab), {w: i + 1 for i, w in enumerate(vocab)})
    m = small_model(7, V=6, scale=2.0)
    feats = [random_feats(rng, int(T)) for T in rng.integers(3, 10, size=6)]
    for lat in fsa_beam_search(m, feats, [g] * 6, FsaSearchParams()):
        ys = lattice_to_best_seq(lat)
        assert total_logprob(intersect_linear(g, ys)) > -math.inf


# -- best sequence -------------------------------------------------------------------


def merge_lattice():
    # sequence A=[1] has two alignments of probability 0.3, B=[2] one of 0.4
    l3, l4 = math.log(0.3), math.log(0.4)
    arcs = [
        Arc(0, 1, 1, l3), Arc(1, 2, 0, 0.0), Arc(2, 3, 0, 0.0),
        Arc(0, 4, 0, l3), Arc(4, 5, 1, 0.0), Arc(5, 3, 0, 0.0),
        Arc(0, 6, 2, l4), Arc(6, 7, 0, 0.0), Arc(7, 3, 0, 0.0),
    ]
    return Fsa(8, tuple(arcs), {3: 0.0})


def test_merge_op_semantics():
    lat = merge_lattice()
    assert lattice_to_best_seq(lat, "max") == [2]
    assert lattice_to_best_seq(lat, "log_add") == [1]


def test_single_path_lattice_either_method():
    lat = Fsa(3, (Arc(0, 1, 3, -0.5), Arc(1, 2, 0, -0.5)), {2: 0.0})
    assert lattice_to_best_seq(lat, "max") == [3]
    assert lattice_to_best_seq(lat, "log_add") == [3]


def test_empty_lattice_gives_empty_sequence():
    lat = Fsa(1, (), {})
    assert lattice_to_best_seq(lat, "max") == []
    assert lattice_to_best_seq(lat, "log_add") == []
    with pytest.raises(ValueError):
        lattice_to_best_seq(merge_lattice(), "sum")


def test_log_add_matches_exhaustive_totals():
    rng = np.random.default_rng(8)
    for seed in range(8):
        m = small_model(seed, V=3, scale=1.0)
        f = random_feats(rng, 4)
        (lat,) = fsa_beam_search(m, [f], [trivial_graph(3)], UNPRUNED)
        totals: dict = {}
        out = lat.out_arcs()

        def rec(s, ys, score):
            if s in lat.finals:
                key = tuple(x for x in ys if x)
                totals[key] = np.logaddexp(totals.get(key, -math.inf), score)
            for i in out[s]:
                a = lat.arcs[i]
                rec(a.dst, ys + [a.label], score + a.score)

        rec(0, [], 0.0)
        best = max(totals.values())
        want = min(k for k, v in totals.items() if v == best)
        assert tuple(lattice_to_best_seq(lat, "log_add", nbest_n=1000, seed=seed)) == want


def test_lattice_text_header_round_trip():
    m = small_model(9, V=3)
    (lat,) = fsa_beam_search(m, [random_feats(np.random.default_rng(9), 4)], [trivial_graph(3)], FsaSearchParams())
    text = lattice_to_text(lat, 7, 4)
    assert text.startswith("# stream 7\n# frames 4\n")
    assert parse_fsa_text(text) == lat


def test_params_validation():
    with pytest.raises(ValueError):
        FsaSearchParams(beam=-1.0)
    with pytest.raises(ValueError):
        FsaSearchParams(max_states=0)
    with pytest.raises(ValueError):
        fsa_beam_search(small_model(0), [np.zeros((2, 5))], [], FsaSearchParams())
