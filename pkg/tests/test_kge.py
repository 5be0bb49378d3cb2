import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gelvqa import autodiff as ad
from gelvqa.autodiff import Rng
from gelvqa.errors import ArgumentError, CompatibilityError, FormatError
from gelvqa.kg import KnowledgeGraph, Triple
from gelvqa.kge import (SCORERS, KGEEmbedder, KgeConfig, KgeModel, eval_link_prediction, kge_loss, load_kge,
                        lookup_batch, lookup_triple_embedding, random_ranking_mrr, rank_candidates,
                        rank_from_scores, save_kge, score_convkb, score_distmult, score_hole, score_toruse,
                        score_transe, summarize_ranks, train_kge)

from oracles import brute_force_rank, naive_correlation, score_oracle


def _model(scorer, ent, rel, **kw):
    ent = np.asarray(ent, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.float64)
    m = KgeModel(scorer, len(ent), len(rel), ent.shape[1], **kw)
    m.params.set("kge.entity", ent)
    m.params.set("kge.relation", rel)
    return m


def _tiny_kg(seed=0, n_ent=15, n_rel=3, n=40):
    g = np.random.default_rng(seed)
    rows = {(f"e{g.integers(n_ent)}", f"r{g.integers(n_rel)}", f"e{g.integers(n_ent)}") for _ in range(n)}
    return KnowledgeGraph.from_surface(sorted(rows))


# ---------------------------------------------------------------- scorers


def test_transe_examples():
    m = _model("TransE", [[1, 0], [0, 0], [1, 1]], [[0, 1]], norm=2)
    assert score_transe(m, (0, 0, 2)) == 0.0
    assert score_transe(m, (0, 0, 1)) == pytest.approx(-math.sqrt(2), abs=1e-6)
    m0 = _model("TransE", [[0.3, -0.2]], [[0, 0]])
    assert score_transe(m0, (0, 0, 0)) == 0.0


def test_distmult_examples():
    m = _model("DistMult", [[1, 2], [3, 1]], [[2, 0], [0, 0]])
    assert score_distmult(m, (0, 0, 1)) == pytest.approx(6.0)
    assert score_distmult(m, (0, 1, 1)) == 0.0
    assert score_distmult(m, (0, 0, 1)) == score_distmult(m, (1, 0, 0))


def test_hole_examples():
    m = _model("HolE", [[1, 0], [0, 1], [0, 0]], [[0, 1], [1, 0]])
    np.testing.assert_allclose(naive_correlation([1, 0], [0, 1]), [0, 1])
    assert score_hole(m, (0, 0, 1)) == pytest.approx(1.0, abs=1e-6)
    assert score_hole(m, (2, 0, 1)) == 0.0
    assert score_hole(m, (0, 1, 1)) == pytest.approx(0.0, abs=1e-6)


def test_toruse_examples():
    m = _model("TorusE", [[0.9], [0.0], [0.1]], [[0.2]])
    assert score_toruse(m, (0, 0, 1)) == pytest.approx(-0.1, abs=1e-6)
    assert score_toruse(m, (0, 0, 2)) == pytest.approx(0.0, abs=1e-6)
    half = _model("TorusE", [[0.0], [0.5]], [[0.0]])
    assert score_toruse(half, (0, 0, 1)) == pytest.approx(-0.5, abs=1e-6)


def test_convkb_examples():
    m = _model("ConvKB", [[1, 0], [1, 1]], [[0, 1]], n_filters=1)
    m.params.set("kge.filters", [[1, 1, 1]])
    m.params.set("kge.proj", [[1], [1]])
    m.params.set("kge.bias", [0])
    assert score_convkb(m, (0, 0, 1)) == pytest.approx(-4.0)
    m.params.set("kge.filters", [[0, 0, 0]])
    assert score_convkb(m, (0, 0, 1)) == 0.0
    assert score_convkb(m, (1, 0, 0)) == 0.0
    m.params.set("kge.bias", [3])
    assert score_convkb(m, (0, 0, 1)) == pytest.approx(-3.0)
    assert score_convkb(m, (1, 0, 1)) == pytest.approx(-3.0)


def test_scorer_kind_is_checked():
    m = _model("DistMult", [[1.0]], [[1.0]])
    with pytest.raises(ArgumentError):
        score_transe(m, (0, 0, 0))
    with pytest.raises(ArgumentError):
        KgeModel("RotatE", 2, 1, 4)


@pytest.mark.parametrize("scorer", SCORERS)
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_batched_scores_match_reference_formula(scorer, seed):
    g = np.random.default_rng(seed)
    m = KgeModel(scorer, 7, 3, int(g.integers(1, 9)), norm=int(g.integers(1, 3)), n_filters=3, rng=Rng(seed))
    trip = np.stack([g.integers(0, 7, 10), g.integers(0, 3, 10), g.integers(0, 7, 10)], axis=1)
    with ad.no_grad():
        got = m.plausibility(trip[:, 0], trip[:, 1], trip[:, 2]).data
    want = [score_oracle(m, t) for t in trip]
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("scorer", SCORERS)
def test_score_ignores_unrelated_vocabulary_order(scorer):
    m = KgeModel(scorer, 6, 2, 5, n_filters=2, rng=Rng(3))
    t = (1, 0, 4)
    base = m.score(t)
    perm = [0, 1, 3, 2, 4, 5]  # swap two rows nobody looks up
    ent = m.entity_table[perm].copy()
    m.params.set("kge.entity", ent)
    assert m.score(t) == base


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_distmult_symmetric_exactly(seed):
    m = KgeModel("DistMult", 5, 2, 8, rng=Rng(seed))
    assert m.score((1, 1, 3)) == m.score((3, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-3, 3))
def test_toruse_integer_shift_invariance(seed, k):
    m = KgeModel("TorusE", 4, 2, 6, rng=Rng(seed))
    before = m.score((0, 1, 2))
    ent = m.entity_table.copy()
    ent[0, seed % 6] += k
    m.params.set("kge.entity", ent)
    assert m.score((0, 1, 2)) == pytest.approx(before, abs=1e-5)


# ---------------------------------------------------------------- loss and training


def test_kge_loss_examples():
    m = _model("DistMult", [[0.0], [0.0]], [[0.0]])
    assert kge_loss(m, [(Triple(0, 0, 1), 1)], lam=0).item() == pytest.approx(math.log(2), abs=1e-6)
    assert kge_loss(m, [(Triple(0, 0, 1), 1)], lam=10.0).item() == pytest.approx(math.log(2), abs=1e-6)
    m2 = _model("DistMult", [[1.0], [2.0]], [[1.0]])  # s = 2
    assert kge_loss(m2, [(Triple(0, 0, 1), 1)], lam=0).item() == pytest.approx(math.log1p(math.exp(-2)), abs=1e-6)
    with pytest.raises(ArgumentError):
        kge_loss(m, [], lam=0)


def test_kge_loss_regularizer_matches_closed_form():
    m = _model("TransE", [[1.0, 2.0], [0.0, 1.0]], [[0.5, 0.5]])
    lab = [(Triple(0, 0, 1), 1), (Triple(1, 0, 0), -1)]
    s1, s2 = m.score((0, 0, 1)), m.score((1, 0, 0))
    sq = 1 + 4 + 0 + 1 + 0.25 + 0.25
    want = math.log1p(math.exp(-s1)) + math.log1p(math.exp(s2)) + 0.1 / 2 * sq
    assert kge_loss(m, lab, lam=0.1).item() == pytest.approx(want, rel=1e-6)


@pytest.mark.parametrize("scorer", SCORERS)
def test_one_step_moves_scores_the_right_way(scorer):
    m = KgeModel(scorer, 4, 2, 6, n_filters=4, rng=Rng(1))
    pos, neg = Triple(0, 0, 1), Triple(2, 1, 3)
    for t, label in ((pos, 1), (neg, -1)):
        before = m.score(t)
        grads = ad.backward(kge_loss(m, [(t, label)], lam=0.0), m.params)
        for name, p in m.params.items():
            p.data = p.data - 1e-3 * grads[name].astype(p.data.dtype)
        after = m.score(t)
        assert (after > before) if label == 1 else (after < before)


def test_train_kge_zero_iterations_is_init():
    kg = _tiny_kg()
    cfg = KgeConfig(scorer="TransE", dim=8, iterations=0, seed=5)
    m, trace = train_kge(kg, cfg)
    ref = KgeModel("TransE", kg.n_entities, kg.n_relations, 8, rng=Rng(5).substream("init"))
    assert trace == []
    np.testing.assert_array_equal(m.entity_table, ref.entity_table)
    bound = 6 / math.sqrt(8)
    assert np.abs(m.entity_table).max() <= bound


def test_train_kge_deterministic_and_decreasing():
    kg = _tiny_kg(1, n=60)
    cfg = KgeConfig(scorer="DistMult", dim=16, iterations=400, batch_size=16, lr=1e-2, neg_ratio=2, seed=42)
    a, trace = train_kge(kg, cfg)
    b, _ = train_kge(kg, cfg)
    assert a.entity_table.tobytes() == b.entity_table.tobytes()
    windows = [np.mean(trace[i:i + 100]) for i in range(0, 400, 100)]
    assert all(x >= y for x, y in zip(windows, windows[1:]))


def test_transe_rows_renormalized():
    kg = _tiny_kg(2)
    m, _ = train_kge(kg, KgeConfig(scorer="TransE", dim=8, iterations=5, batch_size=8, lr=0.1, seed=1))
    np.testing.assert_allclose(np.linalg.norm(m.entity_table, axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- ranking


def test_rank_examples():
    scores = np.array([5.0, 3.0, 4.0])
    assert rank_from_scores(scores, 1) == 3
    assert rank_from_scores(scores, 1, excluded=[0, 2]) == 1
    assert rank_from_scores(scores, 0) == 1
    # ties: a smaller-id equal candidate sits above gold, a larger-id one below
    assert rank_from_scores(np.array([1.0, 1.0, 1.0]), 1) == 2


def test_rank_candidates_filtered_example():
    m = _model("DistMult", [[5.0], [3.0], [4.0]], [[1.0]])
    kg = KnowledgeGraph.from_surface([("x", "r", "x"), ("x", "r", "y"), ("x", "r", "z")])
    # plausibilities for tail candidates of (0, 0, ?) are 25, 15, 20
    gold = Triple(0, 0, 1)
    assert rank_candidates(m, gold, "tail", kg, filtered=False).rank == 3
    assert rank_candidates(m, gold, "tail", kg, filtered=True).rank == 1


@pytest.mark.parametrize("scorer", SCORERS)
def test_rank_candidates_matches_full_sort_oracle(scorer):
    for seed in range(4):
        kg = _tiny_kg(seed, n_ent=int(np.random.default_rng(seed).integers(3, 51)))
        m = KgeModel(scorer, kg.n_entities, kg.n_relations, 4, n_filters=2, rng=Rng(seed))
        for t in kg.triples[:8]:
            for slot in ("head", "tail"):
                for filt in (False, True):
                    got = rank_candidates(m, t, slot, kg, filt).rank
                    assert got == brute_force_rank(m, t, slot, kg, filt)
                    assert 1 <= got <= kg.n_entities


def test_summaries():
    assert summarize_ranks([1, 1])["mrr"] == 1.0
    s = summarize_ranks([1, 4], k_list=(3, 10, 100))
    assert s["mrr"] == 0.625 and s["hit@3"] == 0.5 and s["hit@100"] == 1.0
    with pytest.raises(ArgumentError):
        summarize_ranks([])


def test_eval_link_prediction_counts_both_slots():
    kg = _tiny_kg(3)
    m = KgeModel("HolE", kg.n_entities, kg.n_relations, 4, rng=Rng(0))
    rep = eval_link_prediction(m, kg.triples[:5], kg, k_list=(1, 1000))
    assert rep["n_queries"] == 10
    assert rep["hit@1000"] == 1.0
    with pytest.raises(ArgumentError):
        eval_link_prediction(m, [], kg)


def test_random_ranking_mrr_closed_form():
    assert random_ranking_mrr(1) == 1.0
    assert random_ranking_mrr(4) == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4)
    # Monte-Carlo check of the uniform-rank expectation
    g = np.random.default_rng(0)
    sim = np.mean(1.0 / g.integers(1, 101, size=200_000))
    assert sim == pytest.approx(random_ranking_mrr(100), rel=0.02)


# ---------------------------------------------------------------- lookup and persistence


def test_lookup_triple_embedding():
    m = KgeModel("ConvKB", 5, 2, 256, n_filters=2, rng=Rng(0))
    e_h, e_r, e_t, cat = lookup_triple_embedding(m, (1, 0, 2))
    assert cat.shape == (768,)
    np.testing.assert_array_equal(cat, np.concatenate([m.entity_table[1], m.relation_table[0], m.entity_table[2]]))
    np.testing.assert_array_equal(lookup_triple_embedding(m, (1, 0, 2))[3], cat)
    with pytest.raises(ArgumentError):
        lookup_triple_embedding(m, (5, 0, 0))
    assert lookup_batch(m, np.array([[1, 0, 2]])).shape == (1, 3, 256)
    with pytest.raises(ArgumentError):
        lookup_batch(m, np.array([[0, 2, 0]]))


@pytest.mark.parametrize("scorer", SCORERS)
def test_save_load_roundtrip(tmp_path, scorer):
    kg = _tiny_kg(4)
    m, _ = train_kge(kg, KgeConfig(scorer=scorer, dim=6, iterations=3, batch_size=4, n_filters=5, seed=2))
    save_kge(m, tmp_path / "m")
    back = load_kge(tmp_path / "m", kg.vocab.digest())
    for name, t in m.params.items():
        assert back.params[name].data.tobytes() == t.data.tobytes()
    for t in kg.triples[:5]:
        assert back.score(t) == m.score(t)
    if scorer == "ConvKB":
        assert back.params["kge.filters"].shape == (5, 3)


def test_load_kge_errors(tmp_path):
    kg = _tiny_kg(5)
    m, _ = train_kge(kg, KgeConfig(scorer="TransE", dim=4, iterations=1, seed=2))
    save_kge(m, tmp_path / "m")
    with pytest.raises(CompatibilityError):
        load_kge(tmp_path / "m", "0" * 64)
    blob = tmp_path / "m" / "kge_entity.gelt"
    blob.write_bytes(blob.read_bytes()[:20])
    with pytest.raises(FormatError):
        load_kge(tmp_path / "m")
    with pytest.raises(FormatError):
        load_kge(tmp_path / "missing")


def test_kge_embedder_estimator():
    from sklearn.base import clone

    kg = _tiny_kg(6)
    est = KGEEmbedder(scorer="DistMult", dim=4, iterations=20, batch_size=8, lr=1e-2, seed=3)
    assert clone(est).get_params() == est.get_params()
    X = np.array([tuple(t) for t in kg.triples[:4]])
    out = est.fit(kg).transform(X)
    assert out.shape == (4, 12)
    assert 0 < est.score(X) <= 1
    np.testing.assert_allclose(est.decision_function(X), [est.model_.score(t) for t in X], rtol=1e-6)
