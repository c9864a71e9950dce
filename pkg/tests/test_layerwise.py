import numpy as np
import pytest

from mckd.layerwise import lmcl_loss, match_weight
from mckd.losses import PairContrastiveSets, mcl_pair_loss, similarity_counter
from mckd.nn import MetaNetwork
from mckd.tensor import Tensor, backward, l2_normalize

RNG = np.random.default_rng(4)


def _unit(n, d, rng=RNG):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_match_weight_closed_forms():
    d = 4
    eye = Tensor(np.eye(d))
    v = Tensor(_unit(3, d))
    lam = match_weight(eye, eye, v, v)  # projected embeddings identical
    np.testing.assert_allclose(lam.data, 0.7310585786, atol=1e-9)
    lam = match_weight(eye, Tensor(-np.eye(d)), v, v)  # antipodal
    np.testing.assert_allclose(lam.data, 0.2689414214, atol=1e-9)
    a = Tensor(np.array([[1.0, 0.0]]))
    b = Tensor(np.array([[0.0, 1.0]]))
    lam = match_weight(Tensor(np.eye(2)), Tensor(np.eye(2)), a, b)  # orthogonal
    np.testing.assert_allclose(lam.data, 0.5, atol=1e-12)


def test_match_weight_detaches_embeddings():
    d = 3
    xi = Tensor(RNG.normal(size=(d, d)), requires_grad=True)
    v = Tensor(_unit(4, d), requires_grad=True)
    lam = match_weight(xi, xi, v, v)
    grads = backward(lam[0:1][:, 0] if lam.ndim > 1 else lam[0:1])
    assert xi in grads
    assert v not in grads  # embeddings enter detached


def test_match_weight_shape_errors():
    with pytest.raises(ValueError, match="square"):
        match_weight(Tensor(np.ones((2, 3))), Tensor(np.eye(3)), Tensor(_unit(1, 3)), Tensor(_unit(1, 3)))
    with pytest.raises(ValueError):
        match_weight(Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(_unit(1, 4)), Tensor(_unit(1, 3)))


def _cohort_embeddings(M, L, B, d, seed=0):
    rng = np.random.default_rng(seed)
    return [[Tensor(_unit(B, d, rng)) for _ in range(L)] for _ in range(M)]


def _shared_sets(embeddings, B, K, seed=1):
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.permutation(np.setdiff1d(np.arange(B), [i]))[: K + 1] for i in range(B)])

    def get(a, b, la, lb):
        return PairContrastiveSets(
            pool_a=embeddings[a][la - 1], pool_b=embeddings[b][lb - 1], index=idx)

    return get, idx


def test_lmcl_one_to_one_single_stage_equals_pair_loss():
    emb = _cohort_embeddings(2, 1, 6, 5)
    get, idx = _shared_sets(emb, 6, 4)
    res = lmcl_loss(emb, get, None, "one_to_one", tau=0.4, alpha=0.1, beta=1.0)
    direct = mcl_pair_loss(emb[0][0], emb[1][0], get(0, 1, 1, 1), tau=0.4, alpha=0.1, beta=1.0)
    assert float(res.loss.data) == pytest.approx(float(direct.data), abs=1e-12)


def test_lmcl_all_to_all_term_count_and_counter():
    M, L, B, K, d = 2, 3, 6, 4, 5
    emb = _cohort_embeddings(M, L, B, d)
    get, _ = _shared_sets(emb, B, K)
    similarity_counter.reset()
    res = lmcl_loss(emb, get, None, "all_to_all", tau=0.4, alpha=0.1, beta=1.0)
    # per anchor: 2(K+1) L^2 M(M-1) similarity evaluations
    expected = 2 * (K + 1) * L**2 * M * (M - 1)
    assert similarity_counter.count == B * expected
    similarity_counter.reset()
    assert float(res.loss.data) > 0


def test_lmcl_all_to_all_equals_weighted_with_lambda_one():
    M, L, B, K, d = 2, 2, 6, 4, 5
    emb = _cohort_embeddings(M, L, B, d)
    get, _ = _shared_sets(emb, B, K)
    meta = MetaNetwork(M, L, d, seed=3)
    # force lambda = sigmoid(1) by making both projections identical => use the
    # oracle route instead: weighted loss with projections replaced so that
    # lambda == 1 exactly is impossible through a sigmoid; instead check the
    # identity by substituting unit weights into the weighted path.
    res_all = lmcl_loss(emb, get, None, "all_to_all", tau=0.4, alpha=0.1, beta=1.0)
    total = None
    for a in range(M):
        for b in range(a + 1, M):
            for la in range(1, L + 1):
                for lb in range(1, L + 1):
                    ones = Tensor(np.ones(B))
                    term = mcl_pair_loss(emb[a][la - 1], emb[b][lb - 1], get(a, b, la, lb),
                                         tau=0.4, alpha=0.1, beta=1.0, weights=ones)
                    total = term if total is None else total + term
    assert float(res_all.loss.data) == pytest.approx(float(total.data), abs=1e-9)


def test_lmcl_weighted_bounded_by_all_to_all():
    M, L, B, K, d = 2, 3, 8, 5, 6
    emb = _cohort_embeddings(M, L, B, d, seed=9)
    get, _ = _shared_sets(emb, B, K, seed=10)
    meta = MetaNetwork(M, L, d, seed=11)
    res_w = lmcl_loss(emb, get, meta, "weighted", tau=0.3, alpha=0.1, beta=1.0)
    res_a = lmcl_loss(emb, get, None, "all_to_all", tau=0.3, alpha=0.1, beta=1.0)
    assert 0.0 <= float(res_w.loss.data) <= float(res_a.loss.data)
    # lambda statistics populated, one per (pair, stage, stage), means in (0,1)
    assert len(res_w.lambda_means) == L * L
    assert all(0.0 < v < 1.0 for v in res_w.lambda_means.values())


def test_lmcl_mode_validation():
    emb = _cohort_embeddings(2, 2, 4, 3)
    get, _ = _shared_sets(emb, 4, 2)
    with pytest.raises(ValueError, match="matching mode"):
        lmcl_loss(emb, get, None, "diagonal", tau=0.4, alpha=0.1, beta=1.0)
    with pytest.raises(ValueError, match="projections"):
        lmcl_loss(emb, get, None, "weighted", tau=0.4, alpha=0.1, beta=1.0)
    with pytest.raises(ValueError, match="2 networks"):
        lmcl_loss(emb[:1], get, None, "all_to_all", tau=0.4, alpha=0.1, beta=1.0)


def test_lmcl_m3_counts_three_pairs():
    M, L, B, K, d = 3, 2, 6, 4, 5
    emb = _cohort_embeddings(M, L, B, d, seed=20)
    get, _ = _shared_sets(emb, B, K, seed=21)
    similarity_counter.reset()
    lmcl_loss(emb, get, None, "all_to_all", tau=0.4, alpha=0.1, beta=1.0)
    expected = 2 * (K + 1) * L**2 * M * (M - 1)  # = 4 dists x L^2 x M(M-1)/2 pairs
    assert similarity_counter.count == B * expected
    similarity_counter.reset()


def test_weighted_gradients_reach_projections_not_networks():
    M, L, B, K, d = 2, 2, 5, 3, 4
    rng = np.random.default_rng(30)
    raw = [[Tensor(rng.normal(size=(B, d)), requires_grad=True) for _ in range(L)] for _ in range(M)]
    emb = [[l2_normalize(t) for t in row] for row in raw]
    get, _ = _shared_sets(emb, B, K, seed=31)
    meta = MetaNetwork(M, L, d, seed=32)
    res = lmcl_loss(emb, get, meta, "weighted", tau=0.4, alpha=0.1, beta=1.0)
    grads = backward(res.loss)
    for p in meta.params.values():
        assert p in grads  # trained by the meta loop through this loss
    for row in raw:
        for t in row:
            assert t in grads  # hard/soft terms still train the embeddings
