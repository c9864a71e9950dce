import numpy as np
import pytest

from mckd.nn import Cohort, GateModule, NetworkSpec, StagedNetwork, forward_cohort, gate_weights, init_network
from mckd.tensor import Tensor, l2_normalize

SPEC = NetworkSpec(input_dim=6, stage_widths=(8, 8, 8), num_classes=5, embed_dim=4)
RNG = np.random.default_rng(0)


def test_forward_cohort_shape_contract():
    nets = [init_network(SPEC, seed=s) for s in (1, 2)]
    x = Tensor(RNG.normal(size=(4, 6)))
    outs = forward_cohort(nets, x)
    assert len(outs) == 2
    for o in outs:
        assert len(o.features) == len(o.embeddings) == len(o.logits) == 3
        assert all(e.shape == (4, 4) for e in o.embeddings)
        assert all(z.shape == (4, 5) for z in o.logits)
        assert all(f.shape == (4, 8) for f in o.features)


def test_forward_cohort_rejects_width_mismatch():
    nets = [init_network(SPEC, seed=1), init_network(SPEC, seed=2)]
    with pytest.raises(ValueError, match="input width"):
        forward_cohort(nets, Tensor(RNG.normal(size=(4, 7))))


def test_identical_weights_identical_outputs():
    a = init_network(SPEC, seed=9)
    b = init_network(SPEC, seed=9)
    x = Tensor(RNG.normal(size=(3, 6)))
    oa, ob = a.forward(x), b.forward(x)
    for ta, tb in zip(oa.embeddings + oa.logits, ob.embeddings + ob.logits):
        assert np.array_equal(ta.data, tb.data)


def test_zero_input_zero_final_classifier():
    net = init_network(SPEC, seed=3)
    net.params["cls3.w"].data[:] = 0.0
    z = net.infer_logits(Tensor(np.zeros((2, 6))))
    assert np.array_equal(z.data, np.zeros((2, 5)))


def test_init_determinism_and_distinct_seeds():
    a, b = init_network(SPEC, seed=5), init_network(SPEC, seed=5)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    c = init_network(SPEC, seed=6)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_init_he_scale_large_fanin():
    spec = NetworkSpec(input_dim=256, stage_widths=(300, 64), num_classes=3, embed_dim=8)
    net = init_network(spec, seed=11)
    w = net.params["stage1.w"].data
    expected = np.sqrt(2.0 / 256)
    assert abs(w.std() - expected) / expected < 0.2
    assert np.array_equal(net.params["stage1.b"].data, np.zeros(300))


def test_init_network_rejects_bad_spec():
    with pytest.raises(ValueError):
        NetworkSpec(input_dim=6, stage_widths=(8,), num_classes=5, embed_dim=4)
    with pytest.raises(ValueError):
        NetworkSpec(input_dim=6, stage_widths=(8, 0), num_classes=5, embed_dim=4)


def test_gate_weights_valid_distribution():
    gate = GateModule(input_width=24, num_branches=3, seed=4)
    x = Tensor(RNG.normal(size=(50, 24)) * 5)
    w = gate.forward(x).data
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_gate_symmetry_and_dominance():
    gate = GateModule(input_width=6, num_branches=3, seed=4)
    # force equal pre-softmax logits -> uniform weights
    gate.params["fc2.w"].data[:] = 0.0
    gate.params["fc2.b"].data[:] = 0.0
    w = gate.forward(Tensor(RNG.normal(size=(4, 6)))).data
    np.testing.assert_allclose(w, 1.0 / 3, atol=1e-12)
    # one dominant pre-softmax logit -> weight ~ 1
    gate.params["fc2.b"].data[:] = [50.0, 0.0, 0.0]
    w = gate.forward(Tensor(np.zeros((2, 6)))).data
    assert w[:, 0].min() > 0.999999


def test_gate_weights_helper_concatenates_features():
    gate = GateModule(input_width=24, num_branches=3, seed=4)
    feats = [Tensor(RNG.normal(size=(5, 8))) for _ in range(3)]
    w = gate_weights(gate, feats)
    assert w.shape == (5, 3)


def test_inference_graph_ignores_auxiliaries():
    net = init_network(SPEC, seed=21)
    x = Tensor(RNG.normal(size=(7, 6)))
    before = net.infer_logits(x).data.argmax(axis=1)
    stripped = net.strip_auxiliary()
    assert set(stripped.params) == {f"stage{l}.{s}" for l in (1, 2, 3) for s in "wb"} | {"cls3.w", "cls3.b"}
    after = stripped.infer_logits(x).data.argmax(axis=1)
    # bit-identical, not merely close
    assert np.array_equal(net.infer_logits(x).data, stripped.infer_logits(x).data)
    assert np.array_equal(before, after)


def test_cohort_build_and_param_views():
    cohort = Cohort.build(SPEC, seeds=(1, 2))
    theta = cohort.theta()
    pi = cohort.pi()
    assert any(k.startswith("net0.stage1") for k in theta)
    assert any(k.startswith("gate1.") for k in theta)
    assert all(k.startswith("xi.") for k in pi)
    assert len(pi) == 2 * 3  # one projection per (network, stage)
    with pytest.raises(ValueError):
        Cohort.build(SPEC, seeds=(1,))
    with pytest.raises(ValueError):
        Cohort.build(SPEC, seeds=(1, 1))


def test_cohort_bound_substitutes_and_restores():
    cohort = Cohort.build(SPEC, seeds=(1, 2))
    theta = cohort.theta()
    key = "net0.stage1.w"
    original = cohort.networks[0].params["stage1.w"]
    replacement = Tensor(np.zeros_like(original.data), requires_grad=True)
    with cohort.bound({key: replacement}):
        assert cohort.networks[0].params["stage1.w"] is replacement
        x = Tensor(np.ones((1, 6)))
        out = cohort.networks[0].forward(x)
        assert out.features[0].shape == (1, 8)
    assert cohort.networks[0].params["stage1.w"] is original


def test_embeddings_normalize_to_unit_norm_downstream():
    net = init_network(SPEC, seed=2)
    out = net.forward(Tensor(RNG.normal(size=(6, 6))))
    v = l2_normalize(out.embeddings[-1]).data
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)
