import numpy as np
import pytest

from mckd.meta import (
    MetaLoopConfig,
    ParameterSnapshot,
    SnapshotError,
    meta_step,
    unrolled_hypergradient,
    unrolled_task_value,
)
from mckd.tensor import Tensor
from mckd.tensor import backward as meta_backward


def _toy(theta0=1.0, pi0=0.0):
    theta = {"t": Tensor(np.asarray(theta0), requires_grad=True)}
    pi = {"p": Tensor(np.asarray(pi0), requires_grad=True)}

    def inner(th):
        d = th["t"] - pi["p"]
        return d * d * 0.5

    def task(th):
        return th["t"] * th["t"] * 0.5

    return theta, pi, inner, task


def test_scalar_toy_hypergradient_exact():
    # inner 0.5(t-p)^2, task 0.5 t^2, t0=1, p=0, eta=0.1, K=1:
    # t1=0.9, t2=0.81, dL/dp = t2*(1-eta)*eta = 0.0729
    theta, pi, inner, task = _toy()
    grads, final = unrolled_hypergradient(theta, pi, inner, task, k_inner=1, eta=0.1)

    def val(pv):
        t1 = 1.0 - 0.1 * (1.0 - pv)
        t2 = t1 - 0.1 * t1
        return 0.5 * t2 * t2

    fd = (val(1e-7) - val(-1e-7)) / 2e-7
    assert float(grads["p"]) == pytest.approx(fd, abs=1e-8)
    assert float(grads["p"]) == pytest.approx(0.0729, abs=1e-9)
    assert final == pytest.approx(val(0.0), abs=1e-12)


def test_unrolled_values_match_hand_computation():
    theta, pi, inner, task = _toy()
    v = unrolled_task_value(theta, inner, task, k_inner=1, eta=0.1)
    assert float(v.data) == pytest.approx(0.5 * 0.81**2, abs=1e-12)
    # theta leaves untouched
    assert float(theta["t"].data) == 1.0


def test_pi_without_influence_gets_exact_zero():
    theta = {"t": Tensor(np.asarray(2.0), requires_grad=True)}
    pi = {"p": Tensor(np.asarray(3.0), requires_grad=True)}
    inner = lambda th: th["t"] * th["t"] * 0.5  # pi never appears
    task = lambda th: th["t"] * th["t"]
    grads, _ = unrolled_hypergradient(theta, pi, inner, task, k_inner=2, eta=0.05)
    assert grads["p"].shape == pi["p"].shape
    assert grads["p"] == 0.0


def test_k_inner_zero_degenerate_loop_zero_hypergradient():
    theta, pi, inner, task = _toy()
    grads, _ = unrolled_hypergradient(theta, pi, inner, task, k_inner=0, eta=0.1)
    assert grads["p"] == 0.0  # single task step never involves pi


def test_meta_step_updates_pi_and_leaves_theta():
    theta, pi, inner, task = _toy()
    cfg = MetaLoopConfig(k_inner=1, eta=0.1, period=1, lr_pi=0.5)
    before_theta = float(theta["t"].data)
    res = meta_step(theta, pi, inner, task, cfg)
    assert res.applied
    assert res.hypergrad_norm == pytest.approx(0.0729, abs=1e-9)
    assert float(pi["p"].data) == pytest.approx(-0.5 * 0.0729, abs=1e-12)
    assert float(theta["t"].data) == before_theta


def test_meta_step_skips_on_non_finite():
    theta = {"t": Tensor(np.asarray(1.0), requires_grad=True)}
    pi = {"p": Tensor(np.asarray(0.5), requires_grad=True)}

    def inner(th):
        from mckd.tensor import log

        return log(pi["p"] - 0.5) * th["t"]  # log(0) -> -inf

    task = lambda th: th["t"] * th["t"]
    cfg = MetaLoopConfig(k_inner=1, eta=0.1, lr_pi=0.1)
    before = float(pi["p"].data)
    res = meta_step(theta, pi, inner, task, cfg)
    assert not res.applied
    assert float(pi["p"].data) == before


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaLoopConfig(k_inner=0)
    with pytest.raises(ValueError):
        MetaLoopConfig(eta=0.0)
    with pytest.raises(ValueError):
        MetaLoopConfig(period=0)


def test_snapshot_roundtrip_and_nesting():
    arrays = {"a": np.arange(6, dtype=np.float64), "b": np.ones((2, 2))}
    snap = ParameterSnapshot()
    snap.take(arrays)
    with pytest.raises(SnapshotError, match="nested"):
        snap.take(arrays)
    arrays["a"][:] = -1
    arrays["b"][0, 0] = 99
    snap.restore(arrays)
    np.testing.assert_array_equal(arrays["a"], np.arange(6, dtype=np.float64))
    np.testing.assert_array_equal(arrays["b"], np.ones((2, 2)))
    with pytest.raises(SnapshotError):
        snap.restore(arrays)  # nothing held anymore
    snap.take(arrays)  # reusable after restore
    snap.restore(arrays)


def test_hypergradient_matches_fd_on_vector_problem():
    # quadratic inner/task losses over a 3-vector with a pi-dependent target
    rng = np.random.default_rng(2)
    curv = rng.uniform(0.5, 2.0, size=3)  # per-coordinate task curvature
    target = rng.normal(size=3)
    rng_init = rng.normal(size=3)

    def make(pi_val):
        theta = {"w": Tensor(rng_init.copy(), requires_grad=True)}
        pi = {"p": Tensor(pi_val.copy(), requires_grad=True)}

        def inner(th):
            from mckd.tensor import dot

            d = th["w"] - pi["p"]
            return dot(d, d) * 0.5

        def task(th):
            from mckd.tensor import dot

            d = th["w"] - Tensor(target)
            return dot(d * Tensor(curv), d) * 0.5

        return theta, pi, inner, task

    pi0 = rng.normal(size=3)
    theta, pi, inner, task = make(pi0)
    grads, _ = unrolled_hypergradient(theta, pi, inner, task, k_inner=2, eta=0.07)

    def value(pv):
        t, p, i_fn, t_fn = make(pv)
        return float(unrolled_task_value(t, i_fn, t_fn, 2, 0.07).data)

    fd = np.zeros(3)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd[i] = (value(pi0 + e) - value(pi0 - e)) / (2 * h)
    np.testing.assert_allclose(grads["p"], fd, rtol=1e-6, atol=1e-9)

def test_barrier_respects_phase():
    from mckd.tensor import barrier, barrier_transparent, tsum

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss_fn = lambda: tsum(barrier(x) * x)  # product with a barrier-stopped copy
    g = np.asarray(meta_backward(loss_fn())[x].data)
    np.testing.assert_allclose(g, x.data)  # only the live factor contributes
    with barrier_transparent():
        g2 = np.asarray(meta_backward(loss_fn())[x].data)
    np.testing.assert_allclose(g2, 2 * x.data)  # both factors contribute


def test_hypergradient_sees_stop_gradient_value_drift():
    # inner loss 0.5*(t - p)^2 * sg(t): the stop-gradient's value moves with t,
    # so at k_inner=2 the exact unrolled derivative must include the drift;
    # verified against finite differences of the re-run unrolled stages.
    from mckd.tensor import barrier

    eta, k = 0.1, 2

    def make(pi_val):
        theta = {"t": Tensor(np.asarray(1.5), requires_grad=True)}
        pi = {"p": Tensor(np.asarray(pi_val), requires_grad=True)}

        def inner(th):
            d = th["t"] - pi["p"]
            return d * d * 0.5 * barrier(th["t"])

        def task(th):
            return th["t"] * th["t"] * 0.5

        return theta, pi, inner, task

    theta, pi, inner, task = make(0.3)
    grads, _ = unrolled_hypergradient(theta, pi, inner, task, k, eta)
    h = 1e-6
    vals = []
    for sign in (+1, -1):
        t, p, i_fn, t_fn = make(0.3 + sign * h)
        vals.append(float(unrolled_task_value(t, i_fn, t_fn, k, eta).data))
    fd = (vals[0] - vals[1]) / (2 * h)
    assert float(grads["p"]) == pytest.approx(fd, rel=1e-6)


def test_fd_fallback_matches_reverse_mode():
    theta, pi, inner, task = _toy()
    cfg = MetaLoopConfig(k_inner=1, eta=0.1, lr_pi=0.5, fd_fallback=True)
    res = meta_step(theta, pi, inner, task, cfg)
    assert res.applied
    assert res.hypergrad_norm == pytest.approx(0.0729, abs=1e-7)
    assert float(pi["p"].data) == pytest.approx(-0.5 * 0.0729, abs=1e-7)
