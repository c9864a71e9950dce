"""Self-contained oracle and property checks, runnable via the ``check`` command.

Each check re-derives its expected values independently of the code path it
certifies: finite differences for gradients (with teacher distributions and
matching weights frozen at the base point wherever the real loss stops
gradients), a pure-numpy reimplementation for the original two-network
contrastive loss, closed forms for everything else.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distill import ensemble_kl_loss, ensemble_logits, gate_task_loss
from .layerwise import lmcl_loss, match_weight
from .losses import (
    ContrastiveDistribution,
    LossFlags,
    PairContrastiveSets,
    _infonce_rows,
    _kl_rows,
    _scores,
    icl_distribution,
    mcl_pair_loss,
    mi_bound,
    similarity_counter,
    soft_icl_loss,
    soft_vcl_loss,
    vcl_distribution,
    vcl_loss,
    cross_entropy,
)
from .meta import unrolled_hypergradient, unrolled_task_value
from .mining import MemoryBank, NegativeMiss, PositiveMiss, batch_index_matrix, sample_batch
from .nn import Cohort, MetaNetwork, NetworkSpec, gate_weights
from .tensor import Tensor, backward, constant, finite_diff_grad, l2_normalize, tmean

__all__ = ["run_checks", "CheckResult", "original_mcl_oracle"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# -- independent numpy oracle ---------------------------------------------------

def _np_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def original_mcl_oracle(emb_a: np.ndarray, emb_b: np.ndarray, index: np.ndarray,
                        tau: float, alpha: float, beta: float) -> float:
    """Two-network mutual contrastive loss, written directly from the formulas
    in plain numpy; no shared code with the graph implementation."""
    rows = np.arange(emb_a.shape[0])[:, None]

    def dist(anchor, pool):
        return _np_softmax((anchor @ pool.T)[rows, index] / tau)

    p_a, p_b = dist(emb_a, emb_a), dist(emb_b, emb_b)
    q_ab, q_ba = dist(emb_a, emb_b), dist(emb_b, emb_a)
    hard = sum(-np.log(p[:, 0]) for p in (p_a, p_b, q_ab, q_ba))

    def kl(p, q):
        return (p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))).sum(axis=1)

    soft = kl(p_b, p_a) + kl(p_a, p_b) + kl(q_ba, q_ab) + kl(q_ab, q_ba)
    return float((alpha * hard + beta * soft).mean())


# -- shared fixtures -----------------------------------------------------------------

def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _contrastive_index(rng, B, K):
    return np.stack([rng.permutation(np.setdiff1d(np.arange(B), [i]))[: K + 1] for i in range(B)])


@dataclass
class _TinyCohort:
    cohort: Cohort
    x: Tensor
    labels: np.ndarray
    index: np.ndarray
    tau: float = 0.4
    alpha: float = 0.1
    beta: float = 1.0

    @classmethod
    def build(cls, seed: int, M=2, L=2, width=8, d=8, C=4, B=8, K=6):
        rng = np.random.default_rng(seed)
        spec = NetworkSpec(input_dim=8, stage_widths=(width,) * L, num_classes=C, embed_dim=d)
        cohort = Cohort.build(spec, seeds=tuple(seed * 100 + m for m in range(M)))
        x = Tensor(rng.standard_normal((B, 8)))
        labels = rng.integers(0, C, size=B)
        return cls(cohort, x, labels, _contrastive_index(rng, B, K))

    def embeddings(self):
        outs = [net.forward(self.x) for net in self.cohort.networks]
        return outs, [[l2_normalize(e) for e in o.embeddings] for o in outs]

    def sets_get(self, embeddings):
        def get(a, b, la, lb):
            return PairContrastiveSets(pool_a=embeddings[a][la - 1],
                                       pool_b=embeddings[b][lb - 1], index=self.index)

        return get


def _fd_vs_backward(f_real: Callable[[Tensor], Tensor], f_frozen: Callable[[Tensor], Tensor],
                    x: Tensor, rtol=1e-4, atol=1e-7, h=1e-6) -> str | None:
    """Analytic gradient of the real loss vs central FD of the teacher-frozen
    functional form; both must agree in value at the base point first."""
    real = f_real(x)
    frozen = f_frozen(x)
    if abs(float(real.data) - float(frozen.data)) > 1e-10:
        return f"value mismatch between real and frozen forms: {float(real.data)} vs {float(frozen.data)}"
    g = backward(real).get(x)
    g = np.zeros_like(x.data) if g is None else g.data
    fd = finite_diff_grad(f_frozen, x, h=h)
    if not np.allclose(g, fd, rtol=rtol, atol=atol):
        err = np.abs(g - fd) / np.maximum(np.abs(fd), atol)
        return f"max relative error {err.max():.3e}"
    return None


# -- criterion 1: gradient parity per loss -----------------------------------------

def check_grad_parity_losses() -> str | None:
    rng = np.random.default_rng(11)
    B, K, d = 8, 6, 8
    tau, alpha, beta = 0.4, 0.1, 1.0
    emb_b = Tensor(_unit(rng, B, d))
    index = _contrastive_index(rng, B, K)
    x0 = Tensor(rng.standard_normal((B, d)), requires_grad=True)

    def dists(xt, frozen_of=None):
        src = Tensor(frozen_of.data.copy()) if frozen_of is not None else xt
        va, vb = l2_normalize(src), l2_normalize(emb_b)
        return {
            "p_a": ContrastiveDistribution(_scores(va, va, index, tau), tau, "vcl"),
            "p_b": ContrastiveDistribution(_scores(vb, vb, index, tau), tau, "vcl"),
            "q_ab": ContrastiveDistribution(_scores(va, vb, index, tau), tau, "icl"),
            "q_ba": ContrastiveDistribution(_scores(vb, va, index, tau), tau, "icl"),
        }

    failures = []

    # vanilla InfoNCE (no stop-gradients): plain FD
    def vcl_like(xt):
        return vcl_loss(dists(xt)["p_a"])

    msg = _fd_vs_backward(vcl_like, vcl_like, x0)
    if msg:
        failures.append(f"vanilla contrastive: {msg}")

    # pairwise interactive loss, both directions
    def icl_like(xt):
        d_ = dists(xt)
        return vcl_loss(d_["q_ab"]) + vcl_loss(d_["q_ba"])

    msg = _fd_vs_backward(icl_like, icl_like, x0)
    if msg:
        failures.append(f"interactive contrastive: {msg}")

    # soft vanilla mimicry: teachers frozen in the FD form
    def soft_vcl_real(xt):
        d_ = dists(xt)
        return soft_vcl_loss([d_["p_a"], d_["p_b"]])

    def soft_vcl_frozen(xt):
        d_ = dists(xt)
        t_ = dists(x0, frozen_of=x0)
        return tmean(_kl_rows(t_["p_b"], d_["p_a"])) + tmean(_kl_rows(t_["p_a"], d_["p_b"]))

    msg = _fd_vs_backward(soft_vcl_real, soft_vcl_frozen, x0)
    if msg:
        failures.append(f"soft vanilla mimicry: {msg}")

    # soft interactive mimicry
    def soft_icl_real(xt):
        d_ = dists(xt)
        return soft_icl_loss({(0, 1): d_["q_ab"], (1, 0): d_["q_ba"]})

    def soft_icl_frozen(xt):
        d_ = dists(xt)
        t_ = dists(x0, frozen_of=x0)
        return tmean(_kl_rows(t_["q_ba"], d_["q_ab"])) + tmean(_kl_rows(t_["q_ab"], d_["q_ba"]))

    msg = _fd_vs_backward(soft_icl_real, soft_icl_frozen, x0)
    if msg:
        failures.append(f"soft interactive mimicry: {msg}")

    # combined pair loss
    def pair_real(xt):
        va = l2_normalize(xt)
        vb = l2_normalize(emb_b)
        sets = PairContrastiveSets(pool_a=va, pool_b=vb, index=index)
        return mcl_pair_loss(va, vb, sets, tau, alpha, beta)

    def pair_frozen(xt):
        d_ = dists(xt)
        t_ = dists(x0, frozen_of=x0)
        hard = (_infonce_rows(d_["p_a"]) + _infonce_rows(d_["p_b"])
                + _infonce_rows(d_["q_ab"]) + _infonce_rows(d_["q_ba"]))
        soft = (_kl_rows(t_["p_b"], d_["p_a"]) + _kl_rows(t_["p_a"], d_["p_b"])
                + _kl_rows(t_["q_ba"], d_["q_ab"]) + _kl_rows(t_["q_ab"], d_["q_ba"]))
        return tmean(hard * alpha + soft * beta)

    msg = _fd_vs_backward(pair_real, pair_frozen, x0)
    if msg:
        failures.append(f"pairwise mutual contrastive: {msg}")

    failures.extend(_grad_parity_layerwise())
    failures.extend(_grad_parity_network_losses())
    return "; ".join(failures) if failures else None


def _grad_parity_layerwise() -> list[str]:
    rng = np.random.default_rng(12)
    M, L, B, K, d = 2, 2, 6, 4, 8
    tau, alpha, beta = 0.4, 0.1, 1.0
    meta = MetaNetwork(M, L, d, seed=5)
    raw = [[Tensor(rng.standard_normal((B, d))) for _ in range(L)] for _ in range(M)]
    index = _contrastive_index(rng, B, K)
    failures = []

    def layerwise(x_for_00, meta_params=None, frozen_all=None):
        emb = [[l2_normalize(raw[m][l]) for l in range(L)] for m in range(M)]
        emb[0][0] = l2_normalize(x_for_00 if frozen_all is None else Tensor(frozen_all.data.copy()))

        def get(a, b, la, lb):
            return PairContrastiveSets(pool_a=emb[a][la - 1], pool_b=emb[b][lb - 1], index=index)

        return lmcl_loss(emb, get, meta, "weighted", tau, alpha, beta,
                         meta_params=meta_params).loss

    # embedding-side parity: teachers and matching weights both stop gradients,
    # so the FD form freezes everything except the hard/soft student paths.
    x0 = Tensor(rng.standard_normal((B, d)), requires_grad=True)

    def real(xt):
        return layerwise(xt)

    def frozen(xt):
        emb = [[l2_normalize(raw[m][l]) for l in range(L)] for m in range(M)]
        emb_t = [[Tensor(e.data.copy()) for e in row] for row in emb]
        emb[0][0] = l2_normalize(xt)
        emb_t[0][0] = Tensor(l2_normalize(Tensor(x0.data.copy())).data)
        total = None
        for a in range(M):
            for b in range(a + 1, M):
                for la in range(1, L + 1):
                    for lb in range(1, L + 1):
                        lam = match_weight(meta.projection(a, la), meta.projection(b, lb),
                                           emb_t[a][la - 1], emb_t[b][lb - 1])
                        lam = constant(lam.data)
                        va, vb = emb[a][la - 1], emb[b][lb - 1]
                        ta, tb = emb_t[a][la - 1], emb_t[b][lb - 1]
                        d_ = {
                            "p_a": ContrastiveDistribution(_scores(va, va, index, tau), tau, "vcl"),
                            "p_b": ContrastiveDistribution(_scores(vb, vb, index, tau), tau, "vcl"),
                            "q_ab": ContrastiveDistribution(_scores(va, vb, index, tau), tau, "icl"),
                            "q_ba": ContrastiveDistribution(_scores(vb, va, index, tau), tau, "icl"),
                        }
                        t_ = {
                            "p_a": ContrastiveDistribution(_scores(ta, ta, index, tau), tau, "vcl"),
                            "p_b": ContrastiveDistribution(_scores(tb, tb, index, tau), tau, "vcl"),
                            "q_ab": ContrastiveDistribution(_scores(ta, tb, index, tau), tau, "icl"),
                            "q_ba": ContrastiveDistribution(_scores(tb, ta, index, tau), tau, "icl"),
                        }
                        hard = (_infonce_rows(d_["p_a"]) + _infonce_rows(d_["p_b"])
                                + _infonce_rows(d_["q_ab"]) + _infonce_rows(d_["q_ba"]))
                        soft = (_kl_rows(t_["p_b"], d_["p_a"]) + _kl_rows(t_["p_a"], d_["p_b"])
                                + _kl_rows(t_["q_ba"], d_["q_ab"]) + _kl_rows(t_["q_ab"], d_["q_ba"]))
                        term = tmean((hard * alpha + soft * beta) * lam)
                        total = term if total is None else total + term
        return total

    msg = _fd_vs_backward(real, frozen, x0)
    out = [f"layerwise (embedding side): {msg}"] if msg else []

    # projection-side parity: gradients flow through the matching weight only;
    # plain FD applies because the weight is smooth in xi and the rest of the
    # loss does not involve xi at all.
    xi_name = "xi.n0.s1"
    xi0 = meta.params[xi_name]

    def with_xi(xt):
        params = dict(meta.params)
        params[xi_name] = xt
        return layerwise(Tensor(x0.data.copy()), meta_params=params)

    real_loss = with_xi(xi0)
    g = backward(real_loss).get(xi0)
    g = np.zeros_like(xi0.data) if g is None else g.data
    fd = finite_diff_grad(with_xi, xi0, h=1e-6)
    if not np.allclose(g, fd, rtol=1e-4, atol=1e-7):
        out.append("layerwise (projection side): gradient mismatch "
                   f"{np.abs(g - fd).max():.3e}")
    return out


def _grad_parity_network_losses() -> list[str]:
    fix = _TinyCohort.build(seed=21)
    failures = []
    probe_name = "net0.stage1.w"
    theta = fix.cohort.theta()
    probe = theta[probe_name]

    def through_net(loss_of_outs, frozen_teachers: bool):
        def f(xt):
            with fix.cohort.bound({probe_name: xt}):
                outs = [net.forward(fix.x) for net in fix.cohort.networks]
                return loss_of_outs(outs)

        return f

    # branch cross-entropy over every classifier of every network
    def task_of(outs):
        total = None
        for o in outs:
            for z in o.logits:
                t = cross_entropy(z, fix.labels)
                total = t if total is None else total + t
        return total

    msg = _fd_vs_backward(through_net(task_of, False), through_net(task_of, False), probe)
    if msg:
        failures.append(f"branch task loss: {msg}")

    # gate-supervised ensemble cross-entropy
    def gate_of(outs):
        ens = []
        for m, o in enumerate(outs):
            w = gate_weights(fix.cohort.gates[m], o.features)
            ens.append(ensemble_logits(o.logits, w))
        return gate_task_loss(ens, fix.labels)

    msg = _fd_vs_backward(through_net(gate_of, False), through_net(gate_of, False), probe)
    if msg:
        failures.append(f"gate task loss: {msg}")

    # ensemble KL: the real loss detaches teachers internally; the FD form
    # must pin the teacher ensembles at the base point
    def _ens_parts(outs):
        ens = []
        for m, o in enumerate(outs):
            w = gate_weights(fix.cohort.gates[m], o.features)
            ens.append(ensemble_logits(o.logits, w))
        return [o.logits[-1] for o in outs], ens

    def ens_real(xt):
        with fix.cohort.bound({probe_name: xt}):
            outs = [net.forward(fix.x) for net in fix.cohort.networks]
            finals, ens = _ens_parts(outs)
            return ensemble_kl_loss(finals, ens, 3.0)

    with fix.cohort.bound({probe_name: Tensor(probe.data.copy())}):
        outs0 = [net.forward(fix.x) for net in fix.cohort.networks]
        _, ens0 = _ens_parts(outs0)
        ens0 = [constant(e.data.copy()) for e in ens0]

    def ens_frozen(xt):
        with fix.cohort.bound({probe_name: xt}):
            outs = [net.forward(fix.x) for net in fix.cohort.networks]
            finals = [o.logits[-1] for o in outs]
            return ensemble_kl_loss(finals, ens0, 3.0)

    msg = _fd_vs_backward(ens_real, ens_frozen, probe)
    if msg:
        failures.append(f"ensemble distillation loss: {msg}")

    # total objective: sum the frozen forms
    def total_real(xt):
        with fix.cohort.bound({probe_name: xt}):
            outs = [net.forward(fix.x) for net in fix.cohort.networks]
            finals, ens = _ens_parts(outs)
            emb = [[l2_normalize(e) for e in o.embeddings] for o in outs]
            lm = lmcl_loss(emb, fix.sets_get(emb), None, "all_to_all",
                           fix.tau, fix.alpha, fix.beta)
            return task_of(outs) + gate_of(outs) + ensemble_kl_loss(finals, ens, 3.0) + lm.loss

    with fix.cohort.bound({probe_name: Tensor(probe.data.copy())}):
        outs0 = [net.forward(fix.x) for net in fix.cohort.networks]
        emb0 = [[Tensor(l2_normalize(e).data.copy()) for e in o.embeddings] for o in outs0]

    def total_frozen(xt):
        with fix.cohort.bound({probe_name: xt}):
            outs = [net.forward(fix.x) for net in fix.cohort.networks]
            finals = [o.logits[-1] for o in outs]
            emb = [[l2_normalize(e) for e in o.embeddings] for o in outs]
            L = len(emb[0])
            lm = None
            for la in range(1, L + 1):
                for lb in range(1, L + 1):
                    va, vb = emb[0][la - 1], emb[1][lb - 1]
                    ta, tb = emb0[0][la - 1], emb0[1][lb - 1]
                    d_ = {
                        "p_a": ContrastiveDistribution(_scores(va, va, fix.index, fix.tau), fix.tau, "vcl"),
                        "p_b": ContrastiveDistribution(_scores(vb, vb, fix.index, fix.tau), fix.tau, "vcl"),
                        "q_ab": ContrastiveDistribution(_scores(va, vb, fix.index, fix.tau), fix.tau, "icl"),
                        "q_ba": ContrastiveDistribution(_scores(vb, va, fix.index, fix.tau), fix.tau, "icl"),
                    }
                    t_ = {
                        "p_a": ContrastiveDistribution(_scores(ta, ta, fix.index, fix.tau), fix.tau, "vcl"),
                        "p_b": ContrastiveDistribution(_scores(tb, tb, fix.index, fix.tau), fix.tau, "vcl"),
                        "q_ab": ContrastiveDistribution(_scores(ta, tb, fix.index, fix.tau), fix.tau, "icl"),
                        "q_ba": ContrastiveDistribution(_scores(tb, ta, fix.index, fix.tau), fix.tau, "icl"),
                    }
                    hard = (_infonce_rows(d_["p_a"]) + _infonce_rows(d_["p_b"])
                            + _infonce_rows(d_["q_ab"]) + _infonce_rows(d_["q_ba"]))
                    soft = (_kl_rows(t_["p_b"], d_["p_a"]) + _kl_rows(t_["p_a"], d_["p_b"])
                            + _kl_rows(t_["q_ba"], d_["q_ab"]) + _kl_rows(t_["q_ab"], d_["q_ba"]))
                    term = tmean(hard * fix.alpha + soft * fix.beta)
                    lm = term if lm is None else lm + term
            return task_of(outs) + gate_of(outs) + ensemble_kl_loss(finals, ens0, 3.0) + lm

    msg = _fd_vs_backward(total_real, total_frozen, probe)
    if msg:
        failures.append(f"total objective: {msg}")
    return failures


# -- criterion 2: distribution invariants ----------------------------------------------

def check_distribution_invariants() -> str | None:
    rng = np.random.default_rng(3)
    B, d = 10, 6
    for trial in range(1000):  # 10 rows per trial -> 10k distributions
        K = int(rng.integers(1, 9))
        anch = Tensor(_unit(rng, B, d))
        pool = Tensor(_unit(rng, K + 1, d))
        tau = float(rng.uniform(0.05, 1.0))
        builder = vcl_distribution if trial % 2 == 0 else icl_distribution
        p = builder(anch, pool, tau).probs.data
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6) or (p < 0).any():
            return f"trial {trial}: invalid distribution"
    # interactive == vanilla when the two networks share weights
    fix = _TinyCohort.build(seed=31)
    fix.cohort.networks[1] = type(fix.cohort.networks[0])(fix.cohort.networks[0].spec,
                                                          fix.cohort.networks[0].seed)
    outs, emb = fix.embeddings()
    for l in range(len(emb[0])):
        va, vb = emb[0][l], emb[1][l]
        q = _scores(va, vb, fix.index, fix.tau)
        p = _scores(va, va, fix.index, fix.tau)
        if not np.allclose(q.data, p.data, atol=1e-9):
            return f"shared-weight collapse violated at stage {l + 1}"
    return None


# -- criterion 3: detach contracts ----------------------------------------------------

def check_detach_contracts() -> str | None:
    rng = np.random.default_rng(41)
    B, K, d = 6, 4, 8
    index = _contrastive_index(rng, B, K)
    teacher_raw = Tensor(rng.standard_normal((B, d)), requires_grad=True)
    student_raw = Tensor(rng.standard_normal((B, d)), requires_grad=True)
    va, vb = l2_normalize(student_raw), l2_normalize(teacher_raw)
    tau = 0.4
    p_a = ContrastiveDistribution(_scores(va, va, index, tau), tau, "vcl")
    p_b = ContrastiveDistribution(_scores(vb, vb, index, tau), tau, "vcl")
    # teacher-only appearance: a single directional KL with p_b as teacher
    g = backward(tmean(_kl_rows(p_b, p_a)))
    if teacher_raw in g:
        return "soft vanilla mimicry leaks gradient into the teacher"
    q_ab = ContrastiveDistribution(_scores(va, vb, index, tau), tau, "icl")
    q_ba = ContrastiveDistribution(_scores(vb, va, index, tau), tau, "icl")
    g = backward(tmean(_kl_rows(q_ba, q_ab)))
    # q_ab's contrast pool is vb -> teacher_raw legally receives gradient through
    # the student side; the *teacher distribution* q_ba must contribute nothing.
    base = g[teacher_raw].data.copy()
    g2 = backward(tmean(_kl_rows(ContrastiveDistribution(constant(q_ba.logits.data), tau, "icl"), q_ab)))
    if not np.allclose(base, g2[teacher_raw].data, atol=0):
        return "soft interactive mimicry leaks gradient through the teacher distribution"
    # ensemble distillation: teacher parameters get exactly nothing
    t_param = Tensor(rng.standard_normal((B, 5)), requires_grad=True)
    s_param = Tensor(rng.standard_normal((B, 5)), requires_grad=True)
    loss = ensemble_kl_loss([s_param * 1.0, s_param * 0.5], [t_param * 1.0, t_param * 2.0], 3.0)
    g = backward(loss)
    if t_param in g:
        return "ensemble distillation leaks gradient into teacher ensembles"
    return None


# -- criterion 4: hypergradient oracle ---------------------------------------------------

def check_hypergradient_toy() -> str | None:
    theta = {"t": Tensor(np.asarray(1.0), requires_grad=True)}
    pi = {"p": Tensor(np.asarray(0.0), requires_grad=True)}

    def inner(th):
        diff = th["t"] - pi["p"]
        return diff * diff * 0.5

    def task(th):
        return th["t"] * th["t"] * 0.5

    grads, _ = unrolled_hypergradient(theta, pi, inner, task, k_inner=1, eta=0.1)
    if abs(float(grads["p"]) - 0.0729) > 1e-9:
        return f"toy hypergradient {float(grads['p'])}, expected 0.0729"
    return None


def check_hypergradient_fd_small_cohort() -> str | None:
    for seed in (1, 2, 3):
        fix = _TinyCohort.build(seed=seed)
        theta = fix.cohort.theta()
        pi = fix.cohort.pi()

        def inner_fn(th):
            with fix.cohort.bound(th):
                outs = [net.forward(fix.x) for net in fix.cohort.networks]
                emb = [[l2_normalize(e) for e in o.embeddings] for o in outs]
                return lmcl_loss(emb, fix.sets_get(emb), fix.cohort.meta, "weighted",
                                 fix.tau, fix.alpha, fix.beta, graph_teachers=True).loss

        def task_fn(th):
            with fix.cohort.bound(th):
                outs = [net.forward(fix.x) for net in fix.cohort.networks]
                total = None
                for o in outs:
                    for z in o.logits:
                        t = cross_entropy(z, fix.labels)
                        total = t if total is None else total + t
                return total

        k_inner, eta = 2, 0.05
        grads, _ = unrolled_hypergradient(theta, pi, inner_fn, task_fn, k_inner, eta)

        rng = np.random.default_rng(seed + 500)
        h = 1e-5
        for name in pi:
            flat = pi[name].data.reshape(-1)
            coords = rng.choice(flat.size, size=4, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                hi = float(unrolled_task_value(theta, inner_fn, task_fn, k_inner, eta).data)
                flat[c] = orig - h
                lo = float(unrolled_task_value(theta, inner_fn, task_fn, k_inner, eta).data)
                flat[c] = orig
                fd = (hi - lo) / (2 * h)
                got = grads[name].reshape(-1)[c]
                if abs(got - fd) > 1e-3 * max(abs(fd), abs(got)) + 1e-8:
                    return (f"seed {seed}, {name}[{c}]: hypergradient {got:.6e} "
                            f"vs finite difference {fd:.6e}")
    return None


# -- criterion 5: mutual-information bound ------------------------------------------------

def check_mi_bound() -> str | None:
    rng = np.random.default_rng(51)
    for _ in range(200):
        K = int(rng.integers(2, 40))
        anch = Tensor(_unit(rng, 4, 6))
        pool = Tensor(_unit(rng, K + 1, 6))
        loss = float(vcl_loss(icl_distribution(anch, pool, 0.3)).data)
        if mi_bound(loss, K) > math.log(K) + 1e-12:
            return "bound exceeded ln K"
    uniform = mi_bound(math.log(11), 10)
    if abs(uniform - (math.log(10) - math.log(11))) > 1e-9:
        return f"uniform construction gave {uniform}"
    return None


# -- criterion 6: ablation identities -----------------------------------------------------

def check_ablation_identities() -> str | None:
    rng = np.random.default_rng(61)
    B, K, d = 8, 5, 8
    index = _contrastive_index(rng, B, K)
    tau, alpha, beta = 0.3, 0.1, 1.0
    emb = [[Tensor(_unit(rng, B, d))], [Tensor(_unit(rng, B, d))]]  # single stage

    def get(a, b, la, lb):
        return PairContrastiveSets(pool_a=emb[a][la - 1], pool_b=emb[b][lb - 1], index=index)

    # one-to-one + single stage == independently coded oracle
    res = lmcl_loss(emb, get, None, "one_to_one", tau, alpha, beta)
    oracle = original_mcl_oracle(emb[0][0].data, emb[1][0].data, index, tau, alpha, beta)
    if abs(float(res.loss.data) - oracle) > 1e-9:
        return f"single-stage one-to-one {float(res.loss.data)} vs oracle {oracle}"

    # all-to-all == weighted with lambda forced to 1
    emb3 = [[Tensor(_unit(rng, B, d)) for _ in range(3)] for _ in range(2)]

    def get3(a, b, la, lb):
        return PairContrastiveSets(pool_a=emb3[a][la - 1], pool_b=emb3[b][lb - 1], index=index)

    all_to_all = lmcl_loss(emb3, get3, None, "all_to_all", tau, alpha, beta)
    ones = Tensor(np.ones(B))
    forced = None
    for a in range(2):
        for b in range(a + 1, 2):
            for la in range(1, 4):
                for lb in range(1, 4):
                    term = mcl_pair_loss(emb3[a][la - 1], emb3[b][lb - 1], get3(a, b, la, lb),
                                         tau, alpha, beta, weights=ones)
                    forced = term if forced is None else forced + term
    if abs(float(all_to_all.loss.data) - float(forced.data)) > 1e-9:
        return "all-to-all differs from weighted with unit lambda"

    # uniform gate == plain mean aggregation
    z = [Tensor(rng.standard_normal((B, 5))) for _ in range(3)]
    w = Tensor(np.full((B, 3), 1.0 / 3))
    mean_by_hand = np.mean([t.data for t in z], axis=0)
    if not np.allclose(ensemble_logits(z, w).data, mean_by_hand, atol=1e-12):
        return "uniform gate differs from mean aggregation"
    return None


# -- criterion 7: mining semantics -----------------------------------------------------------

def check_mining_semantics() -> str | None:
    rng = np.random.default_rng(71)
    labels = np.repeat(np.arange(12), 6)
    for trial in range(1000):
        batch = sample_batch(labels, 12, rng)
        classes, counts = np.unique(batch.labels, return_counts=True)
        if classes.size != 6 or (counts != 2).any():
            return f"batch {trial}: class layout violated"
        idx = batch_index_matrix(batch)
        for i in range(12):
            if batch.labels[idx[i, 0]] != batch.labels[i] or idx[i, 0] == i:
                return f"batch {trial}: positive wrong for anchor {i}"
            if (batch.labels[idx[i, 1:]] == batch.labels[i]).any():
                return f"batch {trial}: negative shares the anchor label"
    bank = MemoryBank(capacity=96, dim=5, rng=rng, num_classes=5)
    ops = 0
    while ops < 10_000:
        n = int(rng.integers(1, 16))
        v = rng.standard_normal((n, 5))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        bank.update(v, rng.integers(0, 5, size=n))
        ops += 1
        for _ in range(2):
            lab = int(rng.integers(0, 5))
            try:
                r = bank.retrieve(lab, 12, rng)
            except (PositiveMiss, NegativeMiss):
                ops += 1
                continue
            if bank.labels[r.positions[0]] != lab or (bank.labels[r.positions[1:]] == lab).any():
                return "bank retrieval violated the label partition"
            ops += 1
    return None


# -- criterion 8: complexity counter ---------------------------------------------------------

def check_complexity_counter() -> str | None:
    rng = np.random.default_rng(81)
    for M, L, B, K in ((2, 3, 6, 4), (3, 2, 8, 5), (2, 1, 4, 2)):
        emb = [[Tensor(_unit(rng, B, 8)) for _ in range(L)] for _ in range(M)]
        index = _contrastive_index(rng, B, K)

        def get(a, b, la, lb):
            return PairContrastiveSets(pool_a=emb[a][la - 1], pool_b=emb[b][lb - 1], index=index)

        similarity_counter.reset()
        lmcl_loss(emb, get, None, "all_to_all", 0.3, 0.1, 1.0)
        expected = B * 2 * (K + 1) * L * L * M * (M - 1)
        got = similarity_counter.count
        similarity_counter.reset()
        if got != expected:
            return f"M={M} L={L}: counted {got}, closed form {expected}"
    return None


# -- criterion 10: inference graph --------------------------------------------------------

def check_inference_graph() -> str | None:
    fix = _TinyCohort.build(seed=91)
    rng = np.random.default_rng(92)
    x = Tensor(rng.standard_normal((32, 8)))
    for net in fix.cohort.networks:
        full = net.infer_logits(x).data
        stripped = net.strip_auxiliary().infer_logits(x).data
        if not np.array_equal(full, stripped):
            return "stripping auxiliaries changed the predictions"
    return None


CHECKS: list[tuple[str, Callable[[], str | None]]] = [
    ("gradient_parity", check_grad_parity_losses),
    ("distribution_invariants", check_distribution_invariants),
    ("detach_contracts", check_detach_contracts),
    ("hypergradient_toy", check_hypergradient_toy),
    ("hypergradient_fd_small_cohort", check_hypergradient_fd_small_cohort),
    ("mi_bound", check_mi_bound),
    ("ablation_identities", check_ablation_identities),
    ("mining_semantics", check_mining_semantics),
    ("complexity_counter", check_complexity_counter),
    ("inference_graph", check_inference_graph),
]


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            detail = f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, detail is None, detail or "", time.perf_counter() - start))
    return results
