"""Contrastive distributions and every loss built on them.

Distributions are (K+1)-way softmaxes over temperature-scaled dot products of
unit-norm embeddings, with the positive pair always at index 0. "Vanilla"
distributions score an anchor against contrastives from its own network;
"interactive" ones score it against another network's embeddings of the same
samples. Soft variants mimic a peer's distribution through KL with the teacher
side detached.

Batched anchors are supported throughout: an anchor tensor of shape (B, d)
with a shared contrastive pool (P, d) and an integer index matrix (B, K+1)
selecting, per anchor, which pool rows act as positive (column 0) and
negatives. Per-anchor loss vectors are averaged over anchors before any cohort
summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .tensor import (
    Tensor,
    barrier,
    constant,
    exp,
    gather_rows,
    log,
    log_softmax,
    matmul,
    matmul_nt,
    maximum_const,
    mul,
    reshape,
    sub,
    take_rows,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "ContrastiveDistribution",
    "PairContrastiveSets",
    "similarity_counter",
    "vcl_distribution",
    "icl_distribution",
    "vcl_loss",
    "cohort_vcl_loss",
    "icl_loss_pairwise",
    "soft_vcl_loss",
    "soft_icl_loss",
    "kl_divergence",
    "mcl_pair_loss",
    "mi_bound",
    "cross_entropy",
    "LossFlags",
]

KL_FLOOR = 1e-12


class _SimilarityCounter:
    """Counts embedding dot products spent building contrastive distributions."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0

    def add(self, anchors: int, comparisons: int):
        self.count += anchors * comparisons


similarity_counter = _SimilarityCounter()


@dataclass
class ContrastiveDistribution:
    """A (K+1)-way similarity distribution; index 0 is the positive pair."""

    logits: Tensor  # (B, K+1), already divided by the temperature
    temperature: float
    direction: str  # "vcl" or "icl"
    anchor_source: tuple[int, int] | None = None  # (network, stage)
    contrast_source: tuple[int, int] | None = None

    @cached_property
    def probs(self) -> Tensor:
        return exp(self.log_probs)

    @cached_property
    def log_probs(self) -> Tensor:
        return log_softmax(self.logits)

    def probs_np(self) -> np.ndarray:
        """Probabilities as a plain array; the graph is never touched."""
        z = self.logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def num_contrastives(self) -> int:
        return self.logits.shape[-1]


@dataclass
class PairContrastiveSets:
    """Aligned contrastive sets for one (network a, stage la) x (network b, stage lb) term.

    ``index`` rows select pool positions per anchor (column 0 = positive). The
    same positions must identify the same source samples in both pools; that is
    what makes the interactive distributions and the soft KL terms well posed.
    ``anchor_rows`` optionally restricts to the anchors that found a positive.
    """

    pool_a: Tensor  # (P, d) unit-norm
    pool_b: Tensor  # (P, d) unit-norm
    index: np.ndarray  # (B_valid, K+1)
    anchor_rows: np.ndarray | None = None  # indices into the full batch


def _scores(anchors: Tensor, pool: Tensor, index: np.ndarray, tau: float) -> Tensor:
    B, width = index.shape
    if pool.shape[0] > 4 * width:
        # large pools (memory banks): gather the K+1 rows each anchor needs and
        # take row-wise dots instead of scoring the whole pool
        rows = take_rows(pool, index.reshape(-1))
        anchor_rep = take_rows(anchors, np.repeat(np.arange(B), width))
        sims = reshape(tsum(mul(rows, anchor_rep), axis=-1), (B, width))
    else:
        sims = gather_rows(matmul_nt(anchors, pool), index)
    similarity_counter.add(B, width)
    return mul(sims, constant(np.asarray(1.0 / tau)))


def _as_batch(t: Tensor) -> Tensor:
    return reshape(t, (1, t.shape[0])) if t.ndim == 1 else t


def _distribution(anchor: Tensor, contrastives: Tensor, tau: float, direction: str,
                  anchor_source=None, contrast_source=None) -> ContrastiveDistribution:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    anchors = _as_batch(anchor)
    pool = contrastives
    if pool.ndim != 2 or pool.shape[0] < 2:
        raise ValueError("need a positive plus at least one negative contrastive")
    if pool.shape[1] != anchors.shape[1]:
        raise ValueError(
            f"embedding widths differ: anchor {anchors.shape[1]}, contrastives {pool.shape[1]}")
    index = np.broadcast_to(np.arange(pool.shape[0]), (anchors.shape[0], pool.shape[0]))
    logits = _scores(anchors, pool, index, tau)
    return ContrastiveDistribution(logits, tau, direction, anchor_source, contrast_source)


def vcl_distribution(anchor: Tensor, contrastives: Tensor, tau: float,
                     source: tuple[int, int] | None = None) -> ContrastiveDistribution:
    """Same-network similarity distribution; contrastives row 0 is the positive."""
    return _distribution(anchor, contrastives, tau, "vcl", source, source)


def icl_distribution(anchor: Tensor, contrastives: Tensor, tau: float,
                     anchor_source: tuple[int, int] | None = None,
                     contrast_source: tuple[int, int] | None = None,
                     anchor_sample_ids: np.ndarray | None = None,
                     contrast_sample_ids: np.ndarray | None = None) -> ContrastiveDistribution:
    """Cross-network distribution: anchor from one network, contrastives from another.

    Both sides must come from the same underlying samples; pass the optional
    sample ids to have that checked.
    """
    if anchor_sample_ids is not None and contrast_sample_ids is not None:
        if not np.array_equal(anchor_sample_ids, contrast_sample_ids):
            raise ValueError("interactive distribution requires identical sample sets on both sides")
    return _distribution(anchor, contrastives, tau, "icl", anchor_source, contrast_source)


def _infonce_rows(dist: ContrastiveDistribution) -> Tensor:
    return -dist.log_probs[:, 0:1][:, 0]


def vcl_loss(dist: ContrastiveDistribution) -> Tensor:
    """InfoNCE on one distribution: -log prob of the positive, anchor-averaged."""
    return tmean(_infonce_rows(dist))


def cohort_vcl_loss(dists: Sequence[ContrastiveDistribution]) -> Tensor:
    total = vcl_loss(dists[0])
    for d in dists[1:]:
        total = total + vcl_loss(d)
    return total


def icl_loss_pairwise(directional: Mapping[tuple[int, int], ContrastiveDistribution]) -> Tensor:
    """Sum of both directional interactive losses over every unordered pair."""
    nets = {a for a, _ in directional} | {b for _, b in directional}
    if len(nets) < 2:
        raise ValueError("interactive learning needs at least 2 networks")
    total = None
    for a in sorted(nets):
        for b in sorted(nets):
            if a >= b:
                continue
            term = vcl_loss(directional[(a, b)]) + vcl_loss(directional[(b, a)])
            total = term if total is None else total + term
    return total


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) with both arguments floored at 1e-12, anchor-averaged."""
    pc = maximum_const(p, KL_FLOOR)
    qc = maximum_const(q, KL_FLOOR)
    rows = tsum(mul(p, sub(log(pc), log(qc))), axis=-1)
    return tmean(rows)


def _kl_rows(teacher: ContrastiveDistribution, student: ContrastiveDistribution,
             graph_teacher: bool = False) -> Tensor:
    """Per-anchor KL(detach(teacher) || student); the teacher is a frozen soft label.

    With ``graph_teacher`` the teacher probabilities stay on the graph behind a
    gradient barrier: first-order gradients are identical (none flow into the
    teacher), but the meta loop's hypergradient pass can see how the teacher
    values move across unrolled parameter iterates. The entropy term is a true
    constant either way since it never produces a parameter gradient.
    """
    p_np = teacher.probs_np()
    plogp = constant(np.sum(p_np * np.log(np.maximum(p_np, KL_FLOOR)), axis=-1))
    p = barrier(teacher.probs) if graph_teacher else constant(p_np)
    cross = tsum(mul(p, student.log_probs), axis=-1)
    return sub(plogp, cross)


def soft_vcl_loss(dists: Sequence[ContrastiveDistribution]) -> Tensor:
    """Mutual mimicry of same-network distributions, teachers detached."""
    if len({d.num_contrastives for d in dists}) != 1:
        raise ValueError("soft mimicry needs distributions over the same sample set")
    total = None
    for m, student in enumerate(dists):
        for l, teacher in enumerate(dists):
            if l == m:
                continue
            term = tmean(_kl_rows(teacher, student))
            total = term if total is None else total + term
    return total


def soft_icl_loss(directional: Mapping[tuple[int, int], ContrastiveDistribution]) -> Tensor:
    """Align each cross-network distribution with its reversed-direction peer."""
    nets = {a for a, _ in directional} | {b for _, b in directional}
    if len(nets) < 2:
        raise ValueError("interactive learning needs at least 2 networks")
    total = None
    for (a, b), student in sorted(directional.items()):
        teacher = directional[(b, a)]
        term = tmean(_kl_rows(teacher, student))
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossFlags:
    """Ablation switches for the four contrastive terms."""

    vcl: bool = True
    soft_vcl: bool = True
    icl: bool = True
    soft_icl: bool = True


def mcl_pair_loss(anchors_a: Tensor, anchors_b: Tensor, sets: PairContrastiveSets,
                  tau: float, alpha: float, beta: float,
                  weights: Tensor | None = None,
                  flags: LossFlags = LossFlags(),
                  sources: tuple[tuple[int, int], tuple[int, int]] | None = None,
                  graph_teachers: bool = False) -> Tensor:
    """Two-network mutual contrastive loss over one aligned contrastive layout.

    alpha scales the hard InfoNCE terms (both vanilla ones plus both
    interactive directions), beta the two soft mimicry sums. ``weights`` are
    optional per-anchor multipliers applied before the anchor average.
    ``graph_teachers`` keeps soft-label teachers on the graph behind gradient
    barriers (meta-loop use only).
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    src_a, src_b = sources if sources is not None else (None, None)
    if sets.anchor_rows is not None:
        anchors_a = take_rows(anchors_a, sets.anchor_rows)
        anchors_b = take_rows(anchors_b, sets.anchor_rows)
        if weights is not None:
            weights = take_rows(weights, sets.anchor_rows)
    idx, tau_ = sets.index, tau

    p_a = ContrastiveDistribution(_scores(anchors_a, sets.pool_a, idx, tau_), tau_, "vcl", src_a, src_a)
    p_b = ContrastiveDistribution(_scores(anchors_b, sets.pool_b, idx, tau_), tau_, "vcl", src_b, src_b)
    q_ab = ContrastiveDistribution(_scores(anchors_a, sets.pool_b, idx, tau_), tau_, "icl", src_a, src_b)
    q_ba = ContrastiveDistribution(_scores(anchors_b, sets.pool_a, idx, tau_), tau_, "icl", src_b, src_a)

    zero = constant(np.zeros(idx.shape[0]))
    hard = zero
    if flags.vcl:
        hard = hard + _infonce_rows(p_a) + _infonce_rows(p_b)
    if flags.icl:
        hard = hard + _infonce_rows(q_ab) + _infonce_rows(q_ba)
    soft = zero
    if flags.soft_vcl:
        soft = soft + _kl_rows(p_b, p_a, graph_teachers) + _kl_rows(p_a, p_b, graph_teachers)
    if flags.soft_icl:
        soft = soft + _kl_rows(q_ba, q_ab, graph_teachers) + _kl_rows(q_ab, q_ba, graph_teachers)

    rows = mul(hard, constant(np.asarray(float(alpha)))) + mul(soft, constant(np.asarray(float(beta))))
    if weights is not None:
        rows = mul(rows, weights)
    return tmean(rows)


def mi_bound(mean_icl_loss: float | Tensor, num_negatives: int) -> float:
    """Diagnostic lower bound on cross-network mutual information: ln K - mean loss."""
    loss = float(mean_icl_loss.data) if isinstance(mean_icl_loss, Tensor) else float(mean_icl_loss)
    return math.log(num_negatives) - loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    from .tensor import select_columns

    return -tmean(select_columns(log_softmax(logits), np.asarray(labels)))
