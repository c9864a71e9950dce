"""Layer-to-layer mutual contrastive loss with learnable matching weights.

Every unordered network pair contributes one pairwise MCL term per (stage,
stage) combination; a matching weight scales each term per sample. Weights
come in three modes: one-to-one (same-stage pairs only), all-to-all (every
pair, weight 1), and weighted (a sigmoid similarity of the two projected
embeddings, Eq.-style self-attention). Embeddings entering the weight are
detached, so the match projections influence the networks only as multipliers
and are themselves trained exclusively by the meta loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .losses import LossFlags, PairContrastiveSets, mcl_pair_loss
from .nn import MetaNetwork
from .tensor import Tensor, barrier, detach, l2_normalize, matmul, mul, sigmoid, tsum

__all__ = ["MatchMode", "match_weight", "lmcl_loss", "LayerwiseResult"]

MATCH_MODES = ("one_to_one", "all_to_all", "weighted")
MatchMode = str


def match_weight(xi_a: Tensor, xi_b: Tensor, v_a: Tensor, v_b: Tensor,
                 via_barrier: bool = False) -> Tensor:
    """Per-sample matching weight in (0,1): sigmoid of the cosine of the two
    projected embeddings. Inputs are detached (or barrier-stopped for the meta
    loop's exact unrolled differentiation); gradients reach only the
    projections."""
    if xi_a.shape[0] != xi_a.shape[1] or xi_b.shape[0] != xi_b.shape[1]:
        raise ValueError("match projections must be square")
    if v_a.shape[-1] != xi_a.shape[0] or v_b.shape[-1] != xi_b.shape[0]:
        raise ValueError(
            f"embedding width {v_a.shape[-1]}/{v_b.shape[-1]} does not fit projections "
            f"{xi_a.shape}/{xi_b.shape}")
    stop = barrier if via_barrier else detach
    pa = l2_normalize(matmul(stop(v_a), xi_a))
    pb = l2_normalize(matmul(stop(v_b), xi_b))
    return sigmoid(tsum(mul(pa, pb), axis=-1))


@dataclass
class LayerwiseResult:
    loss: Tensor
    # mean matching weight per (net_a, net_b, stage_a, stage_b), 1-based stages
    lambda_means: dict[tuple[int, int, int, int], float] = field(default_factory=dict)


def lmcl_loss(embeddings: Sequence[Sequence[Tensor]],
              sets: Mapping[tuple[int, int, int, int], PairContrastiveSets] | Callable,
              meta: MetaNetwork | None,
              mode: MatchMode,
              tau: float,
              alpha: float,
              beta: float,
              flags: LossFlags = LossFlags(),
              meta_params: Mapping[str, Tensor] | None = None,
              graph_teachers: bool = False) -> LayerwiseResult:
    """Sum of weighted pairwise MCL terms over network pairs and stage pairs.

    ``embeddings[m][l-1]`` is the unit-norm (B, d) embedding of network m at
    stage l. ``sets`` maps (a, b, la, lb) to the aligned contrastive layout for
    that term (or is a callable producing it).
    """
    if mode not in MATCH_MODES:
        raise ValueError(f"unknown matching mode {mode!r}; expected one of {MATCH_MODES}")
    if mode == "weighted" and meta is None:
        raise ValueError("weighted matching needs the match projections")
    M = len(embeddings)
    if M < 2:
        raise ValueError("mutual learning needs at least 2 networks")
    L = len(embeddings[0])
    get_sets = sets if callable(sets) else lambda a, b, la, lb: sets[(a, b, la, lb)]

    total: Tensor | None = None
    lam_means: dict[tuple[int, int, int, int], float] = {}
    for a in range(M):
        for b in range(a + 1, M):
            for la in range(1, L + 1):
                for lb in range(1, L + 1):
                    if mode == "one_to_one" and la != lb:
                        continue
                    v_a = embeddings[a][la - 1]
                    v_b = embeddings[b][lb - 1]
                    weights = None
                    if mode == "weighted":
                        weights = match_weight(
                            meta.projection(a, la, meta_params),
                            meta.projection(b, lb, meta_params),
                            v_a, v_b, via_barrier=graph_teachers)
                        lam_means[(a, b, la, lb)] = float(weights.data.mean())
                    term = mcl_pair_loss(
                        v_a, v_b, get_sets(a, b, la, lb), tau, alpha, beta,
                        weights=weights, flags=flags,
                        sources=((a, la), (b, lb)), graph_teachers=graph_teachers)
                    total = term if total is None else total + term
    return LayerwiseResult(total, lam_means)
