"""Gated logit ensembling and ensemble-to-peer distillation.

Each network aggregates its branch logits into a virtual teacher with
per-sample convex weights from its gate; the teacher is supervised by the
labels (which is what makes the gate learnable) and distilled into every other
network's final logits through a temperature-softened KL with the teacher side
detached.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .losses import cross_entropy
from .tensor import Tensor, constant, log_softmax, mul, sub, tmean, tsum

__all__ = ["ensemble_logits", "gate_task_loss", "ensemble_kl_loss", "logit_loss"]


def _softened_probs(logits: Tensor, temperature: float) -> np.ndarray:
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_logits(stage_logits: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Per-sample convex combination of branch logits, weights rows sum to 1."""
    L = len(stage_logits)
    if weights.shape[-1] != L:
        raise ValueError(f"{L} branches but {weights.shape[-1]} gate weights")
    out = None
    for l, z in enumerate(stage_logits):
        term = mul(weights[:, l : l + 1], z)
        out = term if out is None else out + term
    return out


def gate_task_loss(ensembles: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    """Cross-entropy of every network's ensemble logits against the labels."""
    total = cross_entropy(ensembles[0], labels)
    for z in ensembles[1:]:
        total = total + cross_entropy(z, labels)
    return total


def _kl_rows(p: Tensor, log_q: Tensor) -> Tensor:
    # p is a detached probability matrix; 0 log 0 handled by the floor
    plogp = constant(np.sum(p.data * np.log(np.maximum(p.data, 1e-12)), axis=-1))
    return sub(plogp, tsum(mul(p, log_q), axis=-1))


def ensemble_kl_loss(final_logits: Sequence[Tensor], ensembles: Sequence[Tensor],
                     temperature: float) -> Tensor:
    """T^2-scaled KL from every detached peer ensemble to each network's final
    logits, softened by T and averaged over the batch. Teachers are computed
    off the graph, which is the stop-gradient."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    M = len(final_logits)
    inv_t = constant(np.asarray(1.0 / temperature))
    total = None
    for a in range(M):
        log_q = log_softmax(mul(final_logits[a], inv_t))
        for b in range(M):
            if b == a:
                continue
            p = constant(_softened_probs(ensembles[b], temperature))
            term = tmean(_kl_rows(p, log_q))
            total = term if total is None else total + term
    return mul(total, constant(np.asarray(float(temperature) ** 2)))


def logit_loss(gate_task: Tensor, ensemble_kl: Tensor) -> Tensor:
    """The logit-level objective: gate supervision plus ensemble distillation."""
    return gate_task + ensemble_kl
