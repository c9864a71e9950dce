"""Bilevel training of the match projections via unrolled hypergradients.

One meta step, given the current network parameters theta and match
projections pi, on a fixed mini-batch:

  (i)   k_inner plain gradient steps on the layer-wise contrastive loss,
        theta_{k+1} = theta_k - eta * grad(theta_k; pi);
  (ii)  one plain gradient step on the task loss;
  (iii) the task loss at the adapted parameters is differentiated back through
        all unrolled updates to pi, which takes one descent step.

theta is never mutated: the unrolled iterates are fresh graph tensors, and the
surrounding trainer additionally snapshots/restores the live parameter arrays
to make the no-mutation contract checkable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, barrier_transparent, constant, mul, sub

__all__ = [
    "MetaLoopConfig",
    "MetaStepResult",
    "ParameterSnapshot",
    "SnapshotError",
    "unrolled_task_value",
    "unrolled_hypergradient",
    "meta_step",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaLoopConfig:
    k_inner: int = 2
    eta: float = 0.05  # inner step size; trainers default it to the outer lr
    period: int = 50  # run the meta loop every this many outer iterations
    lr_pi: float = 0.005
    fd_fallback: bool = False  # debug only: hypergradient via central differences
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.k_inner < 1:
            raise ValueError("k_inner must be at least 1")
        if self.eta <= 0 or self.lr_pi <= 0:
            raise ValueError("learning rates must be positive")
        if self.period < 1:
            raise ValueError("meta period must be at least 1")


class SnapshotError(RuntimeError):
    pass


class ParameterSnapshot:
    """Byte-exact save/restore of named arrays; nested snapshots are refused."""

    def __init__(self):
        self._saved: dict[str, np.ndarray] | None = None

    @property
    def active(self) -> bool:
        return self._saved is not None

    def take(self, arrays: Mapping[str, np.ndarray]) -> None:
        if self._saved is not None:
            raise SnapshotError("nested snapshot forbidden")
        self._saved = {k: v.copy() for k, v in arrays.items()}

    def restore(self, arrays: Mapping[str, np.ndarray]) -> None:
        if self._saved is None:
            raise SnapshotError("no snapshot to restore")
        for k, v in arrays.items():
            np.copyto(v, self._saved[k])
        self._saved = None


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _descend(theta: dict[str, Tensor], grads: Mapping[Tensor, Tensor], eta: float) -> dict[str, Tensor]:
    step = constant(np.asarray(float(eta)))
    out = {}
    for name, t in theta.items():
        g = grads.get(t)
        out[name] = t if g is None else sub(t, mul(step, g))
    return out


def unrolled_task_value(theta0: Mapping[str, Tensor], inner_fn: LossFn, task_fn: LossFn,
                        k_inner: int, eta: float) -> Tensor:
    """Task loss after k_inner inner-loss steps plus one task step, all on the graph."""
    theta = dict(theta0)
    for _ in range(k_inner):
        grads = backward(inner_fn(theta), wrt=theta.values())
        theta = _descend(theta, grads, eta)
    grads = backward(task_fn(theta), wrt=theta.values())
    theta = _descend(theta, grads, eta)
    return task_fn(theta)


def unrolled_hypergradient(theta0: Mapping[str, Tensor], pi: Mapping[str, Tensor],
                           inner_fn: LossFn, task_fn: LossFn,
                           k_inner: int, eta: float) -> tuple[dict[str, np.ndarray], float]:
    """Exact reverse-mode gradient of the adapted task loss with respect to pi.

    pi entries the loss never touches get zero gradients.
    """
    final = unrolled_task_value(theta0, inner_fn, task_fn, k_inner, eta)
    with barrier_transparent():
        grads = backward(final, wrt=pi.values())
    out = {name: (grads[t].data if t in grads else np.zeros_like(t.data)) for name, t in pi.items()}
    return out, float(final.data)


@dataclass
class MetaStepResult:
    applied: bool
    hypergrad_norm: float
    adapted_task_loss: float


def finite_difference_hypergradient(theta0: Mapping[str, Tensor], pi: Mapping[str, Tensor],
                                    inner_fn: LossFn, task_fn: LossFn,
                                    k_inner: int, eta: float,
                                    h: float = 1e-5) -> tuple[dict[str, np.ndarray], float]:
    """Debug-only oracle: central differences over every pi coordinate,
    re-running all unrolled stages per probe. Exact but O(|pi|) full unrolls."""
    base = float(unrolled_task_value(theta0, inner_fn, task_fn, k_inner, eta).data)
    out: dict[str, np.ndarray] = {}
    for name, t in pi.items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(unrolled_task_value(theta0, inner_fn, task_fn, k_inner, eta).data)
            flat[i] = orig - h
            lo = float(unrolled_task_value(theta0, inner_fn, task_fn, k_inner, eta).data)
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * h)
        out[name] = grad.reshape(t.data.shape)
    return out, base


def meta_step(theta: Mapping[str, Tensor], pi: Mapping[str, Tensor],
              inner_fn: LossFn, task_fn: LossFn, cfg: MetaLoopConfig) -> MetaStepResult:
    """Run the three stages and apply one descent step to pi in place.

    A non-finite hypergradient skips the update (logged) rather than poisoning
    the projections.
    """
    if cfg.fd_fallback:
        grads, adapted = finite_difference_hypergradient(
            theta, pi, inner_fn, task_fn, cfg.k_inner, cfg.eta, cfg.fd_step)
    else:
        grads, adapted = unrolled_hypergradient(theta, pi, inner_fn, task_fn, cfg.k_inner, cfg.eta)
    sq = 0.0
    finite = True
    for g in grads.values():
        if not np.isfinite(g).all():
            finite = False
            break
        sq += float((g * g).sum())
    if not finite or not math.isfinite(adapted):
        log.warning("non-finite hypergradient; skipping meta update")
        return MetaStepResult(False, float("nan"), adapted)
    for name, t in pi.items():
        t.data -= cfg.lr_pi * grads[name]
    return MetaStepResult(True, math.sqrt(sq), adapted)
