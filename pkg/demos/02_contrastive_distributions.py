"""Vanilla vs interactive contrastive distributions, soft mutual mimicry, and
the mutual-information diagnostic."""

import numpy as np

from mckd.losses import (
    icl_distribution, kl_divergence, mi_bound, soft_vcl_loss, vcl_distribution, vcl_loss,
)
from mckd.tensor import Tensor

rng = np.random.default_rng(1)


def unit(n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- a single anchor against 1 positive + K negatives -------------------------------
anchor = Tensor(np.array([1.0, 0.0]))
contrastives = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))  # positive first
p = vcl_distribution(anchor, contrastives, tau=1.0)
print("vanilla probs [pos, neg]:", p.probs.data.round(4))
print("InfoNCE loss -log p[0]  :", float(vcl_loss(p).data).__round__(4))

# interactive: anchor from network a, contrastives from network b, same samples
pool_b = Tensor(np.array([[0.6, 0.8], [0.0, 1.0]]))
q = icl_distribution(anchor, pool_b, tau=1.0)
print("interactive probs       :", q.probs.data.round(4))

# -- soft labels: a peer's distribution as a KL target ------------------------------------
p1 = Tensor(np.array([[0.75, 0.25]]))
p2 = Tensor(np.array([[0.5, 0.5]]))
print("\nKL(p2 || p1) =", round(float(kl_divergence(p2, p1).data), 6))
from mckd.losses import ContrastiveDistribution

d1 = ContrastiveDistribution(Tensor(np.log(p1.data)), 1.0, "vcl")
d2 = ContrastiveDistribution(Tensor(np.log(p2.data)), 1.0, "vcl")
print("soft mimicry both ways  =", round(float(soft_vcl_loss([d1, d2]).data), 6))

# -- the MI lower bound rises as the positive pair aligns ---------------------------------
K, d = 30, 16
pool = Tensor(unit(K + 1, d))
for mix in (0.0, 0.5, 0.9):
    # anchor interpolated toward the positive row
    a = (1 - mix) * unit(1, d)[0] + mix * pool.data[0]
    a = Tensor(a / np.linalg.norm(a))
    loss = float(vcl_loss(icl_distribution(a, pool, tau=0.1)).data)
    print(f"alignment {mix:.1f}: directional loss={loss:6.3f}  "
          f"MI bound={mi_bound(loss, K):+.3f}  (cap ln K = {np.log(K):.3f})")
