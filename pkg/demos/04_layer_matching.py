"""Layer-to-layer mutual contrastive learning under the three matching modes,
plus the per-pair matching-weight statistics."""

import numpy as np

from mckd.layerwise import lmcl_loss, match_weight
from mckd.losses import PairContrastiveSets, similarity_counter
from mckd.nn import MetaNetwork
from mckd.tensor import Tensor

rng = np.random.default_rng(3)
M, L, B, K, d = 2, 3, 8, 6, 16


def unit(n):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


embeddings = [[Tensor(unit(B)) for _ in range(L)] for _ in range(M)]
index = np.stack([rng.permutation(np.setdiff1d(np.arange(B), [i]))[: K + 1] for i in range(B)])


def sets(a, b, la, lb):
    return PairContrastiveSets(pool_a=embeddings[a][la - 1],
                               pool_b=embeddings[b][lb - 1], index=index)


# -- matching weight: sigmoid cosine of projected embeddings ---------------------------
eye = Tensor(np.eye(d))
v = embeddings[0][0]
print("identical projections  -> lambda =", match_weight(eye, eye, v, v).data[0].round(4))
print("antipodal projections  -> lambda =", match_weight(eye, Tensor(-np.eye(d)), v, v).data[0].round(4))

# -- the three modes ------------------------------------------------------------------
meta = MetaNetwork(M, L, d, seed=4)
for mode in ("one_to_one", "all_to_all", "weighted"):
    similarity_counter.reset()
    res = lmcl_loss(embeddings, sets, meta, mode, tau=0.1, alpha=0.1, beta=1.0)
    per_anchor = similarity_counter.count // B
    print(f"{mode:12s} loss={float(res.loss.data):8.4f}  "
          f"similarity evals/anchor={per_anchor}")

print(f"\nclosed form for all-to-all: 2(K+1)L^2 M(M-1) = {2 * (K + 1) * L**2 * M * (M - 1)}")

res = lmcl_loss(embeddings, sets, meta, "weighted", tau=0.1, alpha=0.1, beta=1.0)
print("\nmean matching weight per (net_a, net_b, stage_a, stage_b):")
for (a, b, la, lb), lam in sorted(res.lambda_means.items()):
    print(f"  nets ({a},{b}) stages ({la},{lb}): {lam:.4f}")
