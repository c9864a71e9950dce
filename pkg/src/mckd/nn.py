"""Staged MLP cohort with the auxiliary heads used during collaborative training.

Each network is a chain of linear+relu stages. Every intermediate stage gets a
refinement layer mapping its feature to the final stage width, a two-layer
projection head producing contrastive embeddings of width ``embed_dim``, and a
linear classifier; the final stage gets a projection head and the main
classifier directly. A per-network gate module turns the concatenated stage
features into branch-aggregation weights, and the match-weight projections are
one square matrix per (network, stage).

Parameters live in plain name->Tensor dicts so the meta loop can re-run the
forward pass at hypothetical parameter values (see ``Cohort.bound``).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, concat, matmul, relu, softmax

__all__ = [
    "NetworkSpec",
    "StageOutputs",
    "StagedNetwork",
    "GateModule",
    "MetaNetwork",
    "Cohort",
    "init_network",
    "forward_cohort",
    "gate_weights",
]


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    stage_widths: tuple[int, ...]
    num_classes: int
    embed_dim: int
    proj_hidden: int | None = None  # default: final stage width
    gate_hidden: int | None = None

    def __post_init__(self):
        if len(self.stage_widths) < 2:
            raise ValueError("need at least 2 stages")
        if self.input_dim <= 0 or self.num_classes <= 1 or self.embed_dim <= 0:
            raise ValueError("invalid network spec")
        if any(w <= 0 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def final_width(self) -> int:
        return self.stage_widths[-1]


@dataclass
class StageOutputs:
    """Per-network forward results: stage features, raw embeddings, branch logits."""

    features: list[Tensor]
    embeddings: list[Tensor]
    logits: list[Tensor]


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, relu_next: bool,
                 dtype=np.float64) -> np.ndarray:
    scale = np.sqrt((2.0 if relu_next else 1.0) / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)


def _linear(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    out = matmul(x, p[f"{prefix}.w"])
    b = p.get(f"{prefix}.b")
    return out if b is None else out + b


class StagedNetwork:
    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float64):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        L = spec.num_stages
        hidden = spec.proj_hidden or spec.final_width

        in_w = spec.input_dim
        for l, w in enumerate(spec.stage_widths, start=1):
            p[f"stage{l}.w"] = Tensor(_init_linear(rng, in_w, w, relu_next=True, dtype=dtype), requires_grad=True)
            p[f"stage{l}.b"] = Tensor(np.zeros(w, dtype=dtype), requires_grad=True)
            in_w = w
        for l, w in enumerate(spec.stage_widths[:-1], start=1):
            p[f"refine{l}.w"] = Tensor(_init_linear(rng, w, spec.final_width, relu_next=True, dtype=dtype), requires_grad=True)
            p[f"refine{l}.b"] = Tensor(np.zeros(spec.final_width, dtype=dtype), requires_grad=True)
        for l in range(1, L + 1):
            p[f"proj{l}.fc1.w"] = Tensor(_init_linear(rng, spec.final_width, hidden, relu_next=True, dtype=dtype), requires_grad=True)
            p[f"proj{l}.fc1.b"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
            p[f"proj{l}.fc2.w"] = Tensor(_init_linear(rng, hidden, spec.embed_dim, relu_next=False, dtype=dtype), requires_grad=True)
            p[f"proj{l}.fc2.b"] = Tensor(np.zeros(spec.embed_dim, dtype=dtype), requires_grad=True)
            p[f"cls{l}.w"] = Tensor(_init_linear(rng, spec.final_width, spec.num_classes, relu_next=False, dtype=dtype), requires_grad=True)
            p[f"cls{l}.b"] = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
        self.params = p

    @property
    def num_stages(self) -> int:
        return self.spec.num_stages

    def stage_features(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> list[Tensor]:
        """F[l] per stage: refined intermediate features, raw final feature."""
        p = self.params if params is None else params
        L = self.num_stages
        feats = []
        h = x
        for l in range(1, L + 1):
            h = relu(_linear(p, f"stage{l}", h))
            feats.append(h if l == L else relu(_linear(p, f"refine{l}", h)))
        return feats

    def forward(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> StageOutputs:
        p = self.params if params is None else params
        feats = self.stage_features(x, p)
        embeds, logits = [], []
        for l, f in enumerate(feats, start=1):
            h = relu(_linear(p, f"proj{l}.fc1", f))
            embeds.append(_linear(p, f"proj{l}.fc2", h))
            logits.append(_linear(p, f"cls{l}", f))
        return StageOutputs(feats, embeds, logits)

    def infer_logits(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Inference graph: stages plus the final classifier only."""
        p = self.params if params is None else params
        h = x
        for l in range(1, self.num_stages + 1):
            h = relu(_linear(p, f"stage{l}", h))
        return _linear(p, f"cls{self.num_stages}", h)

    def strip_auxiliary(self) -> "StagedNetwork":
        """Deployment copy: refiners, projections, auxiliary classifiers dropped."""
        out = object.__new__(StagedNetwork)
        out.spec = self.spec
        out.seed = self.seed
        L = self.num_stages
        keep = [f"stage{l}.{s}" for l in range(1, L + 1) for s in ("w", "b")]
        keep += [f"cls{L}.w", f"cls{L}.b"]
        out.params = {k: Tensor(self.params[k].data.copy(), requires_grad=True) for k in keep}
        return out


class GateModule:
    """Two linear layers with a middle relu, terminated by a row softmax."""

    def __init__(self, input_width: int, num_branches: int, seed: int,
                 hidden: int | None = None, dtype=np.float64):
        rng = np.random.default_rng(seed)
        hidden = hidden or max(num_branches, input_width // 2)
        self.num_branches = num_branches
        self.params = {
            "fc1.w": Tensor(_init_linear(rng, input_width, hidden, relu_next=True, dtype=dtype), requires_grad=True),
            "fc1.b": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            "fc2.w": Tensor(_init_linear(rng, hidden, num_branches, relu_next=False, dtype=dtype), requires_grad=True),
            "fc2.b": Tensor(np.zeros(num_branches, dtype=dtype), requires_grad=True),
        }

    def forward(self, features_concat: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        p = self.params if params is None else params
        h = relu(_linear(p, "fc1", features_concat))
        return softmax(_linear(p, "fc2", h))


def gate_weights(gate: GateModule, features: Sequence[Tensor],
                 params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Per-sample branch weights from the channel-concatenated stage features."""
    return gate.forward(concat(list(features), axis=1), params)


class MetaNetwork:
    """One square embed_dim x embed_dim projection per (network, stage), no bias."""

    def __init__(self, num_networks: int, num_stages: int, embed_dim: int, seed: int,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.num_networks = num_networks
        self.num_stages = num_stages
        self.embed_dim = embed_dim
        scale = np.sqrt(1.0 / embed_dim)
        self.params = {
            f"xi.n{m}.s{l}": Tensor((rng.standard_normal((embed_dim, embed_dim)) * scale).astype(dtype), requires_grad=True)
            for m in range(num_networks)
            for l in range(1, num_stages + 1)
        }

    def projection(self, network: int, stage: int, params: Mapping[str, Tensor] | None = None) -> Tensor:
        p = self.params if params is None else params
        return p[f"xi.n{network}.s{stage}"]


def init_network(spec: NetworkSpec, seed: int, dtype=np.float64) -> StagedNetwork:
    return StagedNetwork(spec, seed, dtype=dtype)


def forward_cohort(networks: Sequence[StagedNetwork], batch: Tensor) -> list[StageOutputs]:
    for net in networks:
        if net.spec.input_dim != batch.shape[-1]:
            raise ValueError(
                f"input width {batch.shape[-1]} does not match network input {net.spec.input_dim}")
    return [net.forward(batch) for net in networks]


@dataclass
class Cohort:
    """The jointly trained unit: M networks, their gates, and the match projections."""

    networks: list[StagedNetwork]
    gates: list[GateModule]
    meta: MetaNetwork

    @classmethod
    def build(cls, spec: NetworkSpec, seeds: Sequence[int], dtype=np.float64) -> "Cohort":
        if len(seeds) < 2:
            raise ValueError("mutual learning needs at least 2 networks")
        if len(set(seeds)) != len(seeds):
            raise ValueError("network seeds must be pairwise distinct")
        nets = [StagedNetwork(spec, s, dtype=dtype) for s in seeds]
        # refined intermediate features all carry the final stage width
        gate_in = spec.num_stages * spec.final_width
        gates = [GateModule(gate_in, spec.num_stages, seed=s + 101, hidden=spec.gate_hidden, dtype=dtype)
                 for s in seeds]
        meta = MetaNetwork(len(seeds), spec.num_stages, spec.embed_dim, seed=seeds[0] + 977, dtype=dtype)
        return cls(nets, gates, meta)

    @property
    def size(self) -> int:
        return len(self.networks)

    def theta(self) -> dict[str, Tensor]:
        """Flat view of all task-trained parameters (networks + gates)."""
        out: dict[str, Tensor] = {}
        for m, net in enumerate(self.networks):
            for k, v in net.params.items():
                out[f"net{m}.{k}"] = v
        for m, gate in enumerate(self.gates):
            for k, v in gate.params.items():
                out[f"gate{m}.{k}"] = v
        return out

    def pi(self) -> dict[str, Tensor]:
        """Flat view of the meta parameters."""
        return dict(self.meta.params)

    @contextmanager
    def bound(self, theta: Mapping[str, Tensor]):
        """Run forwards with substituted theta tensors; restores on exit."""
        saved: list[tuple[dict, str, Tensor]] = []
        try:
            for name, t in theta.items():
                owner, key = self._resolve(name)
                saved.append((owner, key, owner[key]))
                owner[key] = t
            yield self
        finally:
            for owner, key, old in reversed(saved):
                owner[key] = old

    def _resolve(self, name: str) -> tuple[dict, str]:
        head, _, rest = name.partition(".")
        if head.startswith("net"):
            return self.networks[int(head[3:])].params, rest
        if head.startswith("gate"):
            return self.gates[int(head[4:])].params, rest
        if head == "xi":
            return self.meta.params, name
        raise KeyError(name)
