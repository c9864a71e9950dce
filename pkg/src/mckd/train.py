"""Training loop: total objective, SGD with schedules, meta loop, metrics,
checkpointing, evaluation and the linear-probe transfer protocol."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import LabeledDataset, blob_splits, load_csv, stratified_subset
from .distill import ensemble_kl_loss, ensemble_logits, gate_task_loss
from .layerwise import lmcl_loss
from .losses import (
    LossFlags,
    PairContrastiveSets,
    cross_entropy,
    mcl_pair_loss,
    mi_bound,
)
from .meta import ParameterSnapshot, meta_step
from .mining import MemoryBank, RetrievalMiss, batch_index_matrix, sample_batch
from .nn import Cohort, NetworkSpec, gate_weights
from .tensor import Tensor, backward, constant, l2_normalize

__all__ = [
    "Trainer",
    "TrainResult",
    "MetricsRecord",
    "DivergenceError",
    "train",
    "evaluate",
    "best_network",
    "linear_probe",
    "export_embeddings",
]

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["task", "vcl", "icl", "soft_vcl", "soft_icl", "lmcl", "task_g", "ens",
                "mi_bound", "hypergrad_norm", "wall_time"]


class DivergenceError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    epoch: int
    accuracy: dict[str, float]  # keys like "net0/train"
    losses: dict[str, float]
    lambda_means: dict[tuple[int, int, int, int], float] = field(default_factory=dict)


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    checkpoint_dir: Path
    out_dir: Path
    config: TrainConfig


def _dtype(cfg: TrainConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def evaluate(network, dataset: LabeledDataset) -> float:
    """Top-1 accuracy through the inference graph (stages + final classifier)."""
    logits = network.infer_logits(Tensor(dataset.features))
    return float((logits.data.argmax(axis=1) == dataset.labels).mean())


def best_network(accuracies: Sequence[float]) -> int:
    """Index of the best validation accuracy; ties go to the lowest index."""
    arr = np.asarray(accuracies)
    return int(arr.argmax())  # argmax already takes the first maximum


def linear_probe(network, train_set: LabeledDataset, eval_set: LabeledDataset,
                 seed: int = 0, steps: int = 300, lr: float = 0.5) -> float:
    """Fit a fresh linear classifier on frozen final-stage features.

    The extractor contributes constants only; its parameters receive no
    gradient and are left untouched.
    """
    feats_train = network.stage_features(Tensor(train_set.features))[-1].detach()
    feats_eval = network.stage_features(Tensor(eval_set.features))[-1].detach()
    classes = int(max(train_set.labels.max(), eval_set.labels.max())) + 1
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((feats_train.shape[1], classes)) * 0.01, requires_grad=True)
    b = Tensor(np.zeros(classes), requires_grad=True)
    vel = {id(w): np.zeros_like(w.data), id(b): np.zeros_like(b.data)}
    for step in range(steps):
        loss = cross_entropy(feats_train @ w + b, train_set.labels)
        grads = backward(loss)
        cur_lr = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        for p in (w, b):
            g = grads[p].data
            vel[id(p)] = 0.9 * vel[id(p)] + g
            p.data -= cur_lr * vel[id(p)]
    pred = (feats_eval @ w + b).data.argmax(axis=1)
    return float((pred == eval_set.labels).mean())


def export_embeddings(network, dataset: LabeledDataset, path: str | Path) -> Path:
    """Final-stage contrastive embeddings plus labels, one CSV row per sample."""
    out = network.forward(Tensor(dataset.features))
    emb = l2_normalize(out.embeddings[-1]).data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"e{i}" for i in range(emb.shape[1])] + ["label"])
        for row, lab in zip(emb, dataset.labels):
            writer.writerow([f"{v:.10g}" for v in row] + [int(lab)])
    return path


class SGD:
    """SGD with momentum; weight decay skips gate parameters (and never sees pi)."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: Mapping[Tensor, Tensor]) -> None:
        for name, t in self.params.items():
            g = grads.get(t)
            gd = np.zeros_like(t.data) if g is None else g.data
            if self.weight_decay and not name.startswith("gate"):
                gd = gd + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += gd
            t.data -= self.lr * v


def _build_dataset(cfg: TrainConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg.dataset
    if ds["kind"] == "gaussian_blobs":
        train, test = blob_splits(ds["classes"], ds["per_class"], ds["dim"], ds["spread"],
                                  ds["seed"], ds.get("test_per_class"))
    elif ds["kind"] == "csv":
        train = load_csv(ds["train_path"])
        test = load_csv(ds["test_path"])
    else:
        raise ValueError(f"unknown dataset kind {ds['kind']!r}")
    if cfg.few_shot_fraction < 1.0:
        # test split stays untouched
        train = stratified_subset(train, cfg.few_shot_fraction, seed=ds.get("seed", 0) + 7919)
    return train, test


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.dtype = _dtype(cfg)
        self.train_set, self.test_set = _build_dataset(cfg)
        classes = max(self.train_set.num_classes, self.test_set.num_classes)
        self.spec = NetworkSpec(
            input_dim=self.train_set.dim,
            stage_widths=tuple(cfg.stage_widths),
            num_classes=classes,
            embed_dim=cfg.embed_dim,
            proj_hidden=cfg.proj_hidden,
            gate_hidden=cfg.gate_hidden,
        )
        self.cohort = Cohort.build(self.spec, cfg.seeds, dtype=self.dtype)
        opt = cfg.optimizer
        self.optimizer = SGD(self.cohort.theta(), opt["lr"], opt["momentum"], opt["weight_decay"])
        ss = np.random.SeedSequence(list(cfg.seeds))
        sampler_seq, bank_seq = ss.spawn(2)
        self.sampler_rng = np.random.default_rng(sampler_seq)
        self.bank_rng = np.random.default_rng(bank_seq)
        self.banks: list[list[MemoryBank]] | None = None
        if cfg.mining == "memory":
            self.banks = [
                [MemoryBank(cfg.bank_capacity, cfg.embed_dim, self.bank_rng, classes, dtype=self.dtype)
                 for _ in range(self.spec.num_stages)]
                for _ in range(cfg.num_networks)
            ]
        self.snapshot = ParameterSnapshot()
        self.epoch = 0
        self.iteration = 0
        self.last_hypergrad_norm = float("nan")

    # -- loss assembly ---------------------------------------------------------

    def _flags(self) -> LossFlags:
        f = self.cfg.loss_flags
        return LossFlags(vcl=f["vcl"], soft_vcl=f["soft_vcl"], icl=f["icl"], soft_icl=f["soft_icl"])

    def _batch_sets(self, embeddings, index: np.ndarray):
        def get(a, b, la, lb):
            return PairContrastiveSets(
                pool_a=embeddings[a][la - 1], pool_b=embeddings[b][lb - 1], index=index)

        return get

    def _memory_sets(self, embeddings, retrievals):
        """retrievals: {(la, lb): (index, anchor_rows)} shared bank positions."""
        pools = {}
        for m in range(self.cfg.num_networks):
            for l in range(1, self.spec.num_stages + 1):
                pools[(m, l)] = constant(self.banks[m][l - 1].snapshot())

        def get(a, b, la, lb):
            index, rows = retrievals[(la, lb)]
            return PairContrastiveSets(pool_a=pools[(a, la)], pool_b=pools[(b, lb)],
                                       index=index, anchor_rows=rows)

        return get

    def _draw_retrievals(self, labels: np.ndarray) -> dict:
        """One (positions, valid anchors) pair per stage pair; labels are shared
        across banks updated in lockstep, so positions align across networks."""
        L = self.spec.num_stages
        K = self.cfg.num_negatives
        retrievals = {}
        for la in range(1, L + 1):
            for lb in range(1, L + 1):
                bank = self.banks[0][la - 1]
                rows, keep = [], []
                for i, lab in enumerate(labels):
                    try:
                        r = bank.retrieve(int(lab), K, self.bank_rng)
                    except RetrievalMiss:
                        continue
                    rows.append(r.positions)
                    keep.append(i)
                if not rows:
                    raise DivergenceError("memory bank cannot serve any anchor in the batch")
                retrievals[(la, lb)] = (np.stack(rows), np.asarray(keep))
        return retrievals

    def compute_losses(self, x: Tensor, labels: np.ndarray, sets_get=None,
                       theta: Mapping[str, Tensor] | None = None,
                       with_components: bool = False):
        """Total Eq.-23-style objective and its parts for one batch.

        Returns (total, parts, lambda_means); parts values are floats except
        parts['total'] which is the graph tensor.
        """
        cfg = self.cfg
        with self.cohort.bound(theta or {}):
            outs = [net.forward(x) for net in self.cohort.networks]
            task = None
            for o in outs:
                for z in o.logits:
                    t = cross_entropy(z, labels)
                    task = t if task is None else task + t
            total = task
            parts = {"task": float(task.data), "task_g": 0.0, "ens": 0.0, "lmcl": 0.0,
                     "vcl": float("nan"), "icl": float("nan"),
                     "soft_vcl": float("nan"), "soft_icl": float("nan"),
                     "mi_bound": float("nan")}
            lambda_means: dict = {}

            if cfg.distill["logit_kd"]:
                ensembles = []
                for m, o in enumerate(outs):
                    if cfg.distill["uniform_gate"]:
                        w = constant(np.full((x.shape[0], self.spec.num_stages),
                                             1.0 / self.spec.num_stages, dtype=self.dtype))
                    else:
                        w = gate_weights(self.cohort.gates[m], o.features)
                    ensembles.append(ensemble_logits(o.logits, w))
                if not cfg.distill["uniform_gate"]:
                    tg = gate_task_loss(ensembles, labels)
                    total = total + tg
                    parts["task_g"] = float(tg.data)
                ens = ensemble_kl_loss([o.logits[-1] for o in outs], ensembles, cfg.kd_temperature)
                total = total + ens
                parts["ens"] = float(ens.data)

            if cfg.distill["lmcl"]:
                embeddings = [[l2_normalize(e) for e in o.embeddings] for o in outs]
                if sets_get is None:
                    raise ValueError("contrastive sets required when the layer-wise loss is on")
                get = sets_get(embeddings)
                res = lmcl_loss(embeddings, get, self.cohort.meta, cfg.matching,
                                cfg.tau, cfg.alpha, cfg.beta, flags=self._flags())
                total = total + res.loss
                parts["lmcl"] = float(res.loss.data)
                lambda_means = res.lambda_means
                if with_components:
                    self._final_stage_components(embeddings, get, parts)
        parts["total"] = total
        return total, parts, lambda_means

    def _final_stage_components(self, embeddings, get, parts) -> None:
        """Diagnostic per-term values on the final-stage pair of networks 0 and 1."""
        L = self.spec.num_stages
        sets = get(0, 1, L, L)
        va, vb = embeddings[0][L - 1], embeddings[1][L - 1]
        kw = dict(tau=self.cfg.tau, alpha=1.0, beta=0.0)
        parts["vcl"] = float(mcl_pair_loss(va, vb, sets, flags=LossFlags(icl=False), **kw).data)
        icl_val = float(mcl_pair_loss(va, vb, sets, flags=LossFlags(vcl=False), **kw).data)
        parts["icl"] = icl_val
        kw = dict(tau=self.cfg.tau, alpha=0.0, beta=1.0)
        parts["soft_vcl"] = float(mcl_pair_loss(va, vb, sets, flags=LossFlags(soft_icl=False), **kw).data)
        parts["soft_icl"] = float(mcl_pair_loss(va, vb, sets, flags=LossFlags(soft_vcl=False), **kw).data)
        parts["mi_bound"] = mi_bound(icl_val / 2.0, self.cfg.num_negatives)

    # -- schedule ------------------------------------------------------------------

    def _lr_at(self, epoch: int) -> float:
        opt = self.cfg.optimizer
        base = opt["lr"]
        if opt["schedule"] == "cosine":
            return base * 0.5 * (1 + math.cos(math.pi * epoch / self.cfg.epochs))
        lr = base
        for frac in opt["step_milestones"]:
            if epoch >= frac * self.cfg.epochs:
                lr *= opt["step_gamma"]
        return lr

    # -- steps ------------------------------------------------------------------------

    def _train_step(self, x: Tensor, labels: np.ndarray, sets_get, with_components: bool):
        total, parts, lam = self.compute_losses(x, labels, sets_get,
                                                with_components=with_components)
        value = float(total.data)
        if not math.isfinite(value):
            bad = [k for k, v in parts.items() if k != "total" and isinstance(v, float)
                   and not math.isfinite(v) and k not in ("vcl", "icl", "soft_vcl", "soft_icl", "mi_bound")]
            raise DivergenceError(f"non-finite loss (components: {bad or 'unknown'})")
        if value > 1e6:
            raise DivergenceError(f"loss diverged: {value:.3e}")
        grads = backward(total)
        self.optimizer.step(grads)
        return parts, lam

    def _meta_step(self, x: Tensor, labels: np.ndarray, sets_get) -> None:
        cfg = self.cfg
        theta0 = self.cohort.theta()
        arrays = {name: t.data for name, t in theta0.items()}
        arrays.update({f"vel.{n}": v for n, v in self.optimizer.velocity.items()})
        self.snapshot.take(arrays)

        def inner_fn(theta):
            with self.cohort.bound(theta):
                outs = [net.forward(x) for net in self.cohort.networks]
                embeddings = [[l2_normalize(e) for e in o.embeddings] for o in outs]
                res = lmcl_loss(embeddings, sets_get(embeddings), self.cohort.meta,
                                cfg.matching, cfg.tau, cfg.alpha, cfg.beta,
                                flags=self._flags(), graph_teachers=True)
                return res.loss

        def task_fn(theta):
            with self.cohort.bound(theta):
                outs = [net.forward(x) for net in self.cohort.networks]
                loss = None
                for o in outs:
                    for z in o.logits:
                        t = cross_entropy(z, labels)
                        loss = t if loss is None else loss + t
                return loss

        mcfg = cfg.meta_config
        result = meta_step(theta0, self.cohort.pi(), inner_fn, task_fn, mcfg)
        self.snapshot.restore(arrays)
        if result.applied:
            self.last_hypergrad_norm = result.hypergrad_norm

    # -- epoch loops -----------------------------------------------------------------

    def _epoch_batches(self):
        cfg = self.cfg
        n = self.train_set.num_samples
        steps = max(n // cfg.batch_size, 1)
        if cfg.mining == "batch":
            for _ in range(steps):
                batch = sample_batch(self.train_set.labels, cfg.batch_size, self.sampler_rng)
                yield batch.indices, batch.labels, batch
        else:
            order = self.sampler_rng.permutation(n)
            for s in range(steps):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                yield idx, self.train_set.labels[idx], None

    def run_epoch(self) -> MetricsRecord:
        cfg = self.cfg
        self.optimizer.lr = self._lr_at(self.epoch)
        start = time.perf_counter()
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        lam_sums: dict = {}
        lam_counts: dict = {}
        for step_no, (idx, labels, batch) in enumerate(self._epoch_batches()):
            x = Tensor(self.train_set.features[idx].astype(self.dtype))
            if cfg.mining == "batch":
                index = batch_index_matrix(batch)
                sets_get = lambda emb: self._batch_sets(emb, index)
            else:
                retrievals = self._draw_retrievals(labels)
                sets_get = lambda emb: self._memory_sets(emb, retrievals)
            parts, lam = self._train_step(x, labels, sets_get, with_components=step_no == 0)
            self.iteration += 1
            for k, v in parts.items():
                if k != "total" and isinstance(v, float) and math.isfinite(v):
                    sums[k] = sums.get(k, 0.0) + v
                    counts[k] = counts.get(k, 0) + 1
            for k, v in lam.items():
                lam_sums[k] = lam_sums.get(k, 0.0) + v
                lam_counts[k] = lam_counts.get(k, 0) + 1
            if cfg.mining == "memory":
                self._update_banks(x, labels)
            if (cfg.distill["lmcl"] and cfg.matching == "weighted"
                    and self.iteration % cfg.meta_config.period == 0):
                self._meta_step(x, labels, sets_get)
        self.epoch += 1
        losses = {k: sums[k] / counts[k] for k in sums}
        losses["hypergrad_norm"] = self.last_hypergrad_norm
        losses["wall_time"] = time.perf_counter() - start
        record = MetricsRecord(
            epoch=self.epoch,
            accuracy=self._accuracies(),
            losses=losses,
            lambda_means={k: lam_sums[k] / lam_counts[k] for k in lam_sums},
        )
        return record

    def _update_banks(self, x: Tensor, labels: np.ndarray) -> None:
        for m, net in enumerate(self.cohort.networks):
            out = net.forward(x)
            for l, e in enumerate(out.embeddings):
                emb = l2_normalize(e).data
                self.banks[m][l].update(emb, labels)

    def _accuracies(self) -> dict[str, float]:
        acc = {}
        for m, net in enumerate(self.cohort.networks):
            acc[f"net{m}/train"] = evaluate(net, self.train_set)
            acc[f"net{m}/test"] = evaluate(net, self.test_set)
        return acc

    # -- persistence ---------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, t in self.cohort.theta().items():
            arrays[f"theta.{name}"] = t.data
        for name, t in self.cohort.pi().items():
            arrays[f"pi.{name}"] = t.data
        for name, v in self.optimizer.velocity.items():
            arrays[f"vel.{name}"] = v
        if self.banks is not None:
            for m, row in enumerate(self.banks):
                for l, bank in enumerate(row, start=1):
                    arrays[f"bank.n{m}.s{l}.emb"] = bank.embeddings
                    arrays[f"bank.n{m}.s{l}.labels"] = bank.labels.astype(np.float64)
                    arrays[f"bank.n{m}.s{l}.ticks"] = bank.ticks.astype(np.float64)
        return arrays

    def save(self, directory: str | Path) -> Path:
        extra = {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "last_hypergrad_norm": self.last_hypergrad_norm,
            "rng": {
                "sampler": self.sampler_rng.bit_generator.state,
                "bank": self.bank_rng.bit_generator.state,
            },
            "bank_meta": None if self.banks is None else [
                [{"head": bank._head, "tick": bank._tick} for bank in row] for row in self.banks],
            "config": self.cfg.raw,
        }
        return save_checkpoint(directory, self.state_arrays(), extra)

    def load(self, directory: str | Path) -> None:
        arrays, extra = load_checkpoint(directory)
        for name, t in self.cohort.theta().items():
            np.copyto(t.data, arrays[f"theta.{name}"])
        for name, t in self.cohort.pi().items():
            np.copyto(t.data, arrays[f"pi.{name}"])
        for name, v in self.optimizer.velocity.items():
            np.copyto(v, arrays[f"vel.{name}"])
        if self.banks is not None:
            meta = extra["bank_meta"]
            for m, row in enumerate(self.banks):
                for l, bank in enumerate(row, start=1):
                    np.copyto(bank.embeddings, arrays[f"bank.n{m}.s{l}.emb"])
                    bank.labels = arrays[f"bank.n{m}.s{l}.labels"].astype(np.int64)
                    bank.ticks = arrays[f"bank.n{m}.s{l}.ticks"].astype(np.int64)
                    bank._head = meta[m][l - 1]["head"]
                    bank._tick = meta[m][l - 1]["tick"]
        self.sampler_rng.bit_generator.state = extra["rng"]["sampler"]
        self.bank_rng.bit_generator.state = extra["rng"]["bank"]
        self.epoch = extra["epoch"]
        self.iteration = extra["iteration"]
        self.last_hypergrad_norm = extra["last_hypergrad_norm"]


def _write_metrics(out_dir: Path, records: list[MetricsRecord]) -> None:
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "net", "split", "accuracy"])
        for rec in records:
            for key in sorted(rec.accuracy):
                net, split = key.split("/")
                writer.writerow([rec.epoch, net, split, f"{rec.accuracy[key]:.6f}"])
    with open(out_dir / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + LOSS_COLUMNS)
        for rec in records:
            row = [rec.epoch]
            for col in LOSS_COLUMNS:
                v = rec.losses.get(col, float("nan"))
                # diagnostics that never fired (no meta step yet, term ablated
                # away) stay blank; NaN/Inf are never written
                row.append(f"{v:.8g}" if math.isfinite(v) else "")
            writer.writerow(row)
    lam_rows = [(rec.epoch, k, v) for rec in records for k, v in sorted(rec.lambda_means.items())]
    if lam_rows:
        with open(out_dir / "lambda_stats.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "net_a", "net_b", "layer_a", "layer_b", "mean_lambda"])
            for epoch, (a, b, la, lb), v in lam_rows:
                writer.writerow([epoch, a, b, la, lb, f"{v:.8g}"])


def train(cfg: TrainConfig, resume_from: str | Path | None = None) -> TrainResult:
    """Full run per the configured schedule; writes metrics, resolved config and
    a final checkpoint under cfg.out_dir."""
    trainer = Trainer(cfg)
    if resume_from is not None:
        trainer.load(resume_from)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())
    records: list[MetricsRecord] = []
    for _ in range(trainer.epoch, cfg.epochs):
        rec = trainer.run_epoch()
        records.append(rec)
        log.info("epoch %d: %s", rec.epoch,
                 " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.accuracy.items())))
        if cfg.export_embeddings:
            for m, net in enumerate(trainer.cohort.networks):
                export_embeddings(net, trainer.test_set,
                                  out_dir / f"embeddings_epoch{rec.epoch}_net{m}.csv")
    _write_metrics(out_dir, records)
    ckpt = trainer.save(out_dir / "checkpoint")
    return TrainResult(records, ckpt, out_dir, cfg)
