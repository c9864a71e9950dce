"""Online knowledge distillation for cohorts of small staged networks.

A cohort of MLPs trains jointly: each network learns the labels through every
stage classifier, mutual contrastive losses couple their embedding spaces
layer to layer (with meta-learned matching weights), and gated ensembles of
branch logits act as virtual teachers for logit-level distillation. Built on
an in-package reverse-mode tensor engine that supports differentiating through
gradient steps, which is what trains the matching weights.
"""

from .config import TrainConfig, load_config, resolve_config
from .data import LabeledDataset, gaussian_blobs, load_csv, stratified_subset
from .losses import (
    ContrastiveDistribution,
    icl_distribution,
    kl_divergence,
    mcl_pair_loss,
    mi_bound,
    soft_icl_loss,
    soft_vcl_loss,
    vcl_distribution,
    vcl_loss,
)
from .mining import ClassAwareBatch, MemoryBank, sample_batch
from .nn import Cohort, GateModule, MetaNetwork, NetworkSpec, StagedNetwork, forward_cohort
from .tensor import Tensor, backward, detach, finite_diff_grad
from .train import Trainer, best_network, evaluate, linear_probe, train

__version__ = "0.1.0"
