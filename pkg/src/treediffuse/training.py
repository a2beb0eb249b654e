"""Stage-1 objective and optimization: probability-weighted ELBO over the
latent tree, trained in phases with one leaf split per phase boundary.

The ELBO follows the maximization convention
``total = reconstruction - node_kl - router_kl`` with a per-pixel Bernoulli
likelihood, per-node Gaussian KLs weighted by arrival probability, and
per-router Bernoulli KLs. KL terms are annealed linearly at the start of
training; the logged breakdown always reports the unannealed identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data_io import Dataset, iter_batches
from .errors import ConfigError, TrainingError
from .latent_tree import NodeId, PathPosterior, posterior_from_array, select_split_leaf
from .networks import TreeVae, TreeVaeArch
from .seeding import numpy_rng, torch_generator

__all__ = [
    "ElboBreakdown",
    "TreeVaeTrainConfig",
    "compute_elbo",
    "compute_elbo_terms",
    "train_treevae",
    "cluster_assignments",
    "hard_label",
]


@dataclass(frozen=True)
class ElboBreakdown:
    """Batch-averaged objective terms, in nats per sample."""

    reconstruction_term: float
    node_kl_term: float
    router_kl_term: float
    total: float

    def as_dict(self) -> dict:
        return {
            "reconstruction_term": self.reconstruction_term,
            "node_kl_term": self.node_kl_term,
            "router_kl_term": self.router_kl_term,
            "total": self.total,
        }


def compute_elbo_terms(out: dict, x: torch.Tensor, topology) -> dict[str, torch.Tensor]:
    """Differentiable ELBO terms from a TreeVae forward pass."""
    leaf_probs = out["leaf_probs"]
    rec = torch.zeros((), dtype=x.dtype)
    for i, leaf in enumerate(topology.leaves):
        log_lik = -F.binary_cross_entropy_with_logits(
            out["recon_logits"][leaf], x, reduction="none"
        ).flatten(1).sum(dim=1)
        rec = rec + (leaf_probs[:, i] * log_lik).mean()
    node_kl = torch.zeros((), dtype=x.dtype)
    for node, kl in out["kl_node"].items():
        node_kl = node_kl + (out["node_probs"][node] * kl).mean()
    router_kl = torch.zeros((), dtype=x.dtype)
    for node, kl in out["kl_router"].items():
        router_kl = router_kl + (out["node_probs"][node] * kl).mean()
    return {"reconstruction": rec, "node_kl": node_kl, "router_kl": router_kl}


def compute_elbo(
    model: TreeVae,
    x: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    sample_mode: str = "sample",
) -> tuple[ElboBreakdown, dict]:
    """Evaluate the objective on one batch; raises on non-finite terms."""
    out = model(x, generator=generator, sample_mode=sample_mode)
    terms = compute_elbo_terms(out, x, model.topology)
    values = {k: float(v) for k, v in terms.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite ELBO term {name}={value}; all terms: {values}")
    breakdown = ElboBreakdown(
        reconstruction_term=values["reconstruction"],
        node_kl_term=values["node_kl"],
        router_kl_term=values["router_kl"],
        total=values["reconstruction"] - values["node_kl"] - values["router_kl"],
    )
    return breakdown, out


@dataclass(frozen=True)
class TreeVaeTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_leaves: int = 4
    epochs_per_phase: int = 2
    split_warmup_epochs: int = 0
    kl_anneal_fraction: float = 0.2
    grad_clip: float = 100.0
    probe_batch: int = 256

    def validate(self) -> None:
        if self.max_leaves < 2:
            raise ConfigError("max_leaves must be at least 2")
        needed = self.epochs_per_phase * (self.max_leaves - 2) + 1
        if self.epochs < needed:
            raise ConfigError(
                f"{self.epochs} epochs cannot reach {self.max_leaves} leaves with "
                f"{self.epochs_per_phase} epochs per phase (need at least {needed})"
            )
        if not 0.0 <= self.kl_anneal_fraction <= 1.0:
            raise ConfigError("kl_anneal_fraction must lie in [0, 1]")


@dataclass
class TrainState:
    """Trainer output: the model plus its per-epoch log records."""

    model: TreeVae
    log: list[dict] = field(default_factory=list)


def _kl_weight(epoch: int, config: TreeVaeTrainConfig) -> float:
    anneal_epochs = max(1, round(config.kl_anneal_fraction * config.epochs))
    return min(1.0, (epoch + 1) / anneal_epochs)


def _warmup_parameters(model: TreeVae, split_leaf: NodeId, children: Sequence[NodeId]):
    """New subtree plus every router on the path above the split."""
    params = []
    for child in children:
        for group in (model.transforms, model.merges, model.decoders):
            if str(child) in group:
                params.extend(group[str(child)].parameters())
    for node in model.topology.path_to_root(split_leaf):
        for group in (model.routers_q, model.routers_p):
            if str(node) in group:
                params.extend(group[str(node)].parameters())
    return params


def _probe_posteriors(model: TreeVae, images: np.ndarray, config: TreeVaeTrainConfig, seed: int, epoch: int):
    rng = numpy_rng(seed, f"probe:{epoch}")
    take = rng.choice(len(images), size=min(config.probe_batch, len(images)), replace=False)
    posteriors, _ = cluster_assignments(model, torch.as_tensor(images[np.sort(take)]))
    return posteriors


def train_treevae(
    dataset: Dataset,
    config: TreeVaeTrainConfig,
    arch: TreeVaeArch,
    seed: int = 0,
) -> TrainState:
    """Train a tree VAE, splitting one leaf per phase until the leaf cap.

    The tree starts as a bare root and immediately splits into two leaves;
    that initial growth is the first logged split event. Fully deterministic
    given (dataset, config, arch, seed). Divergence raises
    :class:`TrainingError` with the last finite-epoch state attached as
    ``last_good`` (state components, topology payload, epoch).
    """
    config.validate()
    dtype = torch.float32
    torch.manual_seed(  # parameter init draws from the global stream
        numpy_rng(seed, "init").integers(2**31)
    )
    model = TreeVae(arch)
    log: list[dict] = []
    last_good: Optional[dict] = None

    def do_split(epoch: int) -> Optional[list]:
        if len(model.topology.leaves) >= config.max_leaves:
            return None
        if len(model.topology.leaves) == 1:
            split = model.topology.leaves[0]
        else:
            posteriors = _probe_posteriors(model, dataset.images, config, seed, epoch)
            split = select_split_leaf(posteriors, model.topology)
        torch.manual_seed(numpy_rng(seed, f"grow:{epoch}").integers(2**31))
        children = model.grow(split)
        log.append({"epoch": epoch, "event": "split", "node": int(split), "n_leaves": len(model.topology.leaves)})
        return [split, children]

    optimizer: Optional[torch.optim.Adam] = None
    warmup_until = -1
    for epoch in range(config.epochs):
        if epoch == warmup_until:
            optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
            warmup_until = -1
        if epoch % config.epochs_per_phase == 0:
            split_info = do_split(epoch)
            if split_info is not None or optimizer is None:
                if split_info is not None and config.split_warmup_epochs > 0 and epoch > 0:
                    params = _warmup_parameters(model, split_info[0], split_info[1])
                    warmup_until = epoch + config.split_warmup_epochs
                else:
                    params = list(model.parameters())
                optimizer = torch.optim.Adam(params, lr=config.learning_rate)

        beta = _kl_weight(epoch, config)
        gen = torch_generator(seed, f"epoch:{epoch}")
        shuffle = numpy_rng(seed, f"shuffle:{epoch}")
        sums = {"reconstruction": 0.0, "node_kl": 0.0, "router_kl": 0.0}
        count = 0
        for images, _ in iter_batches(dataset.images, dataset.labels, config.batch_size, shuffle):
            x = torch.as_tensor(images, dtype=dtype)
            out = model(x, generator=gen)
            terms = compute_elbo_terms(out, x, model.topology)
            loss = -(terms["reconstruction"] - beta * (terms["node_kl"] + terms["router_kl"]))
            if not torch.isfinite(loss):
                detail = {k: float(v) for k, v in terms.items()}
                err = TrainingError(f"training diverged at epoch {epoch}: terms {detail}")
                err.last_good = last_good
                raise err
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for g in optimizer.param_groups for p in g["params"]], config.grad_clip
            )
            optimizer.step()
            n = len(images)
            for key in sums:
                sums[key] += float(terms[key]) * n
            count += n
        record = {
            "epoch": epoch,
            "n_leaves": len(model.topology.leaves),
            "kl_weight": beta,
            "reconstruction_term": sums["reconstruction"] / count,
            "node_kl_term": sums["node_kl"] / count,
            "router_kl_term": sums["router_kl"] / count,
        }
        record["total"] = record["reconstruction_term"] - record["node_kl_term"] - record["router_kl_term"]
        log.append(record)
        last_good = {
            "components": model.state_components(),
            "topology": model.topology.to_payload(),
            "epoch": epoch,
        }
    return TrainState(model=model, log=log)


def hard_label(posterior: PathPosterior) -> NodeId:
    """Argmax leaf with ties resolved toward the smallest node id."""
    best = max(posterior.leaf_prob.values())
    return min(l for l, p in posterior.leaf_prob.items() if p == best)


@torch.no_grad()
def cluster_assignments(
    model: TreeVae, x: torch.Tensor, chunk: int = 512
) -> tuple[list[PathPosterior], np.ndarray]:
    """Per-sample leaf posterior plus hard labels (leaf node ids).

    Leaf probabilities depend only on the variational routers, so this is
    deterministic with no sampling involved.
    """
    was_training = model.training
    model.eval()
    posteriors: list[PathPosterior] = []
    try:
        for start in range(0, len(x), chunk):
            out = model(x[start : start + chunk], sample_mode="mean")
            probs = out["leaf_probs"].double().cpu().numpy()
            probs = probs / probs.sum(axis=1, keepdims=True)
            for row in probs:
                posteriors.append(posterior_from_array(model.topology, row))
    finally:
        if was_training:
            model.train()
    labels = np.array([hard_label(p) for p in posteriors], dtype=np.int64)
    return posteriors, labels
