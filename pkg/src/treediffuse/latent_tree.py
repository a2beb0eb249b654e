"""Probabilistic machinery of the latent binary tree.

Everything here is pure and framework-free: topology bookkeeping, path
probabilities obtained by multiplying router decisions along root-to-leaf
paths, leaf sampling, and the growing step used between training phases.
Values are immutable; operations return new objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import DomainError, StructureError

NodeId = int

#: Tolerance used for probability-normalization checks.
PROB_TOL = 1e-6


@dataclass(frozen=True)
class RouterDecision:
    """Probability of branching left at one internal node."""

    node: NodeId
    p_left: float

    def __post_init__(self):
        if not 0.0 <= self.p_left <= 1.0 or not np.isfinite(self.p_left):
            raise DomainError(
                f"p_left must lie in [0, 1], got {self.p_left!r} at node {self.node}"
            )

    @property
    def p_right(self) -> float:
        return 1.0 - self.p_left


@dataclass(frozen=True)
class TreeTopology:
    """A rooted binary tree over densely numbered nodes (root is id 0).

    Every internal node has exactly two children; ``leaves`` keeps the stable
    left-to-right leaf order that the rest of the system indexes into.
    """

    parent: Mapping[NodeId, NodeId]
    left_child: Mapping[NodeId, NodeId]
    right_child: Mapping[NodeId, NodeId]
    leaves: tuple[NodeId, ...]
    nodes: tuple[NodeId, ...] = field(default=())
    depth: Mapping[NodeId, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.nodes:
            object.__setattr__(self, "nodes", self._derive_nodes())
        if not self.depth:
            object.__setattr__(self, "depth", self._derive_depths())
        self.validate()

    def _derive_nodes(self) -> tuple[NodeId, ...]:
        ids = {0}
        ids.update(self.parent.keys())
        ids.update(self.left_child.values())
        ids.update(self.right_child.values())
        ids.update(self.leaves)
        return tuple(sorted(ids))

    def _derive_depths(self) -> dict[NodeId, int]:
        depths = {0: 0}
        pending = list(self.children(0))
        while pending:
            node = pending.pop()
            depths[node] = depths[self.parent[node]] + 1
            pending.extend(self.children(node))
        return depths

    def validate(self) -> None:
        ids = self.nodes
        if ids != tuple(range(len(ids))):
            raise StructureError(f"node ids must be dense 0..n-1, got {ids}")
        if 0 in self.parent:
            raise StructureError("root (id 0) cannot have a parent")
        for node in ids:
            kids = self.children(node)
            if len(kids) not in (0, 2):
                raise StructureError(f"node {node} has {len(kids)} children; binary tree requires 0 or 2")
            for kid in kids:
                if self.parent.get(kid) != node:
                    raise StructureError(f"parent/child maps disagree at edge {node}->{kid}")
        if set(self.leaves) != {n for n in ids if not self.children(n)}:
            raise StructureError("leaves must be exactly the childless nodes")
        if len(set(self.leaves)) != len(self.leaves):
            raise StructureError("duplicate leaf entries")
        for node in ids:
            if node != 0 and node not in self.parent:
                raise StructureError(f"node {node} is disconnected from the root")
        for node, d in self.depth.items():
            expected = 0 if node == 0 else self.depth[self.parent[node]] + 1
            if d != expected:
                raise StructureError(f"depth map inconsistent at node {node}")

    @staticmethod
    def single_node() -> "TreeTopology":
        """The smallest tree: a root that is also a leaf."""
        return TreeTopology(parent={}, left_child={}, right_child={}, leaves=(0,))

    def children(self, node: NodeId) -> tuple[NodeId, ...]:
        out = []
        if node in self.left_child:
            out.append(self.left_child[node])
        if node in self.right_child:
            out.append(self.right_child[node])
        return tuple(out)

    def is_leaf(self, node: NodeId) -> bool:
        return node in set(self.leaves)

    @property
    def internal_nodes(self) -> tuple[NodeId, ...]:
        leaf_set = set(self.leaves)
        return tuple(n for n in self.nodes if n not in leaf_set)

    @property
    def max_depth(self) -> int:
        return max(self.depth.values())

    def leaf_index(self, leaf: NodeId) -> int:
        """Position of ``leaf`` in the stable leaf ordering."""
        try:
            return self.leaves.index(leaf)
        except ValueError:
            raise StructureError(f"node {leaf} is not a leaf") from None

    def subtree_leaves(self, node: NodeId) -> tuple[NodeId, ...]:
        """Leaves under ``node``, in global leaf order."""
        reach = {node}
        pending = [node]
        while pending:
            cur = pending.pop()
            for kid in self.children(cur):
                reach.add(kid)
                pending.append(kid)
        return tuple(l for l in self.leaves if l in reach)

    def path_to_root(self, node: NodeId) -> tuple[NodeId, ...]:
        path = [node]
        while path[-1] != 0:
            path.append(self.parent[path[-1]])
        return tuple(path)

    def to_payload(self) -> dict:
        """Flat per-node records plus the explicit leaf order."""
        leaf_set = set(self.leaves)
        records = [
            {
                "id": int(n),
                "parent_id": int(self.parent[n]) if n in self.parent else None,
                "is_leaf": n in leaf_set,
                "depth": int(self.depth[n]),
            }
            for n in self.nodes
        ]
        return {"nodes": records, "leaf_order": [int(l) for l in self.leaves]}

    @staticmethod
    def from_payload(payload: Mapping) -> "TreeTopology":
        parent: dict[NodeId, NodeId] = {}
        for rec in payload["nodes"]:
            if rec["parent_id"] is not None:
                parent[int(rec["id"])] = int(rec["parent_id"])
        left: dict[NodeId, NodeId] = {}
        right: dict[NodeId, NodeId] = {}
        # the smaller child id is always the left child (growth assigns ids in
        # left-right order, so this reconstruction is exact)
        by_parent: dict[NodeId, list[NodeId]] = {}
        for kid, par in parent.items():
            by_parent.setdefault(par, []).append(kid)
        for par, kids in by_parent.items():
            if len(kids) != 2:
                raise StructureError(f"node {par} has {len(kids)} children in payload")
            left[par], right[par] = sorted(kids)
        topo = TreeTopology(
            parent=parent,
            left_child=left,
            right_child=right,
            leaves=tuple(int(l) for l in payload["leaf_order"]),
        )
        for rec in payload["nodes"]:
            if topo.depth[int(rec["id"])] != int(rec["depth"]):
                raise StructureError(f"depth mismatch for node {rec['id']} in payload")
        return topo


@dataclass(frozen=True)
class PathPosterior:
    """Distribution over leaves plus per-node arrival probabilities."""

    leaf_prob: Mapping[NodeId, float]
    node_prob: Mapping[NodeId, float]

    def validate(self, tol: float = PROB_TOL) -> None:
        total = sum(self.leaf_prob.values())
        if abs(total - 1.0) > tol:
            raise DomainError(f"leaf probabilities sum to {total}, expected 1 within {tol}")
        for node, p in self.node_prob.items():
            if p < -tol or p > 1.0 + tol:
                raise DomainError(f"node probability {p} at node {node} outside [0, 1]")

    def as_array(self, topology: TreeTopology) -> np.ndarray:
        return np.array([self.leaf_prob[l] for l in topology.leaves], dtype=np.float64)


DecisionMap = Mapping[NodeId, Union[RouterDecision, float]]


def _p_left(decisions: DecisionMap, node: NodeId) -> float:
    if node not in decisions:
        raise StructureError(f"missing router decision for internal node {node}")
    dec = decisions[node]
    if isinstance(dec, RouterDecision):
        return dec.p_left
    p = float(dec)
    if not 0.0 <= p <= 1.0 or not np.isfinite(p):
        raise DomainError(f"p_left must lie in [0, 1], got {p!r} at node {node}")
    return p


def leaf_probabilities(topology: TreeTopology, decisions: DecisionMap) -> PathPosterior:
    """Multiply branch probabilities along every root-to-leaf path.

    ``decisions`` must cover every internal node; entries may be
    :class:`RouterDecision` objects or plain left-branch probabilities.
    """
    node_prob: dict[NodeId, float] = {0: 1.0}
    pending = [0]
    while pending:
        node = pending.pop()
        kids = topology.children(node)
        if not kids:
            continue
        p_left = _p_left(decisions, node)
        node_prob[topology.left_child[node]] = node_prob[node] * p_left
        node_prob[topology.right_child[node]] = node_prob[node] * (1.0 - p_left)
        pending.extend(kids)
    leaf_prob = {l: node_prob[l] for l in topology.leaves}
    posterior = PathPosterior(leaf_prob=leaf_prob, node_prob=node_prob)
    posterior.validate()
    return posterior


def sample_leaf(posterior: PathPosterior, rng_seed: int) -> NodeId:
    """Draw one leaf from ``posterior.leaf_prob``; deterministic given the seed."""
    leaves = sorted(posterior.leaf_prob)
    probs = np.array([posterior.leaf_prob[l] for l in leaves], dtype=np.float64)
    total = probs.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise DomainError(f"degenerate posterior: leaf probabilities sum to {total}")
    probs = probs / total
    u = np.random.default_rng(rng_seed).random()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    return leaves[min(idx, len(leaves) - 1)]


def grow_tree(topology: TreeTopology, split_leaf: NodeId) -> TreeTopology:
    """Give ``split_leaf`` two fresh children, keeping existing ids unchanged.

    The new children take the next two dense ids; the leaf order replaces the
    split leaf in place with (left, right).
    """
    if not topology.is_leaf(split_leaf):
        raise StructureError(f"node {split_leaf} is not a leaf and cannot be split")
    new_left = len(topology.nodes)
    new_right = new_left + 1
    parent = dict(topology.parent)
    parent[new_left] = split_leaf
    parent[new_right] = split_leaf
    left_child = dict(topology.left_child)
    right_child = dict(topology.right_child)
    left_child[split_leaf] = new_left
    right_child[split_leaf] = new_right
    pos = topology.leaves.index(split_leaf)
    leaves = topology.leaves[:pos] + (new_left, new_right) + topology.leaves[pos + 1 :]
    return TreeTopology(parent=parent, left_child=left_child, right_child=right_child, leaves=leaves)


def select_split_leaf(posteriors: Sequence[PathPosterior], topology: TreeTopology) -> NodeId:
    """Leaf with maximum total assignment mass; ties go to the smallest id."""
    if len(posteriors) == 0:
        raise DomainError("cannot select a split leaf from an empty batch")
    best_leaf = None
    best_mass = -np.inf
    for leaf in sorted(topology.leaves):
        mass = sum(p.leaf_prob.get(leaf, 0.0) for p in posteriors)
        if mass > best_mass:
            best_leaf, best_mass = leaf, mass
    return best_leaf


def posterior_from_array(topology: TreeTopology, leaf_probs: Iterable[float]) -> PathPosterior:
    """Build a full PathPosterior from per-leaf probabilities in leaf order.

    Node arrival probabilities are filled in by summing each node's subtree.
    """
    leaf_prob = {l: float(p) for l, p in zip(topology.leaves, leaf_probs)}
    if len(leaf_prob) != len(topology.leaves):
        raise DomainError("leaf probability vector length does not match leaf count")
    node_prob = {}
    for node in topology.nodes:
        node_prob[node] = sum(leaf_prob[l] for l in topology.subtree_leaves(node)) if not topology.is_leaf(node) else leaf_prob[node]
    return PathPosterior(leaf_prob=leaf_prob, node_prob=node_prob)
