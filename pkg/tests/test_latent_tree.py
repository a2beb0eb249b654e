import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from treediffuse.errors import DomainError, StructureError
from treediffuse.latent_tree import (
    PathPosterior,
    RouterDecision,
    TreeTopology,
    grow_tree,
    leaf_probabilities,
    posterior_from_array,
    sample_leaf,
    select_split_leaf,
)


def enumerate_paths_oracle(topology, decisions):
    """Independent oracle: walk every root-to-leaf path, multiply branches."""
    out = {}
    stack = [(0, 1.0)]
    while stack:
        node, prob = stack.pop()
        kids = topology.children(node)
        if not kids:
            out[node] = prob
        else:
            p = decisions[node]
            p = p.p_left if isinstance(p, RouterDecision) else p
            stack.append((topology.left_child[node], prob * p))
            stack.append((topology.right_child[node], prob * (1 - p)))
    return out


def random_topology(rng, max_depth=4):
    topo = TreeTopology.single_node()
    n_splits = rng.integers(0, 8)
    for _ in range(n_splits):
        candidates = [l for l in topo.leaves if topo.depth[l] < max_depth]
        if not candidates:
            break
        topo = grow_tree(topo, candidates[rng.integers(len(candidates))])
    return topo


class TestRouterDecision:
    def test_p_right_complement(self):
        d = RouterDecision(node=0, p_left=0.3)
        assert d.p_right == pytest.approx(0.7)

    @pytest.mark.parametrize("bad", [-0.1, 1.5, float("nan")])
    def test_invalid_probability_rejected(self, bad):
        with pytest.raises(DomainError):
            RouterDecision(node=0, p_left=bad)


class TestTopology:
    def test_single_node(self):
        topo = TreeTopology.single_node()
        assert topo.nodes == (0,)
        assert topo.leaves == (0,)
        assert topo.depth[0] == 0

    def test_grow_root_only(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        assert len(topo.nodes) == 3
        assert topo.leaves == (1, 2)
        assert topo.depth == {0: 0, 1: 1, 2: 1}

    def test_grow_left_leaf(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        topo = grow_tree(topo, 1)
        assert len(topo.nodes) == 5
        assert topo.leaves == (3, 4, 2)
        assert sorted(topo.depth.values()) == [0, 1, 1, 2, 2]

    def test_grow_keeps_existing_ids(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        grown = grow_tree(topo, 2)
        assert set(topo.nodes) <= set(grown.nodes)
        assert grown.parent[3] == 2 and grown.parent[4] == 2

    def test_grow_non_leaf_rejected(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        with pytest.raises(StructureError):
            grow_tree(topo, 0)

    def test_payload_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            topo = random_topology(rng)
            back = TreeTopology.from_payload(topo.to_payload())
            assert back == topo
            assert back.leaves == topo.leaves

    def test_grow_counts(self):
        rng = np.random.default_rng(3)
        topo = random_topology(rng)
        grown = grow_tree(topo, topo.leaves[0])
        assert len(grown.leaves) == len(topo.leaves) + 1
        assert len(grown.nodes) == len(topo.nodes) + 2


class TestLeafProbabilities:
    def test_single_node_tree(self):
        post = leaf_probabilities(TreeTopology.single_node(), {})
        assert post.leaf_prob == {0: 1.0}

    def test_depth_one_symmetric(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        post = leaf_probabilities(topo, {0: 0.5})
        assert post.leaf_prob[1] == pytest.approx(0.5)
        assert post.leaf_prob[2] == pytest.approx(0.5)

    def test_three_leaf_example(self):
        # root p_left=0.7, left child p_left=0.4, right child is a leaf
        topo = grow_tree(grow_tree(TreeTopology.single_node(), 0), 1)
        decisions = {0: RouterDecision(0, 0.7), 1: RouterDecision(1, 0.4)}
        post = leaf_probabilities(topo, decisions)
        expected = enumerate_paths_oracle(topo, decisions)
        assert expected == pytest.approx({3: 0.28, 4: 0.42, 2: 0.30})
        for leaf, p in expected.items():
            assert post.leaf_prob[leaf] == pytest.approx(p, abs=1e-12)

    def test_missing_decision_raises(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        with pytest.raises(StructureError):
            leaf_probabilities(topo, {})

    def test_invalid_probability_raises(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        with pytest.raises(DomainError):
            leaf_probabilities(topo, {0: 1.7})

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_probability_laws_random_trees(self, seed):
        rng = np.random.default_rng(seed)
        topo = random_topology(rng)
        decisions = {n: float(rng.random()) for n in topo.internal_nodes}
        post = leaf_probabilities(topo, decisions)
        assert sum(post.leaf_prob.values()) == pytest.approx(1.0, abs=1e-6)
        # arrival probability equals the mass of the node's subtree
        for node in topo.nodes:
            subtree = sum(post.leaf_prob[l] for l in topo.subtree_leaves(node))
            assert post.node_prob[node] == pytest.approx(subtree, abs=1e-6)
        against_oracle = enumerate_paths_oracle(topo, decisions)
        for leaf in topo.leaves:
            assert post.leaf_prob[leaf] == pytest.approx(against_oracle[leaf], abs=1e-12)


class TestSampleLeaf:
    def test_point_mass(self):
        post = posterior_from_array(grow_tree(TreeTopology.single_node(), 0), [1.0, 0.0])
        assert all(sample_leaf(post, seed) == 1 for seed in range(50))

    def test_monte_carlo_frequency(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        post = posterior_from_array(topo, [0.5, 0.5])
        draws = [sample_leaf(post, seed) for seed in range(10_000)]
        freq = draws.count(1) / len(draws)
        assert 0.48 <= freq <= 0.52

    def test_seed_determinism(self):
        topo = grow_tree(grow_tree(TreeTopology.single_node(), 0), 1)
        post = posterior_from_array(topo, [0.2, 0.5, 0.3])
        assert all(sample_leaf(post, 1234) == sample_leaf(post, 1234) for _ in range(10))

    def test_degenerate_posterior(self):
        post = PathPosterior(leaf_prob={1: 0.0, 2: 0.0}, node_prob={0: 0.0, 1: 0.0, 2: 0.0})
        with pytest.raises(DomainError):
            sample_leaf(post, 0)

    def test_chi_square_convergence(self):
        topo = grow_tree(grow_tree(TreeTopology.single_node(), 0), 1)
        probs = [0.2, 0.5, 0.3]
        post = posterior_from_array(topo, probs)
        draws = [sample_leaf(post, seed) for seed in range(10_000)]
        counts = [draws.count(l) for l in sorted(post.leaf_prob)]
        expected = [p * len(draws) for p, _ in zip([0.2, 0.5, 0.3], counts)]
        # leaves sorted by id: 2, 3, 4 -> probs 0.3, 0.2, 0.5
        expected = [post.leaf_prob[l] * len(draws) for l in sorted(post.leaf_prob)]
        _, pvalue = stats.chisquare(counts, expected)
        assert pvalue > 0.01


class TestSelectSplitLeaf:
    def test_argmax(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        batch = [posterior_from_array(topo, [0.9, 0.1]) for _ in range(8)]
        assert select_split_leaf(batch, topo) == 1

    def test_tie_breaks_to_smallest_id(self):
        topo = grow_tree(TreeTopology.single_node(), 0)
        batch = [posterior_from_array(topo, [0.5, 0.5]) for _ in range(4)]
        assert select_split_leaf(batch, topo) == 1

    def test_uniform_many_leaves(self):
        topo = grow_tree(grow_tree(grow_tree(TreeTopology.single_node(), 0), 1), 2)
        k = len(topo.leaves)
        batch = [posterior_from_array(topo, [1.0 / k] * k) for _ in range(3)]
        assert select_split_leaf(batch, topo) == min(topo.leaves)

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            select_split_leaf([], TreeTopology.single_node())
