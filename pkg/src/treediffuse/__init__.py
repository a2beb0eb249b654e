"""Tree-structured VAE clustering with a cluster-conditional diffusion refiner."""

from .latent_tree import (
    PathPosterior,
    RouterDecision,
    TreeTopology,
    grow_tree,
    leaf_probabilities,
    sample_leaf,
    select_split_leaf,
)

__all__ = [
    "PathPosterior",
    "RouterDecision",
    "TreeTopology",
    "grow_tree",
    "leaf_probabilities",
    "sample_leaf",
    "select_split_leaf",
]

__version__ = "0.1.0"
