"""Learnable components of the convolutional tree VAE.

The bottom-up encoder produces one feature map per tree depth (stem at full
resolution, then a stride-2 pyramid; the root reads the deepest, smallest
feature). Per-node transformations map a parent latent sample to its child's
prior; posterior heads merge the transformation trunk with the bottom-up
feature at the child's depth. Routers emit left-branch probabilities and
leaf decoders reconstruct images from leaf latents.

All shapes are pure functions of :class:`TreeVaeArch`. Mean/log-variance
heads and router output layers are zero-initialized, so a fresh model starts
at the standard-normal prior with uniform routing. Convolutions use
replicate padding, which keeps spatially constant maps constant; together
with the zero-init heads this makes tree growth neutral at initialization
when decoder weights can be inherited.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DomainError, StructureError
from .latent_tree import NodeId, TreeTopology, grow_tree

LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class TreeVaeArch:
    """Structural hyperparameters; every network shape derives from these."""

    image_shape: tuple[int, int, int] = (1, 28, 28)
    max_depth: int = 2
    base_channels: int = 16
    latent_channels: int = 4
    double_latent_channels: bool = True
    decoder_width: int = 32
    router_width: int = 16

    def feature_shape(self, depth: int) -> tuple[int, int, int]:
        """Bottom-up feature for nodes at ``depth``; the root gets the deepest."""
        self._check_depth(depth)
        _, h, w = self.image_shape
        levels = self.max_depth + 1 - depth
        return (
            self.base_channels * 2 ** (self.max_depth - depth),
            max(h // 2**levels, 1),
            max(w // 2**levels, 1),
        )

    def latent_shape(self, depth: int) -> tuple[int, int, int]:
        self._check_depth(depth)
        _, fh, fw = self.feature_shape(depth)
        ch = self.latent_channels * (2**depth if self.double_latent_channels else 1)
        return (ch, fh, fw)

    def hidden_channels(self, depth: int) -> int:
        return max(4, 2 * self.latent_shape(depth)[0])

    def _check_depth(self, depth: int) -> None:
        if not 0 <= depth <= self.max_depth:
            raise StructureError(f"depth {depth} outside architecture limit {self.max_depth}")


def shape_table(arch: TreeVaeArch) -> dict:
    """Feature and latent shapes for every depth, for tests and manifests."""
    return {
        "features": {d: arch.feature_shape(d) for d in range(arch.max_depth + 1)},
        "latents": {d: arch.latent_shape(d) for d in range(arch.max_depth + 1)},
    }


@dataclass
class LatentSample:
    """Reparameterized draw at one node with its Gaussian parameters."""

    node: NodeId
    value: torch.Tensor
    mean: torch.Tensor
    log_variance: torch.Tensor


@dataclass
class BottomUpFeatures:
    """Deterministic encoder outputs; ``per_depth[d]`` feeds nodes at depth d."""

    per_depth: list[torch.Tensor]

    def at_depth(self, depth: int) -> torch.Tensor:
        if not 0 <= depth < len(self.per_depth):
            raise StructureError(f"no bottom-up feature for depth {depth}")
        return self.per_depth[depth]


@dataclass
class LeafReconstruction:
    """Decoded [0, 1] image for one leaf."""

    leaf: NodeId
    image: torch.Tensor


def _groups(channels: int) -> int:
    # at least two values per group, so 1x1 maps at batch 1 still normalize
    for g in range(min(8, max(channels // 2, 1)), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _conv(cin: int, cout: int, kernel: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel, padding=kernel // 2, padding_mode="replicate")


def _zero_conv(cin: int, cout: int) -> nn.Conv2d:
    conv = _conv(cin, cout)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ResidualBlock(nn.Module):
    """Pre-activation residual block: two 3x3 convs with an identity skip."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = _conv(cin, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = _conv(cout, cout)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    if x.shape[-2] > size[0]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class BottomUpEncoder(nn.Module):
    """Stem plus one stride-2 stage per depth level; deepest stage is depth 0."""

    def __init__(self, arch: TreeVaeArch):
        super().__init__()
        self.arch = arch
        img_c = arch.image_shape[0]
        self.stem = _conv(img_c, arch.base_channels)
        stages = []
        prev = arch.base_channels
        for depth in range(arch.max_depth, -1, -1):
            cout = arch.feature_shape(depth)[0]
            stages.append(ResidualBlock(prev, cout))
            prev = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> BottomUpFeatures:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.arch.image_shape:
            raise DomainError(
                f"expected image batch of shape (n, {', '.join(map(str, self.arch.image_shape))}), got {tuple(x.shape)}"
            )
        feats: list[Optional[torch.Tensor]] = [None] * (self.arch.max_depth + 1)
        h = self.stem(x)
        for i, depth in enumerate(range(self.arch.max_depth, -1, -1)):
            _, th, tw = self.arch.feature_shape(depth)
            h = self.stages[i](_resize(h, (th, tw)))
            feats[depth] = h
        return BottomUpFeatures(per_depth=feats)


class RootPosterior(nn.Module):
    """Posterior parameters of the root, from the deepest bottom-up feature."""

    def __init__(self, arch: TreeVaeArch):
        super().__init__()
        feat_c = arch.feature_shape(0)[0]
        lat_c = arch.latent_shape(0)[0]
        hidden = arch.hidden_channels(0)
        self.block = ResidualBlock(feat_c, hidden)
        self.mean_head = _zero_conv(hidden, lat_c)
        self.logvar_head = _zero_conv(hidden, lat_c)

    def forward(self, feature: torch.Tensor):
        h = self.block(feature)
        return self.mean_head(h), self.logvar_head(h)


class Transformation(nn.Module):
    """Parent latent sample -> child trunk + child prior parameters."""

    def __init__(self, arch: TreeVaeArch, child_depth: int):
        super().__init__()
        cin = arch.latent_shape(child_depth - 1)[0]
        lat_c, th, tw = arch.latent_shape(child_depth)
        hidden = arch.hidden_channels(child_depth)
        self.target = (th, tw)
        self.block = ResidualBlock(cin, hidden)
        self.mean_head = _zero_conv(hidden, lat_c)
        self.logvar_head = _zero_conv(hidden, lat_c)

    def forward(self, parent_value: torch.Tensor):
        h = self.block(_resize(parent_value, self.target))
        return h, self.mean_head(h), self.logvar_head(h)


class PosteriorMerge(nn.Module):
    """Concatenate transformation trunk with the bottom-up feature at the
    node's depth; a residual block then feeds the posterior heads."""

    def __init__(self, arch: TreeVaeArch, depth: int):
        super().__init__()
        feat_c = arch.feature_shape(depth)[0]
        lat_c = arch.latent_shape(depth)[0]
        hidden = arch.hidden_channels(depth)
        self.block = ResidualBlock(hidden + feat_c, hidden)
        self.mean_head = _zero_conv(hidden, lat_c)
        self.logvar_head = _zero_conv(hidden, lat_c)

    def forward(self, trunk: torch.Tensor, feature: torch.Tensor):
        if trunk.shape[-2:] != feature.shape[-2:]:
            raise StructureError(
                f"trunk spatial {tuple(trunk.shape[-2:])} does not match feature {tuple(feature.shape[-2:])}"
            )
        h = self.block(torch.cat([trunk, feature], dim=1))
        return self.mean_head(h), self.logvar_head(h)


class Router(nn.Module):
    """Left-branch probability from either a feature map or a latent sample."""

    def __init__(self, cin: int, width: int):
        super().__init__()
        self.block = ResidualBlock(cin, width)
        self.fc = nn.Linear(width, width)
        self.out = nn.Linear(width, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.adaptive_avg_pool2d(self.block(x), 1).flatten(1)
        logit = self.out(F.silu(self.fc(h)))
        return torch.sigmoid(logit).squeeze(-1)


class LeafDecoder(nn.Module):
    """Leaf latent -> image logits at the dataset resolution."""

    def __init__(self, arch: TreeVaeArch, depth: int):
        super().__init__()
        img_c, h, w = arch.image_shape
        lat_c = arch.latent_shape(depth)[0]
        width = arch.decoder_width
        self.mid_size = (max(h // 2, 1), max(w // 2, 1))
        self.full_size = (h, w)
        self.conv_in = _conv(lat_c, width)
        self.block_mid = ResidualBlock(width, width)
        self.block_full = ResidualBlock(width, width)
        self.conv_out = _conv(width, img_c)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(z)
        h = self.block_mid(_resize(h, self.mid_size))
        h = self.block_full(_resize(h, self.full_size))
        return self.conv_out(h)


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p) -> torch.Tensor:
    """KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)) summed over non-batch dims."""
    kl = 0.5 * (
        logvar_p
        - logvar_q
        + (logvar_q.exp() + (mu_q - mu_p) ** 2) / logvar_p.exp()
        - 1.0
    )
    return kl.flatten(1).sum(dim=1)


def bernoulli_kl(q: torch.Tensor, p: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """KL(Bern(q) || Bern(p)) per element."""
    q = q.clamp(eps, 1 - eps)
    p = p.clamp(eps, 1 - eps)
    return q * (q / p).log() + (1 - q) * ((1 - q) / (1 - p)).log()


class TreeVae(nn.Module):
    """The full tree model: encoder plus per-node components over a topology.

    ``forward`` runs the variational traversal and returns every quantity the
    objective needs; ``generate`` runs the generative top-down pass from the
    root prior. Component module names mirror the checkpoint layout
    (``transformation:<node>``, ``router_q:<node>``, ``decoder:<leaf>``, ...).
    """

    def __init__(self, arch: TreeVaeArch, topology: Optional[TreeTopology] = None):
        super().__init__()
        self.arch = arch
        self.topology = topology if topology is not None else TreeTopology.single_node()
        if self.topology.max_depth > arch.max_depth:
            raise StructureError(
                f"topology depth {self.topology.max_depth} exceeds architecture max_depth {arch.max_depth}"
            )
        self.encoder = BottomUpEncoder(arch)
        self.root_posterior = RootPosterior(arch)
        self.transforms = nn.ModuleDict()
        self.merges = nn.ModuleDict()
        self.routers_q = nn.ModuleDict()
        self.routers_p = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for node in self.topology.nodes:
            if node != 0:
                self._add_node_networks(node)
        for node in self.topology.internal_nodes:
            self._add_router_networks(node)
        for leaf in self.topology.leaves:
            self.decoders[str(leaf)] = LeafDecoder(arch, self.topology.depth[leaf])

    # -- construction helpers -------------------------------------------------

    def _add_node_networks(self, node: NodeId) -> None:
        depth = self.topology.depth[node]
        self.transforms[str(node)] = Transformation(self.arch, depth)
        self.merges[str(node)] = PosteriorMerge(self.arch, depth)

    def _add_router_networks(self, node: NodeId) -> None:
        depth = self.topology.depth[node]
        self.routers_q[str(node)] = Router(self.arch.feature_shape(depth)[0], self.arch.router_width)
        self.routers_p[str(node)] = Router(self.arch.latent_shape(depth)[0], self.arch.router_width)

    def grow(self, split_leaf: NodeId) -> tuple[NodeId, NodeId]:
        """Split a leaf in place; child decoders inherit the leaf's weights
        when latent channel counts match (always true without channel
        doubling), otherwise they are freshly initialized."""
        old_depth = self.topology.depth[split_leaf]
        new_topology = grow_tree(self.topology, split_leaf)
        left = new_topology.left_child[split_leaf]
        right = new_topology.right_child[split_leaf]
        if new_topology.depth[left] > self.arch.max_depth:
            raise StructureError(
                f"splitting leaf {split_leaf} would exceed architecture max_depth {self.arch.max_depth}"
            )
        self.topology = new_topology
        parent_decoder = self.decoders[str(split_leaf)]
        del self.decoders[str(split_leaf)]
        for child in (left, right):
            self._add_node_networks(child)
            decoder = LeafDecoder(self.arch, new_topology.depth[child])
            if self.arch.latent_shape(new_topology.depth[child])[0] == self.arch.latent_shape(old_depth)[0]:
                decoder.load_state_dict(parent_decoder.state_dict())
            self.decoders[str(child)] = decoder
        self._add_router_networks(split_leaf)
        to_dtype = next(self.encoder.parameters()).dtype
        for child in (left, right):
            self.transforms[str(child)].to(to_dtype)
            self.merges[str(child)].to(to_dtype)
            self.decoders[str(child)].to(to_dtype)
        self.routers_q[str(split_leaf)].to(to_dtype)
        self.routers_p[str(split_leaf)].to(to_dtype)
        return left, right

    # -- spec-facing single operations ----------------------------------------

    def encode_bottom_up(self, x: torch.Tensor) -> BottomUpFeatures:
        return self.encoder(x)

    def node_posterior_params(
        self,
        parent_sample: Optional[LatentSample],
        features: BottomUpFeatures,
        node: NodeId,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        depth = self.topology.depth[node]
        if node == 0:
            if parent_sample is not None:
                raise StructureError("root posterior takes no parent sample")
            return self.root_posterior(features.at_depth(0))
        if parent_sample is None:
            raise StructureError(f"node {node} needs its parent's sample")
        trunk, _, _ = self.transforms[str(node)](parent_sample.value)
        return self.merges[str(node)](trunk, features.at_depth(depth))

    def prior_params(self, parent_sample: LatentSample, node: NodeId) -> tuple[torch.Tensor, torch.Tensor]:
        if node == 0:
            raise StructureError("the root prior is fixed standard normal")
        _, mu, logvar = self.transforms[str(node)](parent_sample.value)
        return mu, logvar

    def router_probability(self, kind: str, node: NodeId, value: torch.Tensor) -> torch.Tensor:
        if self.topology.is_leaf(node):
            raise StructureError(f"node {node} is a leaf and has no router")
        if kind == "variational":
            return self.routers_q[str(node)](value)
        if kind == "generative":
            return self.routers_p[str(node)](value)
        raise DomainError(f"unknown router kind {kind!r}")

    def decode_leaf(self, leaf_sample: LatentSample, leaf: NodeId) -> LeafReconstruction:
        if not self.topology.is_leaf(leaf):
            raise StructureError(f"node {leaf} is not a leaf")
        if leaf_sample.node != leaf:
            raise StructureError(f"latent sample belongs to node {leaf_sample.node}, not leaf {leaf}")
        logits = self.decoders[str(leaf)](leaf_sample.value)
        return LeafReconstruction(leaf=leaf, image=torch.sigmoid(logits))

    # -- traversals ------------------------------------------------------------

    def _draw(self, mu, logvar, generator, sample_mode):
        logvar = logvar.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        if sample_mode == "mean":
            return mu, logvar
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + (0.5 * logvar).exp() * eps, logvar

    def forward(
        self,
        x: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        sample_mode: str = "sample",
    ) -> dict:
        """Variational traversal; returns probabilities, KLs, latents, and
        per-leaf reconstruction logits keyed exactly like the topology."""
        features = self.encoder(x)
        batch = x.shape[0]
        ones = torch.ones(batch, dtype=x.dtype, device=x.device)
        node_probs: dict[NodeId, torch.Tensor] = {0: ones}
        kl_node: dict[NodeId, torch.Tensor] = {}
        kl_router: dict[NodeId, torch.Tensor] = {}
        router_q: dict[NodeId, torch.Tensor] = {}
        router_p: dict[NodeId, torch.Tensor] = {}
        latents: dict[NodeId, LatentSample] = {}
        recon_logits: dict[NodeId, torch.Tensor] = {}
        prior_mu: dict[NodeId, torch.Tensor] = {}
        prior_logvar: dict[NodeId, torch.Tensor] = {}

        queue: list[tuple[NodeId, Optional[LatentSample]]] = [(0, None)]
        while queue:
            node, parent = queue.pop(0)
            depth = self.topology.depth[node]
            if node == 0:
                mu_q, logvar_q = self.root_posterior(features.at_depth(0))
                mu_p = torch.zeros_like(mu_q)
                logvar_p = torch.zeros_like(logvar_q)
            else:
                trunk, mu_p, logvar_p = self.transforms[str(node)](parent.value)
                mu_q, logvar_q = self.merges[str(node)](trunk, features.at_depth(depth))
            logvar_q_c = logvar_q.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
            logvar_p_c = logvar_p.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
            value, logvar_q_c = self._draw(mu_q, logvar_q_c, generator, sample_mode)
            sample = LatentSample(node=node, value=value, mean=mu_q, log_variance=logvar_q_c)
            latents[node] = sample
            prior_mu[node], prior_logvar[node] = mu_p, logvar_p_c
            kl_node[node] = gaussian_kl(mu_q, logvar_q_c, mu_p, logvar_p_c)

            if self.topology.is_leaf(node):
                recon_logits[node] = self.decoders[str(node)](value)
                continue
            q = self.routers_q[str(node)](features.at_depth(depth))
            p = self.routers_p[str(node)](value)
            router_q[node], router_p[node] = q, p
            kl_router[node] = bernoulli_kl(q, p)
            left, right = self.topology.left_child[node], self.topology.right_child[node]
            node_probs[left] = node_probs[node] * q
            node_probs[right] = node_probs[node] * (1.0 - q)
            queue.append((left, sample))
            queue.append((right, sample))

        leaf_probs = torch.stack([node_probs[l] for l in self.topology.leaves], dim=1)
        return {
            "features": features,
            "leaf_probs": leaf_probs,
            "node_probs": node_probs,
            "kl_node": kl_node,
            "kl_router": kl_router,
            "router_q": router_q,
            "router_p": router_p,
            "latents": latents,
            "recon_logits": recon_logits,
            "prior_mu": prior_mu,
            "prior_logvar": prior_logvar,
        }

    @torch.no_grad()
    def generate(
        self,
        n: int,
        generator: Optional[torch.Generator] = None,
        sample_mode: str = "sample",
        root_value: Optional[torch.Tensor] = None,
    ) -> dict:
        """Top-down generative pass: root from N(0, I), children from their
        transformations, branch probabilities from the generative routers."""
        dtype = next(self.parameters()).dtype
        lat_c, lh, lw = self.arch.latent_shape(0)
        if root_value is None:
            if sample_mode == "mean":
                root_value = torch.zeros(n, lat_c, lh, lw, dtype=dtype)
            else:
                root_value = torch.randn(n, lat_c, lh, lw, generator=generator, dtype=dtype)
        ones = torch.ones(n, dtype=dtype)
        node_probs: dict[NodeId, torch.Tensor] = {0: ones}
        latents: dict[NodeId, LatentSample] = {}
        recon: dict[NodeId, torch.Tensor] = {}
        zeros = torch.zeros_like(root_value)
        queue: list[tuple[NodeId, LatentSample]] = [
            (0, LatentSample(node=0, value=root_value, mean=zeros, log_variance=zeros))
        ]
        while queue:
            node, sample = queue.pop(0)
            latents[node] = sample
            if self.topology.is_leaf(node):
                recon[node] = torch.sigmoid(self.decoders[str(node)](sample.value))
                continue
            p_left = self.routers_p[str(node)](sample.value)
            left, right = self.topology.left_child[node], self.topology.right_child[node]
            node_probs[left] = node_probs[node] * p_left
            node_probs[right] = node_probs[node] * (1.0 - p_left)
            for child in (left, right):
                _, mu, logvar = self.transforms[str(child)](sample.value)
                value, logvar_c = self._draw(mu, logvar, generator, sample_mode)
                queue.append((child, LatentSample(node=child, value=value, mean=mu, log_variance=logvar_c)))

        leaf_probs = torch.stack([node_probs[l] for l in self.topology.leaves], dim=1)
        return {"leaf_probs": leaf_probs, "node_probs": node_probs, "latents": latents, "leaf_images": recon}

    # -- checkpoint component mapping ------------------------------------------

    def component_names(self) -> list[str]:
        names = ["encoder", "root_posterior"]
        names += [f"transformation:{n}" for n in self.topology.nodes if n != 0]
        names += [f"merge:{n}" for n in self.topology.nodes if n != 0]
        names += [f"router_q:{n}" for n in self.topology.internal_nodes]
        names += [f"router_p:{n}" for n in self.topology.internal_nodes]
        names += [f"decoder:{l}" for l in self.topology.leaves]
        return names

    def _component_module(self, name: str) -> nn.Module:
        if name == "encoder":
            return self.encoder
        if name == "root_posterior":
            return self.root_posterior
        kind, _, node = name.partition(":")
        table = {
            "transformation": self.transforms,
            "merge": self.merges,
            "router_q": self.routers_q,
            "router_p": self.routers_p,
            "decoder": self.decoders,
        }
        if kind not in table or node not in table[kind]:
            raise StructureError(f"unknown checkpoint component {name!r}")
        return table[kind][node]

    def state_components(self) -> dict[str, dict[str, np.ndarray]]:
        out = {}
        for name in self.component_names():
            module = self._component_module(name)
            out[name] = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return out

    def load_state_components(self, components: dict[str, dict[str, np.ndarray]]) -> None:
        expected = set(self.component_names())
        if expected != set(components):
            missing = expected - set(components)
            extra = set(components) - expected
            raise StructureError(f"component mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arrays in components.items():
            module = self._component_module(name)
            module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})


def build_treevae(arch: TreeVaeArch, topology: TreeTopology, seed: int) -> TreeVae:
    """Construct a model with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return TreeVae(arch, topology)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embeddings of integer steps, shape (len(t), dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb
