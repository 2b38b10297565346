"""Node, pairwise and expert encoders.

All modules map ``N x D`` node tensors to ``N x D`` outputs and are
permutation-equivariant over agents.
"""
from __future__ import annotations

import math

import numpy as np

from .graph import InteractionGraph
from .nn import MLP, LayerNorm, Linear, Module
from .rng import RngStream
from .tensor import Tensor, gather_rows, gelu, scatter_add_rows, softmax

MASKED = -1e30
AGGREGATORS = ("attention", "mean")


class NodeEmbedder(Module):
    """Shared 2-layer MLP over the flattened ``T_obs x 4`` feature block."""

    def __init__(self, name, t_obs, dim, rng):
        super().__init__(name)
        self.mlp = MLP(f"{name}.mlp", t_obs * 4, dim, dim, rng)

    def __call__(self, features: np.ndarray) -> Tensor:
        n = features.shape[0]
        return self.mlp(Tensor(features.reshape(n, -1)))


class RelationalEncoder(Module):
    """Single-layer masked scaled dot-product attention with residual and LayerNorm.

    Agent ``i`` attends over ``{j : mask[i, j]} | {i}``.
    """

    def __init__(self, name, dim, rng):
        super().__init__(name)
        self.q = Linear(f"{name}.q", dim, dim, rng, bias=False)
        self.k = Linear(f"{name}.k", dim, dim, rng, bias=False)
        self.v = Linear(f"{name}.v", dim, dim, rng, bias=False)
        self.proj = Linear(f"{name}.proj", dim, dim, rng)
        self.norm = LayerNorm(f"{name}.norm", dim)
        self.scale = 1.0 / math.sqrt(dim)

    def __call__(self, nodes: Tensor, mask) -> Tensor:
        n = nodes.shape[0]
        allowed = np.asarray(mask, dtype=bool) | np.eye(n, dtype=bool)
        bias = np.where(allowed, 0.0, MASKED)
        scores = (self.q(nodes) @ self.k(nodes).T) * self.scale + bias
        attn = softmax(scores)
        return self.norm(nodes + self.proj(attn @ self.v(nodes)))


def orthogonal_rows(n_rows, dim, rng: RngStream) -> np.ndarray:
    """``n_rows`` mutually orthogonal unit vectors (requires ``n_rows <= dim``)."""
    if n_rows > dim:
        raise ValueError(f"cannot draw {n_rows} orthogonal vectors in {dim} dimensions")
    q, r = np.linalg.qr(rng.normal((dim, n_rows)))
    q = q * np.sign(np.diag(r))  # fixes the sign ambiguity of QR
    return q.T.copy()


class VirtualNodeBank(Module):
    """Learnable per-hub mean embeddings with optional train-time Gaussian jitter."""

    def __init__(self, name, n_virtual, dim, rng, perturb_std=0.0):
        super().__init__(name)
        self.base = self._param("base", orthogonal_rows(n_virtual, dim, rng))
        self.perturb_std = float(perturb_std)

    @property
    def n_virtual(self):
        return self.base.shape[0]

    def init(self, rng: RngStream | None = None, train: bool = False) -> Tensor:
        if train and self.perturb_std > 0.0 and rng is not None:
            return self.base + rng.normal(self.base.shape, std=self.perturb_std)
        return self.base


class _CrossAggregate(Module):
    """Each receiver pools all senders with single-head attention (or a plain mean)."""

    def __init__(self, name, dim, rng, aggregator="attention"):
        super().__init__(name)
        if aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        self.aggregator = aggregator
        self.q = Linear(f"{name}.q", dim, dim, rng, bias=False)
        self.k = Linear(f"{name}.k", dim, dim, rng, bias=False)
        self.v = Linear(f"{name}.v", dim, dim, rng, bias=False)
        self.scale = 1.0 / math.sqrt(dim)

    def weights(self, receivers: Tensor, senders: Tensor) -> Tensor:
        if self.aggregator == "mean":
            m, n = receivers.shape[0], senders.shape[0]
            return Tensor(np.full((m, n), 1.0 / n))
        return softmax((self.q(receivers) @ self.k(senders).T) * self.scale)

    def __call__(self, receivers: Tensor, senders: Tensor) -> Tensor:
        return self.weights(receivers, senders) @ self.v(senders)


class RealToVirtual(Module):
    """Stage 1: every hub pools all real nodes, then a residual MLP update."""

    def __init__(self, name, dim, rng, aggregator="attention"):
        super().__init__(name)
        self.agg = _CrossAggregate(f"{name}.agg", dim, rng, aggregator)
        self.update = MLP(f"{name}.update", 2 * dim, dim, dim, rng)

    def __call__(self, virtual: Tensor, nodes: Tensor) -> Tensor:
        return virtual + self.update(virtual, self.agg(virtual, nodes))


class VirtualToReal(Module):
    """Stage 2: every real node pools all hubs; residual update, LayerNorm, then GELU."""

    def __init__(self, name, dim, rng, aggregator="attention"):
        super().__init__(name)
        self.agg = _CrossAggregate(f"{name}.agg", dim, rng, aggregator)
        self.update = MLP(f"{name}.update", 2 * dim, dim, dim, rng)
        self.norm = LayerNorm(f"{name}.norm", dim)

    def __call__(self, nodes: Tensor, virtual: Tensor) -> Tensor:
        n1 = nodes + self.update(nodes, self.agg(nodes, virtual))
        return gelu(self.norm(n1))


class HighOrderExpert(Module):
    def __init__(self, name, dim, n_virtual, rng, aggregator="attention", perturb_std=0.0):
        super().__init__(name)
        self.bank = VirtualNodeBank(f"{name}.virtual", n_virtual, dim, rng, perturb_std)
        self.r2v = RealToVirtual(f"{name}.r2v", dim, rng, aggregator)
        self.v2r = VirtualToReal(f"{name}.v2r", dim, rng, aggregator)

    def __call__(self, nodes: Tensor, rng=None, train=False) -> Tensor:
        v0 = self.bank.init(rng, train)
        v1 = self.r2v(v0, nodes)
        return self.v2r(nodes, v1)


EDGE_INPUT_DIM = 5


def edge_inputs(features: np.ndarray, graph: InteractionGraph) -> np.ndarray:
    """Raw per-edge geometry ``[dx, dy, |d|, dr_x, dr_y]`` at the last observed frame.

    For edge ``(i, j)`` the offsets are ``j - i``: sender relative to receiver.
    """
    last = features[:, -1, :]
    if not graph.edges:
        return np.zeros((0, EDGE_INPUT_DIM))
    recv = np.array([e[0] for e in graph.edges])
    send = np.array([e[1] for e in graph.edges])
    d = last[send, :2] - last[recv, :2]
    dr = last[send, 2:] - last[recv, 2:]
    dist = np.sqrt((d * d).sum(axis=1, keepdims=True))
    return np.concatenate([d, dist, dr], axis=1)


class EdgeEncoder(Module):
    def __init__(self, name, dim, rng):
        super().__init__(name)
        self.mlp = MLP(f"{name}.mlp", EDGE_INPUT_DIM, dim, dim, rng)

    def __call__(self, raw: np.ndarray) -> Tensor:
        return self.mlp(Tensor(raw))


class OneHopExpert(Module):
    """Edge messages from (receiver, sender, edge) features, mean-pooled per receiver."""

    def __init__(self, name, dim, rng):
        super().__init__(name)
        self.message = MLP(f"{name}.message", 3 * dim, dim, dim, rng)
        self.update = MLP(f"{name}.update", 2 * dim, dim, dim, rng)

    def aggregate(self, nodes: Tensor, graph: InteractionGraph, edge_feats: Tensor) -> Tensor:
        n = nodes.shape[0]
        if not graph.edges:
            return Tensor(np.zeros(nodes.shape))
        recv = np.array([e[0] for e in graph.edges])
        send = np.array([e[1] for e in graph.edges])
        msgs = self.message(gather_rows(nodes, recv), gather_rows(nodes, send), edge_feats)
        counts = np.bincount(recv, minlength=n).astype(np.float64)
        return scatter_add_rows(msgs, recv, n) / np.maximum(counts, 1.0)[:, None]

    def __call__(self, nodes: Tensor, graph: InteractionGraph, edge_feats: Tensor) -> Tensor:
        return self.update(nodes, self.aggregate(nodes, graph, edge_feats))
