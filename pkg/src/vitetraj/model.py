"""The full predictor: encoders, two experts, router and decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Scene, build_input_features, normalize_scene
from .encoders import EdgeEncoder, HighOrderExpert, NodeEmbedder, OneHopExpert, RelationalEncoder, edge_inputs
from .graph import InteractionGraph, knn_graph
from .nn import Module
from .predictor import Decoder, LossBreakdown, min_l2_loss, total_loss
from .rng import RngStream
from .router import Router, importance_loss, renormalize, fuse, selection_mask
from .tensor import Tensor

KNN_SOURCES = ("embedding", "features")


@dataclass
class ModelConfig:
    t_obs: int = 8
    t_pred: int = 12
    hidden_dim: int = 64
    virtual_count: int = 4
    heads: int = 20
    k_neighbors: int = 4
    top_p: float = 0.7
    perturb_std: float = 0.1
    noise_enabled: bool = True
    aggregator: str = "attention"
    knn_source: str = "embedding"


@dataclass
class ForwardResult:
    trajectories: Tensor  # K x N x T_pred x 2, absolute coordinates
    probs: Tensor  # N x 2
    active: np.ndarray  # N x 2 0/1
    weights: Tensor  # N x 2 renormalized
    graph: InteractionGraph
    base: Tensor
    pair: Tensor
    one_hop: Tensor
    high: Tensor
    routed: Tensor


class ViTE(Module):
    def __init__(self, config: ModelConfig, rng: RngStream):
        super().__init__("vite")
        c = config
        if c.knn_source not in KNN_SOURCES:
            raise ValueError(f"knn_source must be one of {KNN_SOURCES}")
        self.config = c
        D = c.hidden_dim
        self.embed = NodeEmbedder("node", c.t_obs, D, rng)
        self.relational = RelationalEncoder("relational", D, rng)
        self.edges = EdgeEncoder("edge", D, rng)
        self.one_hop = OneHopExpert("onehop", D, rng)
        self.high = HighOrderExpert("high", D, c.virtual_count, rng, c.aggregator, c.perturb_std)
        self.router = Router("router", D, rng, c.top_p, c.noise_enabled)
        self.decoder = Decoder("decoder", D, c.heads, c.t_pred, rng)

    def forward(self, scene: Scene, rng: RngStream | None = None, train: bool = False) -> ForwardResult:
        if scene.t_obs != self.config.t_obs or scene.t_pred != self.config.t_pred:
            raise ValueError(
                f"scene windows ({scene.t_obs}, {scene.t_pred}) do not match model "
                f"({self.config.t_obs}, {self.config.t_pred})"
            )
        centered, _ = normalize_scene(scene)
        feats = build_input_features(centered)
        base = self.embed(feats)

        knn_in = base.data if self.config.knn_source == "embedding" else feats.reshape(len(feats), -1)
        graph = knn_graph(knn_in, self.config.k_neighbors)
        pair = self.relational(base, graph.mask)

        one_hop = self.one_hop(base, graph, self.edges(edge_inputs(feats, graph)))
        high = self.high(base, rng, train)

        probs = self.router.gate(base, rng, train)
        active = selection_mask(probs.data, self.router.top_p)
        weights = renormalize(probs, active)
        routed = fuse(weights, one_hop, high)

        traj = self.decoder(base, pair, routed, scene.last_observed)
        return ForwardResult(traj, probs, active, weights, graph, base, pair, one_hop, high, routed)

    def loss(self, scene: Scene, lam: float, rng: RngStream | None = None, train: bool = False):
        out = self.forward(scene, rng, train)
        pred, _, _ = min_l2_loss(out.trajectories, scene.future)
        imp = importance_loss(out.probs)
        return total_loss(pred, imp, lam), out

    def predict(self, scene: Scene) -> np.ndarray:
        """Noise-free ``K x N x T_pred x 2`` predictions."""
        return self.forward(scene, train=False).trajectories.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
