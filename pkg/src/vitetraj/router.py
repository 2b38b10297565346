"""Noisy gating over the two interaction experts with threshold-based Top-P selection."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn import Module
from .rng import RngStream
from .tensor import Tensor, l2_norm, softmax, softplus

EXPERTS = ("onehop", "high")
IMPORTANCE_EPS = 1e-8


@dataclass
class GateDistribution:
    """Routing state of one agent."""

    probs: np.ndarray
    sorted_order: tuple
    active_set: tuple
    renorm_weights: np.ndarray


class Router(Module):
    def __init__(self, name, dim, rng: RngStream, top_p=0.7, noise_enabled=True):
        super().__init__(name)
        if not 0.0 < top_p < 1.0:
            raise ContractError(f"top_p must lie in (0, 1), got {top_p}")
        self.W_g = self._param("W_g", np.zeros((dim, 2)))
        self.W_n = self._param("W_n", rng.normal((dim, 2), std=0.1 / np.sqrt(dim)))
        self.top_p = float(top_p)
        self.noise_enabled = bool(noise_enabled)

    def logits(self, nodes: Tensor, rng: RngStream | None = None, train=False) -> Tensor:
        clean = nodes @ self.W_g
        if train and self.noise_enabled and rng is not None:
            eps = rng.normal(clean.shape)
            return clean + eps * softplus(nodes @ self.W_n)
        return clean

    def gate(self, nodes: Tensor, rng: RngStream | None = None, train=False) -> Tensor:
        """Per-agent softmax over (one-hop, high-order)."""
        return softmax(self.logits(nodes, rng, train))


def top_p_select(probs, p: float) -> tuple:
    """Minimal prefix of the descending-sorted experts whose cumulative mass exceeds ``p``.

    Returned indices are in descending-probability order (ties keep index order).
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    chosen = []
    cum = 0.0
    for k in order:
        chosen.append(int(k))
        cum += probs[k]
        if cum > p:
            break
    return tuple(chosen)


def selection_mask(probs: np.ndarray, p: float) -> np.ndarray:
    probs = np.atleast_2d(probs)
    mask = np.zeros(probs.shape)
    for i, row in enumerate(probs):
        mask[i, list(top_p_select(row, p))] = 1.0
    return mask


def renormalize(probs, active) -> Tensor | np.ndarray:
    """Weights restricted to the active set and rescaled to sum to one.

    ``active`` is either an index collection (single agent) or a 0/1 mask
    shaped like ``probs``. Works on arrays and on taped tensors.
    """
    if isinstance(active, (tuple, list, set)):
        mask = np.zeros(np.shape(probs.data if isinstance(probs, Tensor) else probs))
        mask[list(active)] = 1.0
    else:
        mask = np.asarray(active, dtype=np.float64)
    if not mask.any(axis=-1).all():
        raise ContractError("active set must be non-empty")
    kept = probs * mask
    return kept / kept.sum(axis=-1, keepdims=True)


_PICK = (np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))


def fuse(ghat, one_hop: Tensor, high: Tensor) -> Tensor:
    """Per-agent ``ghat[:,0] * one_hop + ghat[:,1] * high``."""
    if one_hop.shape != high.shape:
        raise ContractError(f"expert outputs differ in shape: {one_hop.shape} vs {high.shape}")
    return (ghat @ _PICK[0]) * one_hop + (ghat @ _PICK[1]) * high


def importance_loss(probs) -> Tensor:
    """Mean over agents of std(g_i) / (mean(g_i) + 1e-8), population std over the experts."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    n_exp = probs.shape[-1]
    mean = probs.mean(axis=-1, keepdims=True)
    std = l2_norm(probs - mean) * (1.0 / np.sqrt(n_exp))
    return (std / (mean.reshape(-1) + IMPORTANCE_EPS)).mean()


def gate_distributions(probs: np.ndarray, p: float) -> list[GateDistribution]:
    out = []
    for row in np.atleast_2d(probs):
        active = top_p_select(row, p)
        out.append(
            GateDistribution(
                probs=row.copy(),
                sorted_order=tuple(int(k) for k in np.argsort(-row, kind="stable")),
                active_set=tuple(sorted(active)),
                renorm_weights=renormalize(row, active),
            )
        )
    return out


GATE_COLUMNS = ["scene_id", "agent_id", "g_onehop", "g_high", "active_set"]


def gates_to_csv(rows) -> str:
    """``rows`` are ``(scene_id, agent_id, GateDistribution)`` triples."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GATE_COLUMNS)
    for scene_id, agent_id, gd in rows:
        active = "+".join(EXPERTS[k] for k in gd.active_set)
        w.writerow([scene_id, agent_id, repr(float(gd.probs[0])), repr(float(gd.probs[1])), active])
    return buf.getvalue()
