"""Multi-head trajectory decoder, best-of-K loss and minADE/minFDE."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn import Module
from .rng import RngStream
from .tensor import Parameter, Tensor, concat, gelu, l2_norm


class Decoder(Module):
    """``K`` independent 2-layer MLP heads stacked along a leading axis.

    Head ``k`` owns slice ``k`` of every decoder parameter. Heads emit
    per-step displacements that are accumulated from the last observed position.
    """

    def __init__(self, name, dim, heads, t_pred, rng: RngStream, hidden=None):
        super().__init__(name)
        hidden = hidden or dim
        d_in = 3 * dim
        self.t_pred = t_pred
        self.W1 = Parameter(rng.normal((heads, d_in, hidden), std=1.0 / math.sqrt(d_in)), f"{name}.W1")
        self.b1 = Parameter(np.zeros((heads, 1, hidden)), f"{name}.b1")
        self.W2 = Parameter(rng.normal((heads, hidden, 2 * t_pred), std=0.1 / math.sqrt(hidden)), f"{name}.W2")
        self.b2 = Parameter(np.zeros((heads, 1, 2 * t_pred)), f"{name}.b2")
        self._cumsum = np.tril(np.ones((t_pred, t_pred)))

    @property
    def heads(self):
        return self.W1.shape[0]

    def displacements(self, base: Tensor, pair: Tensor, routed: Tensor) -> Tensor:
        shapes = {base.shape, pair.shape, routed.shape}
        if len(shapes) != 1:
            raise ContractError(f"decoder inputs differ in shape: {sorted(shapes)}")
        x = concat([base, pair, routed])  # N x 3D, broadcast over heads
        h = gelu(x @ self.W1 + self.b1)
        out = h @ self.W2 + self.b2  # K x N x 2T
        return out.reshape(self.heads, base.shape[0], self.t_pred, 2)

    def __call__(self, base, pair, routed, last_observed) -> Tensor:
        """``K x N x T_pred x 2`` absolute positions."""
        disp = self.displacements(base, pair, routed)
        anchor = np.asarray(last_observed, dtype=np.float64)[:, None, :]
        return self._cumsum @ disp + anchor


@dataclass
class PredictionSet:
    trajectories: np.ndarray  # K x N x T_pred x 2
    head_losses: np.ndarray  # K


@dataclass
class LossBreakdown:
    pred_loss: object
    imp_loss: object
    total: object
    lam: float

    def values(self) -> dict:
        f = lambda v: float(v.item() if isinstance(v, Tensor) else v)
        return {"pred_loss": f(self.pred_loss), "imp_loss": f(self.imp_loss), "total": f(self.total)}


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def head_errors(preds, future) -> np.ndarray:
    """``K x N`` summed Euclidean error of each head's trajectory for each agent."""
    d = _as_array(preds) - np.asarray(future)[None]
    return np.sqrt((d * d).sum(axis=-1)).sum(axis=-1)


def min_l2_loss(preds, future):
    """Best-of-K displacement loss averaged over agents and steps.

    Each agent keeps the single head with the lowest summed error over its
    whole horizon; only that head receives gradient. Returns
    ``(loss, head_losses, best)`` where ``head_losses[k]`` is head ``k``'s own
    mean displacement and ``best[i]`` is agent ``i``'s selected head.
    """
    future = np.asarray(future, dtype=np.float64)
    pshape = preds.shape
    if len(pshape) != 4 or pshape[1:] != future.shape:
        raise ContractError(f"predictions {pshape} do not match future {future.shape}")
    K, N, T, _ = pshape
    errs = head_errors(preds, future)
    best = errs.argmin(axis=0)
    onehot = np.zeros((K, N))
    onehot[best, np.arange(N)] = 1.0
    head_losses = errs.sum(axis=1) / (N * T)
    if isinstance(preds, Tensor):
        dist = l2_norm(preds - future).sum(axis=-1)  # K x N
        loss = (dist * onehot).sum() * (1.0 / (N * T))
    else:
        loss = float((errs * onehot).sum() / (N * T))
    return loss, head_losses, best


def total_loss(pred_loss, imp_loss, lam: float) -> LossBreakdown:
    return LossBreakdown(pred_loss, imp_loss, pred_loss + lam * imp_loss, lam)


def per_agent_ade_fde(preds, future, k: int):
    """Per-agent best-of-first-``k`` ADE and FDE, minimised independently."""
    preds = _as_array(preds)
    future = np.asarray(future, dtype=np.float64)
    if k < 1 or k > preds.shape[0]:
        raise ContractError(f"k={k} outside 1..{preds.shape[0]}")
    d = np.sqrt(((preds[:k] - future[None]) ** 2).sum(axis=-1))  # k x N x T
    return d.mean(axis=-1).min(axis=0), d[..., -1].min(axis=0)


def min_ade_fde(preds, future, k: int) -> tuple[float, float]:
    """Scene-level minADE_k / minFDE_k: per-agent minima averaged over agents."""
    ade, fde = per_agent_ade_fde(preds, future, k)
    return float(ade.mean()), float(fde.mean())


def constant_velocity(observed: np.ndarray, t_pred: int) -> np.ndarray:
    """``1 x N x T_pred x 2`` extrapolation of the last observed displacement."""
    last = observed[:, -1]
    vel = observed[:, -1] - observed[:, -2]
    steps = np.arange(1, t_pred + 1, dtype=np.float64)
    return (last[:, None, :] + steps[None, :, None] * vel[:, None, :])[None]


METRIC_COLUMNS = ["dataset", "scene_count", "min_ade_k", "min_fde_k", "k"]


def metrics_to_csv(rows) -> str:
    """``rows`` are dicts keyed by :data:`METRIC_COLUMNS`."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["dataset"], int(r["scene_count"]), repr(float(r["min_ade_k"])), repr(float(r["min_fde_k"])), int(r["k"])])
    return buf.getvalue()
