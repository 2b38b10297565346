"""Scenes: loading ETH/UCY text files, feature construction, synthetic generation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, EmptyDataset, ParseError
from .rng import RngStream

SCENARIOS = ("constant-velocity", "crossing", "group-follow")


@dataclass
class Scene:
    observed: np.ndarray  # N x T_obs x 2
    future: np.ndarray  # N x T_pred x 2
    agent_ids: list = field(default_factory=list)
    frame_origin: float = 0.0

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.observed.ndim != 3 or self.observed.shape[-1] != 2:
            raise ContractError(f"observed must be N x T_obs x 2, got {self.observed.shape}")
        if self.future.ndim != 3 or self.future.shape[-1] != 2:
            raise ContractError(f"future must be N x T_pred x 2, got {self.future.shape}")
        if self.observed.shape[0] != self.future.shape[0]:
            raise ContractError("observed and future disagree on agent count")
        if self.n_agents < 1:
            raise ContractError("a scene needs at least one agent")
        if self.t_obs < 2:
            raise ContractError("a scene needs at least two observed frames")
        if not self.agent_ids:
            self.agent_ids = list(range(self.n_agents))
        if len(self.agent_ids) != self.n_agents:
            raise ContractError("agent_ids length differs from agent count")

    @property
    def n_agents(self) -> int:
        return self.observed.shape[0]

    @property
    def t_obs(self) -> int:
        return self.observed.shape[1]

    @property
    def t_pred(self) -> int:
        return self.future.shape[1]

    @property
    def last_observed(self) -> np.ndarray:
        return self.observed[:, -1, :]

    def translated(self, offset) -> "Scene":
        offset = np.asarray(offset, dtype=np.float64)
        return Scene(self.observed + offset, self.future + offset, list(self.agent_ids), self.frame_origin)

    def permuted(self, order) -> "Scene":
        order = np.asarray(order)
        return Scene(self.observed[order], self.future[order], [self.agent_ids[i] for i in order], self.frame_origin)

    def to_dict(self) -> dict:
        return {
            "frame_origin": self.frame_origin,
            "agents": [
                {"id": aid, "observed": obs.tolist(), "future": fut.tolist()}
                for aid, obs, fut in zip(self.agent_ids, self.observed, self.future)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        agents = d["agents"]
        if not agents:
            raise ContractError("scene has no agents")
        return cls(
            observed=[a["observed"] for a in agents],
            future=[a["future"] for a in agents],
            agent_ids=[a["id"] for a in agents],
            frame_origin=d.get("frame_origin", 0.0),
        )


# ---------------------------------------------------------------------------
# ETH/UCY text format: ``frame_id agent_id x y`` per line


def _parse_lines(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
            try:
                frame, agent, x, y = (float(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-numeric field in {text!r}", lineno) from None
            if not all(math.isfinite(v) for v in (frame, agent, x, y)):
                raise ParseError(f"non-finite value in {text!r}", lineno)
            rows.append((lineno, frame, agent, x, y))
    return rows


def _agent_key(a: float):
    return int(a) if float(a).is_integer() else a


def load_trajectory_file(path, t_obs=8, t_pred=12, stride=1) -> list[Scene]:
    """Slice a trajectory file into sliding-window scenes.

    Frames are placed on a grid whose spacing is the smallest gap between
    distinct frame ids, so a frame missing from the file is a gap for every
    agent. Only agents observed at every frame of a window are kept.
    """
    if t_obs < 2 or t_pred < 1 or stride < 1:
        raise ContractError("need t_obs >= 2, t_pred >= 1 and stride >= 1")
    rows = _parse_lines(path)
    if not rows:
        raise EmptyDataset(f"{path}: no observations")

    frames = np.unique([r[1] for r in rows])
    interval = float(np.diff(frames).min()) if len(frames) > 1 else 1.0
    f0 = frames[0]
    n_frames = int(round((frames[-1] - f0) / interval)) + 1

    tracks: dict = {}
    for lineno, frame, agent, x, y in rows:
        idx = int(round((frame - f0) / interval))
        track = tracks.setdefault(_agent_key(agent), {})
        if idx in track:
            raise ParseError(f"duplicate observation of agent {_agent_key(agent)} at frame {frame}", lineno)
        track[idx] = (x, y)

    window = t_obs + t_pred
    scenes = []
    for start in range(0, n_frames - window + 1, stride):
        span = range(start, start + window)
        ids = sorted(a for a, tr in tracks.items() if all(i in tr for i in span))
        if not ids:
            continue
        xy = np.array([[tracks[a][i] for i in span] for a in ids], dtype=np.float64)
        scenes.append(
            Scene(
                observed=xy[:, :t_obs],
                future=xy[:, t_obs:],
                agent_ids=ids,
                frame_origin=float(f0 + (start + t_obs - 1) * interval),
            )
        )
    if not scenes:
        raise EmptyDataset(f"{path}: no window of {window} frames with a complete agent")
    return scenes


def write_trajectory_file(path, tracks) -> None:
    """Write ``{agent_id: [(frame, x, y), ...]}`` in the text format."""
    lines = []
    for aid, track in tracks.items():
        for frame, x, y in track:
            lines.append((frame, aid, x, y))
    lines.sort(key=lambda r: (r[0], str(r[1])))
    with open(path, "w", encoding="utf-8") as fh:
        for frame, aid, x, y in lines:
            fh.write(f"{frame!r} {aid!r} {x!r} {y!r}\n")


def save_scenes(path, scenes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([s.to_dict() for s in scenes], fh)


def load_scenes(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if isinstance(payload, dict):
        payload = payload.get("scenes", [payload])
    scenes = [Scene.from_dict(d) for d in payload]
    if not scenes:
        raise EmptyDataset(f"{path}: no scenes")
    return scenes


def load_data(path, t_obs=8, t_pred=12, stride=1) -> list[Scene]:
    """Scenes from a JSON export or a text trajectory file, chosen by suffix."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_scenes(path)
    return load_trajectory_file(path, t_obs, t_pred, stride)


# ---------------------------------------------------------------------------


def build_input_features(scene: Scene) -> np.ndarray:
    """Per-frame ``[x, y, r_x, r_y]`` with ``r`` the first difference, zero at frame 0."""
    pos = scene.observed
    disp = np.zeros_like(pos)
    disp[:, 1:] = pos[:, 1:] - pos[:, :-1]
    return np.concatenate([pos, disp], axis=-1)


@dataclass(frozen=True)
class Transform:
    offset: np.ndarray

    def invert(self, scene: Scene) -> Scene:
        return scene.translated(self.offset)

    def invert_points(self, pts):
        return np.asarray(pts) + self.offset


def normalize_scene(scene: Scene) -> tuple[Scene, Transform]:
    """Shift so the mean last-observed position is the origin."""
    offset = scene.last_observed.mean(axis=0)
    return scene.translated(-offset), Transform(offset)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSpec:
    scenario: str
    n_agents: int = 4
    noise_std: float = 0.0
    seed: int = 0
    n_scenes: int = 1
    t_obs: int = 8
    t_pred: int = 12
    lag: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_agents < 1 or self.n_scenes < 0 or self.t_obs < 2 or self.t_pred < 1 or self.lag < 0:
            raise ContractError("invalid synthetic spec")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


def _heading(theta):
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _constant_velocity(spec, rng, T):
    n = spec.n_agents
    start = rng.uniform(-4.0, 4.0, (n, 2))
    speed = rng.uniform(0.2, 0.6, n)
    theta = rng.uniform(-math.pi, math.pi, n)
    vel = _heading(theta) * speed[:, None]
    t = np.arange(T, dtype=np.float64)
    return start[:, None, :] + t[None, :, None] * vel[:, None, :]


def _crossing(spec, rng, T):
    # two groups heading for a common region on roughly perpendicular courses,
    # every agent turning at its own constant rate
    n = spec.n_agents
    group = np.arange(n) % 2
    base = rng.uniform(-math.pi, math.pi)
    theta0 = base + group * (math.pi / 2) + rng.uniform(-0.2, 0.2, n)
    speed = rng.uniform(0.3, 0.6, n)
    turn = rng.uniform(0.04, 0.12, n) * np.where(rng.uniform(0, 1, n) < 0.5, -1.0, 1.0)
    meet = rng.uniform(-1.0, 1.0, 2)
    lateral = _heading(theta0 + math.pi / 2) * rng.uniform(-1.5, 1.5, n)[:, None]
    start = meet - _heading(theta0) * speed[:, None] * spec.t_obs + lateral
    theta = theta0[:, None] + turn[:, None] * np.arange(T - 1)[None, :]
    steps = _heading(theta) * speed[:, None, None]
    pos = np.empty((n, T, 2))
    pos[:, 0] = start
    pos[:, 1:] = start[:, None, :] + np.cumsum(steps, axis=1)
    return pos


def _group_follow(spec, rng, T):
    # followers repeat the leader's displacement ``lag`` frames later
    n = spec.n_agents
    speed = rng.uniform(0.3, 0.6)
    theta0 = rng.uniform(-math.pi, math.pi)
    dtheta = rng.normal(T - 1, std=0.08)
    theta = theta0 + np.cumsum(dtheta)
    lead = _heading(theta) * speed  # (T-1) x 2 displacement sequence
    first = _heading(np.array(theta0)) * speed
    disp = np.empty((n, T - 1, 2))
    disp[0] = lead
    for a in range(1, n):
        for t in range(T - 1):
            disp[a, t] = lead[t - spec.lag] if t >= spec.lag else first
    start = rng.uniform(-4.0, 4.0, 2) + rng.normal((n, 2), std=0.8)
    pos = np.empty((n, T, 2))
    pos[:, 0] = start
    pos[:, 1:] = start[:, None, :] + np.cumsum(disp, axis=1)
    return pos


_GENERATORS = {
    "constant-velocity": _constant_velocity,
    "crossing": _crossing,
    "group-follow": _group_follow,
}


def generate_synthetic(spec: SyntheticSpec, rng: RngStream | None = None) -> list[Scene]:
    """Scenes following ``spec.scenario`` dynamics; the future continues the same dynamics.

    Gaussian noise of ``noise_std`` is added independently to every position.
    """
    rng = rng if rng is not None else RngStream(spec.seed, stream=2)
    T = spec.t_obs + spec.t_pred
    scenes = []
    for _ in range(spec.n_scenes):
        pos = _GENERATORS[spec.scenario](spec, rng, T)
        if spec.noise_std > 0:
            pos = pos + rng.normal(pos.shape, std=spec.noise_std)
        scenes.append(Scene(pos[:, : spec.t_obs], pos[:, spec.t_obs :], list(range(spec.n_agents)), float(spec.t_obs - 1)))
    return scenes
