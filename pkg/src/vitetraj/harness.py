"""Training loop, checkpoints, evaluation and the analysis commands behind the CLI."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SCENARIOS, Scene, SyntheticSpec, build_input_features, generate_synthetic, load_data, normalize_scene
from .errors import ConfigError, EmptyDataset, NumericalError
from .graph import InteractionGraph, knn_graph, report_to_csv, resistance_report
from .model import ModelConfig, ViTE
from .optim import AdamState, optimizer_step
from .predictor import constant_velocity, per_agent_ade_fde
from .rng import STREAM_DATA, STREAM_INIT, STREAM_TRAIN, RngStream
from .router import gate_distributions, gates_to_csv
from .tensor import GradientTape, backward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["epoch", "pred_loss", "imp_loss", "total_loss", "val_min_ade", "val_min_fde"]


@dataclass
class RunConfig:
    t_obs: int = 8
    t_pred: int = 12
    stride: int = 1
    k_neighbors: int = 4
    hidden_dim: int = 64
    virtual_count: int = 4
    heads: int = 20
    top_p: float = 0.7
    lam: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    perturb_std: float = 0.1
    noise_enabled: bool = True
    aggregator: str = "attention"
    knn_source: str = "embedding"
    train_data: list = field(default_factory=list)
    val_data: list = field(default_factory=list)
    synthetic_scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    synthetic_train_scenes: int = 200
    synthetic_val_scenes: int = 60
    synthetic_agents: int = 5
    synthetic_noise_std: float = 0.02

    # "lambda" is a keyword, so the attribute is ``lam`` and JSON uses "lambda"
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["t_pred", "stride", "hidden_dim", "virtual_count", "heads", "learning_rate", "batch_size"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t_obs < 2:
            raise ConfigError("t_obs must be at least 2")
        if self.k_neighbors < 0 or self.epochs < 0 or self.lam < 0 or self.seed < 0 or self.perturb_std < 0:
            raise ConfigError("k_neighbors, epochs, lambda, seed and perturb_std must be non-negative")
        if not 0.0 < self.top_p < 1.0:
            raise ConfigError(f"top_p must lie in (0, 1), got {self.top_p}")
        if self.virtual_count > self.hidden_dim:
            raise ConfigError("virtual_count cannot exceed hidden_dim (orthogonal hub initialization)")
        if self.aggregator not in ("attention", "mean"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.knn_source not in ("embedding", "features"):
            raise ConfigError(f"unknown knn_source {self.knn_source!r}")
        bad = [s for s in self.synthetic_scenarios if s not in SCENARIOS]
        if bad or not self.synthetic_scenarios:
            raise ConfigError(f"synthetic_scenarios must be a non-empty subset of {SCENARIOS}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            attr = cls._ALIASES.get(key, key)
            if attr not in names or key == "lam":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            t_obs=self.t_obs,
            t_pred=self.t_pred,
            hidden_dim=self.hidden_dim,
            virtual_count=self.virtual_count,
            heads=self.heads,
            k_neighbors=self.k_neighbors,
            top_p=self.top_p,
            perturb_std=self.perturb_std,
            noise_enabled=self.noise_enabled,
            aggregator=self.aggregator,
            knn_source=self.knn_source,
        )


# ---------------------------------------------------------------------------
# data sources


def synthetic_scenes(config: RunConfig, n_scenes: int, stream: int) -> list[Scene]:
    """Mixed-scenario scenes, scenario chosen round-robin, 2..synthetic_agents agents each."""
    rng = RngStream(config.seed, stream=stream)
    scenes = []
    for i in range(n_scenes):
        scenario = config.synthetic_scenarios[i % len(config.synthetic_scenarios)]
        n_agents = int(rng.integers(2, max(config.synthetic_agents, 2) + 1))
        spec = SyntheticSpec(scenario, n_agents, config.synthetic_noise_std, config.seed, 1, config.t_obs, config.t_pred)
        scenes.extend(generate_synthetic(spec, rng))
    return scenes


def load_many(paths, config: RunConfig) -> list[Scene]:
    scenes = []
    for p in paths:
        scenes.extend(load_data(p, config.t_obs, config.t_pred, config.stride))
    return scenes


def resolve_data(config: RunConfig) -> tuple[list[Scene], list[Scene]]:
    if config.train_data:
        train = load_many(config.train_data, config)
        val = load_many(config.val_data, config) if config.val_data else []
    else:
        train = synthetic_scenes(config, config.synthetic_train_scenes, STREAM_DATA)
        val = synthetic_scenes(config, config.synthetic_val_scenes, STREAM_DATA + 1)
    return train, val


def check_windows(scenes, config: RunConfig) -> None:
    if not scenes:
        raise EmptyDataset("no scenes to evaluate")
    for s in scenes:
        if s.t_obs != config.t_obs or s.t_pred != config.t_pred:
            raise ConfigError(
                f"scene window ({s.t_obs}, {s.t_pred}) does not match config ({config.t_obs}, {config.t_pred})"
            )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(predict, scenes, k) -> tuple[float, float, int]:
    """Agent-weighted minADE_k / minFDE_k over ``scenes`` using ``predict(scene)``."""
    ades, fdes = [], []
    for s in scenes:
        ade, fde = per_agent_ade_fde(predict(s), s.future, k)
        ades.append(ade)
        fdes.append(fde)
    ades = np.concatenate(ades)
    fdes = np.concatenate(fdes)
    return float(ades.mean()), float(fdes.mean()), int(ades.size)


def baseline_predict(scene: Scene) -> np.ndarray:
    return constant_velocity(scene.observed, scene.t_pred)


# ---------------------------------------------------------------------------
# training


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _decode(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


class Trainer:
    """Minibatch Adam on ``pred_loss + lambda * imp_loss``, one scene per forward pass."""

    def __init__(self, config: RunConfig, train_scenes, val_scenes=()):
        if not train_scenes and config.epochs > 0:
            raise EmptyDataset("no training scenes")
        if train_scenes:
            check_windows(train_scenes, config)
        if val_scenes:
            check_windows(val_scenes, config)
        self.config = config
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes)
        self.model = ViTE(config.model_config(), RngStream(config.seed, stream=STREAM_INIT))
        self.params = self.model.parameters()
        self.opt_state = AdamState()
        self.rng = RngStream(config.seed, stream=STREAM_TRAIN)
        self.epoch = 0
        self.history: list[dict] = []

    def step_batch(self, batch) -> list[dict]:
        """Accumulate gradients over ``batch`` in order, average, take one Adam step."""
        acc = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        values = []
        for scene in batch:
            with GradientTape():
                lb, _ = self.model.loss(scene, self.config.lam, self.rng, train=True)
            v = lb.values()
            if not all(math.isfinite(x) for x in v.values()):
                err = NumericalError(f"non-finite loss {v} at epoch {self.epoch + 1}")
                err.batch = batch
                raise err
            grads = backward(lb.total, self.params)
            for name, g in grads.items():
                acc[name] += g
            values.append(v)
        scale = 1.0 / len(batch)
        for g in acc.values():
            g *= scale
        optimizer_step(self.params, acc, self.config.learning_rate, self.opt_state)
        return values

    def train_epoch(self) -> dict:
        order = self.rng.permutation(len(self.train_scenes))
        bs = self.config.batch_size
        values = []
        for start in range(0, len(order), bs):
            batch = [self.train_scenes[i] for i in order[start : start + bs]]
            values.extend(self.step_batch(batch))
        self.epoch += 1
        row = {"epoch": self.epoch}
        for key, col in (("pred_loss", "pred_loss"), ("imp_loss", "imp_loss"), ("total", "total_loss")):
            row[col] = float(np.mean([v[key] for v in values]))
        if self.val_scenes:
            ade, fde, _ = evaluate(self.model.predict, self.val_scenes, self.config.heads)
        else:
            ade = fde = float("nan")
        row["val_min_ade"] = ade
        row["val_min_fde"] = fde
        self.history.append(row)
        log.info("epoch %d: %s", self.epoch, row)
        return row

    def fit(self, on_epoch=None) -> list[dict]:
        while self.epoch < self.config.epochs:
            self.train_epoch()
            if on_epoch is not None:
                on_epoch(self)
        return self.history

    # checkpoints -----------------------------------------------------------
    def checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": {k: _encode(p.data) for k, p in sorted(self.params.items())},
            "optimizer": {
                "step": self.opt_state.step,
                "m": {k: _encode(v) for k, v in sorted(self.opt_state.m.items())},
                "v": {k: _encode(v) for k, v in sorted(self.opt_state.v.items())},
            },
            "epoch": self.epoch,
            "rng_counter": self.rng.counter,
            "history": self.history,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint(), fh)

    @classmethod
    def from_checkpoint(cls, ckpt: dict, train_scenes=None, val_scenes=None, config: RunConfig | None = None):
        config = config or RunConfig.from_dict(ckpt["config"])
        if train_scenes is None:
            train_scenes, val_scenes = ([], []) if config.epochs <= ckpt["epoch"] else resolve_data(config)
        t = cls(config, train_scenes, val_scenes or [])
        t.model.load_state_dict({k: _decode(v) for k, v in ckpt["params"].items()})
        opt = ckpt["optimizer"]
        t.opt_state = AdamState(
            step=int(opt["step"]),
            m={k: _decode(v) for k, v in opt["m"].items()},
            v={k: _decode(v) for k, v in opt["v"].items()},
        )
        t.epoch = int(ckpt["epoch"])
        t.rng.counter = int(ckpt["rng_counter"])
        t.history = [dict(r) for r in ckpt.get("history", [])]
        return t


def load_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    version = ckpt.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {version!r}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> tuple[ViTE, RunConfig]:
    config = RunConfig.from_dict(ckpt["config"])
    model = ViTE(config.model_config(), RngStream(config.seed, stream=STREAM_INIT))
    try:
        model.load_state_dict({k: _decode(v) for k, v in ckpt["params"].items()})
    except (KeyError, ValueError) as e:
        raise ConfigError(f"checkpoint does not match its config: {e}") from None
    return model, config


def history_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in history:
        w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def _dump_batch(out_dir: Path, err: NumericalError) -> Path:
    path = out_dir / "nan_batch.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"error": str(err), "scenes": [s.to_dict() for s in getattr(err, "batch", [])]}, fh)
    return path


def train(config: RunConfig, out_dir, resume=None, data=None) -> Trainer:
    """Run training, writing ``checkpoint.json`` and ``metrics.csv`` after every epoch.

    ``data`` optionally supplies ``(train_scenes, val_scenes)`` directly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes, val_scenes = data if data is not None else resolve_data(config)
    if resume is not None:
        trainer = Trainer.from_checkpoint(load_checkpoint(resume), train_scenes, val_scenes, config)
    else:
        trainer = Trainer(config, train_scenes, val_scenes)

    def persist(t: Trainer):
        t.save(out_dir / "checkpoint.json")
        (out_dir / "metrics.csv").write_text(history_to_csv(t.history), encoding="utf-8")

    persist(trainer)
    try:
        trainer.fit(on_epoch=persist)
    except NumericalError as err:
        err.dump_path = _dump_batch(out_dir, err)
        raise
    return trainer


# ---------------------------------------------------------------------------
# commands returning table rows / CSV text


def eval_rows(model: ViTE, config: RunConfig, scenes, k: int, dataset: str) -> list[dict]:
    check_windows(scenes, config)
    if not 1 <= k <= config.heads:
        raise ConfigError(f"k={k} outside 1..{config.heads}")
    ade, fde, _ = evaluate(model.predict, scenes, k)
    return [{"dataset": dataset, "scene_count": len(scenes), "min_ade_k": ade, "min_fde_k": fde, "k": k}]


def cmd_eval(checkpoint_path, data_path, k: int) -> list[dict]:
    model, config = model_from_checkpoint(load_checkpoint(checkpoint_path))
    scenes = load_data(data_path, config.t_obs, config.t_pred, config.stride)
    return eval_rows(model, config, scenes, k, Path(data_path).stem)


def cmd_baseline(data_path, t_obs=8, t_pred=12, stride=1) -> list[dict]:
    scenes = load_data(data_path, t_obs, t_pred, stride)
    if not scenes:
        raise EmptyDataset("no scenes to evaluate")
    ade, fde, _ = evaluate(baseline_predict, scenes, 1)
    return [{"dataset": Path(data_path).stem, "scene_count": len(scenes), "min_ade_k": ade, "min_fde_k": fde, "k": 1}]


def demo_chain_report(n_virtual: int = 1) -> str:
    """Five-node chain before/after adding ``n_virtual`` hubs."""
    return report_to_csv(resistance_report(InteractionGraph.chain(5), n_virtual), {"scene_id": "demo-chain"})


def cmd_analyze_graph(scenes, model: ViTE, n_virtual: int) -> str:
    """Per-scene kNN graph from the model's initial node embeddings, resistance before/after hubs."""
    header = None
    chunks = []
    for sid, scene in enumerate(scenes):
        feats = build_input_features(normalize_scene(scene)[0])
        base = model.embed(feats).data
        src = base if model.config.knn_source == "embedding" else feats.reshape(len(feats), -1)
        graph = knn_graph(src, model.config.k_neighbors)
        text = report_to_csv(resistance_report(graph, n_virtual, allow_disconnected=True), {"scene_id": sid})
        head, _, body = text.partition("\n")
        header = head
        chunks.append(body)
    if header is None:
        header = report_to_csv([], {"scene_id": 0}).strip()
    return header + "\n" + "".join(chunks)


def gate_rows(model: ViTE, scenes):
    rows = []
    for sid, scene in enumerate(scenes):
        out = model.forward(scene, train=False)
        for aid, gd in zip(scene.agent_ids, gate_distributions(out.probs.data, model.router.top_p)):
            rows.append((sid, aid, gd))
    return rows


def cmd_export_gates(checkpoint_path, data_path) -> str:
    model, config = model_from_checkpoint(load_checkpoint(checkpoint_path))
    scenes = load_data(data_path, config.t_obs, config.t_pred, config.stride)
    check_windows(scenes, config)
    return gates_to_csv(gate_rows(model, scenes))


def leave_one_out(paths, config: RunConfig, out_dir, k=None) -> list[dict]:
    """Train on all files but one, evaluate on the held-out file, for every file."""
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise ConfigError("leave-one-out needs at least two dataset files")
    k = k or config.heads
    out_dir = Path(out_dir)
    loaded = {p: load_data(p, config.t_obs, config.t_pred, config.stride) for p in paths}
    rows = []
    for held in paths:
        train_scenes = [s for p in paths if p != held for s in loaded[p]]
        trainer = train(config, out_dir / held.stem, data=(train_scenes, []))
        rows.extend(eval_rows(trainer.model, config, loaded[held], k, held.stem))
    return rows
