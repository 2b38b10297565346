"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticSpec, generate_synthetic, load_data, save_scenes
from .errors import ConfigError, ContractError, EmptyDataset, NumericalError, ParseError
from .harness import (
    RunConfig,
    cmd_analyze_graph,
    cmd_baseline,
    cmd_eval,
    cmd_export_gates,
    demo_chain_report,
    leave_one_out,
    load_checkpoint,
    model_from_checkpoint,
    train,
)
from .model import ViTE
from .predictor import metrics_to_csv
from .rng import STREAM_INIT, RngStream

EXIT_INPUT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("vitetraj")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _train(args) -> None:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = RunConfig.from_dict({**config.to_dict(), "seed": args.seed})
    trainer = train(config, args.out, resume=args.resume)
    last = trainer.history[-1] if trainer.history else None
    print(f"wrote {Path(args.out) / 'checkpoint.json'} after {trainer.epoch} epoch(s)")
    if last:
        print(f"final total loss {last['total_loss']:.6f}")


def _eval(args) -> None:
    _emit(metrics_to_csv(cmd_eval(args.checkpoint, args.data, args.k)), args.out)


def _baseline(args) -> None:
    _emit(metrics_to_csv(cmd_baseline(args.data, args.t_obs, args.t_pred, args.stride)), args.out)


def _analyze_graph(args) -> None:
    if args.demo_chain:
        _emit(demo_chain_report(args.virtual or 1), args.out)
        return
    if not args.data:
        raise ConfigError("analyze-graph needs --data unless --demo-chain is given")
    if args.checkpoint:
        model, config = model_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        model = ViTE(config.model_config(), RngStream(config.seed, stream=STREAM_INIT))
    scenes = load_data(args.data, config.t_obs, config.t_pred, config.stride)
    _emit(cmd_analyze_graph(scenes, model, args.virtual or config.virtual_count), args.out)


def _export_gates(args) -> None:
    _emit(cmd_export_gates(args.checkpoint, args.data), args.out)


def _generate(args) -> None:
    spec = SyntheticSpec(args.scenario, args.agents, args.noise, args.seed, args.n_scenes, args.t_obs, args.t_pred)
    scenes = generate_synthetic(spec)
    save_scenes(args.out, scenes)
    print(f"wrote {len(scenes)} scene(s) to {args.out}")


def _leave_one_out(args) -> None:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    paths = sorted(p for p in Path(args.data_dir).iterdir() if p.is_file())
    rows = leave_one_out(paths, config, args.work_dir, args.k)
    _emit(metrics_to_csv(rows), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitetraj", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model, writing checkpoint.json and metrics.csv")
    s.add_argument("--config", help="JSON config (flat object of RunConfig fields)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="run")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="minADE/minFDE of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(func=_eval)

    s = sub.add_parser("baseline", help="constant-velocity extrapolation metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--t-obs", type=int, default=8)
    s.add_argument("--t-pred", type=int, default=12)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=_baseline)

    s = sub.add_parser("analyze-graph", help="effective resistance before/after virtual hubs")
    s.add_argument("--demo-chain", action="store_true", help="five-node chain with one hub")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--virtual", type=int, help="number of hubs (default: config virtual_count)")
    s.add_argument("--out")
    s.set_defaults(func=_analyze_graph)

    s = sub.add_parser("export-gates", help="per-agent gate weights and active experts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=_export_gates)

    s = sub.add_parser("generate", help="write synthetic scenes as JSON")
    s.add_argument("--scenario", required=True, choices=["constant-velocity", "crossing", "group-follow"])
    s.add_argument("--n-scenes", type=int, default=10)
    s.add_argument("--agents", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--t-obs", type=int, default=8)
    s.add_argument("--t-pred", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_generate)

    s = sub.add_parser("leave-one-out", help="for each file, train on the others and evaluate on it")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--work-dir", default="loo")
    s.add_argument("--k", type=int)
    s.add_argument("--out")
    s.set_defaults(func=_leave_one_out)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericalError as e:
        where = getattr(e, "dump_path", None)
        print(f"error: {e}" + (f" (batch dumped to {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, EmptyDataset, ContractError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
