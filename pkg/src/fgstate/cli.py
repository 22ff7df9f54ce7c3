"""Command-line entry point: ``fgstate {simulate,estimate,evaluate,sweep}``.

Every configuration key is also a flag named ``--section.key``; flags win
over the ``--config`` file, which wins over the setup preset and defaults.
Exit codes: 0 ok, 2 configuration or input error, 3 degenerate estimate.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fgstate.config import SCHEMA, ConfigError, RunConfig, load_config
from fgstate.evaluation import (
    DegenerateEstimate,
    EvaluationError,
    RunOutput,
    prepare_dataset,
    replay,
    run_pipeline,
    run_sweep,
    runtime_stats,
    simulation_setup,
    write_trajectory_csv,
)
from fgstate.sensor_log import LogFormatError
from fgstate.simulation import SimulationError, simulate_to_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3

log = logging.getLogger("fgstate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgstate", description="Sliding-window factor-graph state estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "synthesize a sensor log (lidar scans go to sidecar files)",
        "estimate": "run the estimators on a log and write the trajectory CSV",
        "evaluate": "simulate or load, estimate, and score against ground truth",
        "sweep": "evaluate every window length in [sweep] window_lengths",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="INI configuration file")
        if name == "simulate":
            p.add_argument("--output", type=Path, help="log path (default <output_dir>/sim.log)")
        for section, keys in SCHEMA.items():
            group = p.add_argument_group(f"[{section}]")
            for key, (_, default) in keys.items():
                group.add_argument(
                    f"--{section}.{key}", dest=f"cfg:{section}:{key}", metavar="VALUE", help=f"default: {default or 'empty'}"
                )
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            _, section, key = dest.split(":")
            overrides[(section, key)] = value
    return load_config(args.config, overrides)


def cmd_simulate(cfg: RunConfig, args) -> int:
    path = args.output or Path(cfg.get("run", "output_dir")) / "sim.log"
    simulate_to_log(simulation_setup(cfg), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args) -> int:
    if not cfg.get("run", "log"):
        raise ConfigError("estimate needs a log: set [run] log or --run.log")
    data = prepare_dataset(cfg)
    rp = replay(cfg, data)
    out = RunOutput(None, rp.fg.track, rp.ekf, data.truth, runtime_stats(rp.fg, data), bool(rp.fg.estimator.degenerate))
    out_dir = Path(cfg.get("run", "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out_dir / "estimate_trajectory.csv", out)
    (out_dir / "estimate_runtime.json").write_text(json.dumps(out.runtime, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_dir / 'estimate_trajectory.csv'}")
    return EXIT_DEGENERATE if out.degenerate else EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = run_pipeline(cfg)
    print(out.report.table())
    print(f"report written to {Path(cfg.get('run', 'output_dir')) / 'run_report.json'}")
    if out.degenerate:
        print("estimate degenerate: the information matrix lost rank", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    result = run_sweep(cfg)
    summary = result["summary"]
    for w, p in zip(summary["window_lengths"], summary["position_rmse"]):
        print(f"window {w:g} s: horizontal position RMSE {p:.4f} m")
    print(f"relative spread {summary['relative_spread']:.3f}")
    if any(o.degenerate for o in result["runs"].values()):
        return EXIT_DEGENERATE
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except DegenerateEstimate as exc:
        print(f"degenerate estimate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigError, EvaluationError, LogFormatError, SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
