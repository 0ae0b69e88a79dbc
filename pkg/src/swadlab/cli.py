"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import nn, theory
from .bench import harness
from .bench.datasets import make_splits
from .config import ConfigError, RunConfig, dump_config, load_config
from .flatness import flatness_profile, loss_plane
from .params import DimensionError, load_params, make_rng, save_params

log = logging.getLogger("swadlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return vals[0], vals[1]


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=_u64, help="override the configured seed(s)")
    common.add_argument("--jobs", type=int, default=1, help="parallel suite cells (default 1)")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="swadlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="train and compare methods over all cells")
    sub.add_parser("dump-config", parents=[common], help="print the fully resolved config")

    f = sub.add_parser("flatness", parents=[common], help="local flatness profile of saved weights")
    f.add_argument("--weights", nargs="+", required=True)
    f.add_argument("--target", type=int)
    f.add_argument("--gammas", type=_floats)
    f.add_argument("--n-samples", type=int)

    pl = sub.add_parser("plane", parents=[common], help="loss grid on the plane of three weights")
    pl.add_argument("--weights", nargs=3, required=True)
    pl.add_argument("--target", type=int)
    pl.add_argument("--alpha-range", type=_pair)
    pl.add_argument("--beta-range", type=_pair)
    pl.add_argument("--resolution", type=int, default=21)

    b = sub.add_parser("bound", parents=[common], help="bound-term report for saved weights")
    b.add_argument("--weights", required=True)
    b.add_argument("--target", type=int)
    b.add_argument("--gamma", type=float)
    b.add_argument("--bins", type=int)
    b.add_argument("--lemma-trials", type=int, default=1000)
    return p


# ---------------------------------------------------------------------------

def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else cfg.model_copy(update={"seeds": [seed]})


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n")


def cmd_run(args, cfg: RunConfig) -> int:
    cfg = _with_seed(cfg, args.seed)
    out = _out_dir(args, cfg)
    dataset = cfg.dataset.build()
    methods = cfg.method_configs()
    outputs = harness.run_suite(
        dataset, methods, cfg.seeds, cfg.trainer_config(), tuple(cfg.split.fractions),
        cfg.split.seed, cfg.split.targets, cfg.analysis_config(), jobs=args.jobs,
        snapshot_iterations=cfg.output.snapshot_iterations)
    results = harness.flat_results(outputs, [m.name for m in methods])
    (out / "results.csv").write_text(harness.results_csv(results, cfg.output.timing_in_csv))
    (out / "aggregate.csv").write_text(harness.aggregate_csv(harness.aggregate(results)))

    if cfg.output.save_weights or cfg.output.snapshot_iterations:
        wdir = out / "weights"
        wdir.mkdir(exist_ok=True)
        for o in outputs:
            tag = f"t{o.target_domain}__s{o.seed}"
            if cfg.output.save_weights:
                for name, theta in o.weights.items():
                    save_params(wdir / f"{name}__{tag}.bin", theta)
            for name, theta in o.snapshots.items():
                save_params(wdir / f"snapshot__{name}__{tag}.bin", theta)

    summary = {
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config": cfg.model_dump(mode="json"),
        "dataset": dataset.metadata,
        "runs": [
            {"method": r.method, "target_domain": r.target_domain, "seed": r.seed,
             "ood_accuracy": r.ood_accuracy, "id_test_accuracy": r.id_test_accuracy,
             "interval": r.interval, "flatness": r.flatness, "theorem1": r.theorem1,
             "wall_clock_s": r.wall_clock_s}
            for r in results
        ],
        "cells": [
            {"target_domain": o.target_domain, "seed": o.seed, "trajectories": o.trajectories,
             "robust_risk_gap": o.gap}
            for o in outputs
        ],
        "theorem1": [
            {"method": r.method, "target_domain": r.target_domain, "seed": r.seed, **r.theorem1}
            for r in results if r.theorem1
        ],
    }
    _write_json(out / "summary.json", summary)
    log.info("wrote %s", out)
    return EXIT_OK


def _load_weights(paths) -> list[np.ndarray]:
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise UsageError(f"weights file not found: {', '.join(map(str, missing))}")
    return [load_params(p) for p in paths]


def _analysis_data(cfg: RunConfig, target: int | None):
    dataset = cfg.dataset.build()
    if target is None:
        target = (cfg.split.targets or dataset.domain_ids)[0]
    if target not in dataset.domain_ids:
        raise UsageError(f"target domain {target} not in dataset domains {dataset.domain_ids}")
    spec = harness.model_spec(dataset, cfg.trainer_config())
    return spec, make_splits(dataset, cfg.split_plan(target)), target


def _check_dim(spec: nn.MlpSpec, theta: np.ndarray, path) -> None:
    if theta.size != spec.dim:
        raise DimensionError(spec.dim, theta.size, f"weights {path}")


def cmd_flatness(args, cfg: RunConfig) -> int:
    thetas = _load_weights(args.weights)
    spec, splits, target = _analysis_data(cfg, args.target)
    out = _out_dir(args, cfg)
    gammas = args.gammas if args.gammas is not None else cfg.analysis.flatness.gammas
    n = args.n_samples or cfg.analysis.flatness.n_samples
    seed = cfg.seeds[0] if args.seed is None else args.seed
    train = splits.pooled_train()
    loss = lambda th: nn.forward_loss(spec, th, train)[0]
    for path, theta in zip(args.weights, thetas):
        _check_dim(spec, theta, path)
        prof = flatness_profile(loss, theta, gammas, n, make_rng(seed, "flatness", target))
        dest = out / f"flatness_{Path(path).stem}.csv"
        dest.write_text(prof.to_csv())
        log.info("wrote %s", dest)
    return EXIT_OK


def cmd_plane(args, cfg: RunConfig) -> int:
    thetas = _load_weights(args.weights)
    spec, splits, target = _analysis_data(cfg, args.target)
    for path, theta in zip(args.weights, thetas):
        _check_dim(spec, theta, path)
    out = _out_dir(args, cfg)
    train, test = splits.pooled_train(), splits.target
    fns = {"train": lambda th: nn.forward_loss(spec, th, train)[0],
           "test": lambda th: nn.forward_loss(spec, th, test)[0]}
    grid = loss_plane(fns, *thetas, alpha_range=args.alpha_range, beta_range=args.beta_range,
                      resolution=args.resolution)
    (out / "plane.csv").write_text(grid.to_csv())
    side = grid.sidecar()
    side["weights"] = {f"theta{i + 1}": str(p) for i, p in enumerate(args.weights)}
    side["target_domain"] = target
    _write_json(out / "plane_basis.json", side)
    return EXIT_OK


def cmd_bound(args, cfg: RunConfig) -> int:
    (theta,) = _load_weights([args.weights])
    spec, splits, target = _analysis_data(cfg, args.target)
    _check_dim(spec, theta, args.weights)
    out = _out_dir(args, cfg)
    t1 = cfg.analysis.theorem1
    gamma = t1.gamma if args.gamma is None else args.gamma
    bins = args.bins or t1.bins_per_dim
    seed = cfg.seeds[0] if args.seed is None else args.seed
    sources = [splits.train[k] for k in splits.source_ids]
    rep = theory.theorem1_report(spec, theta, sources, splits.target, gamma, bins,
                                 make_rng(seed, "bound", target), t1.probes, t1.ascent_steps)
    lemma = theory.lemma1_trials(args.lemma_trials, make_rng(seed, "lemma1"))
    _write_json(out / "bound.json", {"target_domain": target, "weights": str(args.weights),
                                      "theorem1": rep.to_dict(), "lemma1": lemma})
    return EXIT_OK


COMMANDS = {"run": cmd_run, "flatness": cmd_flatness, "plane": cmd_plane, "bound": cmd_bound}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
        if args.command == "dump-config":
            sys.stdout.write(dump_config(_with_seed(cfg, args.seed)))
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
