"""Leave-one-domain-out training and method comparison.

For each (target domain, seed) cell the harness trains one trajectory per
distinct optimizer configuration and lets every method that shares that
optimizer observe the same iterates. Differences between, say, ERM and the
SWAD ablations therefore come only from how the weights are averaged.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .. import nn, theory
from ..averaging import SwadConfig, make_variant
from ..flatness import DEFAULT_GAMMAS, DEFAULT_SAMPLES, flatness_profile
from ..optim import AdamState, LrSchedule, adam_step, lr_at, sam_step, sgd_step
from ..params import make_rng
from .datasets import BalancedSampler, DomainDataset, SplitPlan, Splits, make_splits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    schedule: str = "constant"
    min_lr: float = 1e-5
    cycle_length: int = 100
    sam_rho: float | None = None
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.sam_rho is not None and self.sam_rho <= 0:
            raise ValueError("sam_rho must be positive")

    def lr_schedule(self) -> LrSchedule:
        if self.schedule == "cyclic":
            return LrSchedule("cyclic", self.lr, self.cycle_length, self.min_lr)
        return LrSchedule(self.schedule, self.lr)


@dataclass(frozen=True)
class MethodConfig:
    name: str
    variant: str
    optimizer: OptimizerConfig = OptimizerConfig()
    n_s: int = 3
    n_e: int = 6
    r: float = 1.3
    k: int = 5
    start_fraction: float = 0.5
    decay: float = 0.99
    max_span: int = 20


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 2000
    batch_size: int = 32
    eval_freq: int = 20
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"

    @property
    def n_checkpoints(self) -> int:
        return -(-self.iterations // self.eval_freq)

    def is_checkpoint(self, iteration: int) -> bool:
        return iteration % self.eval_freq == 0 or iteration == self.iterations


@dataclass(frozen=True)
class AnalysisConfig:
    flatness_methods: tuple[str, ...] = ()
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    n_samples: int = DEFAULT_SAMPLES
    theorem1_methods: tuple[str, ...] = ()
    bound_gamma: float = 0.5
    bins_per_dim: int = 20
    probes: int = 20
    ascent_steps: int = 10
    gap_pair: tuple[str, str] | None = None


@dataclass
class RunResult:
    method: str
    target_domain: int
    seed: int
    ood_accuracy: float
    id_test_accuracy: float | None
    interval: dict
    flatness: dict | None = None
    theorem1: dict | None = None
    wall_clock_s: float = 0.0

    @property
    def key(self):
        return (self.method, self.target_domain, self.seed)


@dataclass
class CellOutput:
    target_domain: int
    seed: int
    results: list[RunResult]
    trajectories: list[dict] = field(default_factory=list)
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: dict[str, np.ndarray] = field(default_factory=dict)
    gap: dict | None = None


def model_spec(dataset: DomainDataset, trainer: TrainerConfig) -> nn.MlpSpec:
    return nn.MlpSpec((dataset.input_dim, *trainer.hidden, dataset.num_classes), trainer.activation)


def _evaluator(spec, batch):
    return lambda theta: nn.forward_loss(spec, theta, batch)


def train_trajectory(spec: nn.MlpSpec, splits: Splits, opt: OptimizerConfig,
                     trainer: TrainerConfig, strategies: Sequence, seed: int, stream: int = 0,
                     snapshot_iterations: Sequence[int] = ()) -> tuple[list[float], dict[int, np.ndarray]]:
    """Run one optimizer from the seeded init, feeding every iterate to each strategy.

    ``stream`` separates the init and batch-order randomness of different
    cells sharing a seed (the harness passes the target domain id).
    Returns the validation trace and any requested weight snapshots.
    """
    theta = nn.init_params(spec, make_rng(seed, "init", stream))
    sampler = BalancedSampler(splits.train, trainer.batch_size, make_rng(seed, "batches", stream))
    val_batch = splits.pooled_val()
    schedule = opt.lr_schedule()
    adam = AdamState.zeros(spec.dim, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                           weight_decay=opt.weight_decay)
    wanted = set(snapshot_iterations)
    snaps = {0: theta.copy()} if 0 in wanted else {}
    trace = []
    for s in strategies:
        s.observe(0, theta)
    for t in range(trainer.iterations):
        lr = lr_at(schedule, t)
        batch = sampler.next()

        def inner(th, g):
            nonlocal adam
            if opt.kind == "adam":
                adam, th = adam_step(adam, th, g, lr=lr)
                return th
            if opt.weight_decay:
                th = th - lr * opt.weight_decay * th
            return sgd_step(th, g, lr)

        grad_fn = lambda th: nn.backward(spec, th, batch)
        if opt.sam_rho is not None:
            _, theta = sam_step(grad_fn, theta, opt.sam_rho, inner)
        else:
            _, g = grad_fn(theta)
            theta = inner(theta, g)
        it = t + 1
        val_loss = None
        if trainer.is_checkpoint(it):
            val_loss = nn.forward_loss(spec, theta, val_batch)[0]
            trace.append(val_loss)
        for s in strategies:
            s.observe(it, theta, val_loss)
        if it in wanted:
            snaps[it] = theta.copy()
    return trace, snaps


def _strategy_for(method: MethodConfig, trainer: TrainerConfig, val_eval):
    swad = SwadConfig(method.n_s, method.n_e, method.r, trainer.eval_freq)
    return make_variant(method.variant, swad=swad, k=method.k, start_fraction=method.start_fraction,
                        decay=method.decay, max_span=method.max_span, val_eval=val_eval)


def run_cell(dataset: DomainDataset, plan: SplitPlan, methods: Sequence[MethodConfig],
             trainer: TrainerConfig, seed: int, analysis: AnalysisConfig = AnalysisConfig(),
             snapshot_iterations: Sequence[int] = ()) -> CellOutput:
    """All methods for one (target domain, seed) cell, one trajectory per optimizer."""
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError(f"method names must be unique: {names}")
    spec = model_spec(dataset, trainer)
    splits = make_splits(dataset, plan)
    val_batch = splits.pooled_val()
    test_batch = splits.pooled_test()
    train_batch = splits.pooled_train()
    val_eval = _evaluator(spec, val_batch)

    groups: dict[OptimizerConfig, list[MethodConfig]] = {}
    for m in methods:
        groups.setdefault(m.optimizer, []).append(m)

    out = CellOutput(plan.target_domain, seed, [])
    by_name: dict[str, RunResult] = {}
    for gi, (opt, members) in enumerate(groups.items()):
        t0 = time.perf_counter()
        strategies = [_strategy_for(m, trainer, val_eval) for m in members]
        trace, snaps = train_trajectory(spec, splits, opt, trainer, strategies, seed,
                                        plan.target_domain, snapshot_iterations)
        train_time = time.perf_counter() - t0
        out.trajectories.append({"optimizer": asdict(opt), "methods": [m.name for m in members],
                                 "val_losses": trace})
        for it, th in snaps.items():
            out.snapshots[f"{members[0].name}__it{it}"] = th
        for m, strat in zip(members, strategies):
            t1 = time.perf_counter()
            theta = strat.finalize()
            ood = nn.forward_loss(spec, theta, splits.target)[1]
            idt = nn.forward_loss(spec, theta, test_batch)[1] if test_batch is not None else None
            res = RunResult(m.name, plan.target_domain, seed, ood, idt, strat.report(),
                            wall_clock_s=train_time + time.perf_counter() - t1)
            out.weights[m.name] = theta
            by_name[m.name] = res

    train_loss = lambda th: nn.forward_loss(spec, th, train_batch)[0]
    sources = [splits.train[k] for k in splits.source_ids]
    for name in analysis.flatness_methods:
        if name not in by_name:
            continue
        # identical directions for every method: common random numbers across the comparison
        rng = make_rng(seed, "flatness", plan.target_domain)
        prof = flatness_profile(train_loss, out.weights[name], analysis.gammas, analysis.n_samples, rng)
        by_name[name].flatness = {"gammas": prof.gammas.tolist(), "values": prof.values.tolist(),
                                  "stderr": prof.stderr.tolist(), "n_samples": prof.n_samples}
    for name in analysis.theorem1_methods:
        if name not in by_name:
            continue
        rng = make_rng(seed, "bound", plan.target_domain)
        rep = theory.theorem1_report(spec, out.weights[name], sources, splits.target,
                                     analysis.bound_gamma, analysis.bins_per_dim, rng,
                                     analysis.probes, analysis.ascent_steps)
        by_name[name].theorem1 = rep.to_dict()
    if analysis.gap_pair and all(n in by_name for n in analysis.gap_pair):
        hat, erm = analysis.gap_pair
        rng = make_rng(seed, "gap", plan.target_domain)
        value = theory.robust_risk_gap(spec, out.weights[hat], out.weights[erm], sources,
                                       analysis.bound_gamma, rng, analysis.probes,
                                       analysis.ascent_steps)
        out.gap = {"theta_hat": hat, "theta_erm": erm, "gamma": analysis.bound_gamma, "value": value}
    out.results = [by_name[n] for n in names]
    return out


def run_experiment(dataset: DomainDataset, plan: SplitPlan, method: MethodConfig,
                   trainer: TrainerConfig, seed: int,
                   analysis: AnalysisConfig = AnalysisConfig()) -> RunResult:
    return run_cell(dataset, plan, [method], trainer, seed, analysis).results[0]


def _cell_job(args):
    return run_cell(*args)


def run_suite(dataset: DomainDataset, methods: Sequence[MethodConfig], seeds: Sequence[int],
              trainer: TrainerConfig = TrainerConfig(), fractions=(0.8, 0.2), split_seed: int = 0,
              targets: Sequence[int] | None = None, analysis: AnalysisConfig = AnalysisConfig(),
              jobs: int = 1, snapshot_iterations: Sequence[int] = ()) -> list[CellOutput]:
    """Every (target, seed) cell for every method; output sorted by (target, seed)."""
    if not methods or not seeds:
        raise ValueError("run_suite needs at least one method and one seed")
    targets = list(dataset.domain_ids if targets is None else targets)
    cells = [(t, s) for t in sorted(targets) for s in sorted(seeds)]
    jobs_args = [(dataset, SplitPlan(t, tuple(fractions), split_seed), list(methods), trainer, s,
                  analysis, tuple(snapshot_iterations)) for t, s in cells]
    outputs = []
    if jobs <= 1:
        for (t, s), args in zip(cells, jobs_args):
            log.info("cell target=%d seed=%d", t, s)
            try:
                outputs.append(run_cell(*args))
            except Exception as exc:
                raise RuntimeError(f"cell target={t} seed={s} failed: {exc}") from exc
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_cell_job, a) for a in jobs_args]
            for (t, s), fut in zip(cells, futures):
                try:
                    outputs.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"cell target={t} seed={s} failed: {exc}") from exc
    return outputs


def flat_results(outputs: Sequence[CellOutput], methods: Sequence[str] | None = None) -> list[RunResult]:
    results = [r for o in outputs for r in o.results]
    order = {m: i for i, m in enumerate(methods or dict.fromkeys(r.method for r in results))}
    return sorted(results, key=lambda r: (order[r.method], r.target_domain, r.seed))


# ---------------------------------------------------------------------------
# Aggregation and CSV output
# ---------------------------------------------------------------------------

def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample-std / sqrt(n); stderr is NaN for a single value."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = math.fsum(vals) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def aggregate(results: Sequence[RunResult]) -> list[dict]:
    """Per-method, per-target mean +- stderr over seeds, plus an ``avg`` row per method.

    The ``avg`` row averages each seed's accuracies over target domains first,
    so its mean equals the mean of the per-domain means.
    """
    rows = []
    methods = list(dict.fromkeys(r.method for r in results))
    for m in methods:
        mine = [r for r in results if r.method == m]
        targets = sorted({r.target_domain for r in mine})
        seeds = sorted({r.seed for r in mine})
        table = {(r.target_domain, r.seed): r for r in mine}
        for t in targets:
            ood = [table[t, s].ood_accuracy for s in seeds if (t, s) in table]
            idt = [table[t, s].id_test_accuracy for s in seeds
                   if (t, s) in table and table[t, s].id_test_accuracy is not None]
            rows.append(_agg_row(m, str(t), ood, idt))
        per_seed_ood, per_seed_id = [], []
        for s in seeds:
            cells = [table[t, s] for t in targets if (t, s) in table]
            per_seed_ood.append(math.fsum(c.ood_accuracy for c in cells) / len(cells))
            ids = [c.id_test_accuracy for c in cells if c.id_test_accuracy is not None]
            if ids:
                per_seed_id.append(math.fsum(ids) / len(ids))
        rows.append(_agg_row(m, "avg", per_seed_ood, per_seed_id))
    return rows


def _agg_row(method, target, ood, idt):
    om, ose = mean_stderr(ood)
    row = {"method": method, "target_domain": target, "ood_mean": om, "ood_stderr": ose,
           "id_test_mean": None, "id_test_stderr": None, "n_seeds": len(ood)}
    if idt:
        row["id_test_mean"], row["id_test_stderr"] = mean_stderr(idt)
    return row


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


RESULT_COLUMNS = ["method", "target_domain", "seed", "ood_accuracy", "id_test_accuracy",
                  "t_s", "t_e", "wall_clock_s"]
AGGREGATE_COLUMNS = ["method", "target_domain", "ood_mean", "ood_stderr", "id_test_mean",
                     "id_test_stderr", "n_seeds"]


def results_csv(results: Sequence[RunResult], timing: bool = False) -> str:
    """Per-run CSV. ``wall_clock_s`` is left blank unless ``timing`` so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow([r.method, r.target_domain, r.seed, _fmt(r.ood_accuracy), _fmt(r.id_test_accuracy),
                    _fmt(r.interval.get("t_s")), _fmt(r.interval.get("t_e")),
                    _fmt(r.wall_clock_s) if timing else ""])
    return buf.getvalue()


def aggregate_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in AGGREGATE_COLUMNS])
    return buf.getvalue()
