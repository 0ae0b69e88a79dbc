"""Synthetic domain-generalization benchmark."""

from .datasets import (BalancedSampler, Domain, DomainDataset, SplitPlan, Splits,
                       gen_rotated_moons, gen_spurious_gaussians, make_splits)
from .harness import (AnalysisConfig, CellOutput, MethodConfig, OptimizerConfig, RunResult,
                      TrainerConfig, aggregate, aggregate_csv, flat_results, mean_stderr,
                      results_csv, run_cell, run_experiment, run_suite)
