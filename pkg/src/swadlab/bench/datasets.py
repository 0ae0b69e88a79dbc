"""Synthetic multi-domain classification data and leave-one-domain-out splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..nn import Batch
from ..params import make_rng


@dataclass
class Domain:
    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.size

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.inputs, self.labels, np.full(len(self), self.domain_id))
        return Batch(self.inputs[idx], self.labels[idx], np.full(len(idx), self.domain_id))


@dataclass
class DomainDataset:
    domains: list[Domain]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ValueError("a multi-domain dataset needs at least 2 domains")
        dims = {d.inputs.shape[1] for d in self.domains}
        if len(dims) != 1:
            raise ValueError(f"inconsistent input dims across domains: {sorted(dims)}")
        for d in self.domains:
            if len(d) == 0:
                raise ValueError(f"domain {d.domain_id} is empty")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique")

    @property
    def input_dim(self) -> int:
        return self.domains[0].inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(max(d.labels.max() for d in self.domains)) + 1

    @property
    def domain_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"no domain with id {domain_id}; available: {self.domain_ids}")


def _rotation(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def gen_rotated_moons(n_per_domain: int, angles_degrees: Sequence[float], noise_sigma: float = 0.1,
                      seed: int = 0, label_noise: float = 0.0) -> DomainDataset:
    """Two interleaved half-circles, rotated about their centre by each domain's angle.

    Domain ``i`` draws from its own stream ``(seed, i)``, so regenerating
    with the same seed and a different angle list reuses the same base points.
    ``label_noise`` flips that fraction of labels in each class (rounded
    down), which keeps the classes exactly balanced and gives a small network
    something to memorize.
    """
    if len(angles_degrees) < 2:
        raise ValueError("need at least 2 domain angles")
    if n_per_domain < 4 or n_per_domain % 2:
        raise ValueError("n_per_domain must be an even integer >= 4")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if not 0.0 <= label_noise < 0.5:
        raise ValueError("label_noise must lie in [0, 0.5)")
    half = n_per_domain // 2
    center = np.array([0.5, 0.25])
    domains = []
    for i, angle in enumerate(angles_degrees):
        rng = make_rng(seed, "rotated_moons", i)
        t = rng.uniform(0.0, np.pi, size=(2, half))
        upper = np.stack([np.cos(t[0]), np.sin(t[0])], axis=1)
        lower = np.stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])], axis=1)
        x = np.vstack([upper, lower]) - center
        x = x + noise_sigma * rng.standard_normal(x.shape)
        y = np.repeat([0, 1], half)
        n_flip = int(label_noise * half)
        if n_flip:
            flips = np.concatenate([rng.choice(half, n_flip, replace=False),
                                    half + rng.choice(half, n_flip, replace=False)])
            y[flips] = 1 - y[flips]
        order = rng.permutation(n_per_domain)
        x = (x @ _rotation(float(angle)).T)[order]
        domains.append(Domain(i, x, y[order]))
    meta = {"generator": "rotated_moons", "n_per_domain": n_per_domain,
            "angles_degrees": [float(a) for a in angles_degrees], "noise_sigma": noise_sigma,
            "label_noise": label_noise, "seed": seed}
    return DomainDataset(domains, meta)


def gen_spurious_gaussians(n_per_domain: int, domain_correlations: Sequence[float],
                           signal_dim: int = 2, seed: int = 0, signal_mean: float = 0.5
                           ) -> DomainDataset:
    """Gaussian class signal plus one spurious coordinate with a domain-dependent label correlation.

    The signal dimensions are ``N(+-signal_mean, 1)``. The last coordinate
    has magnitude in ``[0.5, inf)`` and its sign matches the label sign with
    probability ``(1 + corr) / 2`` in each domain.
    """
    if len(domain_correlations) < 2:
        raise ValueError("need at least 2 domains")
    if any(not -1.0 <= c <= 1.0 for c in domain_correlations):
        raise ValueError("correlations must lie in [-1, 1]")
    if n_per_domain < 4 or n_per_domain % 2:
        raise ValueError("n_per_domain must be an even integer >= 4")
    if signal_dim < 1:
        raise ValueError("signal_dim must be >= 1")
    half = n_per_domain // 2
    domains = []
    for i, corr in enumerate(domain_correlations):
        rng = make_rng(seed, "spurious_gaussians", i)
        y = rng.permutation(np.repeat([0, 1], half))
        s = 2.0 * y - 1.0
        signal = s[:, None] * signal_mean + rng.standard_normal((n_per_domain, signal_dim))
        agree = rng.random(n_per_domain) < (1.0 + corr) / 2.0
        sign = np.where(agree, s, -s)
        spurious = sign * (0.5 + 0.5 * np.abs(rng.standard_normal(n_per_domain)))
        domains.append(Domain(i, np.column_stack([signal, spurious]), y))
    meta = {"generator": "spurious_gaussians", "n_per_domain": n_per_domain,
            "domain_correlations": [float(c) for c in domain_correlations],
            "signal_dim": signal_dim, "signal_mean": signal_mean, "seed": seed}
    return DomainDataset(domains, meta)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    target_domain: int
    fractions: tuple[float, ...] = (0.8, 0.2)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) not in (2, 3):
            raise ValueError("fractions are (train, val) or (train, val, in-domain test)")
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")


@dataclass
class Splits:
    target: Batch
    train: dict[int, Batch]
    val: dict[int, Batch]
    test: dict[int, Batch]
    indices: dict[int, tuple[np.ndarray, ...]]

    @property
    def source_ids(self) -> list[int]:
        return sorted(self.train)

    @staticmethod
    def _pool(parts: dict[int, Batch]) -> Batch | None:
        if not parts:
            return None
        keys = sorted(parts)
        return Batch(np.vstack([parts[k].inputs for k in keys]),
                     np.concatenate([parts[k].labels for k in keys]),
                     np.concatenate([parts[k].domain_ids for k in keys]))

    def pooled_train(self) -> Batch:
        return self._pool(self.train)

    def pooled_val(self) -> Batch:
        return self._pool(self.val)

    def pooled_test(self) -> Batch | None:
        return self._pool(self.test)


def make_splits(dataset: DomainDataset, plan: SplitPlan) -> Splits:
    """Hold out the target domain; split every source domain into disjoint train/val(/test)."""
    target = dataset.domain(plan.target_domain)
    train, val, test, indices = {}, {}, {}, {}
    for d in dataset.domains:
        if d.domain_id == plan.target_domain:
            continue
        n = len(d)
        perm = make_rng(plan.seed, "split", d.domain_id).permutation(n)
        n_train = int(round(plan.fractions[0] * n))
        n_val = int(round(plan.fractions[1] * n)) if len(plan.fractions) == 3 else n - n_train
        parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
        if len(parts[0]) == 0 or len(parts[1]) == 0:
            raise ValueError(f"domain {d.domain_id} too small for split {plan.fractions}")
        train[d.domain_id] = d.batch(np.sort(parts[0]))
        val[d.domain_id] = d.batch(np.sort(parts[1]))
        if len(plan.fractions) == 3:
            test[d.domain_id] = d.batch(np.sort(parts[2]))
        indices[d.domain_id] = tuple(np.sort(p) for p in parts)
    return Splits(target.batch(), train, val, test, indices)


class BalancedSampler:
    """Per-domain minibatches of fixed size drawn from reshuffled epochs of each source domain."""

    def __init__(self, train: dict[int, Batch], per_domain: int, rng: np.random.Generator):
        if per_domain < 1:
            raise ValueError("batch size per domain must be >= 1")
        self.train = train
        self.keys = sorted(train)
        self.per_domain = per_domain
        self.rng = rng
        self._queues = {k: np.empty(0, dtype=np.int64) for k in self.keys}

    def _take(self, k: int) -> np.ndarray:
        q = self._queues[k]
        n = len(self.train[k])
        while q.size < self.per_domain:
            q = np.concatenate([q, self.rng.permutation(n)])
        out, self._queues[k] = q[:self.per_domain], q[self.per_domain:]
        return out

    def next(self) -> Batch:
        parts = [(k, self._take(k)) for k in self.keys]
        return Batch(np.vstack([self.train[k].inputs[i] for k, i in parts]),
                     np.concatenate([self.train[k].labels[i] for k, i in parts]),
                     np.concatenate([self.train[k].domain_ids[i] for k, i in parts]))
