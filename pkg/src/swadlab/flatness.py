"""Loss-landscape probes: local flatness, weight-plane loss grids and robust risk.

All routines take ``eval_fn(theta) -> float`` so they work with any loss over
any dataset (or with closed-form test losses).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .params import dot, l2_norm, sample_unit_sphere

EvalFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]

DEFAULT_GAMMAS = (0.25, 0.5, 1.0, 2.0)
DEFAULT_SAMPLES = 100


class DegenerateBasisError(ValueError):
    pass


@dataclass
class FlatnessProfile:
    gammas: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_samples: int

    def rows(self) -> list[dict]:
        return [
            {"gamma": float(g), "estimate": float(v), "stderr": float(s), "n_samples": self.n_samples}
            for g, v, s in zip(self.gammas, self.values, self.stderr)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gamma", "estimate", "stderr", "n_samples"])
        for row in self.rows():
            w.writerow([repr(row["gamma"]), repr(row["estimate"]), repr(row["stderr"]), row["n_samples"]])
        return buf.getvalue()


def _directions(rng: np.random.Generator, dim: int, n: int) -> list[np.ndarray]:
    return [sample_unit_sphere(rng, dim) for _ in range(n)]


def _mean_stderr(diffs: np.ndarray) -> tuple[float, float]:
    est = math.fsum(diffs.tolist()) / diffs.size
    if diffs.size < 2:
        return est, 0.0
    return est, float(np.std(diffs, ddof=1)) / math.sqrt(diffs.size)


def local_flatness(eval_fn: EvalFn, theta: np.ndarray, gamma: float, n_samples: int,
                   rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate of the mean loss increase on the radius-``gamma`` sphere around ``theta``.

    Returns ``(estimate, stderr)`` where stderr is the sample standard
    deviation over ``sqrt(n_samples)``.
    """
    profile = flatness_profile(eval_fn, theta, [gamma], n_samples, rng)
    return float(profile.values[0]), float(profile.stderr[0])


def flatness_profile(eval_fn: EvalFn, theta: np.ndarray, gammas: Sequence[float],
                     n_samples: int = DEFAULT_SAMPLES,
                     rng: np.random.Generator | None = None) -> FlatnessProfile:
    """Local flatness at each radius. The same directions are reused for every gamma."""
    gammas = np.asarray(gammas, dtype=np.float64)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if np.any(gammas < 0):
        raise ValueError("radii must be non-negative")
    if np.any(np.diff(gammas) < 0):
        raise ValueError("radii must be sorted ascending")
    if rng is None:
        raise ValueError("flatness_profile needs an explicit rng")
    base = eval_fn(theta)
    dirs = _directions(rng, theta.size, n_samples)
    values, errs = [], []
    for g in gammas:
        if g == 0.0:
            values.append(0.0)
            errs.append(0.0)
            continue
        diffs = np.array([eval_fn(theta + g * u) - base for u in dirs])
        est, se = _mean_stderr(diffs)
        values.append(est)
        errs.append(se)
    return FlatnessProfile(gammas, np.array(values), np.array(errs), n_samples)


# ---------------------------------------------------------------------------
# Weight planes
# ---------------------------------------------------------------------------

def plane_basis(theta1: np.ndarray, theta2: np.ndarray, theta3: np.ndarray,
                tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the plane through three weight vectors (Gram-Schmidt).

    ``u`` points from ``theta1`` to ``theta2``; ``v`` is the part of
    ``theta3 - theta1`` orthogonal to ``u``. A second projection pass keeps
    the pair orthogonal to rounding level even for nearly collinear inputs.
    """
    u = theta2 - theta1
    nu = l2_norm(u)
    if nu == 0.0:
        raise DegenerateBasisError("theta2 equals theta1: the first plane axis is undefined")
    u_hat = u / nu
    w = theta3 - theta1
    nw = l2_norm(w)
    if nw == 0.0:
        raise DegenerateBasisError("theta3 equals theta1: the second plane axis is undefined")
    v = w - dot(w, u_hat) * u_hat
    if l2_norm(v) <= tol * nw:
        raise DegenerateBasisError("theta3 lies on the line through theta1 and theta2")
    v = v - dot(v, u_hat) * u_hat
    return u_hat, v / l2_norm(v)


def plane_coordinates(theta: np.ndarray, origin: np.ndarray, u_hat: np.ndarray,
                      v_hat: np.ndarray) -> tuple[float, float]:
    d = theta - origin
    return dot(d, u_hat), dot(d, v_hat)


@dataclass
class PlaneGrid:
    origin: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    losses: dict[str, np.ndarray] = field(default_factory=dict)
    markers: dict[str, tuple[float, float]] = field(default_factory=dict)

    def point(self, alpha: float, beta: float) -> np.ndarray:
        return self.origin + alpha * self.u_hat + beta * self.v_hat

    def to_csv(self, splits: Sequence[str] = ("train", "test")) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "beta"] + [f"{s}_loss" for s in splits])
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                w.writerow([repr(float(a)), repr(float(b))]
                           + [repr(float(self.losses[s][i, j])) for s in splits])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "u_norm": l2_norm(self.u_hat),
            "v_norm": l2_norm(self.v_hat),
            "u_dot_v": dot(self.u_hat, self.v_hat),
            "alpha_range": [float(self.alphas[0]), float(self.alphas[-1])],
            "beta_range": [float(self.betas[0]), float(self.betas[-1])],
            "resolution": [len(self.alphas), len(self.betas)],
            "markers": [{"name": k, "alpha": a, "beta": b} for k, (a, b) in self.markers.items()],
        }


def auto_ranges(markers: Sequence[tuple[float, float]], margin: float = 0.5):
    """Axis ranges covering all markers plus ``margin`` times their spread."""
    a = [m[0] for m in markers]
    b = [m[1] for m in markers]
    da = (max(a) - min(a)) or 1.0
    db = (max(b) - min(b)) or 1.0
    return ((min(a) - margin * da, max(a) + margin * da),
            (min(b) - margin * db, max(b) + margin * db))


def loss_plane(eval_fns: Mapping[str, EvalFn], theta1: np.ndarray, theta2: np.ndarray,
               theta3: np.ndarray, alpha_range=None, beta_range=None,
               resolution: int | tuple[int, int] = 21) -> PlaneGrid:
    """Evaluate each named loss on a Cartesian grid in the plane of three weights.

    Missing ranges default to :func:`auto_ranges` around the three markers.
    Cells are evaluated row-major (alpha outer, beta inner).
    """
    u_hat, v_hat = plane_basis(theta1, theta2, theta3)
    markers = {
        "theta1": (0.0, 0.0),
        "theta2": plane_coordinates(theta2, theta1, u_hat, v_hat),
        "theta3": plane_coordinates(theta3, theta1, u_hat, v_hat),
    }
    ra, rb = auto_ranges(list(markers.values()))
    alpha_range = alpha_range or ra
    beta_range = beta_range or rb
    na, nb = (resolution, resolution) if isinstance(resolution, int) else resolution
    if na < 2 or nb < 2:
        raise ValueError("grid resolution must be >= 2 per axis")
    grid = PlaneGrid(theta1.copy(), u_hat, v_hat,
                     np.linspace(*alpha_range, na), np.linspace(*beta_range, nb),
                     markers=markers)
    for name, fn in eval_fns.items():
        vals = np.empty((na, nb))
        for i, a in enumerate(grid.alphas):
            for j, b in enumerate(grid.betas):
                vals[i, j] = fn(grid.point(a, b))
        grid.losses[name] = vals
    return grid


# ---------------------------------------------------------------------------
# Robust risk
# ---------------------------------------------------------------------------

def _project(delta: np.ndarray, gamma: float) -> np.ndarray:
    n = l2_norm(delta)
    return delta if n <= gamma else delta * (gamma / n)


def robust_risk_profile(eval_fn: EvalFn, theta: np.ndarray, gammas: Sequence[float],
                        probes: int = 20, ascent_steps: int = 10,
                        rng: np.random.Generator | None = None, grad_fn: GradFn | None = None,
                        step_fraction: float = 0.25) -> np.ndarray:
    """Lower-bound estimates of the worst loss in the ``gamma``-ball, for ascending radii.

    Each radius evaluates the centre, ``probes`` random directions scaled to
    the radius (the same directions for every radius) and, when ``grad_fn``
    is given, ``ascent_steps`` normalised gradient-ascent steps started from
    the best probe and projected back into the ball. Because a smaller ball
    sits inside a larger one, each estimate also takes the running maximum
    over smaller radii, so the profile is nondecreasing.

    The values are never larger than the true maximum; they are not the
    exact worst case.
    """
    gammas = [float(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ValueError("radii must be non-negative")
    if any(b < a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("radii must be sorted ascending")
    center = eval_fn(theta)
    dirs = []
    if probes and any(g > 0 for g in gammas):
        if rng is None:
            raise ValueError("random probes need an rng")
        dirs = _directions(rng, theta.size, probes)
    out = []
    best_so_far = center
    for g in gammas:
        best = center
        start = np.zeros_like(theta)
        if g > 0.0:
            for u in dirs:
                val = eval_fn(theta + g * u)
                if val > best:
                    best, start = val, g * u
            if grad_fn is not None:
                delta = start
                for _ in range(ascent_steps):
                    _, grad = grad_fn(theta + delta)
                    gn = l2_norm(grad)
                    if gn == 0.0:
                        break
                    delta = _project(delta + (step_fraction * g / gn) * grad, g)
                    best = max(best, eval_fn(theta + delta))
        best_so_far = max(best_so_far, best)
        out.append(best_so_far)
    return np.array(out)


def robust_risk(eval_fn: EvalFn, theta: np.ndarray, gamma: float, probes: int = 20,
                ascent_steps: int = 10, rng: np.random.Generator | None = None,
                grad_fn: GradFn | None = None) -> float:
    """Single-radius form of :func:`robust_risk_profile`; always >= ``eval_fn(theta)``."""
    return float(robust_risk_profile(eval_fn, theta, [gamma], probes, ascent_steps, rng, grad_fn)[0])
