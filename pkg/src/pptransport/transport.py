"""Kantorovich-Rubinstein distances between laws of configurations.

Empirical laws are compared by optimal assignment; finite discrete laws by an
exact network-simplex transport solve that also returns dual potentials.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import GroundMetricSpec, d2_distance


class InfiniteEntry(ValueError):
    pass


class Unbalanced(ValueError):
    pass


@dataclass
class EmpiricalLaw:
    samples: list

    def __post_init__(self):
        self.samples = list(self.samples)
        if not self.samples:
            raise ValueError("an empirical law needs at least one sample")

    @property
    def N(self) -> int:
        return len(self.samples)


@dataclass
class DiscreteLaw:
    """Probabilities over distinct states (rows of ``states``)."""

    states: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states))
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (self.states.shape[0],):
            raise ValueError("one probability per state required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        if len({tuple(r) for r in self.states.tolist()}) != self.states.shape[0]:
            raise ValueError("states must be distinct")


# ---------------------------------------------------------------------------
# cost matrices


def count_d1_cost(a_states, b_states) -> np.ndarray:
    """d1 between count vectors on a shared finite carrier."""
    diff = np.asarray(a_states)[:, None, :] - np.asarray(b_states)[None, :, :]
    excess_a = np.clip(diff, 0, None).sum(axis=-1)
    excess_b = np.clip(-diff, 0, None).sum(axis=-1)
    return 2.0 * np.maximum(excess_a, excess_b).astype(float)


def _d1_matrix(a, b):
    ca = [c.counter() for c in a]
    cb = ca if b is a else [c.counter() for c in b]
    na = np.array([len(c) for c in a])
    nb = np.array([len(c) for c in b])
    shared = np.zeros((len(a), len(b)))
    atoms_b = set().union(*cb) if cb else set()
    for i, x in enumerate(ca):
        if not atoms_b.intersection(x):
            continue
        for j, y in enumerate(cb):
            common = x.keys() & y.keys()
            if common:
                shared[i, j] = sum(min(x[p], y[p]) for p in common)
    return 2.0 * np.maximum(na[:, None] - shared, nb[None, :] - shared)


def cost_matrix(a, b, spec: GroundMetricSpec = GroundMetricSpec("d1")) -> np.ndarray:
    """Pairwise configuration distances between two lists."""
    if spec.kind == "d1":
        return _d1_matrix(a, b)
    out = np.empty((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = 0.0 if (b is a and i == j) else d2_distance(x, y, spec)
    return out


def write_cost_csv(path, cost):
    np.savetxt(path, np.asarray(cost), delimiter=",", fmt="%.17g")


def read_cost_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def write_plan_csv(path, plan, tol: float = 0.0):
    """Write nonzero plan entries as ``i,j,mass`` rows."""
    plan = np.asarray(plan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(plan > tol)):
            w.writerow([int(i), int(j), repr(float(plan[i, j]))])


# ---------------------------------------------------------------------------
# solvers


def assignment_solve(cost):
    """Exact min-cost perfect matching; returns ``(permutation, total_cost)``."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("assignment needs a square cost matrix")
    if not np.all(np.isfinite(cost)):
        raise InfiniteEntry("cost matrix has infinite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[rows] = cols
    return perm, float(cost[np.arange(len(perm)), perm].sum())


def _downsample(law: EmpiricalLaw, n: int, rng) -> list:
    if law.N == n:
        return law.samples
    idx = rng.choice(law.N, size=n, replace=False)
    return [law.samples[i] for i in np.sort(idx)]


def empirical_rubinstein(mu: EmpiricalLaw, nu: EmpiricalLaw,
                         spec: GroundMetricSpec = GroundMetricSpec("d1"),
                         n_boot: int = 50, rng=None):
    """Optimal-assignment distance between two empirical laws, with bootstrap SE.

    Unequal sample sizes are reduced to the smaller one by subsampling with
    ``rng``. Returns ``(estimate, bootstrap_se)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = min(mu.N, nu.N)
    a, b = _downsample(mu, n, rng), _downsample(nu, n, rng)
    cost = cost_matrix(a, b, spec)
    if not np.all(np.isfinite(cost)):
        raise InfiniteEntry("infinite configuration distances; use d1 or condition on counts")
    _, total = assignment_solve(cost)
    estimate = total / n
    boots = []
    for _ in range(n_boot):
        i = rng.integers(0, n, size=n)
        j = rng.integers(0, n, size=n)
        boots.append(assignment_solve(cost[np.ix_(i, j)])[1] / n)
    se = float(np.std(boots, ddof=1)) if n_boot > 1 else float("nan")
    return estimate, se


@dataclass
class TransportResult:
    value: float
    dual_value: float
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray


def _pot():
    for lib in ("TENSORFLOW", "JAX", "PYTORCH", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{lib}", "1")
    import ot

    return ot


def exact_kantorovich(mu: DiscreteLaw, nu: DiscreteLaw, cost, full: bool = False,
                      gap_tol: float = 1e-9):
    """Exact transport value by network simplex (POT ``emd``).

    The dual potentials certify the primal value: the relative duality gap
    must be at most ``gap_tol``. With ``full=True`` returns a TransportResult.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (len(mu.probs), len(nu.probs)):
        raise ValueError("cost matrix shape does not match the laws")
    if not np.all(np.isfinite(cost)):
        raise InfiniteEntry("cost matrix has infinite entries")
    if abs(mu.probs.sum() - nu.probs.sum()) > 1e-12:
        raise Unbalanced("total masses differ")
    a = mu.probs / mu.probs.sum()
    b = nu.probs / nu.probs.sum()
    ot = _pot()
    plan, log = ot.emd(a, b, cost, numItermax=10**8, log=True)
    if log.get("result_code", 1) != 1:
        raise ArithmeticError(f"network simplex did not converge: {log.get('warning')}")
    primal = float(np.sum(plan * cost))
    dual = float(log["u"] @ a + log["v"] @ b)
    if abs(primal - dual) > gap_tol * max(1.0, abs(primal)):
        raise ArithmeticError(f"duality gap {abs(primal - dual):.3e}")
    if not full:
        return primal
    return TransportResult(primal, dual, plan, log["u"], log["v"])


def engine_laws(model, h, max_states: int = 2000):
    """Reference law mu and tilted law nu = L mu on a finite carrier, as DiscreteLaws.

    States are kept in decreasing order of ``max(mu, nu)`` up to ``max_states``;
    both laws are renormalized on the kept support. Returns
    ``(mu, nu, dropped_mass)`` where dropped_mass is the larger of the two
    discarded masses.
    """
    from .engine import density_values

    states = model.states()
    mu = model.reference_probs()
    nu = mu * density_values(model, h)
    nu = nu / nu.sum()
    order = np.argsort(-np.maximum(mu, nu), kind="stable")[:max_states]
    order = np.sort(order[np.maximum(mu, nu)[order] > 0])
    dropped = max(1.0 - mu[order].sum(), 1.0 - nu[order].sum(), 0.0)
    law = lambda p: DiscreteLaw(states[order], p[order] / p[order].sum())  # noqa: E731
    return law(mu), law(nu), float(dropped)


def engine_transport(model, h, max_states: int = 2000, full: bool = False):
    """Exact d1 transport cost between mu and L mu on a finite carrier.

    Returns ``(value, dropped_mass)``, or ``(TransportResult, dropped_mass)``
    with ``full=True``.
    """
    mu, nu, dropped = engine_laws(model, h, max_states)
    cost = count_d1_cost(mu.states, nu.states)
    return exact_kantorovich(mu, nu, cost, full=full), dropped
