"""Exact Poisson-space calculus on a finite carrier.

The carrier is ``m`` atoms with reference masses ``rho_i``; a configuration is
a count vector ``k`` in ``{0..K}^m`` and the reference law is the product of
Poisson(``rho_i``) laws (truncated at ``K``). Functionals are tables over that
grid, and the OU generator, semigroup and resolvent become finite matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply
from scipy.stats import poisson

from .config import Configuration

MAX_STATES = 10**6


class StateSpaceTooLarge(ValueError):
    pass


class SolverFailure(ArithmeticError):
    pass


class ToleranceExceeded(AssertionError):
    def __init__(self, orders, residual, tol):
        self.orders = tuple(orders)
        self.residual = residual
        super().__init__(f"chaos {self.orders}: residual {residual:.3e} exceeds {tol:.1e}")


@dataclass(frozen=True, eq=False)
class FiniteCarrierModel:
    """``m`` atoms with Poisson masses ``weights``, counts truncated at ``K``."""

    weights: np.ndarray
    K: int

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or w.size == 0 or np.any(w <= 0):
            raise ValueError("weights must be a nonempty vector of positive reals")
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "K", int(self.K))

    @property
    def m(self) -> int:
        return self.weights.size

    @property
    def shape(self):
        return (self.K + 1,) * self.m

    @property
    def n_states(self) -> int:
        return (self.K + 1) ** self.m

    def states(self) -> np.ndarray:
        """All count vectors, shape (n_states, m), in C (row-major) order."""
        grids = np.meshgrid(*[np.arange(self.K + 1)] * self.m, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def reference_probs(self, normalize: bool = True) -> np.ndarray:
        """Product-Poisson probabilities of every state (flattened)."""
        k = np.arange(self.K + 1)
        p = np.ones(1)
        for rho in self.weights:
            p = np.outer(p, poisson.pmf(k, rho)).ravel()
        return p / p.sum() if normalize else p

    def tail_mass(self) -> float:
        return 1.0 - float(np.prod(poisson.cdf(self.K, self.weights)))

    def interior_mask(self, margin: int = 10) -> np.ndarray:
        return np.all(self.states() <= self.K - margin, axis=1)

    def to_configuration(self, k) -> Configuration:
        """Atom ``i`` sits at coordinate ``i`` (1-D), repeated ``k_i`` times."""
        return Configuration(np.repeat(np.arange(self.m, dtype=float), np.asarray(k, int)), dim=1)

    def counts(self, config: Configuration) -> np.ndarray:
        idx = config.points[:, 0].astype(int) if len(config) else np.empty(0, int)
        return np.bincount(idx, minlength=self.m)

    def atoms(self) -> np.ndarray:
        return np.arange(self.m, dtype=float)[:, None]

    def table(self, values) -> "TableFunctional":
        return TableFunctional(self, values)

    def table_from(self, func) -> "TableFunctional":
        """Tabulate ``func(states)`` where states has shape (n_states, m)."""
        return TableFunctional(self, np.asarray(func(self.states()), dtype=float))


@dataclass(frozen=True, eq=False)
class TableFunctional:
    """A real functional given by its values on every grid state."""

    model: FiniteCarrierModel
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.model.n_states:
            raise ValueError(f"expected {self.model.n_states} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("table values must be finite")
        object.__setattr__(self, "values", v)

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.model.shape)

    def __call__(self, config: Configuration) -> float:
        k = self.model.counts(config)
        if np.any(k > self.model.K):
            raise IndexError("configuration outside the truncated grid")
        return float(self.grid()[tuple(k)])

    def expectation(self) -> float:
        return float(self.values @ self.model.reference_probs())


def build_generator_matrix(model: FiniteCarrierModel) -> sp.csr_matrix:
    """Sparse matrix of the number operator (OU generator) on the grid.

    ``(L F)(k) = sum_i rho_i (F(k) - F(k+e_i)) + sum_i k_i (F(k) - F(k-e_i))``;
    the birth term is dropped where ``k_i = K``.
    """
    n = model.n_states
    if n > MAX_STATES:
        raise StateSpaceTooLarge(f"{n} states exceeds the limit of {MAX_STATES}")
    states = model.states()
    idx = np.arange(n)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for i in range(model.m):
        stride = (model.K + 1) ** (model.m - 1 - i)
        k_i = states[:, i]
        up = k_i < model.K
        rows.append(idx[up]); cols.append(idx[up] + stride)
        vals.append(np.full(up.sum(), -model.weights[i]))
        diag[up] += model.weights[i]
        down = k_i > 0
        rows.append(idx[down]); cols.append(idx[down] - stride)
        vals.append(-k_i[down].astype(float))
        diag[down] += k_i[down]
    rows.append(idx); cols.append(idx); vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return A


def gradient_tables(F: TableFunctional, extension=None) -> np.ndarray:
    """Add-one-point differences ``F(k + e_i) - F(k)``, shape (m, n_states).

    At ``k_i = K`` the shifted state is off the grid: the entry is 0 unless
    ``extension(states)`` supplies values of ``F`` beyond the grid.
    """
    model = F.model
    states = model.states()
    out = np.zeros((model.m, model.n_states))
    for i in range(model.m):
        stride = (model.K + 1) ** (model.m - 1 - i)
        up = states[:, i] < model.K
        out[i, up] = F.values[np.flatnonzero(up) + stride] - F.values[up]
        if extension is not None and not up.all():
            shifted = states[~up].copy()
            shifted[:, i] += 1
            out[i, ~up] = np.asarray(extension(shifted), float) - F.values[~up]
    return out


class Engine:
    """Generator, semigroup and resolvent of a FiniteCarrierModel."""

    def __init__(self, model: FiniteCarrierModel):
        self.model = model
        self.generator = build_generator_matrix(model)
        self._lu = None

    def apply_generator(self, F) -> np.ndarray:
        return self.generator @ _values(F)

    def semigroup(self, F, t: float) -> TableFunctional:
        """``exp(-t L) F``."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        v = _values(F)
        if t == 0:
            return TableFunctional(self.model, v.copy())
        out = expm_multiply(-t * self.generator, v)
        if not np.all(np.isfinite(out)):
            raise SolverFailure("matrix exponential action produced non-finite values")
        return TableFunctional(self.model, out)

    def semigroup_path(self, F, times) -> np.ndarray:
        """``exp(-t L) F`` for each t in ``times``, shape (len(times), n_states).

        Sorted times are reached by composing increments, so the cost scales
        with ``max(times)`` rather than its sum.
        """
        times = np.asarray(times, dtype=float)
        if np.any(times < 0):
            raise ValueError("times must be nonnegative")
        order = np.argsort(times)
        out = np.empty((times.size, self.model.n_states))
        cur, t_prev = _values(F).copy(), 0.0
        for j in order:
            dt = times[j] - t_prev
            if dt > 0:
                cur = expm_multiply(-dt * self.generator, cur)
            out[j] = cur
            t_prev = times[j]
        if not np.all(np.isfinite(out)):
            raise SolverFailure("matrix exponential action produced non-finite values")
        return out

    def resolvent(self, F, tol: float = 1e-10) -> TableFunctional:
        """Solve ``(Id + L) x = F``."""
        v = _values(F)
        if self._lu is None:
            op = (sp.identity(self.model.n_states, format="csc") + self.generator.tocsc())
            self._lu = sp.linalg.splu(op)
        x = self._lu.solve(v)
        resid = np.abs(x + self.generator @ x - v).max()
        if not np.isfinite(resid) or resid > tol * max(1.0, np.abs(v).max()):
            raise SolverFailure(f"resolvent residual {resid:.3e}")
        return TableFunctional(self.model, x)

    def gradient(self, F, extension=None) -> np.ndarray:
        return gradient_tables(_as_table(self.model, F), extension)


def _values(F) -> np.ndarray:
    return F.values if isinstance(F, TableFunctional) else np.asarray(F, dtype=float)


def _as_table(model, F) -> TableFunctional:
    return F if isinstance(F, TableFunctional) else TableFunctional(model, F)


def exact_semigroup(model: FiniteCarrierModel, F, t: float) -> TableFunctional:
    return Engine(model).semigroup(F, t)


def exact_resolvent(model: FiniteCarrierModel, F) -> TableFunctional:
    return Engine(model).resolvent(F)


# ---------------------------------------------------------------------------
# Charlier chaoses


def charlier_eval(n: int, k, theta: float):
    """Monic Charlier polynomial ``C_n(k; theta)``.

    Recurrence ``C_{n+1} = (k - n - theta) C_n - n theta C_{n-1}``. These are
    orthogonal under Poisson(theta) with squared norm ``n! theta^n`` and satisfy
    ``L C_n = n C_n`` for the single-atom number operator.
    """
    if n < 0:
        raise ValueError("order must be nonnegative")
    k = np.asarray(k, dtype=float)
    prev, cur = np.zeros_like(k), np.ones_like(k)
    for j in range(n):
        prev, cur = cur, (k - j - theta) * cur - j * theta * prev
    return cur if cur.ndim else float(cur)


def chaos_table(model: FiniteCarrierModel, orders) -> TableFunctional:
    """Product ``prod_i C_{n_i}(k_i; rho_i)`` as a table."""
    orders = tuple(int(n) for n in orders)
    if len(orders) != model.m:
        raise ValueError("need one order per atom")
    states = model.states()
    vals = np.ones(model.n_states)
    for i, n in enumerate(orders):
        vals *= charlier_eval(n, states[:, i], model.weights[i])
    return TableFunctional(model, vals)


@dataclass
class EigencheckReport:
    max_residual: float
    residuals: dict = field(default_factory=dict)

    def rows(self):
        for orders, r in sorted(self.residuals.items()):
            yield {"orders": " ".join(map(str, orders)), "eigenvalue": sum(orders), "residual": r}


def write_residuals_csv(report: EigencheckReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["orders", "eigenvalue", "residual"])
        w.writeheader()
        for row in report.rows():
            w.writerow({**row, "residual": repr(row["residual"])})


def write_generator_mtx(model: FiniteCarrierModel, path):
    """Dump the truncated generator in Matrix Market format."""
    scipy.io.mmwrite(path, build_generator_matrix(model), precision=17)


def _order_vectors(m, max_order):
    grids = np.meshgrid(*[np.arange(max_order + 1)] * m, indexing="ij")
    for row in np.stack([g.ravel() for g in grids], axis=1):
        if row.sum() <= max_order:
            yield tuple(int(x) for x in row)


def chaos_eigencheck(model: FiniteCarrierModel, max_order: int = 5, tol: float = 1e-8,
                     margin: int = 10, engine: Engine | None = None) -> EigencheckReport:
    """Check every Charlier product of total order ``<= max_order`` is an eigenfunction.

    Residuals are ``max |L F - n F| / max |F|`` over states with all
    ``k_i <= K - margin``.
    """
    if model.m > 3 or model.K < 40:
        raise ValueError("chaos_eigencheck needs m <= 3 and K >= 40")
    engine = engine or Engine(model)
    mask = model.interior_mask(margin)
    report = EigencheckReport(0.0)
    for orders in _order_vectors(model.m, max_order):
        F = chaos_table(model, orders)
        LF = engine.apply_generator(F)
        scale = max(1.0, np.abs(F.values[mask]).max())
        r = float(np.abs(LF[mask] - sum(orders) * F.values[mask]).max() / scale)
        report.residuals[orders] = r
        report.max_residual = max(report.max_residual, r)
        if r > tol:
            raise ToleranceExceeded(orders, r, tol)
    return report


# ---------------------------------------------------------------------------
# densities on the engine


def density_values(model: FiniteCarrierModel, h, states=None) -> np.ndarray:
    """Girsanov density of Poisson(h_i rho_i) w.r.t. Poisson(rho_i), per state.

    ``L(k) = prod_i h_i^{k_i} exp(-(h_i - 1) rho_i)``; evaluates off-grid states too.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (model.m,) or np.any(h < 0):
        raise ValueError("h must be a nonnegative vector with one entry per atom")
    states = model.states() if states is None else np.atleast_2d(states)
    log_norm = -np.dot(h - 1.0, model.weights)
    with np.errstate(divide="ignore"):
        logs = np.where(states > 0, states * np.log(np.where(h > 0, h, 1.0)), 0.0)
    vals = np.exp(logs.sum(axis=1) + log_norm)
    zero = (h == 0)[None, :] & (states > 0)
    vals[zero.any(axis=1)] = 0.0
    return vals


def density_table(model: FiniteCarrierModel, h) -> TableFunctional:
    return TableFunctional(model, density_values(model, h))


def commutation_residual(engine: Engine, F, t: float, margin: int = 10) -> float:
    """``max |grad P_t F - e^{-t} P_t grad F|`` over interior states."""
    model = engine.model
    mask = model.interior_mask(margin)
    lhs = engine.gradient(engine.semigroup(F, t))
    grads = engine.gradient(F)
    rhs = np.stack([np.exp(-t) * engine.semigroup(g, t).values for g in grads])
    return float(np.abs(lhs - rhs)[:, mask].max())
