"""Add-one-point gradient, Girsanov density and Monte Carlo OU semigroup/resolvent.

The OU (Glauber) semigroup on Poisson space is realized pathwise: at time
``t`` each atom survives independently with probability ``exp(-t)`` and an
independent Poisson configuration of intensity ``(1 - exp(-t)) rho`` is added.
"""

from __future__ import annotations

import math

import numpy as np

from .config import Configuration
from .engine import FiniteCarrierModel
from .simulate import (IntensityFunction, QuadratureUnavailable, Window,
                       sample_poisson_homogeneous, thin_configuration)


# ---------------------------------------------------------------------------
# reference Poisson measures


class LebesgueReference:
    """``rho = rate * Lebesgue`` on a window."""

    def __init__(self, rate: float, window: Window, n_quad: int = 64):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.window = window
        self.n_quad = n_quad

    @property
    def total_mass(self) -> float:
        return self.rate * self.window.volume

    def sample(self, rng, scale: float = 1.0) -> Configuration:
        if scale <= 0:
            return Configuration(dim=self.window.dim)
        return sample_poisson_homogeneous(self.rate * scale, self.window, rng)

    def quadrature(self):
        x, w = np.polynomial.legendre.leggauss(self.n_quad)
        axes, weights = [], []
        for lo, hi in zip(self.window.low, self.window.high):
            axes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            weights.append(0.5 * (hi - lo) * w)
        nodes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        wts = np.ones(1)
        for wk in weights:
            wts = np.outer(wts, wk).ravel()
        return nodes, self.rate * wts


class AtomicReference:
    """``rho = sum_i weights_i * delta_{atoms_i}``; matches a FiniteCarrierModel."""

    def __init__(self, atoms, weights):
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if self.atoms.shape[0] == 1 and np.ndim(atoms) == 1:
            self.atoms = self.atoms.T
        self.weights = np.asarray(weights, dtype=float)
        if len(self.weights) != len(self.atoms) or np.any(self.weights <= 0):
            raise ValueError("need one positive weight per atom")

    @classmethod
    def from_model(cls, model: FiniteCarrierModel) -> "AtomicReference":
        return cls(model.atoms(), model.weights)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def sample(self, rng, scale: float = 1.0) -> Configuration:
        if scale <= 0:
            return Configuration(dim=self.atoms.shape[1])
        counts = rng.poisson(self.weights * scale)
        return Configuration(np.repeat(self.atoms, counts, axis=0), dim=self.atoms.shape[1])

    def quadrature(self):
        return self.atoms, self.weights


# ---------------------------------------------------------------------------
# functionals


class GirsanovDensity:
    """Density of Poisson(h ds) with respect to Poisson(ref_rate ds) on a window.

    ``L(w) = exp(sum_{x in w} log(h(x)/ref_rate) - int (h - ref_rate) ds)``,
    and 0 when some atom has ``h(x) = 0``.
    """

    def __init__(self, h: IntensityFunction, ref_rate: float = 1.0, window: Window | None = None):
        if not ref_rate > 0:
            raise ValueError("ref_rate must be positive")
        self.h = h
        self.ref_rate = float(ref_rate)
        self.window = window or h.window
        if not h.piecewise_constant and not h.n_quad:
            raise QuadratureUnavailable("girsanov_density needs an integrable intensity")
        self.compensator = h.integrate(lambda v: v - self.ref_rate)

    def _log_terms(self, pts) -> np.ndarray:
        vals = self.h(pts) / self.ref_rate
        with np.errstate(divide="ignore"):
            return np.log(vals)

    def __call__(self, config: Configuration) -> float:
        if len(config) == 0:
            return math.exp(-self.compensator)
        s = self._log_terms(config.points).sum()
        return 0.0 if s == -np.inf else math.exp(s - self.compensator)

    def evaluate_added(self, config: Configuration, nodes) -> np.ndarray:
        """``L(config + eps_s)`` for every row ``s`` of ``nodes``."""
        base = self._log_terms(config.points).sum() if len(config) else 0.0
        total = base + self._log_terms(np.atleast_2d(nodes)) - self.compensator
        return np.where(np.isneginf(total), 0.0, np.exp(total))


def girsanov_density(config: Configuration, h: IntensityFunction, ref_rate: float = 1.0,
                     window: Window | None = None) -> float:
    """Evaluate the Poisson likelihood ratio ``dPoisson(h)/dPoisson(ref_rate)`` at ``config``."""
    return GirsanovDensity(h, ref_rate, window)(config)


class AtomicDensity:
    """Girsanov density on a finite carrier, evaluated on configurations."""

    def __init__(self, model: FiniteCarrierModel, h):
        from .engine import density_values

        self.model = model
        self.h = np.asarray(h, dtype=float)
        self._eval = lambda k: density_values(model, self.h, k)

    def __call__(self, config: Configuration) -> float:
        return float(self._eval(self.model.counts(config)[None, :])[0])

    def evaluate_added(self, config, nodes) -> np.ndarray:
        k = self.model.counts(config)
        idx = np.asarray(nodes, dtype=float).reshape(-1).astype(int)
        shifted = np.repeat(k[None, :], len(idx), axis=0)
        shifted[np.arange(len(idx)), idx] += 1
        return self._eval(shifted)


def total_count(config: Configuration) -> float:
    return float(len(config))


def discrete_gradient(F, config: Configuration, s) -> float:
    """``F(config + eps_s) - F(config)``."""
    return F(config.add(s)) - F(config)


def discrete_gradient_many(F, config: Configuration, nodes) -> np.ndarray:
    """Gradient at every row of ``nodes``; uses ``F.evaluate_added`` when present."""
    base = F(config)
    hook = getattr(F, "evaluate_added", None)
    if hook is not None:
        return hook(config, nodes) - base
    return np.array([F(config.add(s)) for s in np.atleast_2d(nodes)]) - base


# ---------------------------------------------------------------------------
# semigroup and resolvent


def ou_step(config: Configuration, t: float, reference, rng) -> Configuration:
    """One draw from the OU transition kernel started at ``config``."""
    if t == 0:
        return config
    keep = math.exp(-t)
    survivors = thin_configuration(config, keep, rng)
    fresh = reference.sample(rng, scale=1.0 - keep)
    return survivors.union(fresh)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    se = values.std(ddof=1, axis=0) / math.sqrt(n) if n > 1 else np.zeros_like(values[0])
    return values.mean(axis=0), se


def ou_semigroup_mc(F, config: Configuration, t: float, n_samples: int, rng, reference):
    """Monte Carlo estimate of ``P_t F(config)``; returns ``(mean, std_error)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return float(F(config)), 0.0
    vals = [F(ou_step(config, t, reference, rng)) for _ in range(n_samples)]
    mean, se = _mean_se(vals)
    return float(mean), float(se)


def resolvent_mc(F, config: Configuration, n_samples: int, rng, reference):
    """Unbiased estimate of ``(Id + L)^{-1} F(config)`` with Exp(1) time randomization."""
    taus = rng.exponential(1.0, size=n_samples)
    vals = [F(ou_step(config, tau, reference, rng)) for tau in taus]
    mean, se = _mean_se(vals)
    return float(mean), float(se)


def resolvent_gradient_mc(F, config: Configuration, nodes, n_samples: int, rng, reference):
    """Estimate ``(Id + L)^{-1} grad_s F(config)`` jointly for all ``s`` in ``nodes``.

    The same OU draws are shared across nodes.
    """
    taus = rng.exponential(1.0, size=n_samples)
    grads = np.array([discrete_gradient_many(F, ou_step(config, tau, reference, rng), nodes)
                      for tau in taus])
    return _mean_se(grads)
