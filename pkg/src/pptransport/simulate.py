"""Exact samplers: Poisson processes, finite-state CTMCs and MMPPs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .config import Configuration


class SamplingError(ValueError):
    pass


class SupBoundViolated(SamplingError):
    pass


class QuadratureUnavailable(ValueError):
    pass


# ---------------------------------------------------------------------------
# windows and intensities


@dataclass(frozen=True)
class Window:
    """Axis-aligned box ``prod_k [low_k, high_k]``."""

    low: tuple
    high: tuple

    def __post_init__(self):
        low = tuple(float(x) for x in np.atleast_1d(self.low))
        high = tuple(float(x) for x in np.atleast_1d(self.high))
        if len(low) != len(high) or not low:
            raise ValueError("low and high must have the same positive length")
        if any(h <= l for l, h in zip(low, high)):
            raise ValueError("window intervals must be nonempty")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def interval(cls, T: float, start: float = 0.0) -> "Window":
        return cls((start,), (T,))

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.high, self.low)))

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x >= self.low) & (x <= self.high), axis=1)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.dim))


class IntensityFunction:
    """Nonnegative intensity ``h`` on a window, with a sup bound for thinning.

    Args:
        func: vectorized callable mapping an (n, d) array to n values.
        sup_bound: M with ``h <= M`` on the window.
        window: the window ``h`` lives on.
        n_quad: Gauss-Legendre nodes per axis used for integrals; ``None``
            marks ``h`` as a black box (no integrals available).
    """

    piecewise_constant = False

    def __init__(self, func, sup_bound, window: Window, n_quad: int | None = 64):
        if not sup_bound > 0:
            raise ValueError("sup_bound must be positive")
        self.func = func
        self.sup_bound = float(sup_bound)
        self.window = window
        self.n_quad = n_quad
        self._check()

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.window.dim and x.shape[0] == self.window.dim:
            x = x.T
        return np.asarray(self.func(x), dtype=float).reshape(-1)

    def _check(self):
        grid = self._spot_grid()
        vals = self(grid)
        if np.any(vals < 0):
            raise ValueError("intensity must be nonnegative")
        if np.any(vals > self.sup_bound * (1 + 1e-12)):
            raise SupBoundViolated(
                f"sup bound {self.sup_bound} below intensity value {vals.max()}")

    def _spot_grid(self):
        n = 33 if self.window.dim == 1 else 9
        axes = [np.linspace(l, h, n) for l, h in zip(self.window.low, self.window.high)]
        pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        if self.n_quad:
            pts = np.vstack([pts, self.quadrature()[0]])
        return pts

    def quadrature(self):
        """Tensor Gauss-Legendre nodes and weights over the window."""
        if not self.n_quad:
            raise QuadratureUnavailable("intensity has no quadrature grid")
        x, w = np.polynomial.legendre.leggauss(self.n_quad)
        axes, weights = [], []
        for lo, hi in zip(self.window.low, self.window.high):
            axes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            weights.append(0.5 * (hi - lo) * w)
        nodes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        wts = np.ones(1)
        for wk in weights:
            wts = np.outer(wts, wk).ravel()
        return nodes, wts

    def integrate(self, transform=lambda v: v) -> float:
        """``int transform(h(s)) ds`` over the window."""
        nodes, wts = self.quadrature()
        return float(np.dot(wts, transform(self(nodes))))


class ConstantIntensity(IntensityFunction):
    piecewise_constant = True

    def __init__(self, value: float, window: Window):
        self.value = float(value)
        if self.value < 0:
            raise ValueError("intensity must be nonnegative")
        super().__init__(lambda x: np.full(len(x), self.value), max(self.value, 1e-300),
                         window, n_quad=1)

    def integrate(self, transform=lambda v: v) -> float:
        return float(transform(np.array([self.value]))[0]) * self.window.volume


class PiecewiseConstantIntensity(IntensityFunction):
    """1-D step intensity: ``values[k]`` on ``[breaks[k], breaks[k+1])``."""

    piecewise_constant = True

    def __init__(self, breaks, values):
        self.breaks = np.asarray(breaks, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.breaks.ndim != 1 or len(self.breaks) != len(self.values) + 1:
            raise ValueError("need len(breaks) == len(values) + 1")
        if np.any(np.diff(self.breaks) <= 0):
            raise ValueError("breaks must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("intensity must be nonnegative")
        window = Window.interval(self.breaks[-1], self.breaks[0])
        super().__init__(self._eval, max(float(self.values.max()), 1e-300), window, n_quad=None)

    def _eval(self, x):
        idx = np.searchsorted(self.breaks, x[:, 0], side="right") - 1
        return self.values[np.clip(idx, 0, len(self.values) - 1)]

    def _spot_grid(self):
        return 0.5 * (self.breaks[:-1] + self.breaks[1:])[:, None]

    def quadrature(self):
        mids = 0.5 * (self.breaks[:-1] + self.breaks[1:])
        return mids[:, None], np.diff(self.breaks)

    def integrate(self, transform=lambda v: v) -> float:
        return float(np.dot(np.diff(self.breaks), transform(self.values)))


# ---------------------------------------------------------------------------
# Poisson samplers


def sample_poisson_homogeneous(rate: float, window: Window, rng) -> Configuration:
    """Homogeneous Poisson configuration of intensity ``rate`` on ``window``."""
    if not rate * window.volume > 0:
        raise SamplingError("rate * volume must be positive")
    n = rng.poisson(rate * window.volume)
    return Configuration(window.uniform(n, rng), dim=window.dim)


def sample_poisson_inhomogeneous(h: IntensityFunction, window: Window | None, rng) -> Configuration:
    """Poisson configuration of intensity ``h`` by thinning a rate-M process."""
    window = window or h.window
    n = rng.poisson(h.sup_bound * window.volume)
    pts = window.uniform(n, rng)
    if n == 0:
        return Configuration(dim=window.dim)
    vals = h(pts)
    if np.any(vals > h.sup_bound):
        raise SupBoundViolated(f"h(x) = {vals.max()} exceeds sup bound {h.sup_bound}")
    keep = rng.uniform(size=n) * h.sup_bound < vals
    return Configuration(pts[keep], dim=window.dim)


def thin_configuration(a: Configuration, keep_prob: float, rng) -> Configuration:
    """Keep each atom independently with probability ``keep_prob``."""
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    if keep_prob == 1.0 or len(a) == 0:
        return a
    return a.restrict(rng.uniform(size=len(a)) < keep_prob)


# ---------------------------------------------------------------------------
# CTMCs


class GeneratorError(ValueError):
    """Invalid CTMC generator; ``str(err)`` is the diagnostic."""


class NonSquare(GeneratorError):
    def __init__(self, shape):
        super().__init__(f"NonSquare: generator has shape {shape}")


class RowSumNonzero(GeneratorError):
    def __init__(self, i, total):
        self.row = i
        super().__init__(f"RowSumNonzero({i}): row {i} sums to {total!r}")


class NegativeOffDiagonal(GeneratorError):
    def __init__(self, i, j, value):
        self.index = (i, j)
        super().__init__(f"NegativeOffDiagonal({i},{j}): entry is {value!r}")


class Reducible(GeneratorError):
    def __init__(self, n_classes):
        super().__init__(f"Reducible: generator graph has {n_classes} communicating classes")


class SingularSystem(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class CtmcModel:
    """Validated generator ``Q`` with per-state arrival rates."""

    Q: np.ndarray
    rates: np.ndarray

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    def to_json(self) -> str:
        return json.dumps({"m": self.m, "Q": self.Q.tolist(), "rates": self.rates.tolist()})


def validate_generator(Q, rates=None, tol: float = 1e-12) -> CtmcModel:
    """Check ``Q`` is an irreducible CTMC generator and wrap it with ``rates``."""
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        raise NonSquare(Q.shape)
    m = Q.shape[0]
    for i in range(m):
        total = Q[i].sum()
        if abs(total) > tol:
            raise RowSumNonzero(i, float(total))
    for i in range(m):
        for j in range(m):
            if i != j and Q[i, j] < 0:
                raise NegativeOffDiagonal(i, j, float(Q[i, j]))
    adj = (Q > 0) & ~np.eye(m, dtype=bool)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp > 1:
        raise Reducible(n_comp)
    rates = np.zeros(m) if rates is None else np.array(rates, dtype=float)
    if rates.shape != (m,):
        raise GeneratorError(f"rates must have length {m}, got shape {rates.shape}")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise GeneratorError("rates must be finite and nonnegative")
    Q.setflags(write=False)
    rates.setflags(write=False)
    return CtmcModel(Q, rates)


def load_model(path) -> CtmcModel:
    """Read a model file ``{m, Q, rates}`` (Q row-major, nested or flat)."""
    with open(path) as fh:
        data = json.load(fh)
    return model_from_dict(data)


def model_from_dict(data) -> CtmcModel:
    Q = np.asarray(data["Q"], dtype=float)
    m = int(data.get("m", round(np.sqrt(Q.size))))
    if Q.ndim == 1:
        if Q.size != m * m:
            raise NonSquare((Q.size,))
        Q = Q.reshape(m, m)
    elif Q.shape[0] != m:
        raise NonSquare(Q.shape)
    return validate_generator(Q, data.get("rates"))


def stationary_distribution(model: CtmcModel) -> np.ndarray:
    """Solve ``pi Q = 0, sum(pi) = 1`` with one balance equation replaced."""
    m = model.m
    A = model.Q.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(pi)) or np.any(pi <= 0):
        raise SingularSystem(f"stationary solve returned {pi}")
    return pi


@dataclass(frozen=True)
class CtmcPath:
    """Right-continuous piecewise-constant trajectory on ``[0, T]``.

    ``states[k]`` is the state entered at ``jump_times[k]``.
    """

    initial: int
    jump_times: np.ndarray
    states: np.ndarray
    T: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=int)
        if jt.shape != st.shape:
            raise ValueError("jump_times and states must have equal length")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= 0 or jt[-1] > self.T):
            raise ValueError("jump times must be strictly increasing in (0, T]")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    def segments(self):
        """(starts, ends, states) of the constant pieces."""
        starts = np.concatenate([[0.0], self.jump_times])
        ends = np.concatenate([self.jump_times, [self.T]])
        states = np.concatenate([[self.initial], self.states]).astype(int)
        return starts, ends, states

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[self.initial], self.states])[idx]

    def occupation_times(self, m: int) -> np.ndarray:
        starts, ends, states = self.segments()
        return np.bincount(states, weights=ends - starts, minlength=m)


def _initial_state(model, initial, rng) -> int:
    if initial == "stationary":
        return int(rng.choice(model.m, p=stationary_distribution(model)))
    i = int(initial)
    if not 0 <= i < model.m:
        raise ValueError(f"initial state {i} out of range")
    return i


def sample_ctmc_path(model: CtmcModel, initial="stationary", T: float = 1.0, rng=None) -> CtmcPath:
    """Gillespie simulation of the chain on ``[0, T]``."""
    if not T > 0:
        raise ValueError("T must be positive")
    state = _initial_state(model, initial, rng)
    start = state
    exit_rates = -np.diag(model.Q)
    times, states = [], []
    t = 0.0
    if model.m > 1:
        while True:
            t += rng.exponential(1.0 / exit_rates[state])
            if t > T:
                break
            probs = model.Q[state].copy()
            probs[state] = 0.0
            state = int(rng.choice(model.m, p=probs / exit_rates[state]))
            times.append(t)
            states.append(state)
    return CtmcPath(start, np.array(times), np.array(states, dtype=int), float(T))


def sample_occupation_times(model: CtmcModel, T: float, n_paths: int, rng,
                            initial="stationary") -> np.ndarray:
    """Occupation times of ``n_paths`` independent paths, shape (n_paths, m).

    Vectorized Gillespie over the batch; used by the MMPP bounds, which only
    depend on a path through its occupation times.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    m = model.m
    occ = np.zeros((n_paths, m))
    if initial == "stationary":
        state = rng.choice(m, size=n_paths, p=stationary_distribution(model))
    else:
        state = np.full(n_paths, int(initial))
    if m == 1:
        occ[:, 0] = T
        return occ
    exit_rates = -np.diag(model.Q)
    jump = model.Q / exit_rates[:, None]
    np.fill_diagonal(jump, 0.0)
    cum = np.cumsum(jump, axis=1)
    cum[:, -1] = 1.0
    t = np.zeros(n_paths)
    active = np.arange(n_paths)
    while active.size:
        s = state[active]
        hold = rng.exponential(1.0, size=active.size) / exit_rates[s]
        dur = np.minimum(hold, T - t[active])
        np.add.at(occ, (active, s), dur)
        t[active] += hold
        alive = t[active] < T
        active = active[alive]
        u = rng.uniform(size=active.size)
        state[active] = (u[:, None] >= cum[state[active]]).sum(axis=1)
    return occ


def sample_mmpp(model: CtmcModel, T: float, rng, initial="stationary"):
    """Draw a modulating path and the MMPP arrivals on ``[0, T]``."""
    path = sample_ctmc_path(model, initial, T, rng)
    pieces = []
    for a, b, s in zip(*path.segments()):
        lam = model.rates[s]
        if lam > 0 and b > a:
            n = rng.poisson(lam * (b - a))
            pieces.append(rng.uniform(a, b, size=n))
    pts = np.concatenate(pieces) if pieces else np.empty(0)
    return path, Configuration(pts[:, None], dim=1)


def path_integrals(path: CtmcPath, rates):
    """Exact ``(int rate(J_s) ds, int rate(J_s)^2 ds)`` over ``[0, T]``."""
    rates = np.asarray(rates, dtype=float)
    occ = path.occupation_times(len(rates))
    return float(occ @ rates), float(occ @ rates ** 2)
