"""Finite configurations (point multisets) and the ground distances d1, d2."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment


class ConfigurationError(ValueError):
    pass


def _as_points(points, dim=None) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        d = dim if dim is not None else (arr.shape[1] if arr.ndim == 2 else 1)
        return np.empty((0, d))
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigurationError(f"points must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError("point coordinates must be finite")
    return arr


class Configuration:
    """A finite multiset of points in R^d, kept in canonical lexicographic order.

    Points are rows of ``points``; a repeated row is an atom with multiplicity.
    Instances are immutable.

    Args:
        points: array-like of shape (n, d), or (n,) for d = 1.
        window: optional Window; every point must lie inside it.
        dim: dimension to use when ``points`` is empty.
    """

    __slots__ = ("_points", "_key")

    def __init__(self, points=(), window=None, dim=None):
        arr = _as_points(points, dim=dim if window is None else window.dim)
        if window is not None:
            if arr.shape[1] != window.dim:
                raise ConfigurationError(
                    f"dimension {arr.shape[1]} does not match window dimension {window.dim}")
            if arr.shape[0] and not window.contains(arr).all():
                raise ConfigurationError("configuration has points outside its window")
        if arr.shape[0] > 1:
            order = np.lexsort(arr.T[::-1])
            arr = arr[order]
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._points = arr
        self._key = None

    @classmethod
    def _from_sorted(cls, arr):
        obj = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        obj._points = arr
        obj._key = None
        return obj

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self):
        return self._points.shape[0]

    def __iter__(self):
        return (tuple(row) for row in self._points)

    def counter(self) -> Counter:
        return Counter(map(tuple, self._points.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return self._points.shape == other._points.shape and np.array_equal(
            self._points, other._points)

    def __hash__(self):
        if self._key is None:
            self._key = hash((self._points.shape, self._points.tobytes()))
        return self._key

    def __repr__(self):
        return f"Configuration({self._points.tolist()!r})"

    def add(self, point) -> "Configuration":
        """Return the configuration with one more atom at ``point``."""
        p = np.asarray(point, dtype=float).reshape(1, -1)
        if len(self) == 0:
            return Configuration(p)
        return Configuration(np.vstack([self._points, p]))

    def union(self, other: "Configuration") -> "Configuration":
        """Multiset sum (multiplicities add)."""
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Configuration(np.vstack([self._points, other._points]))

    def restrict(self, mask) -> "Configuration":
        return Configuration._from_sorted(self._points[np.asarray(mask, dtype=bool)])

    # serialization ------------------------------------------------------
    def to_json(self) -> str:
        # json uses repr(float), the shortest round-trip representation
        return json.dumps(self._points.tolist())

    @classmethod
    def from_json(cls, text: str, dim=None) -> "Configuration":
        data = json.loads(text)
        return cls(data, dim=dim)


def _from_counter(counter: Counter, dim: int) -> Configuration:
    rows = [p for p, c in counter.items() for _ in range(c)]
    return Configuration(rows, dim=dim)


def symmetric_difference(a: Configuration, b: Configuration):
    """Return ``(a \\ b, b \\ a)`` as multisets."""
    ca, cb = a.counter(), b.counter()
    dim = a.dim if len(a) else b.dim
    return _from_counter(ca - cb, dim), _from_counter(cb - ca, dim)


def _excess_counts(a: Configuration, b: Configuration):
    ca, cb = a.counter(), b.counter()
    return sum((ca - cb).values()), sum((cb - ca).values())


def d1_distance(a: Configuration, b: Configuration) -> float:
    """Total variation distance ``2 sup_A |a(A) - b(A)|`` between atomic measures.

    The supremum is attained at the support of ``a \\ b`` or of ``b \\ a``.
    """
    n_ab, n_ba = _excess_counts(a, b)
    return 2.0 * max(n_ab, n_ba)


@dataclass(frozen=True)
class GroundMetricSpec:
    """Which configuration distance to use.

    ``d0_truncation`` caps the point-to-point Euclidean cost inside d2.
    """

    kind: str = "d1"
    d0_truncation: float = 1.0

    def __post_init__(self):
        if self.kind not in ("d1", "d2"):
            raise ValueError(f"unknown ground metric {self.kind!r}")
        if not self.d0_truncation > 0:
            raise ValueError("d0_truncation must be positive")

    def distance(self, a: Configuration, b: Configuration) -> float:
        if self.kind == "d1":
            return d1_distance(a, b)
        return d2_distance(a, b, self)


def ground_cost(x: np.ndarray, y: np.ndarray, truncation: float) -> np.ndarray:
    """Pairwise truncated Euclidean cost ``min(|x_i - y_j|, truncation)``."""
    diff = x[:, None, :] - y[None, :, :]
    return np.minimum(np.sqrt((diff ** 2).sum(axis=-1)), truncation)


def d2_distance(a: Configuration, b: Configuration, spec: GroundMetricSpec | None = None) -> float:
    """Matching distance: sqrt of the optimal perfect-matching cost under d0.

    Returns ``inf`` when the configurations have different cardinalities, since
    no coupling with the required marginals exists.
    """
    spec = spec or GroundMetricSpec("d2")
    if spec.kind != "d2":
        raise ValueError("d2_distance requires a GroundMetricSpec of kind 'd2'")
    if len(a) != len(b):
        return math.inf
    if len(a) == 0:
        return 0.0
    cost = ground_cost(a.points, b.points, spec.d0_truncation)
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(float(cost[rows, cols].sum()))


def d2_bruteforce(a: Configuration, b: Configuration, truncation: float = 1.0) -> float:
    """Reference d2 by enumerating all matchings (small inputs only)."""
    if len(a) != len(b):
        return math.inf
    cost = ground_cost(a.points, b.points, truncation) if len(a) else np.zeros((0, 0))
    n = len(a)
    best = min((sum(cost[i, p[i]] for i in range(n)) for p in permutations(range(n))),
               default=0.0)
    return math.sqrt(best)


def rademacher_constant(kind: str = "d1") -> float:
    """Distance between ``eta + eps_s`` and ``eta`` under d1.

    A d1-Lipschitz-1 functional has add-one-point gradient bounded by this value.
    """
    if kind != "d1":
        raise ValueError("only defined for d1")
    return d1_distance(Configuration([0.0]), Configuration(dim=1))
