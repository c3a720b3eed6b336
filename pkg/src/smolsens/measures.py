"""Signed measures on a finite integer mass grid.

Masses live on the grid ``1..n_max``; a measure is a weight vector plus two
overflow meters that account for coagulation gains whose product mass lands
above the grid.  Because the grid is integer, the pair sum ``x + y`` is exact
and the bilinear coagulation form incurs no binning error; truncation error is
metered in the overflow fields instead of being silently dropped.

All types are immutable after construction and every operation is a pure
function, so concurrent reads need no synchronisation.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DimensionError",
    "BoundFunction",
    "TestFunction",
    "GridMeasure",
    "pair",
    "curly",
    "coag_apply",
    "norm_p",
    "sign_density",
    "write_measure_csv",
    "read_measure_csv",
]


class DimensionError(ValueError):
    """Two grid objects with different ``n_max`` were combined."""


def _check_same_grid(a, b) -> int:
    if a.n_max != b.n_max:
        raise DimensionError(f"grid size mismatch: {a.n_max} != {b.n_max}")
    return a.n_max


# Cache of pair-sum index tables, keyed by n_max.  For 0-based indices (a, b)
# the merged mass is a + b + 2, i.e. flat slot a + b + 1 in a 2*n array.
_SUM_IDX_CACHE: dict[int, np.ndarray] = {}


def _sum_index(n_max: int) -> np.ndarray:
    idx = _SUM_IDX_CACHE.get(n_max)
    if idx is None:
        a = np.arange(n_max)
        idx = a[:, None] + a[None, :] + 1
        idx.setflags(write=False)
        _SUM_IDX_CACHE[n_max] = idx
    return idx


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BoundFunction:
    """Sub-additive weight function phi >= 1 used to dominate kernels.

    ``phi`` defines the weighted measure norms ``norm_p`` and the weighted
    function norms of :class:`TestFunction`.  The default family is the
    affine ``scale * (1 + x)``, which is sub-additive and >= 1 for
    ``scale >= 1``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    label: str = "phi"

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def on_grid(self, n_max: int) -> np.ndarray:
        """phi evaluated at masses 1..n_max."""
        vals = self(np.arange(1, n_max + 1, dtype=float))
        if vals.shape != (n_max,):
            raise ValueError("bound function must be vectorised over masses")
        return vals

    @classmethod
    def affine(cls, scale: float = 1.0) -> "BoundFunction":
        if scale < 1.0:
            raise ValueError("phi scale must be >= 1")
        s = float(scale)
        return cls(fn=lambda x: s * (1.0 + x), label=f"{s:g}*(1+x)")

    def check_grid_hypotheses(self, n_max: int) -> None:
        """Raise if phi < 1 somewhere or sub-additivity fails on the grid.

        Sub-additivity phi(x+y) <= phi(x) + phi(y) is scanned exhaustively
        over pairs with x + y <= n_max.
        """
        vals = self.on_grid(n_max)
        if np.any(vals < 1.0):
            k = int(np.argmax(vals < 1.0)) + 1
            raise ValueError(f"phi({k}) = {vals[k - 1]:g} < 1")
        idx = _sum_index(n_max)
        on_grid = idx < n_max
        lhs = vals[idx[on_grid]]
        rhs = vals[np.nonzero(on_grid)[0]] + vals[np.nonzero(on_grid)[1]]
        if np.any(lhs > rhs):
            flat = np.nonzero((lhs > rhs))[0][0]
            xi, yi = np.nonzero(on_grid)
            raise ValueError(
                f"phi not sub-additive at (x, y) = ({xi[flat] + 1}, {yi[flat] + 1})"
            )


@dataclass(frozen=True)
class TestFunction:
    """A real-valued observable on the mass grid (f evaluated at 1..n_max)."""

    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(np.atleast_1d(self.values))
        if vals.ndim != 1:
            raise ValueError("test function values must be a 1-d array")
        if not np.all(np.isfinite(vals)):
            raise ValueError("test function values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n_max(self) -> int:
        return self.values.shape[0]

    def norm_p(self, p: float, phi: BoundFunction) -> float:
        """Weighted sup norm max_k |f(k)| / phi(k)^p."""
        return float(np.max(np.abs(self.values) / phi.on_grid(self.n_max) ** p))

    def __mul__(self, other: "TestFunction | float") -> "TestFunction":
        if isinstance(other, TestFunction):
            _check_same_grid(self, other)
            return TestFunction(self.values * other.values)
        return TestFunction(self.values * float(other))

    __rmul__ = __mul__

    @classmethod
    def from_callable(cls, fn, n_max: int) -> "TestFunction":
        return cls(np.asarray(fn(np.arange(1, n_max + 1, dtype=float)), dtype=float))

    @classmethod
    def ones(cls, n_max: int) -> "TestFunction":
        return cls(np.ones(n_max))

    @classmethod
    def identity(cls, n_max: int) -> "TestFunction":
        """f(x) = x on the grid (implicitly truncated above n_max)."""
        return cls(np.arange(1, n_max + 1, dtype=float))

    @classmethod
    def indicator(cls, mass: int, n_max: int) -> "TestFunction":
        v = np.zeros(n_max)
        if not 1 <= mass <= n_max:
            raise ValueError(f"indicator mass {mass} outside grid 1..{n_max}")
        v[mass - 1] = 1.0
        return cls(v)

    @classmethod
    def phi_power(cls, phi: BoundFunction, p: float, n_max: int) -> "TestFunction":
        return cls(phi.on_grid(n_max) ** p)


@dataclass(frozen=True)
class GridMeasure:
    """Signed measure on masses 1..n_max with overflow meters.

    ``weights[k-1]`` is the weight at mass ``k``.  ``overflow_mass`` and
    ``overflow_number`` meter the total mass and total weight that left the
    grid through coagulation gains above ``n_max``.  They are non-negative
    and non-decreasing along a forward solve; for sensitivity and difference
    measures they are signed like the weights themselves.
    """

    n_max: int
    weights: np.ndarray
    overflow_mass: float = 0.0
    overflow_number: float = 0.0

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.shape != (self.n_max,):
            raise DimensionError(
                f"weights shape {w.shape} does not match n_max={self.n_max}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite")
        if not (np.isfinite(self.overflow_mass) and np.isfinite(self.overflow_number)):
            raise ValueError("overflow meters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "overflow_mass", float(self.overflow_mass))
        object.__setattr__(self, "overflow_number", float(self.overflow_number))

    # -- constructors -------------------------------------------------------
    @classmethod
    def zeros(cls, n_max: int) -> "GridMeasure":
        return cls(n_max, np.zeros(n_max))

    @classmethod
    def delta(cls, n_max: int, mass: int, weight: float = 1.0) -> "GridMeasure":
        if not 1 <= mass <= n_max:
            raise ValueError(f"mass {mass} outside grid 1..{n_max}")
        w = np.zeros(n_max)
        w[mass - 1] = weight
        return cls(n_max, w)

    @classmethod
    def from_dict(cls, atoms: dict[int, float], n_max: int) -> "GridMeasure":
        w = np.zeros(n_max)
        for mass, weight in atoms.items():
            if not 1 <= int(mass) <= n_max:
                raise ValueError(f"mass {mass} outside grid 1..{n_max}")
            w[int(mass) - 1] += float(weight)
        return cls(n_max, w)

    # -- arithmetic (overflow meters combine linearly) -----------------------
    def __add__(self, other: "GridMeasure") -> "GridMeasure":
        _check_same_grid(self, other)
        return GridMeasure(
            self.n_max,
            self.weights + other.weights,
            self.overflow_mass + other.overflow_mass,
            self.overflow_number + other.overflow_number,
        )

    def __sub__(self, other: "GridMeasure") -> "GridMeasure":
        _check_same_grid(self, other)
        return GridMeasure(
            self.n_max,
            self.weights - other.weights,
            self.overflow_mass - other.overflow_mass,
            self.overflow_number - other.overflow_number,
        )

    def __mul__(self, c: float) -> "GridMeasure":
        c = float(c)
        return GridMeasure(
            self.n_max, self.weights * c, self.overflow_mass * c, self.overflow_number * c
        )

    __rmul__ = __mul__

    def abs(self) -> "GridMeasure":
        return GridMeasure(
            self.n_max,
            np.abs(self.weights),
            abs(self.overflow_mass),
            abs(self.overflow_number),
        )

    @property
    def total_number(self) -> float:
        """On-grid total weight (overflow excluded)."""
        return float(np.sum(self.weights))

    @property
    def total_mass(self) -> float:
        """On-grid first moment (overflow excluded)."""
        return float(np.dot(np.arange(1, self.n_max + 1), self.weights))


def pair(f: TestFunction, mu: GridMeasure) -> float:
    """Dual pairing sum_k f(k) w_k.  Overflow buckets are not included."""
    _check_same_grid(f, mu)
    return float(np.dot(f.values, mu.weights))


def curly(f: TestFunction, x: int, y: int) -> float:
    """The coagulation increment f(x+y) - f(x) - f(y).

    Above-grid sums use the truncation convention f(x+y) := 0, matching the
    overflow routing of :func:`coag_apply`.
    """
    n = f.n_max
    if x < 1 or y < 1:
        raise ValueError("masses must be >= 1")
    if x > n or y > n:
        raise DimensionError(f"mass outside grid 1..{n}")
    merged = 0.0 if x + y > n else float(f.values[x + y - 1])
    return merged - float(f.values[x - 1]) - float(f.values[y - 1])


def coag_apply(F: np.ndarray, mu: GridMeasure, nu: GridMeasure) -> GridMeasure:
    """Bilinear coagulation form of two measures under the rate table ``F``.

    ``F`` is the kernel evaluated on the grid, shape ``(n_max, n_max)``.
    The result carries a gain ``F(i,j) mu_i nu_j`` at mass ``i+j``, a loss at
    ``i`` (from ``mu``) and a loss at ``j`` (from ``nu``).  Gains with
    ``i + j > n_max`` are routed to the overflow meters of the returned
    measure: ``overflow_mass`` gets ``(i+j) F mu_i nu_j`` and
    ``overflow_number`` gets ``F mu_i nu_j``.
    """
    n = _check_same_grid(mu, nu)
    F = np.asarray(F, dtype=float)
    if F.shape != (n, n):
        raise DimensionError(f"kernel table shape {F.shape} does not match n_max={n}")
    prod = F * np.multiply.outer(mu.weights, nu.weights)
    gains = np.bincount(_sum_index(n).ravel(), weights=prod.ravel(), minlength=2 * n)
    w = gains[:n].copy()
    w -= mu.weights * (F @ nu.weights)   # loss at i, integrated over nu
    w -= nu.weights * (mu.weights @ F)   # loss at j, integrated over mu
    over = gains[n:]
    over_number = float(np.sum(over))
    over_mass = float(np.dot(np.arange(n + 1, 2 * n + 1, dtype=float), over))
    return GridMeasure(n, w, over_mass, over_number)


def norm_p(mu: GridMeasure, p: float, phi: BoundFunction) -> float:
    """Weighted total variation sum_k phi(k)^p |w_k| (overflow excluded).

    ``p = 0`` is the plain total variation.  Since phi >= 1 the norms are
    non-decreasing in p.
    """
    if p < 0:
        raise ValueError("p must be >= 0")
    return float(np.dot(phi.on_grid(mu.n_max) ** p, np.abs(mu.weights)))


def sign_density(rho: GridMeasure) -> TestFunction:
    """Pointwise sign of the weights, with sign(0) = 0.

    Satisfies pair(f * eps, rho) == pair(f, |rho|) exactly for every f; this
    is the finite-grid sign density driving the total-variation identity.
    """
    return TestFunction(np.sign(rho.weights))


# -- CSV serialisation ------------------------------------------------------
# Format: header `mass,weight`, one row per grid mass, and a trailing comment
# line carrying the overflow meters.  Numbers are printed with 17 significant
# digits so finite doubles round-trip bit-exactly.

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_measure_csv(mu: GridMeasure, path_or_buf) -> None:
    buf = io.StringIO()
    buf.write("mass,weight\n")
    for k in range(mu.n_max):
        buf.write(f"{k + 1},{_fmt(mu.weights[k])}\n")
    buf.write(
        f"# overflow_mass={_fmt(mu.overflow_mass)} overflow_number={_fmt(mu.overflow_number)}\n"
    )
    data = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(data)


def read_measure_csv(path_or_buf) -> GridMeasure:
    if hasattr(path_or_buf, "read"):
        lines = path_or_buf.read().splitlines()
    else:
        with open(path_or_buf) as fh:
            lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "mass,weight":
        raise ValueError("not a grid measure CSV (missing mass,weight header)")
    masses: list[int] = []
    weights: list[float] = []
    overflow_mass = 0.0
    overflow_number = 0.0
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line.lstrip("# ").split():
                key, _, val = tok.partition("=")
                if key == "overflow_mass":
                    overflow_mass = float(val)
                elif key == "overflow_number":
                    overflow_number = float(val)
            continue
        m, _, w = line.partition(",")
        masses.append(int(m))
        weights.append(float(w))
    n_max = len(weights)
    if masses != list(range(1, n_max + 1)):
        raise ValueError("grid measure CSV must list masses 1..n_max in order")
    return GridMeasure(n_max, np.array(weights), overflow_mass, overflow_number)
