"""Forward integration of the coagulation dynamics on the mass grid.

The strong form is the measure-valued ODE ``d/dt mu = (1/2) K(mu, mu)`` with
``K(.,.)`` the bilinear coagulation form.  The state vector carries the grid
weights together with the two overflow meters, so both linear conservation
laws (mass including overflow is constant, total number decreases) are
preserved by the Runge-Kutta steps up to roundoff.

Solves are checkpointed on a uniform time grid; between checkpoints the
trajectory interpolates linearly in t.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._ode import IntegratorStats, integrate_ode
from .measures import BoundFunction, GridMeasure, TestFunction, pair

__all__ = [
    "BlowUpError",
    "NegativityError",
    "SolveOptions",
    "Trajectory",
    "MomentsTable",
    "rhs",
    "solve_forward",
    "moments_report",
    "integrate_ode",
]


class BlowUpError(RuntimeError):
    """Moment or overflow guard tripped: the run approached gelation.

    Carries the hit time in ``t_hit`` and the offending diagnostic.
    """

    def __init__(self, t_hit: float, reason: str):
        super().__init__(f"blow-up guard hit at t={t_hit:.6g}: {reason}")
        self.t_hit = t_hit
        self.reason = reason


class NegativityError(RuntimeError):
    """A weight dropped below -10*abs_tol: integration fault, not roundoff."""


@dataclass(frozen=True)
class SolveOptions:
    """Tolerances and guards for forward/coupled solves.

    ``epsilon`` fixes the monitored tail moment (phi^(4+epsilon), mu_t);
    ``moment_ceiling`` and ``overflow_fraction_max`` are the blow-up guards
    (the overflow fraction is overflow_number relative to the initial total
    number).  ``max_step`` optionally forces an upper step bound, which makes
    the integrator's convergence order directly observable.
    """

    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    dt_checkpoint: float = 1.0 / 128.0
    moment_ceiling: float = 1e12
    overflow_fraction_max: float = 1e-9
    epsilon: float = 0.5
    max_step: float | None = None

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.dt_checkpoint <= 0:
            raise ValueError("tolerances and dt_checkpoint must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class Trajectory:
    """Checkpointed solution path on a uniform time grid.

    ``times[0] = t0``, ``times[-1] = t1``; measures are non-negative (after
    roundoff clamping) and share one grid.  ``at(t)`` interpolates weights
    and overflow meters linearly between checkpoints.
    """

    times: np.ndarray
    measures: tuple[GridMeasure, ...]
    stats: IntegratorStats

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "measures", tuple(self.measures))
        if len(self.measures) != t.shape[0] or t.shape[0] < 2:
            raise ValueError("need one measure per checkpoint time (>= 2)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("checkpoint times must be strictly increasing")

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    @property
    def dt_checkpoint(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_max(self) -> int:
        return self.measures[0].n_max

    @property
    def checkpoints(self):
        return tuple(zip(self.times.tolist(), self.measures))

    def weights_array(self) -> np.ndarray:
        """Stacked checkpoint weights, shape (n_checkpoints, n_max)."""
        return np.stack([m.weights for m in self.measures])

    def index_of(self, t: float) -> int:
        """Index of the checkpoint at time t (must match a node)."""
        i = int(round((t - self.t0) / self.dt_checkpoint))
        if i < 0 or i >= len(self.measures) or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t!r} is not a checkpoint time")
        return i

    def at(self, t: float) -> GridMeasure:
        """Piecewise-linear interpolation between checkpoints."""
        if t < self.t0 - 1e-12 or t > self.t1 + 1e-12:
            raise ValueError(f"t={t!r} outside [{self.t0}, {self.t1}]")
        x = (t - self.t0) / self.dt_checkpoint
        i = min(int(np.floor(x)), len(self.measures) - 2)
        i = max(i, 0)
        a = x - i
        lo, hi = self.measures[i], self.measures[i + 1]
        return GridMeasure(
            lo.n_max,
            (1 - a) * lo.weights + a * hi.weights,
            (1 - a) * lo.overflow_mass + a * hi.overflow_mass,
            (1 - a) * lo.overflow_number + a * hi.overflow_number,
        )


def _checkpoint_times(t0: float, t1: float, dt: float) -> np.ndarray:
    n = max(1, int(round((t1 - t0) / dt)))
    return np.linspace(t0, t1, n + 1)


def rhs(mu: GridMeasure, kernel) -> GridMeasure:
    """Coagulation vector field (1/2) K(mu, mu) at the kernel's parameter."""
    from .measures import coag_apply

    return 0.5 * coag_apply(kernel.matrix(mu.n_max), mu, mu)


def _pack(mu: GridMeasure) -> np.ndarray:
    return np.concatenate([mu.weights, [mu.overflow_mass, mu.overflow_number]])


def _unpack(n: int, y: np.ndarray) -> GridMeasure:
    return GridMeasure(n, y[:n], y[n], y[n + 1])


def _clamp_measure(mu: GridMeasure, t: float, abs_tol: float) -> GridMeasure:
    w = mu.weights
    neg = w < 0
    if not np.any(neg):
        return mu
    worst = float(w.min())
    if worst < -10.0 * abs_tol:
        k = int(np.argmin(w)) + 1
        raise NegativityError(
            f"weight at mass {k} reached {worst:.3e} < -10*abs_tol at t={t:.6g}"
        )
    w = w.copy()
    w[neg] = 0.0
    return GridMeasure(mu.n_max, w, mu.overflow_mass, mu.overflow_number)


class _Guard:
    """Blow-up watchdog evaluated at every accepted step."""

    def __init__(self, n: int, phi_pow: np.ndarray, opts: SolveOptions, number0: float):
        self.n = n
        self.phi_pow = phi_pow
        self.opts = opts
        self.number0 = max(number0, 1e-300)

    def __call__(self, t: float, y: np.ndarray) -> None:
        moment = float(np.dot(self.phi_pow, y[: self.n]))
        if moment > self.opts.moment_ceiling:
            raise BlowUpError(t, f"(phi^(4+eps), mu) = {moment:.3e} > ceiling")
        frac = y[self.n + 1] / self.number0
        if frac > self.opts.overflow_fraction_max:
            raise BlowUpError(t, f"overflow number fraction {frac:.3e} > max")
        if float(np.min(y[: self.n])) < -10.0 * self.opts.abs_tol:
            k = int(np.argmin(y[: self.n])) + 1
            raise NegativityError(
                f"weight at mass {k} reached {float(np.min(y[:self.n])):.3e} at t={t:.6g}"
            )


def solve_forward(
    mu0: GridMeasure, kernel, T: float, opts: SolveOptions | None = None
) -> Trajectory:
    """Integrate the coagulation ODE from mu0 over [0, T].

    Checkpoints are written every ``opts.dt_checkpoint``.  Tiny negative
    checkpoint weights (roundoff) are clamped to zero; anything below
    ``-10 * abs_tol`` raises :class:`NegativityError`.  The moment and
    overflow guards raise :class:`BlowUpError` with the hit time.
    """
    opts = opts or SolveOptions()
    if T <= 0:
        raise ValueError("T must be > 0")
    if np.any(mu0.weights < 0):
        raise ValueError("initial measure must be non-negative")
    if mu0.n_max != kernel.n_max:
        raise ValueError("measure and kernel grids differ")
    n = mu0.n_max
    K = kernel.matrix(n)
    times = _checkpoint_times(0.0, T, opts.dt_checkpoint)

    from .measures import coag_apply

    def vf(t: float, y: np.ndarray) -> np.ndarray:
        d = 0.5 * coag_apply(K, GridMeasure(n, y[:n]), GridMeasure(n, y[:n]))
        return _pack(d)

    guard = _Guard(n, kernel.phi.on_grid(n) ** (4.0 + opts.epsilon), opts, mu0.total_number)
    stats = IntegratorStats()
    states = integrate_ode(
        _pack(mu0),
        vf,
        0.0,
        T,
        rel_tol=opts.rel_tol,
        abs_tol=opts.abs_tol,
        max_step=opts.max_step,
        checkpoints=times,
        observer=guard,
        stats=stats,
    )
    measures = [
        _clamp_measure(_unpack(n, y), float(t), opts.abs_tol)
        for t, y in zip(times, states)
    ]
    return Trajectory(times, measures, stats)


@dataclass(frozen=True)
class MomentsTable:
    """Weighted moments (phi^p, mu_t) per checkpoint and their running max."""

    times: np.ndarray
    powers: tuple[float, ...]
    values: np.ndarray  # shape (len(powers), len(times))

    @property
    def running_max(self) -> np.ndarray:
        return np.maximum.accumulate(self.values, axis=1)

    def series(self, p: float) -> np.ndarray:
        return self.values[self.powers.index(p)]

    def ceiling_estimate(self, p: float) -> float:
        """Observed sup over checkpoints, the empirical moment bound."""
        return float(np.max(self.series(p)))


def moments_report(traj: Trajectory, phi: BoundFunction, powers) -> MomentsTable:
    """Tabulate (phi^p, mu_t) along the trajectory for each power p."""
    powers = tuple(float(p) for p in powers)
    if any(p < 0 or p > 8 for p in powers):
        raise ValueError("moment powers must lie in [0, 8]")
    grid = phi.on_grid(traj.n_max)
    W = traj.weights_array()
    vals = np.stack([W @ (grid**p) for p in powers])
    return MomentsTable(traj.times, powers, vals)
