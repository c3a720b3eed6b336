"""Dual (backward) machinery for the linearised coagulation dynamics.

The time-dependent operator acting on observables is

    (Lam_s f)(x) = sum_y { f(x+y) - f(x) - f(y) } K(x, y) mu_s(y),

the adjoint of the one-sided bilinear form: (Lam_s f, rho) = (f, K(mu_s, rho)).
Backward solves of df/ds = -Lam_s f define the two-parameter propagator
U_{s,t} (U_{t,t} = Id, cocycle law U_{s,t} U_{t,r} = U_{s,r}), which yields
the sensitivity through a single backward pass and a time quadrature:

    (f, sigma_t^m) = (1/2) int_0^t (Lam^d_s U_{s,t} f, mu_s) ds.

Splitting Lam = J - M with J f = L f - tau f exposes the integrable part
(tau is the total interaction rate), giving the variation-of-constants form

    f_s = e^{T_s - T_t} f_t + int_s^t e^{T_s - T_r} L_r f_r dr,

solved here by Picard iteration; the full propagator is then the alternating
perturbation series in M.  All dual solves run on the trajectory checkpoint
grid with fixed steps, so quadrature nodes coincide with stored states.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import Trajectory
from .measures import (
    BoundFunction,
    GridMeasure,
    TestFunction,
    _sum_index,
    pair,
)

__all__ = [
    "SolverFault",
    "SeriesDivergenceError",
    "DualPath",
    "SplitOperators",
    "lambda_apply",
    "lambda_partial_apply",
    "solve_backward",
    "solve_backward_duhamel",
    "representation_sensitivity",
    "propagator_cocycle_check",
    "propagator_norm_constants",
    "growth_bound_check",
]


class SolverFault(RuntimeError):
    """A dual solve left the region where its a-priori norm bound holds."""


class SeriesDivergenceError(RuntimeError):
    """The perturbation series did not converge within the iteration budget."""

    def __init__(self, msg: str, last_two: tuple[float, float]):
        super().__init__(f"{msg} (last two iterate distances: {last_two[0]:.3e}, {last_two[1]:.3e})")
        self.last_two = last_two


@dataclass(frozen=True)
class DualPath:
    """Backward-solved observable f_s = U_{s,t} f on checkpoint nodes.

    ``times`` ascend from s_lo to the anchor t; ``values[j]`` is f at
    ``times[j]`` (so ``values[-1]`` is the terminal datum).  ``norm_records``
    tracks the weighted sup norms along the solve.
    """

    anchor: float
    times: np.ndarray
    values: np.ndarray
    phi: BoundFunction
    norm_records: dict[float, np.ndarray] = field(default_factory=dict)
    series_terms: int = 0
    picard_sweeps: int = 0

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=float)
        v = np.ascontiguousarray(self.values, dtype=float)
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n_max(self) -> int:
        return self.values.shape[1]

    def initial(self) -> TestFunction:
        """f at the earliest solved time (s = s_lo)."""
        return TestFunction(self.values[0])

    def at_index(self, j: int) -> TestFunction:
        return TestFunction(self.values[j])

    def at_time(self, s: float) -> TestFunction:
        j = int(np.argmin(np.abs(self.times - s)))
        if abs(self.times[j] - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"s={s!r} is not a node of this dual path")
        return TestFunction(self.values[j])


def _apply_lambda_weights(F: np.ndarray, w: np.ndarray, fvals: np.ndarray) -> np.ndarray:
    """(Lam f)(x) for kernel table F and measure weights w."""
    n = w.shape[0]
    fext = np.concatenate([fvals, np.zeros(n)])
    fsum = fext[_sum_index(n)]
    gain = (F * fsum) @ w          # L f
    rate = F @ w                   # tau
    cross = F @ (fvals * w)        # M f
    return gain - rate * fvals - cross


def lambda_apply(f: TestFunction, mu_s: GridMeasure, kernel) -> TestFunction:
    """Apply the dual generator at a frozen measure mu_s."""
    if f.n_max != mu_s.n_max:
        raise ValueError("grid mismatch between f and mu_s")
    return TestFunction(_apply_lambda_weights(kernel.matrix(mu_s.n_max), mu_s.weights, f.values))


def lambda_partial_apply(f: TestFunction, mu_s: GridMeasure, kernel, m: int) -> TestFunction:
    """Same as :func:`lambda_apply` with the m-th kernel gradient table."""
    if f.n_max != mu_s.n_max:
        raise ValueError("grid mismatch between f and mu_s")
    return TestFunction(
        _apply_lambda_weights(kernel.grad_matrix(mu_s.n_max)[m], mu_s.weights, f.values)
    )


@dataclass(frozen=True)
class SplitOperators:
    """J/L/M/tau split of the dual generator at one checkpoint time.

    tau(x) is the total interaction rate, L shifts the observable to the
    merged mass, M is the partner-mass coupling and J = L - tau.  The
    accumulated profile T(x) = int_0^s tau_r(x) dr is built by trapezoid
    quadrature over the checkpoints up to s.
    """

    kernel_table: np.ndarray
    weights: np.ndarray
    tau: TestFunction
    T_profile: TestFunction

    @classmethod
    def at_time(cls, traj: Trajectory, kernel, s: float) -> "SplitOperators":
        j = traj.index_of(s)
        K = kernel.matrix(traj.n_max)
        W = traj.weights_array()
        taus = W @ K.T  # tau_r(x) = sum_y K(x,y) w_r(y), rows r
        Tprof = np.zeros(traj.n_max)
        if j > 0:
            dt = traj.dt_checkpoint
            Tprof = dt * (np.sum(taus[1:j], axis=0) + 0.5 * (taus[0] + taus[j]))
        return cls(K, W[j].copy(), TestFunction(taus[j]), TestFunction(Tprof))

    def l_apply(self, f: TestFunction) -> TestFunction:
        n = self.weights.shape[0]
        fext = np.concatenate([f.values, np.zeros(n)])
        return TestFunction((self.kernel_table * fext[_sum_index(n)]) @ self.weights)

    def m_apply(self, f: TestFunction) -> TestFunction:
        return TestFunction(self.kernel_table @ (f.values * self.weights))

    def j_apply(self, f: TestFunction) -> TestFunction:
        return TestFunction(self.l_apply(f).values - self.tau.values * f.values)


# -- fixed-step backward solve ------------------------------------------------

def _midpoint_weights(W: np.ndarray) -> np.ndarray:
    """Half-node values of the checkpoint rows by 4-point cubic stencils.

    Linear interpolation would cap the dual solve at O(dt^2); the cubic
    stencil keeps the full RK4 order while still using only stored
    checkpoints.  Needs at least 4 checkpoints.
    """
    N = W.shape[0]
    if N < 4:
        raise ValueError("backward solves need at least 4 trajectory checkpoints")
    mid = np.empty((N - 1,) + W.shape[1:])
    mid[1:-1] = (-W[:-3] + 9.0 * W[1:-2] + 9.0 * W[2:-1] - W[3:]) / 16.0
    mid[0] = (5.0 * W[0] + 15.0 * W[1] - 5.0 * W[2] + W[3]) / 16.0
    mid[-1] = (W[-4] - 5.0 * W[-3] + 15.0 * W[-2] + 5.0 * W[-1]) / 16.0
    return mid


def _norm_records(values: np.ndarray, phi_grid: np.ndarray) -> dict[float, np.ndarray]:
    sup0 = np.max(np.abs(values), axis=1)
    sup1 = np.max(np.abs(values) / phi_grid, axis=1)
    return {0.0: sup0, 1.0: sup1}


def solve_backward(
    f_t: TestFunction,
    traj: Trajectory,
    kernel,
    s_lo: float,
    *,
    t: float | None = None,
) -> DualPath:
    """Integrate df/ds = -Lam_s f from the anchor t down to s_lo.

    Fixed classical RK4 steps over each checkpoint interval; stage values of
    mu at half-nodes come from the cubic stencil.  The sup norm is watched
    against ten times the a-priori bound exp(3 M |mu_0| (t-s)) ||f_t||, where
    M is the grid maximum of the kernel; exceeding it is a solver fault.
    """
    t = traj.t1 if t is None else float(t)
    i_t = traj.index_of(t)
    i_lo = traj.index_of(s_lo)
    if i_lo > i_t:
        raise ValueError("s_lo must be <= t")
    if f_t.n_max != traj.n_max:
        raise ValueError("grid mismatch between f_t and trajectory")

    K = kernel.matrix(traj.n_max)
    W = traj.weights_array()
    dt = traj.dt_checkpoint
    sub_times = traj.times[i_lo : i_t + 1]

    if i_lo == i_t:
        vals = f_t.values[None, :]
        return DualPath(t, sub_times, vals, kernel.phi,
                        _norm_records(vals, kernel.phi.on_grid(traj.n_max)))

    mids = _midpoint_weights(W)
    M_bound = float(np.max(K))
    m0 = traj.measures[0].total_number
    f_sup = float(np.max(np.abs(f_t.values)))

    vals = np.empty((i_t - i_lo + 1, traj.n_max))
    vals[-1] = f_t.values
    f = f_t.values.copy()
    for i in range(i_t, i_lo, -1):
        h = -dt
        k1 = -_apply_lambda_weights(K, W[i], f)
        k2 = -_apply_lambda_weights(K, mids[i - 1], f + 0.5 * h * k1)
        k3 = -_apply_lambda_weights(K, mids[i - 1], f + 0.5 * h * k2)
        k4 = -_apply_lambda_weights(K, W[i - 1], f + h * k3)
        f = f + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        vals[i - 1 - i_lo] = f
        bound = np.exp(3.0 * M_bound * m0 * (t - traj.times[i - 1])) * f_sup
        if float(np.max(np.abs(f))) > 10.0 * bound:
            raise SolverFault(
                f"backward sup norm {float(np.max(np.abs(f))):.3e} exceeds 10x the "
                f"a-priori bound {bound:.3e} at s={traj.times[i - 1]:.6g}"
            )
    return DualPath(
        t, sub_times, vals, kernel.phi, _norm_records(vals, kernel.phi.on_grid(traj.n_max))
    )


# -- Duhamel / perturbation-series solve --------------------------------------

class _DuhamelWorkspace:
    """Checkpoint-grid tables shared by the Picard sweeps."""

    def __init__(self, traj: Trajectory, kernel, i_lo: int, i_t: int):
        n = traj.n_max
        self.n = n
        self.K = kernel.matrix(n)
        self.W = traj.weights_array()[i_lo : i_t + 1]
        self.dt = traj.dt_checkpoint
        self.Np = self.W.shape[0]
        self.tau = self.W @ self.K.T
        # Accumulated rate integral on the sub-grid (only differences enter).
        self.T = np.zeros_like(self.tau)
        if self.Np > 1:
            mid = 0.5 * (self.tau[:-1] + self.tau[1:]) * self.dt
            self.T[1:] = np.cumsum(mid, axis=0)
        self.sum_idx = _sum_index(n)

    def l_sweep(self, g: np.ndarray) -> np.ndarray:
        """Row-wise L_r g_r over the whole path, shape (Np, n)."""
        gext = np.concatenate([g, np.zeros_like(g)], axis=1)
        gsum = gext[np.arange(self.Np)[:, None, None], self.sum_idx[None, :, :]]
        return np.einsum("jxy,xy,jy->jx", gsum, self.K, self.W)

    def m_sweep(self, g: np.ndarray) -> np.ndarray:
        """Row-wise M_r g_r over the whole path."""
        return (g * self.W) @ self.K.T

    def hnorm(self, rows: np.ndarray, phi_grid: np.ndarray) -> float:
        return float(np.max(np.abs(rows) / phi_grid))


def _duhamel_fixed_point(
    ws: _DuhamelWorkspace,
    terminal: np.ndarray | None,
    source: np.ndarray | None,
    phi_grid: np.ndarray,
    tol: float,
    max_iters: int,
) -> tuple[np.ndarray, int]:
    """Picard-solve g_s = e^{T_s - T_t} g_t + int_s^t e^{T_s - T_r} (L g + src) dr.

    The time integral is the composite trapezoid rule realised as a backward
    recursion, so the accumulated-rate exponentials are treated exactly.
    Returns the path and the number of sweeps taken.
    """
    Np, n = ws.Np, ws.n
    base = np.zeros((Np, n))
    if terminal is not None:
        base = np.exp(ws.T - ws.T[-1]) * terminal[None, :]
    g = base.copy()
    if Np == 1:
        return g, 0
    decay = np.exp(ws.T[:-1] - ws.T[1:])  # e^{T_j - T_{j+1}} rowwise, <= 1
    last = (np.inf, np.inf)
    for sweep in range(1, max_iters + 1):
        integrand = ws.l_sweep(g)
        if source is not None:
            integrand = integrand + source
        new = base.copy()
        acc = np.zeros(n)
        for j in range(Np - 2, -1, -1):
            acc = decay[j] * acc + 0.5 * ws.dt * (integrand[j] + decay[j] * integrand[j + 1])
            new[j] += acc
        dist = ws.hnorm(new - g, phi_grid)
        g = new
        last = (last[1], dist)
        if dist < tol:
            return g, sweep
    raise SeriesDivergenceError("Picard iteration stalled", (last[0], last[1]))


def solve_backward_duhamel(
    f_t: TestFunction,
    traj: Trajectory,
    kernel,
    s_lo: float,
    max_iters: int = 60,
    series_tol: float = 1e-10,
    *,
    t: float | None = None,
) -> DualPath:
    """Backward solve via the variation-of-constants integral equation.

    First Picard-solves the rate-split propagator (the J = L - tau part),
    then sums the alternating perturbation series in the coupling M term,
    stopping once a series term falls below ``series_tol`` in the phi-weighted
    sup norm.  Non-convergence raises :class:`SeriesDivergenceError` carrying
    the last two iterate distances.
    """
    t = traj.t1 if t is None else float(t)
    i_t = traj.index_of(t)
    i_lo = traj.index_of(s_lo)
    if i_lo > i_t:
        raise ValueError("s_lo must be <= t")
    if f_t.n_max != traj.n_max:
        raise ValueError("grid mismatch between f_t and trajectory")

    phi_grid = kernel.phi.on_grid(traj.n_max)
    ws = _DuhamelWorkspace(traj, kernel, i_lo, i_t)
    scale = max(1.0, float(np.max(np.abs(f_t.values) / phi_grid)))
    tol = series_tol * scale

    sweeps = 0
    term, used = _duhamel_fixed_point(ws, f_t.values, None, phi_grid, 0.1 * tol, max_iters)
    sweeps += used
    total = term.copy()
    n_terms = 1
    prev_size = ws.hnorm(term, phi_grid)
    while True:
        size = ws.hnorm(term, phi_grid)
        if size < tol or ws.Np == 1:
            break
        if n_terms >= max_iters:
            raise SeriesDivergenceError(
                f"perturbation series not converged after {n_terms} terms",
                (prev_size, size),
            )
        src = ws.m_sweep(term)
        nxt, used = _duhamel_fixed_point(ws, None, src, phi_grid, 0.1 * tol, max_iters)
        sweeps += used
        term = -nxt
        total += term
        n_terms += 1
        prev_size = size

    return DualPath(
        t,
        traj.times[i_lo : i_t + 1],
        total,
        kernel.phi,
        _norm_records(total, phi_grid),
        series_terms=n_terms,
        picard_sweeps=sweeps,
    )


def representation_sensitivity(
    f: TestFunction, traj: Trajectory, kernel, m: int, t: float
) -> float:
    """Sensitivity pairing (f, sigma_t^m) from one backward pass.

    Computes f_s = U_{s,t} f on every checkpoint in [0, t] and accumulates
    the composite-trapezoid quadrature of (1/2) (Lam^d_s f_s, mu_s).
    """
    i_t = traj.index_of(t)
    if i_t == 0:
        return 0.0
    path = solve_backward(f, traj, kernel, traj.t0, t=t)
    G = kernel.grad_matrix(traj.n_max)[m]
    W = traj.weights_array()[: i_t + 1]
    vals = np.array(
        [
            np.dot(_apply_lambda_weights(G, W[j], path.values[j]), W[j])
            for j in range(i_t + 1)
        ]
    )
    return 0.5 * float(np.trapz(vals, dx=traj.dt_checkpoint))


def propagator_cocycle_check(
    traj: Trajectory, kernel, s: float, t: float, r: float, f: TestFunction
) -> float:
    """Max-abs residual of U_{s,t}(U_{t,r} f) against U_{s,r} f."""
    if not (s <= t <= r):
        raise ValueError("need s <= t <= r")
    inner = solve_backward(f, traj, kernel, t, t=r)
    two_leg = solve_backward(inner.initial(), traj, kernel, s, t=t)
    direct = solve_backward(f, traj, kernel, s, t=r)
    return float(np.max(np.abs(two_leg.initial().values - direct.initial().values)))


# -- norm-bound diagnostics ----------------------------------------------------

def propagator_norm_constants(
    traj: Trajectory, kernel, h_values: np.ndarray, s_lo: float = None, t: float = None
) -> tuple[float, float]:
    """Grid constants (c, sup_r ||M_r||_h) for the series norm bound.

    ``c`` is the smallest constant with J_s h <= c h over the checkpoints,
    and the M norm is its operator norm on the h-weighted sup space (attained
    at M h / h since M has a non-negative kernel).  The dual solve norm is
    then bounded by exp((c + sup ||M_r||_h) (t - s)).
    """
    i_lo = 0 if s_lo is None else traj.index_of(s_lo)
    i_t = len(traj.measures) - 1 if t is None else traj.index_of(t)
    ws = _DuhamelWorkspace(traj, kernel, i_lo, i_t)
    h = np.asarray(h_values, dtype=float)
    hrow = np.broadcast_to(h, ws.W.shape)
    Lh = ws.l_sweep(hrow.copy())
    Jh = Lh - ws.tau * h[None, :]
    c = float(np.max(Jh / h[None, :]))
    Mh = ws.m_sweep(hrow.copy())
    m_norm = float(np.max(Mh / h[None, :]))
    return max(c, 0.0), m_norm


def growth_bound_check(
    path: DualPath, traj: Trajectory, kernel, p: float
) -> float:
    """Largest measured/bound ratio for the phi^p-weighted norm along a path.

    The bound is exp((c + sup ||M_r||_h)(t - s)) ||f_t||_h with h = phi^p and
    the constants of :func:`propagator_norm_constants`; a return value <= 1
    means the growth bound held at every checkpoint.
    """
    h = kernel.phi.on_grid(traj.n_max) ** p
    c, m_norm = propagator_norm_constants(traj, kernel, h, path.times[0], path.anchor)
    norms = np.max(np.abs(path.values) / h[None, :], axis=1)
    terminal = norms[-1]
    bounds = np.exp((c + m_norm) * (path.anchor - path.times)) * terminal
    return float(np.max(norms / np.maximum(bounds, 1e-300)))
