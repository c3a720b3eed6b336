"""Coupled integration of the parameter-sensitivity equation.

Differentiating the coagulation ODE in the kernel parameter gives, per
component m, the non-autonomous affine equation

    d/dt sigma = K(mu_t, sigma) + (1/2) dK/dlam_m (mu_t, mu_t),

with sigma(0) = 0 when the initial condition does not depend on the
parameter.  All components are integrated jointly with the forward equation
under one adaptive step controller, so no interpolation of mu enters the
sensitivity right-hand side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._ode import IntegratorStats, integrate_ode
from .forward import SolveOptions, Trajectory, _checkpoint_times, _clamp_measure
from .measures import GridMeasure, coag_apply

__all__ = ["SensitivityBlock", "SensitivityPath", "sensitivity_rhs", "solve_coupled"]


@dataclass(frozen=True)
class SensitivityBlock:
    """Per-parameter family of signed measures at one time point."""

    components: tuple[GridMeasure, ...]

    @property
    def param_dim(self) -> int:
        return len(self.components)

    def component(self, m: int) -> GridMeasure:
        return self.components[m]


@dataclass(frozen=True)
class SensitivityPath:
    """Checkpointed sensitivity blocks sharing the forward trajectory."""

    times: np.ndarray
    blocks: tuple[SensitivityBlock, ...]
    trajectory: Trajectory

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def param_dim(self) -> int:
        return self.blocks[0].param_dim

    def index_of(self, t: float) -> int:
        return self.trajectory.index_of(t)

    def at(self, t: float) -> SensitivityBlock:
        return self.blocks[self.index_of(t)]

    def component_path(self, m: int) -> list[GridMeasure]:
        return [b.components[m] for b in self.blocks]


def sensitivity_rhs(
    mu: GridMeasure, sigma: GridMeasure, kernel, m: int
) -> GridMeasure:
    """Right-hand side K(mu, sigma) + (1/2) dK_m(mu, mu) for one component.

    Overflow is metered exactly as in the bilinear form, so differentiated
    mass balance still closes: pair(x, .) plus the overflow-mass increment
    vanishes.
    """
    n = mu.n_max
    K = kernel.matrix(n)
    G = kernel.grad_matrix(n)[m]
    return coag_apply(K, mu, sigma) + 0.5 * coag_apply(G, mu, mu)


def solve_coupled(
    mu0: GridMeasure,
    kernel,
    T: float,
    opts: SolveOptions | None = None,
    *,
    sigma0: SensitivityBlock | None = None,
) -> tuple[Trajectory, SensitivityPath]:
    """Jointly integrate the forward measure and all p sensitivity components.

    ``sigma0`` defaults to zero (parameter-independent initial condition);
    a nonzero block is accepted to probe the Gronwall stability of the
    affine equation.  The adaptive error norm runs over the concatenated
    (mu, sigma_1..p) state.
    """
    from .forward import _Guard

    opts = opts or SolveOptions()
    if T <= 0:
        raise ValueError("T must be > 0")
    if np.any(mu0.weights < 0):
        raise ValueError("initial measure must be non-negative")
    if mu0.n_max != kernel.n_max:
        raise ValueError("measure and kernel grids differ")
    n = mu0.n_max
    p = kernel.param_dim
    K = kernel.matrix(n)
    G = kernel.grad_matrix(n)
    block = n + 2

    y0 = np.zeros((1 + p) * block)
    y0[:n] = mu0.weights
    y0[n] = mu0.overflow_mass
    y0[n + 1] = mu0.overflow_number
    if sigma0 is not None:
        if sigma0.param_dim != p:
            raise ValueError("sigma0 has wrong parameter dimension")
        for m in range(p):
            s = sigma0.components[m]
            y0[(1 + m) * block : (1 + m) * block + n] = s.weights
            y0[(1 + m) * block + n] = s.overflow_mass
            y0[(1 + m) * block + n + 1] = s.overflow_number

    def vf(t: float, y: np.ndarray) -> np.ndarray:
        mu = GridMeasure(n, y[:n])
        dmu = 0.5 * coag_apply(K, mu, mu)
        out = np.empty_like(y)
        out[:n] = dmu.weights
        out[n] = dmu.overflow_mass
        out[n + 1] = dmu.overflow_number
        for m in range(p):
            lo = (1 + m) * block
            sig = GridMeasure(n, y[lo : lo + n])
            d = coag_apply(K, mu, sig) + 0.5 * coag_apply(G[m], mu, mu)
            out[lo : lo + n] = d.weights
            out[lo + n] = d.overflow_mass
            out[lo + n + 1] = d.overflow_number
        return out

    guard = _Guard(n, kernel.phi.on_grid(n) ** (4.0 + opts.epsilon), opts, mu0.total_number)
    stats = IntegratorStats()
    times = _checkpoint_times(0.0, T, opts.dt_checkpoint)
    states = integrate_ode(
        y0,
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
    measures = []
    blocks = []
    for t, y in zip(times, states):
        mu = _clamp_measure(GridMeasure(n, y[:n], y[n], y[n + 1]), float(t), opts.abs_tol)
        measures.append(mu)
        comps = []
        for m in range(p):
            lo = (1 + m) * block
            comps.append(GridMeasure(n, y[lo : lo + n], y[lo + n], y[lo + n + 1]))
        blocks.append(SensitivityBlock(tuple(comps)))
    traj = Trajectory(times, measures, stats)
    return traj, SensitivityPath(times, blocks, traj)
