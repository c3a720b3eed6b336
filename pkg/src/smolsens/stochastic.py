"""Finite stochastic coalescent and coupled finite-difference sensitivity.

The particle system holds n-scaled unit-weight particles; each unordered
pair (i, j) coagulates at rate K(x_i, x_j) / n, so the normalised empirical
measure tracks the deterministic solution as n grows.  Simulation uses the
event-driven direct method: one exponential waiting time at the total rate,
then one categorical draw over pairs, consuming exactly two uniforms per
jump in a fixed order.  That fixed consumption order is what makes the
common-random-number coupling of paired runs exact: two parameter values
simulated from the same seed see identical randomness event by event.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import GridMeasure

__all__ = [
    "ParticleSystem",
    "EmpiricalTrajectory",
    "CoupledFDResult",
    "ml_run",
    "coupled_fd_sensitivity",
]


@dataclass
class ParticleSystem:
    """Multiset state of the coalescent: distinct masses with multiplicities.

    ``scale`` is the rate divisor and empirical normalisation (the requested
    system size); ``n`` records the actual initial census after rounding.
    Total mass is invariant, the particle count drops by one per jump.
    """

    masses: np.ndarray   # distinct masses, sorted ascending
    counts: np.ndarray   # positive multiplicities, same length
    scale: float
    n: int
    t: float = 0.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def from_measure(
        cls, mu0: GridMeasure, n: int, rng: np.random.Generator
    ) -> tuple["ParticleSystem", float]:
        """Round n*mu0 to an integer census; returns (system, rounding residual)."""
        if n < 2:
            raise ValueError("need n >= 2 particles")
        if np.any(mu0.weights < 0):
            raise ValueError("initial measure must be non-negative")
        counts = np.rint(n * mu0.weights).astype(np.int64)
        residual = float(np.max(np.abs(counts / n - mu0.weights)))
        keep = counts > 0
        masses = np.arange(1, mu0.n_max + 1, dtype=np.int64)[keep]
        counts = counts[keep]
        if int(counts.sum()) < 2:
            raise ValueError("initial census has fewer than 2 particles")
        return cls(masses=masses, counts=counts, scale=float(n), n=int(counts.sum()), rng=rng), residual

    @property
    def particle_count(self) -> int:
        return int(self.counts.sum())

    @property
    def total_mass(self) -> int:
        return int(np.dot(self.masses, self.counts))

    def empirical(self, n_max: int) -> GridMeasure:
        """Normalised empirical measure (1/scale) sum delta_{x_i}."""
        w = np.zeros(n_max)
        over_mass = 0.0
        over_num = 0.0
        for m, c in zip(self.masses, self.counts):
            if m <= n_max:
                w[m - 1] = c / self.scale
            else:
                over_num += c / self.scale
                over_mass += m * c / self.scale
        return GridMeasure(n_max, w, over_mass, over_num)


def _pair_weights(system: ParticleSystem, kernel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upper-triangle categorical weights K(x_i, x_j) * multiplicity over pairs."""
    m = system.masses.astype(float)
    c = system.counts.astype(float)
    K = kernel.eval(m[:, None], m[None, :])
    mult = np.multiply.outer(c, c)
    np.fill_diagonal(mult, c * (c - 1.0) / 2.0)
    iu, ju = np.triu_indices(m.shape[0])
    return K[iu, ju] * mult[iu, ju], iu, ju


def total_rate(system: ParticleSystem, kernel) -> float:
    """Total jump rate sum_{i<j} K(x_i, x_j) / scale over particle pairs."""
    w, _, _ = _pair_weights(system, kernel)
    return float(np.sum(w)) / system.scale


def _sample_event(system: ParticleSystem, kernel) -> tuple[float, int, int]:
    """Draw the next (waiting time, pair) without touching the state.

    Consumes exactly two uniforms (waiting time, pair choice) per event;
    returns (inf, -1, -1) when the system is frozen (zero total rate),
    consuming nothing.
    """
    w, iu, ju = _pair_weights(system, kernel)
    cum = np.cumsum(w)
    total = float(cum[-1]) if cum.size else 0.0
    if total <= 0.0:
        return np.inf, -1, -1
    u_wait = system.rng.random()
    u_pair = system.rng.random()
    dt = -np.log1p(-u_wait) / (total / system.scale)
    k = int(np.searchsorted(cum, u_pair * total, side="right"))
    k = min(k, cum.size - 1)
    return float(dt), int(iu[k]), int(ju[k])


def _merge(system: ParticleSystem, i: int, j: int) -> None:
    """Replace one particle of masses[i] and one of masses[j] by their sum."""
    masses = system.masses
    counts = system.counts.copy()
    merged = int(masses[i] + masses[j])
    counts[i] -= 1
    counts[j] -= 1
    keep = counts > 0
    new_masses = masses[keep]
    new_counts = counts[keep]
    pos = int(np.searchsorted(new_masses, merged))
    if pos < new_masses.shape[0] and new_masses[pos] == merged:
        new_counts = new_counts.copy()
        new_counts[pos] += 1
    else:
        new_masses = np.insert(new_masses, pos, merged)
        new_counts = np.insert(new_counts, pos, 1)
    system.masses = new_masses
    system.counts = new_counts


@dataclass(frozen=True)
class EmpiricalTrajectory:
    """Checkpointed empirical measures of one realisation."""

    times: np.ndarray
    measures: tuple[GridMeasure, ...]
    n_jumps: int
    census_residual: float
    frozen: bool

    @property
    def n_max(self) -> int:
        return self.measures[0].n_max

    def weights_array(self) -> np.ndarray:
        return np.stack([m.weights for m in self.measures])

    def number_path(self) -> np.ndarray:
        return np.array([m.total_number for m in self.measures])


def _checkpoint_grid(T: float, times) -> np.ndarray:
    if times is None:
        n = max(1, int(round(T * 16)))
        return np.linspace(0.0, T, n + 1)
    t = np.asarray(times, dtype=float)
    if t[0] < 0 or t[-1] > T + 1e-12 or np.any(np.diff(t) <= 0):
        raise ValueError("checkpoint times must increase inside [0, T]")
    return t


def ml_run(
    mu0: GridMeasure,
    n: int,
    kernel,
    T: float,
    seed,
    *,
    times=None,
) -> EmpiricalTrajectory:
    """Simulate one coalescent realisation and emit empirical checkpoints.

    ``seed`` may be an int or a sequence (seed, replica) for substreams.
    When the total rate vanishes the system freezes and remaining
    checkpoints copy the final state.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    system, residual = ParticleSystem.from_measure(mu0, n, rng)
    grid = _checkpoint_grid(T, times)
    n_max = mu0.n_max

    out: list[GridMeasure] = []
    pos = 0
    jumps = 0
    froze = False
    while pos < grid.size and grid[pos] <= system.t + 1e-15:
        out.append(system.empirical(n_max))
        pos += 1
    while pos < grid.size:
        dt, i, j = _sample_event(system, kernel)
        if not np.isfinite(dt):
            froze = True
            snap = system.empirical(n_max)
            while pos < grid.size:
                out.append(snap)
                pos += 1
            break
        t_next = system.t + dt
        while pos < grid.size and grid[pos] < t_next:
            out.append(system.empirical(n_max))
            pos += 1
        if pos >= grid.size:
            break
        _merge(system, i, j)
        system.t = t_next
        jumps += 1
    return EmpiricalTrajectory(grid, tuple(out), jumps, residual, froze)


@dataclass(frozen=True)
class CoupledFDResult:
    """Replica-averaged central-difference sensitivity estimate.

    ``mean`` holds signed per-checkpoint measures of the estimator
    (X^{lam+h} - X^{lam-h}) / (2h); ``stderr`` the per-mass standard errors
    over replicas, and the ``ci_*`` arrays the z * stderr band (normal
    approximation, z = 3 by default).  ``replica_number_paths`` keeps the
    per-replica total-number pairings for scalar confidence statements.
    """

    times: np.ndarray
    mean: tuple[GridMeasure, ...]
    stderr: np.ndarray            # (n_checkpoints, n_max)
    replica_number_paths: np.ndarray  # (replicas, n_checkpoints)
    h: float
    z: float

    @property
    def replicas(self) -> int:
        return self.replica_number_paths.shape[0]

    def number_mean(self) -> np.ndarray:
        return self.replica_number_paths.mean(axis=0)

    def number_stderr(self) -> np.ndarray:
        r = self.replicas
        return self.replica_number_paths.std(axis=0, ddof=1) / np.sqrt(r)

    def number_ci(self) -> tuple[np.ndarray, np.ndarray]:
        m, se = self.number_mean(), self.number_stderr()
        return m - self.z * se, m + self.z * se


def coupled_fd_sensitivity(
    mu0: GridMeasure,
    n: int,
    kernel,
    m: int,
    h: float,
    T: float,
    seed: int,
    replicas: int,
    *,
    times=None,
    z: float = 3.0,
) -> CoupledFDResult:
    """Common-random-number central-difference sensitivity estimator.

    Each replica simulates the kernel at ``lam + h e_m`` and ``lam - h e_m``
    from one shared random stream, so identical uniforms drive waiting times
    and pair selections in identical order; for a parameter-independent
    kernel the two legs are bitwise equal and the estimator is exactly zero.
    The finite-difference bias is O(h^2).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    if replicas < 2:
        raise ValueError("need at least 2 replicas for a standard error")
    up = kernel.shifted(m, +h)
    dn = kernel.shifted(m, -h)
    grid = _checkpoint_grid(T, times)
    n_max = mu0.n_max

    diffs = np.empty((replicas, grid.size, n_max))
    numbers = np.empty((replicas, grid.size))
    for r in range(replicas):
        run_up = ml_run(mu0, n, up, T, (seed, r), times=grid)
        run_dn = ml_run(mu0, n, dn, T, (seed, r), times=grid)
        d = (run_up.weights_array() - run_dn.weights_array()) / (2.0 * h)
        diffs[r] = d
        numbers[r] = d.sum(axis=1)

    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(replicas)
    measures = tuple(GridMeasure(n_max, mean[j]) for j in range(grid.size))
    return CoupledFDResult(grid, measures, se, numbers, h=float(h), z=float(z))
