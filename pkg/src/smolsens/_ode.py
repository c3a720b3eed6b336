"""Explicit adaptive one-step integrator with embedded error estimate.

Dormand-Prince 5(4): six function evaluations per step (seven with FSAL),
5th-order propagating solution, embedded 4th-order error estimate.  Step
acceptance uses the mixed absolute/relative local error norm

    err = sqrt(mean((e_i / (abs_tol + rel_tol * max(|y_i|, |y_new_i|)))^2))

and the step is accepted when err <= 1.  The controller is the standard
0.9 * err^(-1/5) rescaling clipped to [0.2, 5.0].  Everything is
deterministic given the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["IntegratorStats", "integrate_ode"]

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4

ORDER = 5  # order of the propagating solution


@dataclass
class IntegratorStats:
    steps: int = 0
    rejected: int = 0
    max_local_error: float = 0.0

    def merge(self, other: "IntegratorStats") -> None:
        self.steps += other.steps
        self.rejected += other.rejected
        self.max_local_error = max(self.max_local_error, other.max_local_error)


def _err_norm(err, y_old, y_new, abs_tol, rel_tol) -> float:
    scale = abs_tol + rel_tol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_ode(
    state: np.ndarray,
    rhs_fn,
    t0: float,
    t1: float,
    *,
    rel_tol: float = 1e-10,
    abs_tol: float = 1e-12,
    max_step: float | None = None,
    checkpoints: np.ndarray | None = None,
    observer=None,
    stats: IntegratorStats | None = None,
):
    """Integrate ``dy/dt = rhs_fn(t, y)`` from t0 to t1 (t1 >= t0).

    When ``checkpoints`` (increasing times in [t0, t1]) are given, steps are
    clipped so every checkpoint is hit exactly and the state there is
    recorded; the return value is then the list of checkpoint states.
    Otherwise the final state is returned.  ``observer(t, y)`` is called at
    every accepted step and may raise to abort.  ``stats`` accumulates step
    counts and the largest scaled local error among accepted steps.
    """
    y = np.array(state, dtype=float)
    t = float(t0)
    t1 = float(t1)
    if t1 < t:
        raise ValueError("integrate_ode requires t1 >= t0")
    if stats is None:
        stats = IntegratorStats()

    out: list[np.ndarray] = []
    cp = None
    cp_pos = 0
    if checkpoints is not None:
        cp = np.asarray(checkpoints, dtype=float)
        if cp.size and (cp[0] < t0 - 1e-12 or cp[-1] > t1 + 1e-12):
            raise ValueError("checkpoints must lie inside [t0, t1]")
        while cp_pos < cp.size and cp[cp_pos] <= t + 1e-14 * max(1.0, abs(t)):
            out.append(y.copy())
            cp_pos += 1

    if t1 == t:
        return out if cp is not None else y

    hard_max = (t1 - t) if max_step is None else min(max_step, t1 - t)
    # Conservative first step; the controller adapts within a few steps.
    f0 = rhs_fn(t, y)
    scale = abs_tol + rel_tol * np.abs(y)
    d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h = 0.01 * d0 / d1 if (d0 > 1e-5 and d1 > 1e-5) else 1e-6
    h = min(max(h, 1e-10), hard_max)

    k = np.empty((7,) + y.shape)
    k[0] = f0
    fsal_valid = True

    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        h_cap = t1 - t
        if cp is not None and cp_pos < cp.size:
            h_cap = min(h_cap, cp[cp_pos] - t)
        h_try = min(h, h_cap)
        if not fsal_valid:
            k[0] = rhs_fn(t, y)
            fsal_valid = True

        while True:
            for i in range(1, 7):
                yi = y + h_try * np.tensordot(_A[i], k[:i], axes=(0, 0))
                k[i] = rhs_fn(t + _C[i] * h_try, yi)
            y_new = y + h_try * np.tensordot(_B5, k, axes=(0, 0))
            err = h_try * np.tensordot(_E, k, axes=(0, 0))
            err_norm = _err_norm(err, y, y_new, abs_tol, rel_tol)
            if err_norm <= 1.0 or h_try <= 1e-14 * max(1.0, abs(t)):
                break
            stats.rejected += 1
            h_try *= min(1.0, max(0.2, 0.9 * err_norm ** (-1.0 / ORDER)))
            fsal_valid = False
            k[0] = rhs_fn(t, y)
            fsal_valid = True

        t = t + h_try
        k0_next = k[6].copy()  # FSAL: stage 7 was evaluated at (t+h, y_new)
        y = y_new
        k[0] = k0_next
        stats.steps += 1
        stats.max_local_error = max(stats.max_local_error, err_norm)
        if observer is not None:
            observer(t, y)
        if cp is not None:
            while cp_pos < cp.size and cp[cp_pos] <= t + 1e-12 * max(1.0, abs(t)):
                out.append(y.copy())
                cp_pos += 1
        factor = 5.0 if err_norm == 0.0 else min(5.0, max(0.2, 0.9 * err_norm ** (-1.0 / ORDER)))
        h = min(max(h_try * factor, 1e-14), hard_max)

    if cp is not None:
        while cp_pos < cp.size:
            out.append(y.copy())
            cp_pos += 1
        return out
    return y
