"""Parametric coagulation kernel catalog with analytic parameter gradients.

Every family is symmetric, non-negative and affine in the parameter vector,
so the gradient tables are parameter-independent and the domination bounds
``K <= phi(x) phi(y)`` and ``|dK/dlambda_m| <= phi(x) phi(y)`` can be checked
exhaustively on the grid at the corners of the declared parameter box.

Families (``lam`` is the parameter vector):

========== ============================== ==========
family     K(x, y)                        p
========== ============================== ==========
constant   lam1                           1
additive   lam1 * (x + y)                 1
multiply   lam1 * x * y                   1
affine-mix lam1 + lam2 (x+y) + lam3 xy    3
power      lam1 * (x^a y^b + x^b y^a)     1
========== ============================== ==========
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .measures import BoundFunction

__all__ = [
    "KernelSpecError",
    "HypothesisError",
    "ParametricKernel",
    "TruncatedKernel",
    "make_kernel",
    "grad_check",
    "truncate",
    "KERNEL_FAMILIES",
]

KERNEL_FAMILIES = ("constant", "additive", "multiplicative", "affine-mix", "power")


class KernelSpecError(ValueError):
    """Malformed kernel family descriptor."""


class HypothesisError(ValueError):
    """A domination bound fails somewhere on the grid for the declared box."""


def _features(family: str, x, y, exponents) -> np.ndarray:
    """Feature stack g_m(x, y) with K = sum_m lam_m g_m.  Shape (p,) + x.shape."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if family == "constant":
        return np.ones((1,) + np.broadcast(x, y).shape)
    if family == "additive":
        return (x + y)[None, ...]
    if family == "multiplicative":
        return (x * y)[None, ...]
    if family == "affine-mix":
        shape = np.broadcast(x, y).shape
        return np.stack([np.ones(shape), np.broadcast_to(x + y, shape), np.broadcast_to(x * y, shape)])
    if family == "power":
        a, b = exponents
        return (x**a * y**b + x**b * y**a)[None, ...]
    raise KernelSpecError(f"unknown kernel family {family!r}")


def _param_dim(family: str) -> int:
    return 3 if family == "affine-mix" else 1


@dataclass(frozen=True)
class ParametricKernel:
    """Symmetric coagulation kernel K(x, y) affine in a parameter vector.

    ``param_box`` is a closed product of intervals containing ``param``; the
    domination bounds are validated over the whole box (at its corners, which
    suffices for affine dependence).  ``grad_scale`` supports reparametrised
    copies (lambda' = lambda / s, so the gradient picks up the factor s).
    ``hess_bound`` is an upper bound on the second parameter derivatives; it
    is exactly 0 for the affine catalog.
    """

    family: str
    param: np.ndarray
    param_box: np.ndarray
    phi: BoundFunction
    n_max: int
    exponents: tuple[float, float] | None = None
    grad_scale: np.ndarray | None = None
    frozen_grad: bool = False
    hess_bound: float = 0.0

    def __post_init__(self):
        param = np.atleast_1d(np.asarray(self.param, dtype=float)).copy()
        box = np.asarray(self.param_box, dtype=float).reshape(len(param), 2)
        param.setflags(write=False)
        box.setflags(write=False)
        object.__setattr__(self, "param", param)
        object.__setattr__(self, "param_box", box)
        if self.grad_scale is not None:
            gs = np.asarray(self.grad_scale, dtype=float).copy()
            gs.setflags(write=False)
            object.__setattr__(self, "grad_scale", gs)

    @property
    def param_dim(self) -> int:
        return self.param.shape[0]

    # -- evaluation ----------------------------------------------------------
    def eval(self, x, y, lam: np.ndarray | None = None) -> np.ndarray:
        """K(x, y) at the kernel's parameter (or an explicit ``lam``)."""
        lam = self.param if lam is None else np.asarray(lam, dtype=float)
        feats = _features(self.family, x, y, self.exponents)
        return np.tensordot(lam, feats, axes=(0, 0))

    def grad(self, x, y) -> np.ndarray:
        """dK/dlambda stacked over components, shape (p,) + broadcast shape."""
        feats = _features(self.family, x, y, self.exponents)
        if self.frozen_grad:
            return np.zeros_like(feats)
        if self.grad_scale is not None:
            feats = feats * self.grad_scale[(...,) + (None,) * (feats.ndim - 1)]
        return feats

    def matrix(self, n_max: int | None = None) -> np.ndarray:
        """Kernel table on the grid, shape (n_max, n_max)."""
        n = self.n_max if n_max is None else n_max
        m = np.arange(1, n + 1, dtype=float)
        return self.eval(m[:, None], m[None, :])

    def grad_matrix(self, n_max: int | None = None) -> np.ndarray:
        """Gradient tables on the grid, shape (p, n_max, n_max)."""
        n = self.n_max if n_max is None else n_max
        m = np.arange(1, n + 1, dtype=float)
        return self.grad(m[:, None], m[None, :])

    def grid_bound(self, n_max: int | None = None) -> float:
        """Max over the grid of K and its first two parameter derivatives."""
        return float(
            max(np.max(self.matrix(n_max)), np.max(np.abs(self.grad_matrix(n_max))), self.hess_bound)
        )

    # -- derived kernels ------------------------------------------------------
    def with_param(self, lam) -> "ParametricKernel":
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.shape != self.param.shape:
            raise KernelSpecError("parameter dimension changed")
        lo, hi = self.param_box[:, 0], self.param_box[:, 1]
        if np.any(lam < lo) or np.any(lam > hi):
            raise HypothesisError(f"parameter {lam} outside declared box")
        return replace(self, param=lam)

    def shifted(self, m: int, h: float) -> "ParametricKernel":
        lam = self.param.copy()
        lam[m] += h
        return self.with_param(lam)

    def frozen(self) -> "ParametricKernel":
        """Copy whose parameter gradient is identically zero.

        The evaluation is pinned at the current parameter; useful for
        exercising the homogeneous (zero-source) sensitivity dynamics and
        the common-random-number estimator's exact-zero property.
        """
        return replace(self, frozen_grad=True)

    def with_param_scaling(self, scales) -> "ParametricKernel":
        """Reparametrise lambda' = lambda / s componentwise.

        Kernel values are unchanged (param is rescaled accordingly) while the
        gradient picks up the factor s, so sensitivities scale linearly.
        """
        s = np.atleast_1d(np.asarray(scales, dtype=float))
        if s.shape != self.param.shape or np.any(s <= 0):
            raise KernelSpecError("scales must be positive, one per component")
        prev = np.ones_like(s) if self.grad_scale is None else self.grad_scale
        return replace(
            self,
            param=self.param / s,
            param_box=self.param_box / s[:, None],
            grad_scale=prev * s,
        )


@dataclass(frozen=True)
class TruncatedKernel:
    """Sharp truncation K * 1_{phi(x)phi(y) < N} of a base kernel.

    The gradient is truncated with the same indicator, so the domination
    bounds of the base kernel are inherited.  On a fixed finite grid the
    truncation becomes inactive once N exceeds the largest grid value of
    phi(x)phi(y).
    """

    base: ParametricKernel
    level: float

    def __post_init__(self):
        if self.level <= 0:
            raise KernelSpecError("truncation level must be > 0")

    @property
    def phi(self) -> BoundFunction:
        return self.base.phi

    @property
    def param(self) -> np.ndarray:
        return self.base.param

    @property
    def param_dim(self) -> int:
        return self.base.param_dim

    @property
    def n_max(self) -> int:
        return self.base.n_max

    @property
    def family(self) -> str:
        return self.base.family

    def _indicator(self, x, y) -> np.ndarray:
        return (self.phi(x) * self.phi(y) < self.level).astype(float)

    def eval(self, x, y, lam=None) -> np.ndarray:
        return self.base.eval(x, y, lam) * self._indicator(x, y)

    def grad(self, x, y) -> np.ndarray:
        return self.base.grad(x, y) * self._indicator(x, y)[None, ...]

    def matrix(self, n_max: int | None = None) -> np.ndarray:
        n = self.n_max if n_max is None else n_max
        m = np.arange(1, n + 1, dtype=float)
        return self.eval(m[:, None], m[None, :])

    def grad_matrix(self, n_max: int | None = None) -> np.ndarray:
        n = self.n_max if n_max is None else n_max
        m = np.arange(1, n + 1, dtype=float)
        return self.grad(m[:, None], m[None, :])

    def grid_bound(self, n_max: int | None = None) -> float:
        return float(
            max(np.max(self.matrix(n_max)), np.max(np.abs(self.grad_matrix(n_max))))
        )

    def with_param(self, lam) -> "TruncatedKernel":
        return TruncatedKernel(self.base.with_param(lam), self.level)

    def shifted(self, m: int, h: float) -> "TruncatedKernel":
        return TruncatedKernel(self.base.shifted(m, h), self.level)

    def frozen(self) -> "TruncatedKernel":
        return TruncatedKernel(self.base.frozen(), self.level)


def _box_corners(box: np.ndarray) -> np.ndarray:
    p = box.shape[0]
    corners = np.array(np.meshgrid(*[box[i] for i in range(p)], indexing="ij"))
    return corners.reshape(p, -1).T


def make_kernel(
    family: str,
    lam,
    phi: BoundFunction | None = None,
    *,
    n_max: int,
    param_box=None,
    exponents: tuple[float, float] | None = None,
    phi_scale: float = 1.0,
) -> ParametricKernel:
    """Build a catalog kernel and validate its grid hypotheses.

    The parameter box defaults to ``[0, lam_m]`` per component.  Validation
    checks phi (>= 1, sub-additive), symmetry of the family, non-negativity
    and the domination bounds over the box corners; a violation raises
    :class:`HypothesisError` naming the offending pair and corner (rescaling
    is never applied silently).
    """
    if family not in KERNEL_FAMILIES:
        raise KernelSpecError(
            f"unknown kernel family {family!r}; expected one of {KERNEL_FAMILIES}"
        )
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    p = _param_dim(family)
    if lam.shape != (p,):
        raise KernelSpecError(f"family {family!r} takes {p} parameter(s), got {lam.shape[0]}")
    if np.any(lam < 0):
        raise KernelSpecError("parameters must be >= 0")
    if family == "power":
        exponents = (0.5, 0.5) if exponents is None else (float(exponents[0]), float(exponents[1]))
        a, b = exponents
        if a < 0 or b < 0 or a + b > 1:
            raise KernelSpecError("power family needs 0 <= a, b with a + b <= 1")
    elif exponents is not None:
        raise KernelSpecError(f"family {family!r} does not take exponents")

    if param_box is None:
        param_box = np.column_stack([np.zeros(p), lam])
    box = np.asarray(param_box, dtype=float).reshape(p, 2)
    if np.any(box[:, 0] < 0) or np.any(box[:, 0] > box[:, 1]):
        raise KernelSpecError("parameter box must satisfy 0 <= lo <= hi componentwise")
    if np.any(lam < box[:, 0]) or np.any(lam > box[:, 1]):
        raise KernelSpecError("parameter outside its declared box")

    phi = BoundFunction.affine(phi_scale) if phi is None else phi
    phi.check_grid_hypotheses(n_max)

    kernel = ParametricKernel(
        family=family,
        param=lam,
        param_box=box,
        phi=phi,
        n_max=n_max,
        exponents=exponents,
    )

    masses = np.arange(1, n_max + 1, dtype=float)
    X, Y = masses[:, None], masses[None, :]
    phimat = np.multiply.outer(phi.on_grid(n_max), phi.on_grid(n_max))
    feats = _features(family, X, Y, exponents)
    if np.max(np.abs(feats - np.swapaxes(feats, 1, 2))) != 0.0:
        raise KernelSpecError(f"family {family!r} is not symmetric on the grid")

    for corner in _box_corners(box):
        vals = np.tensordot(corner, feats, axes=(0, 0))
        if np.any(vals < 0):
            i, j = np.unravel_index(int(np.argmax(vals < 0)), vals.shape)
            raise HypothesisError(
                f"kernel negative at (x, y, corner)=({i + 1}, {j + 1}, {tuple(corner)})"
            )
        bad = vals > phimat
        if np.any(bad):
            i, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
            raise HypothesisError(
                "kernel bound K <= phi(x)phi(y) fails at "
                f"(x, y, corner)=({i + 1}, {j + 1}, {tuple(corner)}): "
                f"K={vals[i, j]:g} > {phimat[i, j]:g}"
            )
    for m_idx in range(p):
        bad = np.abs(feats[m_idx]) > phimat
        if np.any(bad):
            i, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
            raise HypothesisError(
                f"gradient bound |dK/dlam_{m_idx + 1}| <= phi(x)phi(y) fails at "
                f"(x, y)=({i + 1}, {j + 1})"
            )
    return kernel


def grad_check(kernel: ParametricKernel | TruncatedKernel, lam, h: float) -> float:
    """Max-abs discrepancy between analytic gradient and central differences.

    Requires ``lam +- h e_m`` inside the parameter box.  For the affine
    catalog the finite difference is exact up to roundoff (the floor scales
    like ``max K * eps / h``); for smooth non-affine parametrisations the
    discrepancy decays as O(h^2).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    base = kernel.with_param(lam)
    worst = 0.0
    for m in range(base.param_dim):
        up = base.shifted(m, +h).matrix()
        dn = base.shifted(m, -h).matrix()
        fd = (up - dn) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(base.grad_matrix()[m] - fd))))
    return worst


def truncate(kernel: ParametricKernel, N: float) -> TruncatedKernel:
    """Cut the kernel (and its gradient) where phi(x)phi(y) >= N."""
    return TruncatedKernel(kernel, float(N))
