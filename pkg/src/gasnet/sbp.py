"""Diagonal-norm summation-by-parts (SBP) first-derivative operators.

The derivative on a uniform grid of ``n`` points with spacing ``dx`` is
factored as

    D = W^{-1} S,

where ``W = diag(1/2, 1, ..., 1, 1/2)`` is the diagonal norm (quadrature
weight) matrix and ``S`` is skew-symmetric apart from its two corner
entries:

    S + S^T = B,    B = diag(-1/dx, 0, ..., 0, +1/dx).

Conventions used throughout this package:

* ``S`` is stored pre-scaled by ``1/dx`` (so ``D`` differentiates with
  respect to physical x), hence ``B`` carries the ``1/dx`` factor.
* The quadrature inner product includes the grid spacing,
  ``<u, v> = u^T W v dx``, so that the discrete integration-by-parts
  identity

      <u, D v> = -<D u, v> - u[0] v[0] + u[-1] v[-1]

  and the discrete fundamental theorem ``<1, D v> = v[-1] - v[0]`` hold
  exactly for any ``dx``.  ``integrate(op, v) == w_inner(op, ones, v)``.

Because the boundary rows of ``S`` carry only half a derivative, the
boundary flux of a conservation law discretized with ``D`` depends on the
first/last grid value alone, which is what makes explicit junction
coupling possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class SbpOperator:
    """Immutable SBP operator pair (W, S) on a uniform grid."""

    n_points: int
    dx: float
    w_diag: np.ndarray  # norm weights, no dx factor
    s_matrix: np.ndarray  # dense (n, n), pre-scaled by 1/dx

    def __post_init__(self) -> None:
        self.w_diag.flags.writeable = False
        self.s_matrix.flags.writeable = False

    @property
    def boundary_matrix(self) -> np.ndarray:
        """B = S + S^T, nonzero only in the two corners (scaled by 1/dx)."""
        b = np.zeros((self.n_points, self.n_points))
        b[0, 0] = -1.0 / self.dx
        b[-1, -1] = 1.0 / self.dx
        return b

    @property
    def derivative_matrix(self) -> np.ndarray:
        """Dense D = W^{-1} S, mainly for tests and oracles."""
        return self.s_matrix / self.w_diag[:, None]


def build_sbp(n: int, dx: float, order: int = 2) -> SbpOperator:
    """Construct the diagonal-norm SBP operator of the given interior order.

    Only ``order=2`` (second order interior, first order closure) is
    implemented; the argument is reserved for higher-order variants.
    """
    if order != 2:
        raise NotImplementedError(f"only order=2 is implemented, got {order}")
    return build_sbp_second_order(n, dx)


def build_sbp_second_order(n: int, dx: float) -> SbpOperator:
    """Second-order SBP pair: W endpoints 1/2, S rows (-1/2, 1/2) at the ends."""
    if n < 3:
        raise ValueError(f"n must be >= 3 so boundary and interior rows differ, got {n}")
    if not dx > 0:
        raise ValueError(f"dx must be positive, got {dx}")

    w = np.ones(n)
    w[0] = 0.5
    w[-1] = 0.5

    s = np.zeros((n, n))
    s[0, 0] = -0.5
    s[0, 1] = 0.5
    for i in range(1, n - 1):
        s[i, i - 1] = -0.5
        s[i, i + 1] = 0.5
    s[-1, -2] = -0.5
    s[-1, -1] = 0.5
    s /= dx

    return SbpOperator(n_points=n, dx=dx, w_diag=w, s_matrix=s)


def _check_length(op: SbpOperator, v: np.ndarray, name: str = "v") -> None:
    if v.shape[-1] != op.n_points:
        raise ValueError(
            f"{name} has length {v.shape[-1]}, operator expects {op.n_points}"
        )


def apply_derivative(op: SbpOperator, v: np.ndarray) -> np.ndarray:
    """D v = W^{-1} S v.

    Exact for constant and linear grid functions.  Implemented with the
    explicit second-order stencil (centered interior, one-sided ends),
    which is bitwise identical to the dense matrix product.
    """
    v = np.asarray(v)
    _check_length(op, v)
    out = np.empty_like(v, dtype=float)
    dx = op.dx
    out[..., 0] = (v[..., 1] - v[..., 0]) / dx
    out[..., -1] = (v[..., -1] - v[..., -2]) / dx
    out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2.0 * dx)
    return out


def integrate(op: SbpOperator, v: np.ndarray) -> float:
    """Quadrature 1^T W v dx, the discrete integral over the pipe."""
    v = np.asarray(v)
    _check_length(op, v)
    return float(np.dot(op.w_diag, v) * op.dx)


def w_inner(op: SbpOperator, u: np.ndarray, v: np.ndarray) -> float:
    """Inner product u^T W v dx induced by the diagonal norm."""
    u = np.asarray(u)
    v = np.asarray(v)
    _check_length(op, u, "u")
    _check_length(op, v, "v")
    return float(np.dot(u, op.w_diag * v) * op.dx)


def discrete_delta(op: SbpOperator, j: int) -> np.ndarray:
    """Grid delta function centered at 1-based index ``j``.

    The single nonzero entry is ``1 / (W_jj dx)`` so that
    ``integrate(op, discrete_delta(op, j)) == 1`` for every j.
    """
    if not 1 <= j <= op.n_points:
        raise ValueError(f"index j={j} outside 1..{op.n_points}")
    out = np.zeros(op.n_points)
    out[j - 1] = 1.0 / (op.w_diag[j - 1] * op.dx)
    return out
