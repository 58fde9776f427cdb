"""Uncoupled per-pipe dynamics and characteristic boundary treatment.

Each pipe carries the isothermal Euler equations in conservation form,
with pressure eliminated via p = c^2 rho:

    d/dt (rho A) = -D (m A)                          + r_rho
    d/dt (m A)   = -D ((m A) u) - A D (c^2 rho)      + r_m

where u = m/rho and D is the SBP derivative of the pipe.  The optional
forcing (r_rho, r_m) is a rate density added pointwise.

Exterior ports use a characteristic projection: state perturbations
relative to a fixed reference are decomposed in the eigenbasis of the
quasi-linear flux matrix

    Z = [[0, 1], [c^2 - u^2, 2u]]   acting on q = (rho, m),

with eigenvalues u +- c, and the amplitude of the wave entering the
domain is set to zero.  Flows are assumed strictly subsonic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, NetworkState, Pipe, PortRef
from .sbp import SbpOperator, apply_derivative


class StateError(RuntimeError):
    """The simulation state left the admissible set (e.g. rho <= 0, NaN)."""


class DegenerateBasisError(ValueError):
    """Characteristic basis is degenerate: the state is sonic or supersonic."""


@dataclass
class PipeRhs:
    d_rho_a: np.ndarray
    d_m_a: np.ndarray


def pipe_rhs(
    pipe: Pipe,
    rho_a: np.ndarray,
    m_a: np.ndarray,
    sbp: SbpOperator,
    c: float,
    forcing: tuple[np.ndarray | None, np.ndarray | None] | None = None,
) -> PipeRhs:
    """Uncoupled rate of (rho A, m A) for one pipe; exactly linear in the forcing."""
    if rho_a.shape != m_a.shape or rho_a.shape[-1] != pipe.n_points:
        raise ValueError(f"pipe {pipe.id}: state length does not match n_points")
    if np.any(rho_a <= 0.0):
        raise StateError(f"pipe {pipe.id}: non-positive density")

    u = m_a / rho_a
    d_rho_a = -apply_derivative(sbp, m_a)
    momentum_flux = m_a * u
    rho = rho_a / pipe.area
    d_m_a = -apply_derivative(sbp, momentum_flux) - pipe.area * c * c * apply_derivative(sbp, rho)

    if forcing is not None:
        r_rho, r_m = forcing
        if r_rho is not None:
            d_rho_a = d_rho_a + r_rho
        if r_m is not None:
            d_m_a = d_m_a + r_m
    return PipeRhs(d_rho_a=d_rho_a, d_m_a=d_m_a)


def cfl_timestep(net: Network, state: NetworkState, cfl: float) -> float:
    """dt = cfl * min over pipes and points of dx / max(|u-c|, |u+c|)."""
    if not 0.0 < cfl <= 1.0:
        raise ValueError(f"cfl must lie in (0, 1], got {cfl}")
    try:
        state.check()
    except ValueError as exc:
        raise StateError(str(exc)) from exc
    c = net.sound_speed
    dt = np.inf
    for p in net.pipes:
        u = state.m_a(p.id) / state.rho_a(p.id)
        lam = np.maximum(np.abs(u - c), np.abs(u + c))
        dt = min(dt, p.dx / float(lam.max()))
    return cfl * dt


@dataclass(frozen=True)
class CharacteristicBasis:
    """Bi-orthonormal eigenbasis of the quasi-linear matrix at one state.

    ``right[:, k]`` and ``left[k, :]`` belong to ``lambdas[k]``, ordered
    (u+c, u-c); left[j] . right[:, i] = delta_ij.
    """

    lambdas: np.ndarray  # (2,)
    right: np.ndarray  # (2, 2), columns e_+ e_-
    left: np.ndarray  # (2, 2), rows e^+ e^-

    def matrix(self) -> np.ndarray:
        """Reconstruct Z = T Lambda T^{-1}."""
        return self.right @ np.diag(self.lambdas) @ self.left


def characteristic_basis(rho: float, m: float, c: float) -> CharacteristicBasis:
    """Eigendecomposition of Z = [[0, 1], [c^2 - u^2, 2u]] at a subsonic state."""
    if rho <= 0.0:
        raise StateError(f"non-positive density {rho}")
    u = m / rho
    if abs(u) >= c:
        raise DegenerateBasisError(f"state is sonic/supersonic: |u|={abs(u)} >= c={c}")
    lam = np.array([u + c, u - c])
    right = np.array([[1.0, 1.0], [u + c, u - c]])
    left = np.array([[(c - u) / (2 * c), 1.0 / (2 * c)], [(c + u) / (2 * c), -1.0 / (2 * c)]])
    return CharacteristicBasis(lambdas=lam, right=right, left=left)


def adjoint_characteristic_basis(rho: float, m: float, c: float) -> CharacteristicBasis:
    """Eigenbasis of the adjoint quasi-linear matrix Z* = Z^T.

    Same eigenvalues u +- c as the direct equations; right/left
    eigenvectors swap roles (transposed).
    """
    direct = characteristic_basis(rho, m, c)
    return CharacteristicBasis(
        lambdas=direct.lambdas, right=direct.left.T, left=direct.right.T
    )


def _project_outgoing(
    basis: CharacteristicBasis,
    delta: np.ndarray,
    normal: int,
    incoming_sign: int,
) -> np.ndarray:
    """Drop eigencomponents whose wave enters the domain.

    ``incoming_sign=-1`` marks a wave as incoming when lambda*normal < 0
    (forward time); ``incoming_sign=+1`` when lambda*normal > 0 (the
    adjoint system integrated backward in time).
    """
    kept = np.zeros(2)
    for k in range(2):
        if incoming_sign * basis.lambdas[k] * normal < 0:
            kept += (basis.left[k] @ delta) * basis.right[:, k]
    return kept


def apply_nonreflecting_direct(
    port: PortRef,
    q_boundary: tuple[float, float],
    q_reference: tuple[float, float],
    c: float,
) -> tuple[float, float]:
    """Filter the boundary state so no disturbance enters through the port.

    Both states are (rho, m) per unit area.  The perturbation relative to
    the reference is projected on the characteristic basis frozen at the
    reference state and the incoming amplitude is zeroed.
    """
    basis = characteristic_basis(q_reference[0], q_reference[1], c)
    delta = np.array(q_boundary) - np.array(q_reference)
    filtered = np.array(q_reference) + _project_outgoing(basis, delta, port.normal, -1)
    return float(filtered[0]), float(filtered[1])


def apply_nonreflecting_adjoint(
    port: PortRef,
    qstar_boundary: tuple[float, float],
    qstar_reference: tuple[float, float],
    q_forward: tuple[float, float],
    c: float,
) -> tuple[float, float]:
    """Adjoint counterpart: filter waves that are incoming in reverse time.

    The basis comes from the adjoint quasi-linear matrix evaluated at the
    forward state; the adjoint reference is zero in practice.
    """
    basis = adjoint_characteristic_basis(q_forward[0], q_forward[1], c)
    delta = np.array(qstar_boundary) - np.array(qstar_reference)
    filtered = np.array(qstar_reference) + _project_outgoing(basis, delta, port.normal, +1)
    return float(filtered[0]), float(filtered[1])
