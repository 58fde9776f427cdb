"""Backward-in-time adjoint solve and gradient extraction.

The adjoint state q* = (rho*, m*) pairs with the (rho A, m A) equations.
Per pipe it obeys

    d/dt rho* = (u^2 - c^2) D m*  - g_rho
    d/dt m*   = -D rho* - 2 u D m* - g_m

with u taken from the stored forward trajectory and g the linearization
of the objective (g_rho = sigma (rho - target) / A for the density
misfit, g_m = 0).  On the network the spatial derivative acts on the
junction-coupled combination p = q* + C_adj q* (C_adj being the
quadrature-weighted transpose of the coupling matrix), while q* itself is
integrated.  The terminal condition is q* = 0 and the system is stepped
backward with the same RK4 scheme and |dt| as the forward run; within the
backward step covering [t_s, t_{s+1}] both the frozen forward state and g
take their values from level s, mirroring the piecewise-constant forcing
convention of the forward pass.

With these conventions the gradient of the objective with respect to the
forcing on step s is the field p at level s+1 (masked by the influence
weight): for the linearized dynamics this pairing is the exact transpose
of forward RK4 with per-step-constant forcing and the left-rectangle
objective quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import CouplingMatrix
from .dynamics import StateError, apply_nonreflecting_adjoint
from .fields import GradientField, Objective
from .integrate import Trajectory, _PipeTaskRunner, resolve_workers, rk4_step
from .network import BC_CLOSED, BC_NON_REFLECTING, Network
from .sbp import SbpOperator, apply_derivative


@dataclass
class AdjointPipeRate:
    d_rho_star: np.ndarray
    d_m_star: np.ndarray


def adjoint_pipe_rhs(
    qstar: tuple[np.ndarray, np.ndarray],
    q_forward: tuple[np.ndarray, np.ndarray],
    g: tuple[np.ndarray | None, np.ndarray | None],
    sbp: SbpOperator,
    c: float,
) -> AdjointPipeRate:
    """Adjoint rate of one pipe; q_forward = (rho, m) per unit area."""
    rho_star, m_star = qstar
    rho, m = q_forward
    if np.any(rho <= 0.0):
        raise StateError("non-positive forward density in adjoint evaluation")
    u = m / rho
    d_m = apply_derivative(sbp, m_star)
    d_r = apply_derivative(sbp, rho_star)
    d_rho_star = (u * u - c * c) * d_m
    d_m_star = -d_r - 2.0 * u * d_m
    g_rho, g_m = g
    if g_rho is not None:
        d_rho_star = d_rho_star - g_rho
    if g_m is not None:
        d_m_star = d_m_star - g_m
    return AdjointPipeRate(d_rho_star=d_rho_star, d_m_star=d_m_star)


class AdjointNetworkRhs:
    """Adjoint rate: per-pipe adjoint operator applied to (I + C_adj) q*."""

    def __init__(
        self,
        net: Network,
        coupling: CouplingMatrix,
        runner: _PipeTaskRunner | None = None,
    ) -> None:
        self.net = net
        self.coupling = coupling
        self.runner = runner or _PipeTaskRunner(1)
        lay = net.layout
        self._entries = [
            (p, lay.rho_slice(p.id), lay.m_slice(p.id), net.sbp(p.id)) for p in net.pipes
        ]
        self.closed_m_idx = np.array(
            [lay.port_index(e.port, "mA") for e in net.exterior if e.bc == BC_CLOSED],
            dtype=int,
        )

    def __call__(
        self,
        qstar_flat: np.ndarray,
        forward_flat: np.ndarray,
        g_rows: dict[str, tuple[np.ndarray | None, np.ndarray | None]] | None,
    ) -> np.ndarray:
        p_flat = self.coupling.apply_transpose(qstar_flat)
        out = np.empty_like(qstar_flat)
        c = self.net.sound_speed
        entries = self._entries

        def work(i: int) -> None:
            pipe, rho_sl, m_sl, op = entries[i]
            g = (None, None) if g_rows is None else g_rows.get(pipe.id, (None, None))
            rate = adjoint_pipe_rhs(
                (p_flat[rho_sl], p_flat[m_sl]),
                (forward_flat[rho_sl] / pipe.area, forward_flat[m_sl] / pipe.area),
                g,
                op,
                c,
            )
            out[rho_sl] = rate.d_rho_star
            out[m_sl] = rate.d_m_star

        self.runner.run(work, len(entries))
        if self.closed_m_idx.size:
            out[self.closed_m_idx] = 0.0
        return out


def adjoint_network_rhs(
    net: Network,
    qstar_flat: np.ndarray,
    forward_flat: np.ndarray,
    g_rows: dict[str, tuple[np.ndarray | None, np.ndarray | None]] | None,
    coupling: CouplingMatrix,
) -> np.ndarray:
    """One-shot evaluation of the coupled adjoint rate (convenience wrapper)."""
    if qstar_flat.shape != (net.layout.n_dof,):
        raise ValueError("adjoint state does not match the network layout")
    if forward_flat.shape != (net.layout.n_dof,):
        raise ValueError("forward state does not match the network layout")
    return AdjointNetworkRhs(net, coupling)(qstar_flat, forward_flat, g_rows)


def objective_gradient_rows(
    objective: Objective, net: Network, forward_flat: np.ndarray, step: int
) -> dict[str, tuple[np.ndarray | None, np.ndarray | None]] | None:
    """g rows at one step: sigma * (rho - target) / A on the measured pipes."""
    w_t = float(objective.sigma_time[step])
    if w_t == 0.0:
        return None
    rows = {}
    for pipe_id, target in objective.targets.items():
        area = net.pipe(pipe_id).area
        rho = forward_flat[net.layout.rho_slice(pipe_id)] / area
        g_rho = w_t * objective.sigma_space[pipe_id] * (rho - target) / area
        rows[pipe_id] = (g_rho, None)
    return rows


def _adjoint_nonreflecting_ports(net: Network, reference: np.ndarray):
    lay = net.layout
    ports = []
    for ext in net.exterior:
        if ext.bc != BC_NON_REFLECTING:
            continue
        port = ext.port
        area = net.pipe(port.pipe).area
        ir = lay.port_index(port, "rhoA")
        im = lay.port_index(port, "mA")
        q_fwd = (reference[ir] / area, reference[im] / area)
        ports.append((port, ir, im, q_fwd))
    return ports


def apply_adjoint_boundary(qstar_flat: np.ndarray, nr_ports, c: float) -> None:
    for port, ir, im, q_fwd in nr_ports:
        rho_s, m_s = apply_nonreflecting_adjoint(
            port, (qstar_flat[ir], qstar_flat[im]), (0.0, 0.0), q_fwd, c
        )
        qstar_flat[ir] = rho_s
        qstar_flat[im] = m_s


def solve_adjoint(
    traj: Trajectory,
    objective: Objective,
    net: Network,
    coupling: CouplingMatrix,
    terminal: np.ndarray | None = None,
    workers: int | None = None,
) -> Trajectory:
    """Integrate the adjoint network backward over the forward trajectory."""
    n_steps = traj.n_steps
    if objective.n_steps != n_steps:
        raise ValueError(
            f"objective covers {objective.n_steps} steps, trajectory has {n_steps}"
        )
    n_dof = net.layout.n_dof
    if traj.states.shape[1] != n_dof:
        raise ValueError("trajectory does not match the network layout")

    runner = _PipeTaskRunner(resolve_workers(workers))
    rhs = AdjointNetworkRhs(net, coupling, runner)
    nr_ports = _adjoint_nonreflecting_ports(net, traj.states[0])
    c = net.sound_speed
    dt = traj.dt

    astates = np.empty_like(traj.states)
    qstar = np.zeros(n_dof) if terminal is None else terminal.copy()
    astates[n_steps] = qstar
    try:
        for s in range(n_steps - 1, -1, -1):
            forward = traj.states[s]
            g_rows = objective_gradient_rows(objective, net, forward, s)
            try:
                qstar = rk4_step(qstar, lambda v: rhs(v, forward, g_rows), dt)
            except StateError as exc:
                raise StateError(f"backward step {s}: {exc}") from exc
            apply_adjoint_boundary(qstar, nr_ports, c)
            astates[s] = qstar
    finally:
        runner.close()

    return Trajectory(network=net, times=traj.times, states=astates, dt=dt, cfl=traj.cfl)


def extract_gradient(
    adjoint_traj: Trajectory,
    theta: dict[str, np.ndarray],
    coupling: CouplingMatrix,
) -> GradientField:
    """Gradient density on the influence support.

    The forcing on step s pairs with the coupled adjoint at level s+1;
    quadrature weights are excluded so the update is mesh independent.
    """
    net = adjoint_traj.network
    n_steps = adjoint_traj.n_steps
    g_rho = {p: np.empty((n_steps, net.pipe(p).n_points)) for p in theta}
    g_m = {p: np.empty((n_steps, net.pipe(p).n_points)) for p in theta}
    lay = net.layout
    for s in range(n_steps):
        p_flat = coupling.apply_transpose(adjoint_traj.states[s + 1])
        for pipe_id, mask in theta.items():
            g_rho[pipe_id][s] = mask * p_flat[lay.rho_slice(pipe_id)]
            g_m[pipe_id][s] = mask * p_flat[lay.m_slice(pipe_id)]
    return GradientField(n_steps=n_steps, g_r_rho=g_rho, g_r_m=g_m)
