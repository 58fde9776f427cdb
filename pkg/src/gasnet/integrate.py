"""Explicit RK4 time stepping of the coupled network system.

One coupled right-hand-side evaluation consists of three phases: the
uncoupled per-pipe rates (independent across pipes, optionally evaluated
by a thread pool), the sparse junction coupling applied to the assembled
rate vector, and the boundary handling (closed ports pin their endpoint
momentum rate to zero, which conserves mass exactly).  Non-reflecting
ports are enforced as a characteristic overwrite of the boundary values
after each full step.

The time step is fixed from the CFL condition of the *initial* state so
that forward and backward (adjoint) passes share the identical time grid.
Results are bitwise deterministic for any worker count: each pipe's rate
is computed by the same operations either way and written to its own
slice of the rate vector.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .coupling import CouplingMatrix, assemble_coupling_matrix
from .dynamics import StateError, apply_nonreflecting_direct, cfl_timestep, pipe_rhs
from .fields import ForcingField, merge_forcing_rows
from .network import BC_CLOSED, BC_NON_REFLECTING, Network, NetworkState

WORKERS_ENV = "GASNET_WORKERS"


def resolve_workers(workers: int | None = None) -> int:
    """Worker count: explicit argument, else the environment, else all cores."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


@dataclass
class Trajectory:
    """Recorded states of one run: level s lives at times[s] = s*dt."""

    network: Network
    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, n_dof)
    dt: float
    cfl: float | None = None

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def state(self, s: int) -> NetworkState:
        return NetworkState(self.network, self.states[s])

    def rho_block(self, pipe: str) -> np.ndarray:
        """(n_steps+1, n) view of the pipe's density (per volume)."""
        sl = self.network.layout.rho_slice(pipe)
        return self.states[:, sl] / self.network.pipe(pipe).area

    def m_block(self, pipe: str) -> np.ndarray:
        """(n_steps+1, n) view of the pipe's momentum density m = rho u."""
        sl = self.network.layout.m_slice(pipe)
        return self.states[:, sl] / self.network.pipe(pipe).area


def rk4_step(q: np.ndarray, rhs_fn: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    """Classic four-stage Runge-Kutta update."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = rhs_fn(q)
    k2 = rhs_fn(q + 0.5 * dt * k1)
    k3 = rhs_fn(q + 0.5 * dt * k2)
    k4 = rhs_fn(q + dt * k3)
    for i, k in enumerate((k1, k2, k3, k4), start=1):
        if not np.all(np.isfinite(k)):
            raise StateError(f"non-finite rate in stage {i}")
    return q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _PipeTaskRunner:
    """Maps a per-pipe task over the pipe list, optionally on threads."""

    def __init__(self, n_workers: int) -> None:
        self.pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    def run(self, task: Callable[[int], None], n_tasks: int) -> None:
        if self.pool is None:
            for i in range(n_tasks):
                task(i)
        else:
            list(self.pool.map(task, range(n_tasks)))

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()


class NetworkRhs:
    """Coupled rate evaluation (I + C) applied to the per-pipe rates."""

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
            [
                lay.port_index(e.port, "mA")
                for e in net.exterior
                if e.bc == BC_CLOSED
            ],
            dtype=int,
        )

    def __call__(
        self, flat: np.ndarray, rows: dict[str, list[np.ndarray | None]] | None
    ) -> np.ndarray:
        tilde = np.empty_like(flat)
        c = self.net.sound_speed
        entries = self._entries

        def work(i: int) -> None:
            pipe, rho_sl, m_sl, op = entries[i]
            forcing = None if rows is None else rows.get(pipe.id)
            rate = pipe_rhs(pipe, flat[rho_sl], flat[m_sl], op, c, forcing)
            tilde[rho_sl] = rate.d_rho_a
            tilde[m_sl] = rate.d_m_a

        self.runner.run(work, len(entries))
        coupled = self.coupling.apply(tilde)
        if self.closed_m_idx.size:
            coupled[self.closed_m_idx] = 0.0
        return coupled


def _nonreflecting_ports(net: Network, reference: np.ndarray):
    """Precompute (indices, area, reference rho/m) per non-reflecting port."""
    lay = net.layout
    ports = []
    for ext in net.exterior:
        if ext.bc != BC_NON_REFLECTING:
            continue
        port = ext.port
        area = net.pipe(port.pipe).area
        ir = lay.port_index(port, "rhoA")
        im = lay.port_index(port, "mA")
        q_ref = (reference[ir] / area, reference[im] / area)
        ports.append((port, ir, im, area, q_ref))
    return ports


def apply_direct_boundary(flat: np.ndarray, nr_ports, c: float) -> None:
    """Overwrite non-reflecting port values in place (per-volume projection)."""
    for port, ir, im, area, q_ref in nr_ports:
        q_b = (flat[ir] / area, flat[im] / area)
        rho_f, m_f = apply_nonreflecting_direct(port, q_b, q_ref, c)
        flat[ir] = rho_f * area
        flat[im] = m_f * area


def simulate(
    net: Network,
    q0: NetworkState,
    steps: int,
    cfl: float,
    forcing: ForcingField | Sequence[ForcingField] | None = None,
    coupling: CouplingMatrix | None = None,
    workers: int | None = None,
) -> Trajectory:
    """Integrate the coupled network forward and record every state."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    try:
        q0.check()
    except ValueError as exc:
        raise StateError(f"initial state: {exc}") from exc

    if coupling is None:
        coupling = assemble_coupling_matrix(net)
    fields: tuple[ForcingField, ...]
    if forcing is None:
        fields = ()
    elif isinstance(forcing, ForcingField):
        fields = (forcing,)
    else:
        fields = tuple(forcing)
    for f in fields:
        if f.n_steps < steps:
            raise ValueError(f"forcing covers {f.n_steps} steps, run needs {steps}")

    dt = cfl_timestep(net, q0, cfl)
    runner = _PipeTaskRunner(resolve_workers(workers))
    rhs = NetworkRhs(net, coupling, runner)
    nr_ports = _nonreflecting_ports(net, q0.flat)
    c = net.sound_speed

    states = np.empty((steps + 1, net.layout.n_dof))
    states[0] = q0.flat
    q = q0.flat.copy()
    try:
        for s in range(steps):
            rows = merge_forcing_rows(fields, s)
            try:
                q = rk4_step(q, lambda v: rhs(v, rows), dt)
            except StateError as exc:
                raise StateError(f"step {s}: {exc}") from exc
            apply_direct_boundary(q, nr_ports, c)
            states[s + 1] = q
    finally:
        runner.close()

    times = dt * np.arange(steps + 1)
    return Trajectory(network=net, times=times, states=states, dt=dt, cfl=cfl)
