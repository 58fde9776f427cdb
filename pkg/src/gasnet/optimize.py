"""Objective evaluation and fixed-step steepest-descent control loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .adjoint import extract_gradient, solve_adjoint
from .coupling import assemble_coupling_matrix
from .fields import ForcingField, Objective
from .integrate import Trajectory, simulate

if TYPE_CHECKING:
    from .scenarios import Scenario


class StepSizeError(RuntimeError):
    """The objective keeps increasing; the step size should be reduced."""


def evaluate_objective(traj: Trajectory, objective: Objective) -> float:
    """J = 1/2 sum_s dt sigma_time[s] <dev, sigma_space dev>_Wdx, dev = rho - target."""
    n_steps = traj.n_steps
    if objective.n_steps != n_steps:
        raise ValueError(
            f"objective covers {objective.n_steps} steps, trajectory has {n_steps}"
        )
    net = traj.network
    total = 0.0
    for pipe_id, target in objective.targets.items():
        pipe = net.pipe(pipe_id)
        dev = traj.rho_block(pipe_id)[:n_steps] - target[None, :]
        wq = net.sbp(pipe_id).w_diag * objective.sigma_space[pipe_id] * pipe.dx
        total += float(np.dot(objective.sigma_time, (dev * dev) @ wq))
    return 0.5 * traj.dt * total


@dataclass
class OptimizationResult:
    iterations: int
    j_history: np.ndarray
    forcing: ForcingField
    converged: bool
    criterion: float


def steepest_descent(
    scenario: "Scenario",
    alpha_s: float | None = None,
    tol: float | None = None,
    max_iters: int | None = None,
    workers: int | None = None,
    log: Callable[[int, float], None] | None = None,
) -> OptimizationResult:
    """Iterate r <- r - alpha_s * grad(J) * theta until the relative
    objective decrement (J_{n-1} - J_n)/J_1 drops below tol.

    Convergence requires a strict decrease, so a dead loop (alpha_s = 0)
    runs to max_iters unconverged; three consecutive increases abort with
    a step-size error.
    """
    alpha_s = scenario.alpha_s if alpha_s is None else alpha_s
    tol = scenario.tol if tol is None else tol
    max_iters = scenario.max_iters if max_iters is None else max_iters
    if alpha_s < 0:
        raise ValueError("alpha_s must be non-negative")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    net = scenario.network
    coupling = assemble_coupling_matrix(net)
    control = ForcingField.zeros(
        net, sorted(scenario.theta), scenario.steps, theta=scenario.theta
    )

    def run(forcing: ForcingField) -> Trajectory:
        fields = [forcing]
        if scenario.disturbance is not None:
            fields.append(scenario.disturbance)
        return simulate(
            net,
            scenario.initial_state,
            scenario.steps,
            scenario.cfl,
            forcing=fields,
            coupling=coupling,
            workers=workers,
        )

    traj = run(control)
    j_first = evaluate_objective(traj, scenario.objective)
    history = [j_first]
    if log is not None:
        log(1, j_first)
    if j_first == 0.0:
        return OptimizationResult(1, np.array(history), control, True, 0.0)

    converged = False
    criterion = np.inf
    increases = 0
    for _ in range(2, max_iters + 1):
        adj = solve_adjoint(traj, scenario.objective, net, coupling, workers=workers)
        grad = extract_gradient(adj, scenario.theta, coupling)
        control = control.updated(-alpha_s, grad)
        traj = run(control)
        j_value = evaluate_objective(traj, scenario.objective)
        history.append(j_value)
        if log is not None:
            log(len(history), j_value)
        criterion = (history[-2] - j_value) / j_first
        if criterion < 0:
            increases += 1
            if increases >= 3:
                raise StepSizeError(
                    f"objective increased {increases} times in a row; reduce alpha_s"
                )
        else:
            increases = 0
        if 0.0 < criterion < tol:
            converged = True
            break

    return OptimizationResult(
        iterations=len(history),
        j_history=np.array(history),
        forcing=control,
        converged=converged,
        criterion=float(criterion),
    )
