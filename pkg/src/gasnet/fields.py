"""Space-time fields: distributed forcings, objective weights, gradients.

Forcing values are rates of the conserved densities (rho*A, m*A), stored
per pipe as (n_steps, n_points) arrays; the value of row ``s`` acts on the
whole step [t_s, t_{s+1}) (piecewise constant in time).  The objective is
a weighted density misfit

    J = 1/2 sum_s dt  sigma_time[s] * sum_pipes <(rho - target),
        sigma_space (rho - target)>_Wdx            (levels 0..n_steps-1),

a left-rectangle rule over the recorded states.  Gradient fields live on
the same per-step grid as the forcing they update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass
class ForcingField:
    """Distributed forcing restricted to the pipes it names.

    ``theta`` is the spatial influence mask of a control field; fixed
    disturbances carry ``theta=None``.  Control values are zero outside
    the mask's support by construction of the update.
    """

    n_steps: int
    r_rho: dict[str, np.ndarray]
    r_m: dict[str, np.ndarray]
    theta: dict[str, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if set(self.r_rho) != set(self.r_m):
            raise ValueError("r_rho and r_m must cover the same pipes")
        for pipe, arr in list(self.r_rho.items()) + list(self.r_m.items()):
            if arr.shape[0] != self.n_steps:
                raise ValueError(
                    f"pipe {pipe}: forcing has {arr.shape[0]} rows, expected {self.n_steps}"
                )

    @classmethod
    def zeros(
        cls, net: Network, pipes: list[str], n_steps: int, theta: dict[str, np.ndarray] | None = None
    ) -> "ForcingField":
        shapes = {p: (n_steps, net.pipe(p).n_points) for p in pipes}
        return cls(
            n_steps=n_steps,
            r_rho={p: np.zeros(s) for p, s in shapes.items()},
            r_m={p: np.zeros(s) for p, s in shapes.items()},
            theta=theta,
        )

    def updated(self, alpha: float, gradient: "GradientField") -> "ForcingField":
        """New field r + alpha * gradient (the gradient is already masked)."""
        r_rho = {p: arr.copy() for p, arr in self.r_rho.items()}
        r_m = {p: arr.copy() for p, arr in self.r_m.items()}
        for pipe, g in gradient.g_r_rho.items():
            r_rho[pipe] = r_rho.get(pipe, 0.0) + alpha * g
        for pipe, g in gradient.g_r_m.items():
            r_m[pipe] = r_m.get(pipe, 0.0) + alpha * g
        return ForcingField(self.n_steps, r_rho, r_m, theta=self.theta)


def merge_forcing_rows(
    fields: tuple[ForcingField, ...], step: int
) -> dict[str, list[np.ndarray | None]] | None:
    """Sum the step rows of several forcing fields, keyed by pipe."""
    if not fields:
        return None
    rows: dict[str, list[np.ndarray | None]] = {}
    for f in fields:
        for pipe, arr in f.r_rho.items():
            acc = rows.setdefault(pipe, [None, None])
            acc[0] = arr[step] if acc[0] is None else acc[0] + arr[step]
        for pipe, arr in f.r_m.items():
            acc = rows.setdefault(pipe, [None, None])
            acc[1] = arr[step] if acc[1] is None else acc[1] + arr[step]
    return rows or None


@dataclass
class Objective:
    """Target-tracking density misfit with separable space-time weight.

    ``targets`` maps the measured pipes to target density profiles (per
    volume, not per area); ``sigma_space`` holds the matching non-negative
    spatial weights and ``sigma_time`` the per-step temporal weight.
    """

    targets: dict[str, np.ndarray]
    sigma_space: dict[str, np.ndarray]
    sigma_time: np.ndarray

    def __post_init__(self) -> None:
        if set(self.targets) != set(self.sigma_space):
            raise ValueError("targets and sigma_space must cover the same pipes")
        for pipe, w in self.sigma_space.items():
            if np.any(w < 0):
                raise ValueError(f"pipe {pipe}: sigma must be non-negative")
            if w.shape != self.targets[pipe].shape:
                raise ValueError(f"pipe {pipe}: sigma/target shape mismatch")
        if np.any(self.sigma_time < 0):
            raise ValueError("sigma_time must be non-negative")

    @property
    def n_steps(self) -> int:
        return len(self.sigma_time)


@dataclass
class GradientField:
    """Objective gradient density on the forcing grid, zero outside theta."""

    n_steps: int
    g_r_rho: dict[str, np.ndarray]
    g_r_m: dict[str, np.ndarray]

    def dot(self, other: "ForcingField | GradientField") -> float:
        """Plain (unweighted) euclidean pairing of array entries."""
        other_rho = other.r_rho if isinstance(other, ForcingField) else other.g_r_rho
        other_m = other.r_m if isinstance(other, ForcingField) else other.g_r_m
        total = 0.0
        for pipe, g in self.g_r_rho.items():
            if pipe in other_rho:
                total += float(np.sum(g * other_rho[pipe]))
        for pipe, g in self.g_r_m.items():
            if pipe in other_m:
                total += float(np.sum(g * other_m[pipe]))
        return total
