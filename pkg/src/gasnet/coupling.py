"""Junction control fluxes and the sparse coupling operator.

The per-pipe right-hand sides are computed without any knowledge of the
junctions; the coupling then corrects the endpoint rates so that both
junction conditions keep holding in time:

* equal density: all endpoint densities at a junction share the common
  rate  d(rho_bar)/dt = sum_p dx_p rate_p / sum_p dx_p A_p  (rate_p being
  the uncorrected rho*A rate), each port corrected to A_p * d(rho_bar)/dt;
* mass conservation: one shared control flux f_m corrects the momentum
  rates,  corrected_p = rate_p + f_m n_p / (W_p dx_p),  with

      f_m = - (sum_p W_p rate_p n_p) / (sum_p 1/dx_p).

  The denominator follows from multiplying each corrected-endpoint
  equation by its outward normal and summing (n_p^2 = 1); a denominator
  of sum_p n_p/dx_p would be singular for junctions with balanced
  normals, e.g. two pipes in series.

Both corrections are linear in the uncorrected rates, so their combined
effect is a sparse matrix C acting only on endpoint degrees of freedom:

    coupled_rate = rate + C @ rate.

The matrix form exists for cross-validation and for the backward
(adjoint) pass, which needs the transpose taken in the quadrature inner
product diag(W dx):  C_adj = Whats^{-1} C^T Whats.  For networks where all
pipes share dx this equals the plain transpose, because every endpoint
norm weight is 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .network import Junction, Network


@dataclass(frozen=True)
class PortGeometry:
    """Per-port constants entering the junction corrections."""

    area: float
    dx: float
    w_end: float  # norm weight at the endpoint (1/2 for the second-order pair)


def density_corrections(
    junction: Junction,
    geometry: Sequence[PortGeometry],
    rhs_tilde: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Equalize the endpoint density rates of one junction.

    ``rhs_tilde`` holds the uncorrected rho*A rates per port.  Returns the
    corrected rates and the control fluxes multiplied by the outward
    normal; the latter sum to zero exactly.
    """
    if len(junction.ports) == 0 or len(geometry) != len(junction.ports):
        raise ValueError("geometry must match the junction's port list")
    rhs_tilde = np.asarray(rhs_tilde, dtype=float)
    areas = np.array([g.area for g in geometry])
    dxs = np.array([g.dx for g in geometry])
    w_ends = np.array([g.w_end for g in geometry])
    if np.any(areas <= 0) or np.any(dxs <= 0):
        raise ValueError("areas and grid spacings must be positive")

    mean_rate = float(np.dot(dxs, rhs_tilde) / np.dot(dxs, areas))
    corrected = areas * mean_rate
    flux_n = w_ends * dxs * (corrected - rhs_tilde)
    return corrected, flux_n


def momentum_correction(
    junction: Junction,
    geometry: Sequence[PortGeometry],
    rhs_tilde: np.ndarray,
    normals: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Restore the mass-conservation rate balance of one junction.

    ``rhs_tilde`` holds the uncorrected m*A rates per port.  A single
    control flux shared by all ports is returned together with the
    corrected rates, which satisfy sum_p W_p rate_p n_p = 0 exactly.
    """
    if len(junction.ports) == 0 or len(geometry) != len(junction.ports):
        raise ValueError("geometry must match the junction's port list")
    rhs_tilde = np.asarray(rhs_tilde, dtype=float)
    normals = np.asarray(normals, dtype=float)
    dxs = np.array([g.dx for g in geometry])
    w_ends = np.array([g.w_end for g in geometry])

    defect = float(np.dot(w_ends * normals, rhs_tilde))
    f_m = -defect / float(np.sum(1.0 / dxs))
    corrected = rhs_tilde + f_m * normals / (w_ends * dxs)
    return f_m, corrected


def _port_geometry(net: Network, junction: Junction) -> list[PortGeometry]:
    geo = []
    for port in junction.ports:
        p = net.pipe(port.pipe)
        op = net.sbp(port.pipe)
        w_end = op.w_diag[0] if port.end == "start" else op.w_diag[-1]
        geo.append(PortGeometry(area=p.area, dx=p.dx, w_end=float(w_end)))
    return geo


def apply_junction_corrections(net: Network, rhs_tilde: np.ndarray) -> np.ndarray:
    """Formula path: apply both corrections junction by junction.

    Reference implementation used to cross-validate the matrix path; the
    two must agree to roundoff on any rate vector.
    """
    if rhs_tilde.shape != (net.layout.n_dof,):
        raise ValueError("rate vector does not match the network layout")
    out = rhs_tilde.copy()
    lay = net.layout
    for junction in net.junctions:
        geo = _port_geometry(net, junction)
        normals = np.array([port.normal for port in junction.ports], dtype=float)
        rho_idx = [lay.port_index(port, "rhoA") for port in junction.ports]
        m_idx = [lay.port_index(port, "mA") for port in junction.ports]

        rho_corr, _ = density_corrections(junction, geo, rhs_tilde[rho_idx])
        _, m_corr = momentum_correction(junction, geo, rhs_tilde[m_idx], normals)
        out[rho_idx] = rho_corr
        out[m_idx] = m_corr
    return out


@dataclass
class CouplingMatrix:
    """Sparse operator C with coupled_rate = (I + C) rate.

    ``weights`` is the global quadrature diagonal (per-DOF W_ii dx) used
    to form the adjoint-consistent transpose.
    """

    n_dof: int
    matrix: sp.csr_matrix
    weights: np.ndarray

    def apply(self, rhs_tilde: np.ndarray) -> np.ndarray:
        if rhs_tilde.shape != (self.n_dof,):
            raise ValueError(
                f"rate vector has length {rhs_tilde.shape}, expected {self.n_dof}"
            )
        return rhs_tilde + self.matrix @ rhs_tilde

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        """(I + C_adj) v with C_adj the transpose in the quadrature inner product."""
        if v.shape != (self.n_dof,):
            raise ValueError(f"vector has length {v.shape}, expected {self.n_dof}")
        return v + (self.matrix.T @ (self.weights * v)) / self.weights

    def triplets(self) -> list[tuple[int, int, float]]:
        """Nonzero entries as (row, col, value), row-major."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [
            (int(coo.row[k]), int(coo.col[k]), float(coo.data[k])) for k in order
        ]


def quadrature_weights(net: Network) -> np.ndarray:
    """Global diagonal of the quadrature norm: per DOF, W_ii dx of its pipe."""
    w = np.empty(net.layout.n_dof)
    for p in net.pipes:
        wd = net.sbp(p.id).w_diag * p.dx
        w[net.layout.rho_slice(p.id)] = wd
        w[net.layout.m_slice(p.id)] = wd
    return w


def assemble_coupling_matrix(net: Network) -> CouplingMatrix:
    """Build C from topology, areas, grid spacings, and endpoint norm weights."""
    lay = net.layout
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    for junction in net.junctions:
        geo = _port_geometry(net, junction)
        ports = junction.ports
        areas = np.array([g.area for g in geo])
        dxs = np.array([g.dx for g in geo])
        normals = np.array([port.normal for port in ports], dtype=float)

        rho_idx = [lay.port_index(port, "rhoA") for port in ports]
        m_idx = [lay.port_index(port, "mA") for port in ports]

        denom_rho = float(np.dot(dxs, areas))
        denom_m = float(np.sum(1.0 / dxs))
        for a, ia in enumerate(rho_idx):
            for b, ib in enumerate(rho_idx):
                value = areas[a] * dxs[b] / denom_rho - (1.0 if a == b else 0.0)
                if value != 0.0:
                    rows.append(ia)
                    cols.append(ib)
                    vals.append(value)
        for a, ia in enumerate(m_idx):
            for b, ib in enumerate(m_idx):
                value = -normals[a] * normals[b] / (dxs[a] * denom_m)
                if value != 0.0:
                    rows.append(ia)
                    cols.append(ib)
                    vals.append(value)

    matrix = sp.coo_matrix(
        (vals, (rows, cols)), shape=(lay.n_dof, lay.n_dof)
    ).tocsr()
    return CouplingMatrix(n_dof=lay.n_dof, matrix=matrix, weights=quadrature_weights(net))


def apply_coupling(coupling: CouplingMatrix, rhs_tilde: np.ndarray) -> np.ndarray:
    """coupled_rate = rhs_tilde + C rhs_tilde."""
    return coupling.apply(rhs_tilde)
