"""Pipe-network topology, JSON description parsing, and the global state layout.

A network is a set of pipes (each with its own uniform grid) connected at
junctions.  Every pipe end belongs to exactly one junction or exactly one
exterior port.  The conserved state per pipe is (rho*A, m*A) with
m = rho*u; the global state vector concatenates the pipes pipe-major,
density block before momentum block:

    [ pipe1 rhoA | pipe1 mA | pipe2 rhoA | pipe2 mA | ... ]

Two coupling conditions define a junction: equal density (hence equal
pressure, p = c^2 rho) of all attached pipe endpoints, and conservation of
mass, sum over ports of (rho u A) n = 0 with n the outward endpoint normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np

from .sbp import SbpOperator, build_sbp_second_order, integrate

PipeEnd = Literal["start", "end"]
Variable = Literal["rhoA", "mA"]

BC_NON_REFLECTING = "non-reflecting"
BC_CLOSED = "closed"
_BC_TAGS = (BC_NON_REFLECTING, BC_CLOSED)


class ParseError(ValueError):
    """Network description violates the schema; carries a location string."""

    def __init__(self, message: str, location: str = "") -> None:
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


@dataclass(frozen=True)
class Pipe:
    id: str
    length: float
    n_points: int
    area: float

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError(f"pipe {self.id}: length must be positive")
        if self.n_points < 3:
            raise ValueError(f"pipe {self.id}: need at least 3 grid points")
        if self.area <= 0:
            raise ValueError(f"pipe {self.id}: area must be positive")

    @property
    def dx(self) -> float:
        return self.length / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        """Local grid coordinates 0..length."""
        return np.linspace(0.0, self.length, self.n_points)


@dataclass(frozen=True)
class PortRef:
    """One pipe end; ``normal`` is -1 at the start, +1 at the end."""

    pipe: str
    end: PipeEnd

    def __post_init__(self) -> None:
        if self.end not in ("start", "end"):
            raise ValueError(f"port end must be 'start' or 'end', got {self.end!r}")

    @property
    def normal(self) -> int:
        return -1 if self.end == "start" else 1

    @property
    def point_index(self) -> int:
        """0-based grid index of the endpoint (0 or n-1 via -1)."""
        return 0 if self.end == "start" else -1


@dataclass(frozen=True)
class Junction:
    id: str
    ports: tuple[PortRef, ...]

    def __post_init__(self) -> None:
        if len(self.ports) < 2:
            raise ValueError(f"junction {self.id}: needs at least 2 ports")
        if len({(p.pipe, p.end) for p in self.ports}) != len(self.ports):
            raise ValueError(f"junction {self.id}: duplicate port")


@dataclass(frozen=True)
class ExteriorPort:
    port: PortRef
    bc: str = BC_NON_REFLECTING

    def __post_init__(self) -> None:
        if self.bc not in _BC_TAGS:
            raise ValueError(f"unknown boundary condition {self.bc!r}")


class StateLayout:
    """Bijective map between (pipe, variable, point) and flat state indices."""

    def __init__(self, pipes: tuple[Pipe, ...]) -> None:
        self._pipes = pipes
        self._offset: dict[str, int] = {}
        off = 0
        for p in pipes:
            self._offset[p.id] = off
            off += 2 * p.n_points
        self.n_dof = off
        self._n = {p.id: p.n_points for p in pipes}

    def rho_slice(self, pipe: str) -> slice:
        off = self._offset[pipe]
        return slice(off, off + self._n[pipe])

    def m_slice(self, pipe: str) -> slice:
        off = self._offset[pipe] + self._n[pipe]
        return slice(off, off + self._n[pipe])

    def global_index(self, pipe: str, variable: Variable, point: int) -> int:
        """Flat index for a 1-based grid point of the given variable."""
        if pipe not in self._offset:
            raise ValueError(f"unknown pipe {pipe!r}")
        n = self._n[pipe]
        if not 1 <= point <= n:
            raise ValueError(f"point {point} outside 1..{n} for pipe {pipe}")
        if variable == "rhoA":
            return self._offset[pipe] + (point - 1)
        if variable == "mA":
            return self._offset[pipe] + n + (point - 1)
        raise ValueError(f"unknown variable {variable!r}")

    def unravel(self, index: int) -> tuple[str, Variable, int]:
        """Inverse of :meth:`global_index` (1-based point)."""
        if not 0 <= index < self.n_dof:
            raise ValueError(f"flat index {index} outside 0..{self.n_dof - 1}")
        for p in self._pipes:
            off = self._offset[p.id]
            if index < off + 2 * p.n_points:
                local = index - off
                if local < p.n_points:
                    return p.id, "rhoA", local + 1
                return p.id, "mA", local - p.n_points + 1
        raise AssertionError("unreachable")

    def port_index(self, port: PortRef, variable: Variable) -> int:
        point = 1 if port.end == "start" else self._n[port.pipe]
        return self.global_index(port.pipe, variable, point)


class Network:
    """Validated, immutable pipe graph with a global sound speed."""

    def __init__(
        self,
        pipes: tuple[Pipe, ...] | list[Pipe],
        junctions: tuple[Junction, ...] | list[Junction] = (),
        exterior: tuple[ExteriorPort, ...] | list[ExteriorPort] = (),
        sound_speed: float = 1.0,
    ) -> None:
        self.pipes = tuple(pipes)
        self.junctions = tuple(junctions)
        self.exterior = tuple(exterior)
        self.sound_speed = float(sound_speed)
        self._validate()
        self.layout = StateLayout(self.pipes)
        self._by_id = {p.id: p for p in self.pipes}
        self._sbp: dict[str, SbpOperator] = {}

    def _validate(self) -> None:
        if self.sound_speed <= 0:
            raise ValueError("sound_speed must be positive")
        ids = [p.id for p in self.pipes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate pipe ids")
        if not self.pipes:
            raise ValueError("network needs at least one pipe")
        known = set(ids)
        seen: dict[tuple[str, str], str] = {}
        for j in self.junctions:
            for port in j.ports:
                if port.pipe not in known:
                    raise ValueError(f"junction {j.id}: unknown pipe {port.pipe!r}")
                key = (port.pipe, port.end)
                if key in seen:
                    raise ValueError(
                        f"pipe end {key} attached to both {seen[key]} and junction {j.id}"
                    )
                seen[key] = f"junction {j.id}"
        for ext in self.exterior:
            port = ext.port
            if port.pipe not in known:
                raise ValueError(f"exterior port: unknown pipe {port.pipe!r}")
            key = (port.pipe, port.end)
            if key in seen:
                raise ValueError(
                    f"pipe end {key} attached to both {seen[key]} and an exterior port"
                )
            seen[key] = "exterior"
        for p in self.pipes:
            for end in ("start", "end"):
                if (p.id, end) not in seen:
                    raise ValueError(f"pipe end ({p.id}, {end}) is dangling")

    def pipe(self, pipe_id: str) -> Pipe:
        return self._by_id[pipe_id]

    def sbp(self, pipe_id: str) -> SbpOperator:
        op = self._sbp.get(pipe_id)
        if op is None:
            p = self._by_id[pipe_id]
            op = build_sbp_second_order(p.n_points, p.dx)
            self._sbp[pipe_id] = op
        return op

    def ports(self) -> Iterator[tuple[Junction, PortRef]]:
        for j in self.junctions:
            for port in j.ports:
                yield j, port


@dataclass
class NetworkState:
    """Concatenated per-pipe conserved variables at one time level."""

    network: Network
    flat: np.ndarray

    @classmethod
    def uniform(cls, net: Network, rho: float = 1.0, m: float = 0.0) -> "NetworkState":
        flat = np.empty(net.layout.n_dof)
        for p in net.pipes:
            flat[net.layout.rho_slice(p.id)] = rho * p.area
            flat[net.layout.m_slice(p.id)] = m * p.area
        return cls(net, flat)

    def copy(self) -> "NetworkState":
        return NetworkState(self.network, self.flat.copy())

    def rho_a(self, pipe: str) -> np.ndarray:
        return self.flat[self.network.layout.rho_slice(pipe)]

    def m_a(self, pipe: str) -> np.ndarray:
        return self.flat[self.network.layout.m_slice(pipe)]

    def rho(self, pipe: str) -> np.ndarray:
        return self.rho_a(pipe) / self.network.pipe(pipe).area

    def check(self) -> None:
        if self.flat.shape != (self.network.layout.n_dof,):
            raise ValueError("state dimension does not match network layout")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("state contains non-finite entries")
        for p in self.network.pipes:
            if np.any(self.rho_a(p.id) <= 0):
                raise ValueError(f"pipe {p.id}: non-positive density")


def total_mass(net: Network, state: NetworkState) -> float:
    """Sum of the per-pipe quadratures of rho*A."""
    return sum(integrate(net.sbp(p.id), state.rho_a(p.id)) for p in net.pipes)


@dataclass
class JunctionDiagnostics:
    junction: str
    density_spread: float  # max-min endpoint density (equal-pressure defect)
    mass_flux_defect: float  # |sum of (rho u A) n| over ports (Kirchhoff defect)


@dataclass
class StateDiagnostics:
    per_junction: list[JunctionDiagnostics]
    tol: float

    @property
    def max_density_spread(self) -> float:
        return max((d.density_spread for d in self.per_junction), default=0.0)

    @property
    def max_mass_flux_defect(self) -> float:
        return max((d.mass_flux_defect for d in self.per_junction), default=0.0)

    @property
    def passed(self) -> bool:
        return (
            self.max_density_spread <= self.tol
            and self.max_mass_flux_defect <= self.tol
        )


def junction_diagnostics(net: Network, flat: np.ndarray, junction: Junction) -> JunctionDiagnostics:
    densities = []
    flux = 0.0
    for port in junction.ports:
        p = net.pipe(port.pipe)
        i = port.point_index
        densities.append(flat[net.layout.rho_slice(port.pipe)][i] / p.area)
        flux += flat[net.layout.m_slice(port.pipe)][i] * port.normal
    return JunctionDiagnostics(
        junction=junction.id,
        density_spread=float(max(densities) - min(densities)),
        mass_flux_defect=abs(float(flux)),
    )


def validate_initial_state(net: Network, state: NetworkState, tol: float = 1e-10) -> StateDiagnostics:
    """Check both junction conditions: density spread and mass-flux defect."""
    if state.flat.shape != (net.layout.n_dof,):
        raise ValueError("state dimension does not match network layout")
    diags = [junction_diagnostics(net, state.flat, j) for j in net.junctions]
    return StateDiagnostics(per_junction=diags, tol=tol)


# -- JSON network description ------------------------------------------------

_PIPE_KEYS = {"id", "length", "n_points", "area"}
_JUNCTION_KEYS = {"id", "ports"}
_PORT_KEYS = {"pipe", "end"}
_EXTERIOR_KEYS = {"pipe", "end", "bc"}
_TOP_KEYS = {"sound_speed", "pipes", "junctions", "exterior"}


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"expected an object, got {type(obj).__name__}", where)
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", where)
    missing = required - set(obj)
    if missing:
        raise ParseError(f"missing keys {sorted(missing)}", where)


def parse_network(text: str) -> Network:
    """Parse and fully validate a JSON network description."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", "document") from exc

    _require_keys(doc, _TOP_KEYS, {"sound_speed", "pipes"}, "document")

    pipes = []
    for i, entry in enumerate(doc["pipes"]):
        where = f"pipes[{i}]"
        _require_keys(entry, _PIPE_KEYS, _PIPE_KEYS, where)
        try:
            pipes.append(
                Pipe(
                    id=str(entry["id"]),
                    length=float(entry["length"]),
                    n_points=int(entry["n_points"]),
                    area=float(entry["area"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc), where) from exc

    junctions = []
    for i, entry in enumerate(doc.get("junctions", [])):
        where = f"junctions[{i}]"
        _require_keys(entry, _JUNCTION_KEYS, _JUNCTION_KEYS, where)
        ports = []
        for k, pentry in enumerate(entry["ports"]):
            _require_keys(pentry, _PORT_KEYS, _PORT_KEYS, f"{where}.ports[{k}]")
            ports.append(PortRef(pipe=str(pentry["pipe"]), end=pentry["end"]))
        try:
            junctions.append(Junction(id=str(entry["id"]), ports=tuple(ports)))
        except ValueError as exc:
            raise ParseError(str(exc), where) from exc

    exterior = []
    for i, entry in enumerate(doc.get("exterior", [])):
        where = f"exterior[{i}]"
        _require_keys(entry, _EXTERIOR_KEYS, _PORT_KEYS, where)
        try:
            exterior.append(
                ExteriorPort(
                    port=PortRef(pipe=str(entry["pipe"]), end=entry["end"]),
                    bc=entry.get("bc", BC_NON_REFLECTING),
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), where) from exc

    try:
        return Network(
            pipes=tuple(pipes),
            junctions=tuple(junctions),
            exterior=tuple(exterior),
            sound_speed=float(doc["sound_speed"]),
        )
    except ValueError as exc:
        raise ParseError(str(exc), "document") from exc


def serialize_network(net: Network) -> str:
    doc = {
        "sound_speed": net.sound_speed,
        "pipes": [
            {"id": p.id, "length": p.length, "n_points": p.n_points, "area": p.area}
            for p in net.pipes
        ],
        "junctions": [
            {"id": j.id, "ports": [{"pipe": p.pipe, "end": p.end} for p in j.ports]}
            for j in net.junctions
        ],
        "exterior": [
            {"pipe": e.port.pipe, "end": e.port.end, "bc": e.bc} for e in net.exterior
        ],
    }
    return json.dumps(doc, indent=2)
