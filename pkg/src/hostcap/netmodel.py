"""Radial feeder model: case-file parsing, admittance assembly, parity labels.

Buses and branches are plain immutable records; the :class:`Network` bundles
them with the assembled bus admittance matrix.  All electrical quantities are
per-unit on the single system base declared in the case file.

Case file format (UTF-8 text, ``#`` starts a comment, blank lines ignored)::

    BASE   <MVA> <kV>
    BUS    <id> <slack|gen|load> <Pload> <Qload> <lambda>
    BRANCH <from> <to> <r> <x> [C]
    SHUNT  <bus> <g> <b>                      # optional, folded into Ybus diagonal
    LIMITS <vmin> <vmax> [theta_max] [eta]    # optional defaults, see cli module

All numbers are decimal; loads and impedances are per-unit on the declared
base.  Bus ids must be contiguous integers starting at 0; by convention the
slack is bus 0, but any single bus may be declared ``slack``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

__all__ = [
    "BusKind",
    "Bus",
    "Branch",
    "Network",
    "CaseFormatError",
    "TopologyError",
    "parse_case",
    "serialize_case",
    "read_case_limits",
    "build_ybus",
    "assign_parity",
    "bfs_tree",
]


class CaseFormatError(ValueError):
    """Raised for malformed or inconsistent case-file content."""


class TopologyError(ValueError):
    """Raised when a network's graph violates a topology requirement."""


class BusKind(str, Enum):
    SLACK = "slack"
    GEN = "gen"    # PV-type: candidate DG location
    LOAD = "load"  # PQ-type

    def __str__(self) -> str:  # keep case-file spelling in messages/output
        return self.value


@dataclass(frozen=True)
class Bus:
    """A network node.

    ``lam`` is the non-negative objective weight of the bus (0 excludes the
    bus from the hosting-capacity objective).  ``parity`` is the depth-mod-2
    label used by the pattern solver; it is derived by :func:`assign_parity`,
    never parsed.
    """

    id: int
    kind: BusKind
    load_p: float = 0.0
    load_q: float = 0.0
    lam: float = 1.0
    parity: int | None = None

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"bus {self.id}: lambda must be non-negative")
        if self.parity not in (None, 0, 1):
            raise ValueError(f"bus {self.id}: parity must be 0, 1 or None")


@dataclass(frozen=True)
class Branch:
    """A series branch (line segment) with optional thermal current limit."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    thermal_limit: float | None = None

    def __post_init__(self) -> None:
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.r < 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: negative resistance")
        if self.r == 0 and self.x == 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: zero-impedance branch")
        if self.thermal_limit is not None and not self.thermal_limit >= 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: thermal limit must be >= 0")

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True, eq=False)
class Network:
    """An immutable bus/branch network with its assembled admittance matrix.

    Construction validates that bus ids are contiguous from 0, that exactly
    one bus is the slack, that branch endpoints exist and that the branch
    graph is connected.  Radiality (exactly n-1 branches) is *not* required
    here; operations that need a tree check it themselves.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0
    slack_vm: float = 1.0
    shunts: tuple[complex, ...] | None = None
    ybus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.buses)
        if n == 0:
            raise ValueError("network has no buses")
        ids = [b.id for b in self.buses]
        if ids != list(range(n)):
            raise ValueError("bus ids must be contiguous integers starting at 0")
        slacks = [b.id for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) == 0:
            raise ValueError("missing slack bus")
        if len(slacks) > 1:
            raise ValueError(f"multiple slack buses: {slacks}")
        if self.slack_vm <= 0:
            raise ValueError("slack voltage magnitude must be positive")
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise ValueError(f"branch {br.from_bus}-{br.to_bus}: unknown bus id")
        if self.shunts is not None and len(self.shunts) != n:
            raise ValueError("shunt vector length must equal bus count")
        if not _is_connected(n, self.branches):
            raise TopologyError("non-connected graph")
        object.__setattr__(self, "ybus", build_ybus(self))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        for b in self.buses:
            if b.kind is BusKind.SLACK:
                return b.id
        raise AssertionError("validated network lost its slack")

    @property
    def lam(self) -> np.ndarray:
        return np.array([b.lam for b in self.buses], dtype=float)

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per-bus list of (neighbor id, branch index), sorted by neighbor."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for bi, br in enumerate(self.branches):
            adj[br.from_bus].append((br.to_bus, bi))
            adj[br.to_bus].append((br.from_bus, bi))
        for lst in adj:
            lst.sort()
        return adj

    def is_radial(self) -> bool:
        return len(self.branches) == self.n - 1


def _is_connected(n: int, branches: tuple[Branch, ...]) -> bool:
    if n == 1:
        return True
    seen = [False] * n
    seen[0] = True
    stack = [0]
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return all(seen)


def build_ybus(network: Network) -> np.ndarray:
    """Assemble the complex bus admittance matrix from series branches.

    Off-diagonal entries are the negated series admittances; diagonals sum
    the incident series admittances plus any shunt terms.  The result is
    symmetric, and with no shunts every row sums to zero.
    """
    n = len(network.buses)
    y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        ys = br.series_admittance
        i, k = br.from_bus, br.to_bus
        y[i, k] -= ys
        y[k, i] -= ys
        y[i, i] += ys
        y[k, k] += ys
    if network.shunts is not None:
        y[np.diag_indices(n)] += np.asarray(network.shunts, dtype=complex)
    y.flags.writeable = False  # networks are shared across workers
    return y


def bfs_tree(network: Network) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Breadth-first tree of a radial network rooted at the slack.

    Returns ``(parents, depths, order)`` where ``parents[slack] == -1`` and
    ``order`` lists bus ids in visit order.  Raises :class:`TopologyError`
    for non-radial networks (parity labels are only defined on trees).
    """
    if not network.is_radial():
        raise TopologyError("non-radial network: expected exactly n-1 branches")
    n = network.n
    root = network.slack_index
    parents = np.full(n, -1, dtype=int)
    depths = np.full(n, -1, dtype=int)
    depths[root] = 0
    order = [root]
    adj = network.adjacency()
    head = 0
    while head < len(order):
        u = order[head]
        head += 1
        for v, _bi in adj[u]:
            if depths[v] < 0:
                depths[v] = depths[u] + 1
                parents[v] = u
                order.append(v)
    if len(order) != n:
        raise TopologyError("non-radial network")
    return parents, depths, order


def assign_parity(network: Network) -> Network:
    """Label every bus with its depth-from-slack parity (slack is even).

    Every branch of a tree joins an odd bus to an even bus, which is exactly
    the alternating structure the pattern solver exploits.
    """
    _, depths, _ = bfs_tree(network)
    buses = tuple(replace(b, parity=int(depths[b.id]) % 2) for b in network.buses)
    return replace(network, buses=buses)


# --- case-file I/O ---------------------------------------------------------


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _num(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(f"line {lineno}: {what} is not a number: {tok!r}") from None


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise CaseFormatError(f"line {lineno}: {what} is not an integer: {tok!r}") from None


def parse_case(text: str) -> Network:
    """Parse case-file content into a :class:`Network`.

    See the module docstring for the format.  Raises
    :class:`CaseFormatError` for syntax problems and invariant violations
    (duplicate ids, missing/multiple slack), :class:`TopologyError` for a
    disconnected branch graph.
    """
    base_mva, base_kv = 1.0, 1.0
    raw_buses: dict[int, Bus] = {}
    branches: list[Branch] = []
    shunt_records: list[tuple[int, float, float]] = []
    saw_base = False
    for lineno, toks in _tokens(text):
        rec = toks[0].upper()
        if rec == "BASE":
            if len(toks) != 3:
                raise CaseFormatError(f"line {lineno}: BASE takes <MVA> <kV>")
            base_mva = _num(toks[1], lineno, "base MVA")
            base_kv = _num(toks[2], lineno, "base kV")
            saw_base = True
        elif rec == "BUS":
            if len(toks) != 6:
                raise CaseFormatError(f"line {lineno}: BUS takes <id> <kind> <Pload> <Qload> <lambda>")
            bid = _int(toks[1], lineno, "bus id")
            try:
                kind = BusKind(toks[2].lower())
            except ValueError:
                raise CaseFormatError(f"line {lineno}: unknown bus kind {toks[2]!r}") from None
            if bid in raw_buses:
                raise CaseFormatError(f"line {lineno}: duplicate bus id {bid}")
            raw_buses[bid] = Bus(
                id=bid,
                kind=kind,
                load_p=_num(toks[3], lineno, "Pload"),
                load_q=_num(toks[4], lineno, "Qload"),
                lam=_num(toks[5], lineno, "lambda"),
            )
        elif rec == "BRANCH":
            if len(toks) not in (5, 6):
                raise CaseFormatError(f"line {lineno}: BRANCH takes <from> <to> <r> <x> [C]")
            limit = _num(toks[5], lineno, "thermal limit") if len(toks) == 6 else None
            if limit is not None and limit <= 0:
                raise CaseFormatError(f"line {lineno}: thermal limit must be positive")
            branches.append(
                Branch(
                    from_bus=_int(toks[1], lineno, "from bus"),
                    to_bus=_int(toks[2], lineno, "to bus"),
                    r=_num(toks[3], lineno, "r"),
                    x=_num(toks[4], lineno, "x"),
                    thermal_limit=limit,
                )
            )
        elif rec == "SHUNT":
            if len(toks) != 4:
                raise CaseFormatError(f"line {lineno}: SHUNT takes <bus> <g> <b>")
            bid = _int(toks[1], lineno, "bus id")
            shunt_records.append((bid, _num(toks[2], lineno, "g"), _num(toks[3], lineno, "b")))
        elif rec == "LIMITS":
            # constraint defaults; consumed by read_case_limits
            if len(toks) not in (3, 4, 5):
                raise CaseFormatError(f"line {lineno}: LIMITS takes <vmin> <vmax> [theta_max] [eta]")
            for tok in toks[1:]:
                _num(tok, lineno, "limit")
        else:
            raise CaseFormatError(f"line {lineno}: unknown record {toks[0]!r}")

    if not saw_base:
        raise CaseFormatError("missing BASE header")
    if not raw_buses:
        raise CaseFormatError("no BUS records")
    n = len(raw_buses)
    if sorted(raw_buses) != list(range(n)):
        raise CaseFormatError("bus ids must be contiguous integers starting at 0")
    buses = tuple(raw_buses[i] for i in range(n))
    slack_count = sum(1 for b in buses if b.kind is BusKind.SLACK)
    if slack_count == 0:
        raise CaseFormatError("missing slack bus")
    if slack_count > 1:
        raise CaseFormatError("multiple slack buses declared")

    shunts = None
    if shunt_records:
        vec = [0j] * n
        for bid, g, b in shunt_records:
            if not 0 <= bid < n:
                raise CaseFormatError(f"SHUNT references unknown bus {bid}")
            vec[bid] += complex(g, b)
        shunts = tuple(vec)

    try:
        return Network(
            buses=buses,
            branches=tuple(branches),
            base_mva=base_mva,
            base_kv=base_kv,
            shunts=shunts,
        )
    except TopologyError:
        raise
    except ValueError as exc:
        raise CaseFormatError(str(exc)) from None


def read_case_limits(text: str) -> dict[str, float] | None:
    """Extract the optional LIMITS record (constraint defaults) from a case."""
    for lineno, toks in _tokens(text):
        if toks[0].upper() == "LIMITS":
            vals = [_num(t, lineno, "limit") for t in toks[1:]]
            out = {"v_min": vals[0], "v_max": vals[1]}
            if len(vals) >= 3:
                out["theta_max"] = vals[2]
            if len(vals) >= 4:
                out["eta"] = vals[3]
            return out
    return None


def serialize_case(network: Network) -> str:
    """Render a network back to case-file text with full float precision."""
    lines = [f"BASE {network.base_mva!r} {network.base_kv!r}"]
    for b in network.buses:
        lines.append(f"BUS {b.id} {b.kind} {b.load_p!r} {b.load_q!r} {b.lam!r}")
    for br in network.branches:
        tail = f" {br.thermal_limit!r}" if br.thermal_limit is not None else ""
        lines.append(f"BRANCH {br.from_bus} {br.to_bus} {br.r!r} {br.x!r}{tail}")
    if network.shunts is not None:
        for bid, s in enumerate(network.shunts):
            if s != 0:
                lines.append(f"SHUNT {bid} {s.real!r} {s.imag!r}")
    return "\n".join(lines) + "\n"
