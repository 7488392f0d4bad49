"""Phase-aware network model for unbalanced distribution feeders.

Every quantity is per-unit. Voltages are complex phasors; angles are radians
internally (degrees only at I/O boundaries). Phases are ordered canonically
a < b < c, and any vector or matrix reduced to a subset of phases keeps that
order.

A line with an all-zero impedance matrix is an "ideal" coupling: its endpoint
(node, phase) channels are electrically one point. Both solvers merge such
channels into a single electrical class and recover the coupling's flow from
nodal balance afterwards. The tie between the infinite bus and a feeder head
is modeled this way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

PHASES: tuple[str, ...] = ("a", "b", "c")
PHASE_INDEX: dict[str, int] = {"a": 0, "b": 1, "c": 2}

#: Reserved config name for zero-impedance couplings.
IDEAL_CONFIG = "ideal"

FEET_PER_MILE = 5280.0

#: Default slack phasors: unit magnitude, phases rotated 0 / 240 / 120 degrees.
DEFAULT_SLACK_VOLTAGE: tuple[complex, complex, complex] = (
    1.0 + 0.0j,
    complex(math.cos(4.0 * math.pi / 3.0), math.sin(4.0 * math.pi / 3.0)),
    complex(math.cos(2.0 * math.pi / 3.0), math.sin(2.0 * math.pi / 3.0)),
)


class NetworkError(ValueError):
    """Raised when a network document or mutation violates model invariants."""


def canonical_phases(phases: Iterable[str]) -> tuple[str, ...]:
    """Normalize a phase collection to the canonical (a, b, c) order.

    Accepts any iterable of single-character phase names, including a plain
    string like ``"ca"``. Duplicates and unknown phases are rejected.
    """
    items = list(phases)
    if not items:
        raise NetworkError("phase set must be nonempty")
    for p in items:
        if p not in PHASE_INDEX:
            raise NetworkError(f"unknown phase {p!r}")
    if len(set(items)) != len(items):
        raise NetworkError(f"duplicate phase in {items!r}")
    return tuple(sorted(items, key=PHASE_INDEX.__getitem__))


def _as_complex_matrix(z, n: int, context: str) -> tuple[tuple[complex, ...], ...]:
    arr = np.asarray(z, dtype=complex)
    if arr.shape != (n, n):
        raise NetworkError(f"{context}: impedance must be {n}x{n}, got {arr.shape}")
    return tuple(tuple(complex(v) for v in row) for row in arr)


@dataclass(frozen=True)
class NodeSpec:
    id: str
    phases: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", canonical_phases(self.phases))


@dataclass(frozen=True)
class LineSpec:
    """A series impedance element between two nodes on a subset of phases.

    ``z_pu`` is the per-unit impedance matrix over ``phases`` in canonical
    order. A switch is an ordinary line with ``is_switch=True``; only
    ``closed`` lines contribute equations. An all-zero ``z_pu`` marks an
    ideal (zero-impedance) coupling.
    """

    from_node: str
    to_node: str
    phases: tuple[str, ...]
    z_pu: tuple[tuple[complex, ...], ...]
    name: str = ""
    is_switch: bool = False
    closed: bool = True

    def __post_init__(self) -> None:
        phases = canonical_phases(self.phases)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(
            self, "z_pu", _as_complex_matrix(self.z_pu, len(phases), f"line {self.from_node}-{self.to_node}")
        )
        if not self.name:
            object.__setattr__(self, "name", f"{self.from_node}-{self.to_node}")
        if self.from_node == self.to_node:
            raise NetworkError(f"line {self.name}: endpoints coincide")

    @property
    def z(self) -> np.ndarray:
        return np.array(self.z_pu, dtype=complex)

    @property
    def is_ideal(self) -> bool:
        return all(v == 0 for row in self.z_pu for v in row)


@dataclass(frozen=True)
class LoadSpec:
    """Voltage-dependent wye load on one phase of one node.

    The consumed complex power is ``(beta_s + beta_z * |V|^2) * demand``
    plus the fixed capacitive injection ``-1j * cap``.
    """

    node: str
    phase: str
    demand: complex
    beta_s: float = 1.0
    beta_z: float = 0.0
    cap: float = 0.0

    def __post_init__(self) -> None:
        if self.phase not in PHASE_INDEX:
            raise NetworkError(f"load at {self.node}: unknown phase {self.phase!r}")
        if abs(self.beta_s + self.beta_z - 1.0) > 1e-12:
            raise NetworkError(f"load at {self.node}.{self.phase}: beta_s + beta_z must equal 1")
        if not (0.0 <= self.beta_s <= 1.0 and 0.0 <= self.beta_z <= 1.0):
            raise NetworkError(f"load at {self.node}.{self.phase}: betas must lie in [0, 1]")
        object.__setattr__(self, "demand", complex(self.demand))


@dataclass(frozen=True)
class DerSpec:
    """Controllable injection channel with an apparent-power capacity."""

    node: str
    phase: str
    capacity: float

    def __post_init__(self) -> None:
        if self.phase not in PHASE_INDEX:
            raise NetworkError(f"der at {self.node}: unknown phase {self.phase!r}")
        if self.capacity < 0:
            raise NetworkError(f"der at {self.node}.{self.phase}: capacity must be >= 0")


@dataclass(frozen=True)
class VvcSpec:
    """Autonomous volt-var unit: reactive consumption as a function of |V|.

    The response ramps linearly from ``q_min`` at ``v_min`` to ``q_max`` at
    ``v_max`` and saturates outside that band. Positive q consumes vars
    (pulls the local voltage down), so the feedback is stabilizing.
    """

    node: str
    phase: str
    q_min: float
    q_max: float
    v_min: float
    v_max: float

    def __post_init__(self) -> None:
        if self.phase not in PHASE_INDEX:
            raise NetworkError(f"vvc at {self.node}: unknown phase {self.phase!r}")
        if not self.q_min < self.q_max:
            raise NetworkError(f"vvc at {self.node}.{self.phase}: q_min must be < q_max")
        if not self.v_min < self.v_max:
            raise NetworkError(f"vvc at {self.node}.{self.phase}: v_min must be < v_max")

    @property
    def slope(self) -> float:
        return (self.q_max - self.q_min) / (self.v_max - self.v_min)

    def response(self, v_mag: float) -> float:
        """Clamped piecewise-linear reactive consumption at voltage ``v_mag``."""
        if v_mag <= self.v_min:
            return self.q_min
        if v_mag >= self.v_max:
            return self.q_max
        return self.q_min + self.slope * (v_mag - self.v_min)

    def linear_coeffs(self) -> tuple[float, float]:
        """Coefficients (k0, k1) of the unclamped segment written in E = |V|^2.

        Uses the first-order expansion |V| ~ (1 + E) / 2 around E = 1, so
        q(E) = k0 + k1 * E with k1 = slope / 2.
        """
        k1 = self.slope / 2.0
        k0 = self.q_min + self.slope * (0.5 - self.v_min)
        return k0, k1


@dataclass(frozen=True)
class Network:
    """Immutable feeder graph with loads, DER channels, and volt-var units.

    All mutation helpers return new networks. ``line_configs`` carries the
    per-mile impedance tables of the source document so that modification
    scripts can instantiate new lines by config name.
    """

    nodes: tuple[NodeSpec, ...]
    lines: tuple[LineSpec, ...]
    loads: tuple[LoadSpec, ...] = ()
    der_units: tuple[DerSpec, ...] = ()
    vvc_units: tuple[VvcSpec, ...] = ()
    slack_id: str = "source"
    slack_voltage: tuple[complex, complex, complex] = DEFAULT_SLACK_VOLTAGE
    s_base_va: float = 1.0e6
    v_base_v: float = 4160.0
    line_configs: Mapping[str, "LineConfig"] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "slack_voltage", tuple(complex(v) for v in self.slack_voltage))
        if len(self.slack_voltage) != 3:
            raise NetworkError("slack_voltage must have one phasor per phase")
        object.__setattr__(self, "line_configs", dict(self.line_configs))
        self._validate()

    # -- validation ----------------------------------------------------

    def _validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate node ids: {dup}")
        by_id = {n.id: n for n in self.nodes}
        if self.slack_id not in by_id:
            raise NetworkError(f"slack node {self.slack_id!r} not declared")
        if by_id[self.slack_id].phases != PHASES:
            raise NetworkError("slack node must carry all three phases")

        names = [ln.name for ln in self.lines]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise NetworkError(f"duplicate line names: {dup} (give explicit names to parallel lines)")

        for ln in self.lines:
            for end in (ln.from_node, ln.to_node):
                if end not in by_id:
                    raise NetworkError(f"line {ln.name}: unknown endpoint {end!r}")
            for end in (ln.from_node, ln.to_node):
                missing = set(ln.phases) - set(by_id[end].phases)
                if missing:
                    raise NetworkError(
                        f"line {ln.name}: phase {sorted(missing)} absent at node {end}"
                    )
            if not ln.is_ideal:
                z = ln.z
                if abs(np.linalg.det(z)) < 1e-30:
                    raise NetworkError(f"line {ln.name}: impedance matrix is singular")

        for load in self.loads:
            self._check_channel(load.node, load.phase, by_id, "load")
        for der in self.der_units:
            self._check_channel(der.node, der.phase, by_id, "der")
        for vvc in self.vvc_units:
            self._check_channel(vvc.node, vvc.phase, by_id, "vvc")

        self._check_connectivity(by_id)

    @staticmethod
    def _check_channel(node: str, phase: str, by_id: Mapping[str, NodeSpec], kind: str) -> None:
        if node not in by_id:
            raise NetworkError(f"{kind} references unknown node {node!r}")
        if phase not in by_id[node].phases:
            raise NetworkError(f"{kind} at {node}: phase {phase} absent at that node")

    def _check_connectivity(self, by_id: Mapping[str, NodeSpec]) -> None:
        # Channel-level reachability: every (node, phase) must connect to the
        # slack through closed lines carrying that walk's phases.
        adj: dict[tuple[str, str], list[tuple[str, str]]] = {}
        for ln in self.lines:
            if not ln.closed:
                continue
            for p in ln.phases:
                adj.setdefault((ln.from_node, p), []).append((ln.to_node, p))
                adj.setdefault((ln.to_node, p), []).append((ln.from_node, p))
        seen: set[tuple[str, str]] = set()
        stack = [(self.slack_id, p) for p in PHASES]
        seen.update(stack)
        while stack:
            ch = stack.pop()
            for nxt in adj.get(ch, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        unreachable = [
            (n.id, p) for n in self.nodes for p in n.phases if (n.id, p) not in seen
        ]
        if unreachable:
            raise NetworkError(
                "channels not connected to the slack through closed lines: "
                + ", ".join(f"{n}.{p}" for n, p in sorted(unreachable)[:8])
            )

    # -- convenient views ----------------------------------------------

    @cached_property
    def node_map(self) -> dict[str, NodeSpec]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def line_map(self) -> dict[str, LineSpec]:
        return {ln.name: ln for ln in self.lines}

    @cached_property
    def channels(self) -> tuple[tuple[str, str], ...]:
        """All (node, phase) channels, nodes in declaration order."""
        return tuple((n.id, p) for n in self.nodes for p in n.phases)

    def slack_phasor(self, phase: str) -> complex:
        return self.slack_voltage[PHASE_INDEX[phase]]

    @property
    def z_base_ohm(self) -> float:
        return self.v_base_v**2 / self.s_base_va

    @cached_property
    def open_switches(self) -> tuple[str, ...]:
        return tuple(ln.name for ln in self.lines if ln.is_switch and not ln.closed)

    @cached_property
    def index(self) -> "NetworkIndex":
        return NetworkIndex(self)

    # -- mutation (pure) -----------------------------------------------

    def close_switch(self, switch_id: str) -> "Network":
        """Return a copy with the named switch closed. Meshes are allowed."""
        ln = self.line_map.get(switch_id)
        if ln is None or not ln.is_switch:
            raise NetworkError(f"unknown switch {switch_id!r}")
        if ln.closed:
            raise NetworkError(f"switch {switch_id!r} is already closed")
        lines = tuple(replace(l, closed=True) if l.name == switch_id else l for l in self.lines)
        return replace(self, lines=lines)


@dataclass(frozen=True)
class LineConfig:
    """Per-unit-length impedance table entry from a feeder document."""

    phases: tuple[str, ...]
    z_ohm_per_mile: tuple[tuple[complex, ...], ...]
    comment: str = ""

    def __post_init__(self) -> None:
        phases = canonical_phases(self.phases)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(
            self, "z_ohm_per_mile", _as_complex_matrix(self.z_ohm_per_mile, len(phases), "config")
        )

    def z_pu(self, length_ft: float, z_base_ohm: float) -> np.ndarray:
        scale = (length_ft / FEET_PER_MILE) / z_base_ohm
        return np.array(self.z_ohm_per_mile, dtype=complex) * scale


# ----------------------------------------------------------------------
# Electrical indexing: merge ideal couplings, enumerate solver classes.
# ----------------------------------------------------------------------


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        while p != x:
            self.parent[x] = p = self.parent.setdefault(p, p)
            x, p = p, self.parent[p]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


class NetworkIndex:
    """Derived solver structure for a network.

    Channels tied by closed ideal lines collapse into electrical classes.
    Classes containing a slack channel are pinned; the remaining classes are
    the solver unknowns, ordered deterministically.
    """

    def __init__(self, net: Network) -> None:
        self.net = net
        uf = _UnionFind()
        for ch in net.channels:
            uf.find(ch)

        self.ideal_lines = tuple(ln for ln in net.lines if ln.closed and ln.is_ideal)
        self.real_lines = tuple(ln for ln in net.lines if ln.closed and not ln.is_ideal)

        for ln in self.ideal_lines:
            for p in ln.phases:
                if not uf.union((ln.from_node, p), (ln.to_node, p)):
                    raise NetworkError(
                        f"ideal line {ln.name}: zero-impedance cycle on phase {p} "
                        "(coupling flow would be indeterminate)"
                    )

        members: dict[tuple[str, str], list[tuple[str, str]]] = {}
        for ch in net.channels:
            members.setdefault(uf.find(ch), []).append(ch)
        self.class_of: dict[tuple[str, str], int] = {}
        classes: list[tuple[tuple[str, str], ...]] = []
        for ch in net.channels:  # deterministic: declaration order
            root = uf.find(ch)
            if root in members:
                classes.append(tuple(sorted(members.pop(root))))
        for k, mem in enumerate(classes):
            for ch in mem:
                self.class_of[ch] = k
        self.classes = tuple(classes)

        self.slack_value: dict[int, complex] = {}
        for p in PHASES:
            k = self.class_of[(net.slack_id, p)]
            if k in self.slack_value:
                raise NetworkError("ideal lines tie two slack phases together")
            self.slack_value[k] = net.slack_phasor(p)

        self.free_classes = tuple(k for k in range(len(self.classes)) if k not in self.slack_value)
        self.free_index = {k: i for i, k in enumerate(self.free_classes)}
        self.n_free = len(self.free_classes)

        # Per real line: class index arrays for both ends, reduced admittance.
        self.line_y: dict[str, np.ndarray] = {}
        self.line_from_cls: dict[str, np.ndarray] = {}
        self.line_to_cls: dict[str, np.ndarray] = {}
        for ln in self.real_lines:
            self.line_y[ln.name] = np.linalg.inv(ln.z)
            self.line_from_cls[ln.name] = np.array(
                [self.class_of[(ln.from_node, p)] for p in ln.phases], dtype=int
            )
            self.line_to_cls[ln.name] = np.array(
                [self.class_of[(ln.to_node, p)] for p in ln.phases], dtype=int
            )

        self._build_ideal_forest()

    def _build_ideal_forest(self) -> None:
        """Orient ideal couplings for flow recovery.

        Within each class the ideal lines form a tree over channels. Root each
        tree at the slack channel when present (else the first channel) and
        store edges in leaf-first order: the flow on an edge equals the
        accumulated nodal defect of the subtree hanging below it.
        """
        edges: dict[tuple[str, str], list[tuple[str, int, tuple[str, str]]]] = {}
        for ln in self.ideal_lines:
            for pi, p in enumerate(ln.phases):
                a, b = (ln.from_node, p), (ln.to_node, p)
                edges.setdefault(a, []).append((ln.name, pi, b))
                edges.setdefault(b, []).append((ln.name, pi, a))

        order: list[tuple[str, int, tuple[str, str], float]] = []
        visited: set[tuple[str, str]] = set()
        for mem in self.classes:
            root = next((ch for ch in mem if ch[0] == self.net.slack_id), mem[0])
            if root in visited or root not in edges:
                continue
            stack = [(root, None)]
            dfs: list[tuple[tuple[str, str], tuple[str, int, tuple[str, str]] | None]] = []
            visited.add(root)
            while stack:
                ch, via = stack.pop()
                dfs.append((ch, via))
                for name, pi, other in edges.get(ch, ()):
                    if other not in visited:
                        visited.add(other)
                        stack.append((other, (name, pi, ch)))
            # Leaf-first: reverse DFS discovery order.
            for ch, via in reversed(dfs):
                if via is None:
                    continue
                name, pi, parent = via
                ln = self.net.line_map[name]
                # Sign +1 when the oriented parent->child direction matches
                # the line's from->to direction.
                sign = 1.0 if (ln.from_node, ln.phases[pi]) == parent else -1.0
                order.append((name, pi, ch, sign))
        #: tuples (line name, phase position, child channel, orientation sign)
        self.ideal_recovery = tuple(order)

    def resolve_ideal_flows(self, defect: dict[tuple[str, str], complex]) -> dict[tuple[str, int], complex]:
        """Given per-channel nodal defects, return per ideal line-phase flows.

        ``defect[(node, phase)]`` must hold (load draw + outgoing real-line
        flow - incoming real-line flow) for that channel, in whatever
        conserved quantity the caller uses (current for the exact model,
        complex power for the lossless linear model). Returns flows keyed by
        (line name, phase position), oriented from -> to.
        """
        acc = dict(defect)
        flows: dict[tuple[str, int], complex] = {}
        for name, pi, child, sign in self.ideal_recovery:
            f = acc.get(child, 0.0 + 0.0j)
            flows[(name, pi)] = sign * f
            ln = self.net.line_map[name]
            parent = (
                (ln.from_node, ln.phases[pi]) if sign > 0 else (ln.to_node, ln.phases[pi])
            )
            acc[parent] = acc.get(parent, 0.0 + 0.0j) + f
        return flows


def wrap_angle(theta: float | np.ndarray):
    """Wrap angles to (-pi, pi]."""
    return -((-np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi)
