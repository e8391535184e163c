"""Grid case description, per-unit conversion and nodal admittance assembly.

Case files are JSON::

    {"s_base_mva": 100, "v_base_kv": 110,
     "buses": [{"id": 1, "kind": "PV", "p_mw": 20, "v_kv": 110}, ...],
     "branches": [{"from": 1, "to": 2, "r_ohm": 5, "x_ohm": 10}, ...]}

Bus powers follow the load convention: positive P and Q are consumption,
negative values are generation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CaseError

BUS_KINDS = ("PQ", "PV", "VD")

_CASE_KEYS = {"s_base_mva", "v_base_kv", "buses", "branches"}
_BUS_KEYS = {"id", "kind", "p_mw", "q_mvar", "v_kv", "delta_rad", "shunt_g_s", "shunt_b_s"}
_BRANCH_KEYS = {"from", "to", "r_ohm", "x_ohm", "b_s"}


@dataclass(frozen=True)
class BusSpec:
    id: int
    kind: str
    p: float = 0.0
    q: float = 0.0
    v: float | None = None
    delta: float = 0.0
    shunt: complex = 0j


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    """Physical-unit grid: MW, MVAr, kV, ohm, siemens."""

    buses: tuple[BusSpec, ...]
    branches: tuple[BranchSpec, ...]
    s_base: float = 100.0
    v_base: float = 110.0

    def __post_init__(self):
        validate_case(self)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack_bus(self) -> int:
        """Id of the (first) VD bus."""
        for b in self.buses:
            if b.kind == "VD":
                return b.id
        raise CaseError("case has no VD bus")

    def with_base(self, s_base: float) -> "NetworkCase":
        return NetworkCase(self.buses, self.branches, s_base, self.v_base)


def validate_case(case: NetworkCase, require_slack: bool = True) -> None:
    if not case.buses:
        raise CaseError("case has no buses")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseError(f"duplicate bus id(s): {dup}")
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if b.kind in ("PV", "VD") and (b.v is None or not b.v > 0):
            raise CaseError(f"bus {b.id}: {b.kind} bus needs a positive voltage magnitude")
    n_vd = sum(b.kind == "VD" for b in case.buses)
    if require_slack and n_vd != 1:
        raise CaseError(f"expected exactly one VD bus, found {n_vd}")
    known = set(ids)
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus}: endpoint {end} is not a bus")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus}: endpoints coincide")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
    if not case.s_base > 0 or not case.v_base > 0:
        raise CaseError("bases must be positive")
    if not _connected(ids, [(br.from_bus, br.to_bus) for br in case.branches]):
        raise CaseError("network graph is not connected")


def _connected(ids, edges) -> bool:
    adj = {i: set() for i in ids}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


def _reject_unknown(obj, allowed, where):
    if not isinstance(obj, dict):
        raise CaseError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise CaseError(f"{where}: unknown key(s) {sorted(extra)}")


def _number(obj, key, where, default=None):
    val = obj.get(key, default)
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise CaseError(f"{where}: {key} must be a number")
    return float(val)


def parse_case(text: str) -> NetworkCase:
    """Parse and validate case-file JSON text."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc}") from None
    _reject_unknown(raw, _CASE_KEYS, "case")
    for key in ("buses", "branches"):
        if not isinstance(raw.get(key), list):
            raise CaseError(f"case: {key} must be an array")

    buses = []
    for i, rb in enumerate(raw["buses"]):
        where = f"buses[{i}]"
        _reject_unknown(rb, _BUS_KEYS, where)
        if not isinstance(rb.get("id"), int) or isinstance(rb.get("id"), bool):
            raise CaseError(f"{where}: id must be an integer")
        kind = rb.get("kind")
        if kind not in BUS_KINDS:
            raise CaseError(f"{where}: kind must be one of {BUS_KINDS}")
        g = _number(rb, "shunt_g_s", where, 0.0)
        bsh = _number(rb, "shunt_b_s", where, 0.0)
        buses.append(BusSpec(
            id=rb["id"],
            kind=kind,
            p=_number(rb, "p_mw", where, 0.0),
            q=_number(rb, "q_mvar", where, 0.0),
            v=_number(rb, "v_kv", where),
            delta=_number(rb, "delta_rad", where, 0.0),
            shunt=complex(g, bsh),
        ))

    branches = []
    for i, rb in enumerate(raw["branches"]):
        where = f"branches[{i}]"
        _reject_unknown(rb, _BRANCH_KEYS, where)
        for end in ("from", "to"):
            if not isinstance(rb.get(end), int) or isinstance(rb.get(end), bool):
                raise CaseError(f"{where}: {end} must be an integer bus id")
        r = _number(rb, "r_ohm", where, 0.0)
        x = _number(rb, "x_ohm", where, 0.0)
        branches.append(BranchSpec(rb["from"], rb["to"], r, x, _number(rb, "b_s", where, 0.0)))

    s_base = _number(raw, "s_base_mva", "case", 100.0)
    v_base = _number(raw, "v_base_kv", "case")
    if v_base is None:
        raise CaseError("case: v_base_kv is required")
    return NetworkCase(tuple(buses), tuple(branches), s_base, v_base)


def load_case(path) -> NetworkCase:
    return parse_case(Path(path).read_text())


def case_to_dict(case: NetworkCase) -> dict:
    """Inverse of :func:`parse_case` (up to key order and defaults)."""
    buses = []
    for b in case.buses:
        d = {"id": b.id, "kind": b.kind, "p_mw": b.p, "q_mvar": b.q}
        if b.v is not None:
            d["v_kv"] = b.v
        if b.delta:
            d["delta_rad"] = b.delta
        if b.shunt:
            d["shunt_g_s"] = b.shunt.real
            d["shunt_b_s"] = b.shunt.imag
        buses.append(d)
    branches = [{"from": br.from_bus, "to": br.to_bus, "r_ohm": br.r, "x_ohm": br.x, "b_s": br.b}
                for br in case.branches]
    return {"s_base_mva": case.s_base, "v_base_kv": case.v_base, "buses": buses, "branches": branches}


@dataclass(frozen=True, eq=False)
class PerUnitNetwork:
    """Per-unit arrays indexed by bus position (order of ``ids``).

    ``p`` and ``q`` are load-convention powers; ``v`` holds setpoints for
    PV/VD buses and 1.0 for PQ buses.
    """

    ids: tuple[int, ...]
    kinds: tuple[str, ...]
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    shunt: np.ndarray
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_z: np.ndarray
    branch_b: np.ndarray
    s_base: float
    v_base: float
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("p", "q", "v", "delta", "shunt", "branch_from", "branch_to", "branch_z", "branch_b"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._index.update({bid: k for k, bid in enumerate(self.ids)})

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def z_base(self) -> float:
        return self.v_base ** 2 / self.s_base

    def index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseError(f"bus {bus_id} is not in the case") from None

    def mask(self, *kinds: str) -> np.ndarray:
        return np.array([k in kinds for k in self.kinds])

    @property
    def slack_bus(self) -> int:
        return self.ids[self.kinds.index("VD")]

    @property
    def lossless(self) -> bool:
        return bool(np.all(self.branch_z.real == 0) and np.all(self.shunt.real == 0))

    def with_injections(self, p=None, q=None) -> "PerUnitNetwork":
        """Copy with replaced bus powers (per unit, load convention)."""
        return PerUnitNetwork(
            self.ids, self.kinds,
            self.p if p is None else np.asarray(p, float),
            self.q if q is None else np.asarray(q, float),
            self.v, self.delta, self.shunt,
            self.branch_from, self.branch_to, self.branch_z, self.branch_b,
            self.s_base, self.v_base,
        )

    def with_kinds(self, kinds) -> "PerUnitNetwork":
        return PerUnitNetwork(
            self.ids, tuple(kinds), self.p, self.q, self.v, self.delta, self.shunt,
            self.branch_from, self.branch_to, self.branch_z, self.branch_b,
            self.s_base, self.v_base,
        )


def to_per_unit(case: NetworkCase, s_base: float | None = None) -> PerUnitNetwork:
    s_base = case.s_base if s_base is None else s_base
    if not s_base > 0 or not case.v_base > 0:
        raise CaseError("bases must be positive")
    v_base = case.v_base
    z_base = v_base ** 2 / s_base
    ids = tuple(b.id for b in case.buses)
    index = {bid: k for k, bid in enumerate(ids)}
    return PerUnitNetwork(
        ids=ids,
        kinds=tuple(b.kind for b in case.buses),
        p=np.array([b.p for b in case.buses]) / s_base,
        q=np.array([b.q for b in case.buses]) / s_base,
        v=np.array([1.0 if b.v is None else b.v / v_base for b in case.buses]),
        delta=np.array([b.delta for b in case.buses]),
        shunt=np.array([b.shunt for b in case.buses], dtype=complex) * z_base,
        branch_from=np.array([index[br.from_bus] for br in case.branches], dtype=int),
        branch_to=np.array([index[br.to_bus] for br in case.branches], dtype=int),
        branch_z=np.array([complex(br.r, br.x) for br in case.branches]) / z_base,
        branch_b=np.array([br.b for br in case.branches]) * z_base,
        s_base=s_base,
        v_base=v_base,
    )


def from_per_unit(net: PerUnitNetwork) -> NetworkCase:
    z_base = net.z_base
    buses = []
    for k, bid in enumerate(net.ids):
        kind = net.kinds[k]
        buses.append(BusSpec(
            id=bid,
            kind=kind,
            p=float(net.p[k] * net.s_base),
            q=float(net.q[k] * net.s_base),
            v=None if kind == "PQ" else float(net.v[k] * net.v_base),
            delta=float(net.delta[k]),
            shunt=complex(net.shunt[k] / z_base),
        ))
    branches = []
    for f, t, z, b in zip(net.branch_from, net.branch_to, net.branch_z, net.branch_b):
        zz = z * z_base
        branches.append(BranchSpec(net.ids[f], net.ids[t], float(zz.real), float(zz.imag), float(b / z_base)))
    return NetworkCase(tuple(buses), tuple(branches), net.s_base, net.v_base)


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Bus admittance matrix plus the per-bus shunt admittance (its row sums)."""

    y: np.ndarray
    shunt: np.ndarray | None = None

    def __post_init__(self):
        if self.shunt is None:
            object.__setattr__(self, "shunt", self.y.sum(axis=1))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.y)

    @property
    def loss_angle(self) -> np.ndarray:
        """Entry angle shifted by +pi/2."""
        return np.angle(self.y) + np.pi / 2


def build_ybus(net: PerUnitNetwork) -> AdmittanceMatrix:
    n = net.n
    y = np.zeros((n, n), dtype=complex)
    if np.any(net.branch_z == 0):
        raise CaseError("zero-impedance branch")
    ys = 1.0 / net.branch_z
    f, t = net.branch_from, net.branch_to
    np.add.at(y, (f, t), -ys)
    np.add.at(y, (t, f), -ys)
    np.add.at(y, (f, f), ys + 0.5j * net.branch_b)
    np.add.at(y, (t, t), ys + 0.5j * net.branch_b)
    y[np.diag_indices(n)] += net.shunt
    y.setflags(write=False)
    sh = net.shunt.astype(complex)
    np.add.at(sh, f, 0.5j * net.branch_b)
    np.add.at(sh, t, 0.5j * net.branch_b)
    sh.setflags(write=False)
    return AdmittanceMatrix(y, sh)
