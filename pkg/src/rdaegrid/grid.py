"""Grid cases, the DC observation matrix and observability checks.

Measurement rows are ordered as all bus injections (ascending bus id)
followed by all branch flows (case order). Columns are the voltage angles
of every bus except the reference bus.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

RANK_RTOL = 1e-8


class CaseParseError(ValueError):
    """Malformed case text."""


class CaseValidationError(ValueError):
    """Case parsed but violates a structural requirement."""


class UnobservableError(ValueError):
    """Observation matrix does not have full column rank."""


@dataclass(frozen=True)
class Bus:
    id: int
    gs: float = 0.0  # shunt conductance, p.u.
    pd: float = 0.0  # base-case demand, p.u.


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    b: float  # series susceptance incl. tap ratio, p.u.
    shift: float = 0.0  # phase shift, radians
    rating: float = 0.0  # p.u., 0 = unlimited


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    cost: tuple[float, float, float] = (0.0, 1.0, 0.0)  # (c2, c1, c0) in p.u. power


@dataclass
class GridCase:
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    slack_bus: int
    base_mva: float = 100.0
    name: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def bus_ids(self) -> list[int]:
        return sorted(b.id for b in self.buses)

    @property
    def load_buses(self) -> list[int]:
        """Buses with positive base demand, ascending."""
        return sorted(b.id for b in self.buses if b.pd > 0)

    def bus_index(self) -> dict[int, int]:
        return {bid: k for k, bid in enumerate(self.bus_ids)}

    def incidence(self) -> np.ndarray:
        """Branch-bus incidence, +1 at from-bus and -1 at to-bus."""
        idx = self.bus_index()
        A = np.zeros((self.n_branches, self.n_buses))
        for k, br in enumerate(self.branches):
            A[k, idx[br.from_bus]] = 1.0
            A[k, idx[br.to_bus]] = -1.0
        return A

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseValidationError("duplicate bus ids")
        known = set(ids)
        if self.slack_bus not in known:
            raise CaseValidationError(f"slack bus {self.slack_bus} does not exist")
        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise CaseValidationError(f"branch {k} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise CaseValidationError(f"branch {k} is a self loop")
            if not np.isfinite(br.b) or br.b == 0.0:
                raise CaseValidationError(f"branch {k} has susceptance {br.b}")
        for k, g in enumerate(self.generators):
            if g.bus not in known:
                raise CaseValidationError(f"generator {k} references unknown bus {g.bus}")
            if g.pmin > g.pmax:
                raise CaseValidationError(f"generator {k} has pmin > pmax")
        if not _connected(known, [(br.from_bus, br.to_bus) for br in self.branches]):
            raise CaseValidationError("network graph is disconnected")


def _connected(nodes: set[int], edges: Iterable[tuple[int, int]]) -> bool:
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    for f, t in edges:
        adj[f].append(t)
        adj[t].append(f)
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(nodes)


# ---------------------------------------------------------------- parsing

# MATPOWER column positions (0-based)
_BUS_I, _BUS_TYPE, _PD, _GS = 0, 1, 2, 4
_F_BUS, _T_BUS, _BR_X, _RATE_A, _TAP, _SHIFT, _BR_STATUS = 0, 1, 3, 5, 8, 9, 10
_GEN_BUS, _GEN_STATUS, _PMAX, _PMIN = 0, 7, 8, 9

_SUPPORTED = {"bus", "branch", "gen", "gencost", "baseMVA", "version"}
_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings does not occur in the matrices we read
    return line.split("%", 1)[0]


def _parse_matpower(text: str) -> tuple[dict[str, np.ndarray], dict[str, str], list[str]]:
    lines = text.splitlines()
    matrices: dict[str, np.ndarray] = {}
    scalars: dict[str, str] = {}
    notes: list[str] = []
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        m = _MATRIX_RE.search(raw)
        if m is None:
            s = _SCALAR_RE.search(raw)
            if s is not None:
                scalars[s.group(1)] = s.group(2).strip().strip("'\"")
                if s.group(1) not in _SUPPORTED:
                    notes.append(f"line {i + 1}: ignored field mpc.{s.group(1)}")
            i += 1
            continue
        name = m.group(1)
        start_line = i + 1
        rows: list[list[float]] = []
        row_lines: list[int] = []
        body = raw[m.end():]
        closed = False
        while True:
            if "]" in body:
                body = body.split("]", 1)[0]
                closed = True
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append([float(t) for t in tokens])
                except ValueError as exc:
                    raise CaseParseError(f"line {i + 1}: bad number in mpc.{name}: {chunk.strip()!r}") from exc
                row_lines.append(i + 1)
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise CaseParseError(f"line {start_line}: unterminated matrix mpc.{name}")
            body = _strip_comment(lines[i])
        i += 1
        if name not in _SUPPORTED:
            notes.append(f"line {start_line}: ignored field mpc.{name}")
            continue
        if rows:
            width = len(rows[0])
            for r, ln in zip(rows, row_lines):
                if len(r) != width:
                    raise CaseParseError(f"line {ln}: mpc.{name} row has {len(r)} columns, expected {width}")
        matrices[name] = np.array(rows, dtype=float)
    return matrices, scalars, notes


def _require_cols(name: str, mat: np.ndarray, ncol: int) -> None:
    if mat.ndim != 2 or mat.shape[1] < ncol:
        raise CaseParseError(f"mpc.{name} needs at least {ncol} columns")


def _case_from_matpower(text: str, name: str) -> GridCase:
    mats, scalars, notes = _parse_matpower(text)
    for key in ("bus", "branch", "gen"):
        if key not in mats:
            raise CaseParseError(f"missing mpc.{key}")
    base = float(scalars.get("baseMVA", 100.0))
    bus, branch, gen = mats["bus"], mats["branch"], mats["gen"]
    _require_cols("bus", bus, 5)
    _require_cols("branch", branch, 4)
    _require_cols("gen", gen, 10)

    buses = [Bus(int(r[_BUS_I]), r[_GS] / base, r[_PD] / base) for r in bus]
    slack = [int(r[_BUS_I]) for r in bus if int(r[_BUS_TYPE]) == 3]
    if len(slack) != 1:
        raise CaseValidationError(f"expected exactly one reference bus, found {len(slack)}")

    branches = []
    for r in branch:
        if branch.shape[1] > _BR_STATUS and r[_BR_STATUS] == 0:
            continue
        tap = r[_TAP] if branch.shape[1] > _TAP and r[_TAP] != 0 else 1.0
        shift = np.deg2rad(r[_SHIFT]) if branch.shape[1] > _SHIFT else 0.0
        rating = r[_RATE_A] / base if branch.shape[1] > _RATE_A else 0.0
        b = 1.0 / (r[_BR_X] * tap) if r[_BR_X] != 0 else np.inf
        branches.append(Branch(int(r[_F_BUS]), int(r[_T_BUS]), b, shift, rating))

    costs = mats.get("gencost")
    generators = []
    for k, r in enumerate(gen):
        if r[_GEN_STATUS] <= 0:
            continue
        cost = (0.0, 1.0, 0.0)
        if costs is not None and k < len(costs):
            cost = _poly_cost(costs[k], base, notes, k)
        generators.append(Generator(int(r[_GEN_BUS]), r[_PMIN] / base, r[_PMAX] / base, cost))
    case = GridCase(buses, branches, generators, slack[0], base, name, notes)
    case.validate()
    return case


def _poly_cost(row: np.ndarray, base: float, notes: list[str], k: int) -> tuple[float, float, float]:
    if int(row[0]) != 2:
        notes.append(f"gencost row {k}: piecewise-linear cost replaced by unit linear cost")
        return (0.0, 1.0, 0.0)
    n = int(row[3])
    coeffs = list(row[4:4 + n])
    coeffs = [0.0] * (3 - len(coeffs)) + coeffs[-3:]
    c2, c1, c0 = coeffs
    # MATPOWER costs are in MW; convert to p.u. power
    return (c2 * base * base, c1 * base, c0)


def _case_from_json(text: str, name: str) -> GridCase:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    notes = [f"ignored field {k}" for k in d if k not in {"base_mva", "slack_bus", "buses", "branches", "generators", "name"}]
    try:
        buses = [Bus(int(b["id"]), float(b.get("gs", 0.0)), float(b.get("pd", 0.0))) for b in d["buses"]]
        branches = []
        for br in d["branches"]:
            if not br.get("status", 1):
                continue
            if "b" in br:
                b = float(br["b"])
            else:
                tap = float(br.get("ratio", 0.0)) or 1.0
                b = 1.0 / (float(br["x"]) * tap)
            branches.append(Branch(int(br["from"]), int(br["to"]), b,
                                   float(br.get("shift", 0.0)), float(br.get("rating", 0.0))))
        gens = [Generator(int(g["bus"]), float(g.get("pmin", 0.0)), float(g["pmax"]),
                          tuple(float(c) for c in g.get("cost", (0.0, 1.0, 0.0))))
                for g in d.get("generators", [])]
        slack = int(d["slack_bus"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseParseError(f"JSON grid case missing or invalid field: {exc}") from exc
    case = GridCase(buses, branches, gens, slack, float(d.get("base_mva", 100.0)), d.get("name", name), notes)
    case.validate()
    return case


def parse_case(text: str, name: str = "") -> GridCase:
    """Parse a MATPOWER ``.m`` case or the JSON grid format.

    JSON fields are in per unit: ``buses`` (id, pd, gs), ``branches``
    (from, to, and either b or x with optional ratio, shift in radians,
    rating, status), ``generators`` (bus, pmin, pmax, cost as
    [c2, c1, c0]), ``slack_bus`` and ``base_mva``.
    """
    if text.lstrip().startswith("{"):
        return _case_from_json(text, name)
    return _case_from_matpower(text, name)


def load_case(path_or_name: str | Path) -> GridCase:
    """Load a case file, or a bundled case by name ("case14", "case118")."""
    p = Path(path_or_name)
    if p.suffix in (".m", ".json") and p.exists():
        return parse_case(p.read_text(), p.stem)
    name = str(path_or_name)
    bundled = resources.files("rdaegrid.cases").joinpath(f"{name}.m")
    if bundled.is_file():
        return parse_case(bundled.read_text(), name)
    raise FileNotFoundError(f"no case file or bundled case named {path_or_name!r}")


def case_to_json(case: GridCase) -> str:
    return json.dumps({
        "name": case.name,
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [{"id": b.id, "pd": b.pd, "gs": b.gs} for b in case.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "b": br.b, "shift": br.shift, "rating": br.rating}
                     for br in case.branches],
        "generators": [{"bus": g.bus, "pmin": g.pmin, "pmax": g.pmax, "cost": list(g.cost)}
                       for g in case.generators],
    }, indent=1)


# ------------------------------------------------------ observation matrix

class Tag(NamedTuple):
    kind: str  # "inj" or "flow"
    ref: int  # bus id for injections, branch position for flows


@dataclass(frozen=True)
class ObservationMatrix:
    H: np.ndarray  # m x (n-1)
    index_map: tuple[Tag, ...]
    reference_bus: int
    state_buses: tuple[int, ...]  # bus id of each column
    H_full: np.ndarray  # m x n, reference column kept; structure only

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n_states(self) -> int:
        return self.H.shape[1]

    @property
    def all_buses(self) -> tuple[int, ...]:
        return tuple(sorted(self.state_buses + (self.reference_bus,)))

    def column_of(self, bus: int) -> int:
        if bus == self.reference_bus:
            raise ValueError(f"bus {bus} is the reference bus and has no state column")
        try:
            return self.state_buses.index(bus)
        except ValueError:
            raise KeyError(f"unknown bus {bus}") from None

    def row_of(self, tag: Tag) -> int:
        return self.index_map.index(tag)

    def injection_row(self, bus: int) -> int:
        return self.row_of(Tag("inj", bus))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [f"theta_{b}" for b in self.state_buses])
            for tag, row in zip(self.index_map, self.H):
                w.writerow([f"{tag.kind}:{tag.ref}"] + [repr(float(v)) for v in row])


def build_observation_matrix(case: GridCase) -> ObservationMatrix:
    A = case.incidence()
    b = np.array([br.b for br in case.branches])
    Bf = A * b[:, None]
    Bbus = A.T @ Bf
    H_full = np.vstack([Bbus, Bf])
    ids = case.bus_ids
    ref_col = ids.index(case.slack_bus)
    H = np.delete(H_full, ref_col, axis=1)
    tags = tuple([Tag("inj", bid) for bid in ids] + [Tag("flow", k) for k in range(case.n_branches)])
    state_buses = tuple(bid for bid in ids if bid != case.slack_bus)
    if matrix_rank(H) < H.shape[1]:
        raise UnobservableError("observation matrix is rank deficient")
    H.setflags(write=False)
    H_full.setflags(write=False)
    return ObservationMatrix(H, tags, case.slack_bus, state_buses, H_full)


def matrix_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def bus_degree(obs: ObservationMatrix, bus: int) -> int:
    """Number of measurements touching the angle of ``bus``."""
    return int(np.count_nonzero(obs.H[:, obs.column_of(bus)]))


def _keep_rows(m: int, removed: Iterable[int]) -> np.ndarray:
    keep = np.ones(m, dtype=bool)
    keep[list(removed)] = False
    return keep


def observable_after_mask(obs: ObservationMatrix, removed: Iterable[int] | np.ndarray) -> bool:
    removed = np.asarray(removed)
    if removed.dtype == bool:
        removed = np.flatnonzero(removed)
    keep = _keep_rows(obs.m, removed.tolist())
    return matrix_rank(obs.H[keep]) == obs.n_states


def observable_masks(obs: ObservationMatrix, d: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Row-wise :func:`observable_after_mask` for a (B, m) stack of boolean masks.

    A Gram-matrix eigenvalue screen settles the clearly well-conditioned masks;
    the rest go through the same SVD rank test as the single-mask check.
    """
    d = np.atleast_2d(np.asarray(d, dtype=bool))
    out = np.zeros(len(d), dtype=bool)
    H = obs.H
    for s in range(0, len(d), chunk):
        keep = ~d[s:s + chunk]
        Hk = keep[:, :, None] * H
        lam = np.linalg.eigvalsh(Hk.transpose(0, 2, 1) @ Hk)  # ascending, squares of singular values
        # eigenvalue error is ~1e-16 * lam_max, so a ratio above 1e-6 is safely full rank
        sure = lam[:, 0] > 1e-6 * lam[:, -1]
        out[s:s + chunk][sure] = True
        for j in np.flatnonzero(~sure):
            out[s + j] = matrix_rank(H[keep[j]]) == obs.n_states
    return out


def is_critical(obs: ObservationMatrix, k: int, rows: Iterable[int] | None = None) -> bool:
    """True if deleting measurement ``k`` from ``rows`` (default: all) loses observability."""
    rows = list(range(obs.m)) if rows is None else list(rows)
    sub = [r for r in rows if r != k]
    return matrix_rank(obs.H[sub]) < obs.n_states


def critical_measurements(obs: ObservationMatrix) -> frozenset[int]:
    return frozenset(k for k in range(obs.m) if is_critical(obs, k))
