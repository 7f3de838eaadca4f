"""Bipartite factor graphs over discrete variables.

Factor tables are stored in the log domain; a zero entry becomes ``-inf``.
Table axes follow the factor's scope order and are laid out row-major, so the
last scope variable's state varies fastest in the flat serialized form.

JSON layout::

    {"variables": [{"id": 0, "cardinality": 2}, ...],
     "factors":   [{"id": 0, "scope": [0, 2], "kind": "pairwise",
                    "table": [...], "log_space": true}, ...]}

``table`` is optional. With ``log_space`` true the entries are log values and
``null`` encodes a zero (log ``-inf``); otherwise they are plain non-negative
numbers. Optional ``feature`` arrays may accompany variables and factors.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConstructionError, UnsupportedOperationError

UNARY, PAIRWISE, MULTI_VERTEX = "unary", "pairwise", "multi_vertex"
KINDS = (UNARY, PAIRWISE, MULTI_VERTEX)
MAX_TABLE_ENTRIES = 10**6


def _frozen(a) -> np.ndarray | None:
    if a is None:
        return None
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def kind_for_arity(arity: int) -> str:
    if arity == 1:
        return UNARY
    return PAIRWISE if arity == 2 else MULTI_VERTEX


@dataclass(frozen=True, eq=False)
class VariableNode:
    id: int
    cardinality: int
    feature: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature", _frozen(self.feature))


@dataclass(frozen=True, eq=False)
class FactorNode:
    """A clique over ``scope`` with an optional log-domain table and feature.

    ``kind`` defaults from the arity. ``multi_vertex`` is also accepted for a
    two-variable scope, which is what a global clique over a two-entity
    scene looks like.
    """

    id: int
    scope: tuple[int, ...]
    log_table: np.ndarray | None = None
    feature: np.ndarray | None = None
    kind: str = ""

    def __post_init__(self):
        object.__setattr__(self, "scope", tuple(int(s) for s in self.scope))
        object.__setattr__(self, "log_table", _frozen(self.log_table))
        object.__setattr__(self, "feature", _frozen(self.feature))
        if not self.kind:
            object.__setattr__(self, "kind", kind_for_arity(len(self.scope)))

    @classmethod
    def from_table(cls, id: int, scope: Sequence[int], table, kind: str = "", feature=None) -> "FactorNode":
        """Build from a non-negative linear-domain table."""
        t = np.asarray(table, dtype=np.float64)
        if np.any(t < 0) or np.any(np.isnan(t)):
            raise ConstructionError(f"factor {id}: table entries must be non-negative")
        with np.errstate(divide="ignore"):
            logt = np.log(t)
        return cls(id, tuple(scope), logt, feature, kind)

    @property
    def arity(self) -> int:
        return len(self.scope)

    @property
    def tabular(self) -> bool:
        return self.log_table is not None

    @property
    def table(self) -> np.ndarray:
        return np.exp(self.require_table())

    def require_table(self) -> np.ndarray:
        if self.log_table is None:
            raise UnsupportedOperationError(f"factor {self.id} has no table (feature-only)")
        return self.log_table


@dataclass(eq=False)
class FactorGraph:
    variables: tuple[VariableNode, ...]
    factors: tuple[FactorNode, ...]
    edge_features: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)
    edges: tuple[tuple[int, int], ...] = ()
    variable_neighbors: tuple[tuple[int, ...], ...] = ()
    factor_neighbors: tuple[tuple[int, ...], ...] = ()

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    def degree(self, var: int) -> int:
        return len(self.variable_neighbors[var])

    def factors_of_kind(self, kind: str) -> list[FactorNode]:
        return [f for f in self.factors if f.kind == kind]

    @property
    def all_tabular(self) -> bool:
        return all(f.tabular for f in self.factors)

    def require_tabular(self) -> None:
        for f in self.factors:
            f.require_table()

    def state_space_size(self) -> int:
        return math.prod(self.cardinalities)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FactorGraph):
            return NotImplemented
        return to_dict(self) == to_dict(other) and _features_equal(self, other)


def _features_equal(a: FactorGraph, b: FactorGraph) -> bool:
    if set(a.edge_features) != set(b.edge_features):
        return False
    return all(np.array_equal(a.edge_features[k], b.edge_features[k]) for k in a.edge_features)


def build_graph(variables: Iterable[VariableNode], factors: Iterable[FactorNode],
                edge_features: Mapping[tuple[int, int], np.ndarray] | None = None,
                max_table_entries: int = MAX_TABLE_ENTRIES) -> FactorGraph:
    """Validate nodes, derive adjacency and return an immutable graph."""
    vs = sorted(variables, key=lambda v: v.id)
    fs = sorted(factors, key=lambda f: f.id)
    _check_ids("variable", [v.id for v in vs])
    _check_ids("factor", [f.id for f in fs])
    n = len(vs)
    for v in vs:
        if int(v.cardinality) < 1:
            raise ConstructionError(f"variable {v.id}: cardinality must be >= 1, got {v.cardinality}")

    neighbors: list[list[int]] = [[] for _ in range(n)]
    edges = []
    for f in fs:
        if not f.scope:
            raise ConstructionError(f"factor {f.id}: empty scope")
        if len(set(f.scope)) != len(f.scope):
            raise ConstructionError(f"factor {f.id}: duplicate variable in scope {list(f.scope)}")
        for s in f.scope:
            if not 0 <= s < n:
                raise ConstructionError(f"factor {f.id}: scope references unknown variable {s}")
        _check_kind(f)
        if f.tabular:
            _check_table(f, [vs[s].cardinality for s in f.scope], max_table_entries)
        for s in sorted(f.scope):
            neighbors[s].append(f.id)
            edges.append((s, f.id))

    efeat: dict[tuple[int, int], np.ndarray] = {}
    edge_set = set(edges)
    for key, feat in (edge_features or {}).items():
        key = (int(key[0]), int(key[1]))
        if key not in edge_set:
            raise ConstructionError(f"edge feature on non-existent edge {key}")
        efeat[key] = _frozen(feat)

    return FactorGraph(
        variables=tuple(vs),
        factors=tuple(fs),
        edge_features=efeat,
        edges=tuple(sorted(edges)),
        variable_neighbors=tuple(tuple(sorted(nb)) for nb in neighbors),
        factor_neighbors=tuple(tuple(sorted(f.scope)) for f in fs),
    )


def _check_ids(what: str, ids: list[int]) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ConstructionError(f"duplicate {what} id {i}")
        seen.add(i)
    if ids != list(range(len(ids))):
        raise ConstructionError(f"{what} ids must be dense 0..{len(ids) - 1}, got {ids}")


def _check_kind(f: FactorNode) -> None:
    if f.kind not in KINDS:
        raise ConstructionError(f"factor {f.id}: unknown kind {f.kind!r}")
    arity = len(f.scope)
    ok = (f.kind == UNARY and arity == 1) or (f.kind == PAIRWISE and arity == 2) or \
         (f.kind == MULTI_VERTEX and arity >= 2)
    if not ok:
        raise ConstructionError(f"factor {f.id}: kind {f.kind} does not fit scope of size {arity}")


def _check_table(f: FactorNode, cards: list[int], max_entries: int) -> None:
    size = math.prod(cards)
    if size > max_entries:
        raise CapacityError("table_entries", f"factor {f.id}: table of {size} entries exceeds {max_entries}")
    t = f.log_table
    if t.shape != tuple(cards):
        raise ConstructionError(f"factor {f.id}: table shape {t.shape} != scope cardinalities {tuple(cards)}")
    if np.any(np.isnan(t)) or np.any(t == np.inf):
        raise ConstructionError(f"factor {f.id}: table must hold finite non-negative values")


# ----------------------------------------------------------------------
# scoring and structure queries
# ----------------------------------------------------------------------

def log_score_assignment(g: FactorGraph, x: Sequence[int]) -> float:
    x = _check_assignment(g, x)
    total = 0.0
    for f in g.factors:
        total += float(f.require_table()[tuple(x[s] for s in f.scope)])
    return total


def score_assignment(g: FactorGraph, x: Sequence[int]) -> float:
    """Product of every factor's table entry at the restriction of ``x``."""
    return math.exp(log_score_assignment(g, x))


def _check_assignment(g: FactorGraph, x: Sequence[int]) -> list[int]:
    x = [int(s) for s in x]
    if len(x) != g.num_variables:
        raise IndexError(f"assignment has {len(x)} entries, graph has {g.num_variables} variables")
    for i, (s, card) in enumerate(zip(x, g.cardinalities)):
        if not 0 <= s < card:
            raise IndexError(f"variable {i}: state {s} outside [0, {card})")
    return x


def tree_check(g: FactorGraph) -> bool:
    """True iff the bipartite variable/factor graph contains no cycle."""
    n = g.num_variables
    parent = list(range(n + g.num_factors))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for var, fac in g.edges:
        ra, rb = find(var), find(n + fac)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


def diameter(g: FactorGraph) -> int:
    """Longest shortest path (in edges) between any two connected nodes."""
    n = g.num_variables
    adj: list[list[int]] = [[] for _ in range(n + g.num_factors)]
    for var, fac in g.edges:
        adj[var].append(n + fac)
        adj[n + fac].append(var)
    best = 0
    for start in range(len(adj)):
        dist = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        best = max(best, max(dist.values()))
    return best


def without_factors(g: FactorGraph, drop: Iterable[int]) -> FactorGraph:
    """Copy of ``g`` minus some factors, with the remaining ids renumbered densely."""
    drop = set(drop)
    kept, remap = [], {}
    for f in g.factors:
        if f.id in drop:
            continue
        remap[f.id] = len(kept)
        kept.append(FactorNode(len(kept), f.scope, f.log_table, f.feature, f.kind))
    feats = {(v, remap[fid]): t for (v, fid), t in g.edge_features.items() if fid in remap}
    return build_graph(g.variables, kept, feats)


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

def _encode_log(values: np.ndarray) -> list:
    return [None if v == -np.inf else float(v) for v in values.reshape(-1)]


def to_dict(g: FactorGraph) -> dict:
    variables = []
    for v in g.variables:
        d = {"id": v.id, "cardinality": int(v.cardinality)}
        if v.feature is not None:
            d["feature"] = [float(a) for a in v.feature.reshape(-1)]
        variables.append(d)
    factors = []
    for f in g.factors:
        d = {"id": f.id, "scope": list(f.scope), "kind": f.kind}
        if f.tabular:
            d["table"] = _encode_log(f.log_table)
            d["log_space"] = True
        if f.feature is not None:
            d["feature"] = [float(a) for a in f.feature.reshape(-1)]
        factors.append(d)
    out = {"variables": variables, "factors": factors}
    if g.edge_features:
        out["edge_features"] = [
            {"variable": k[0], "factor": k[1], "feature": [float(a) for a in g.edge_features[k].reshape(-1)]}
            for k in sorted(g.edge_features)
        ]
    return out


def from_dict(doc: Mapping, max_table_entries: int = MAX_TABLE_ENTRIES) -> FactorGraph:
    try:
        raw_vars = doc["variables"]
        raw_factors = doc["factors"]
    except (KeyError, TypeError) as exc:
        raise ConstructionError(f"factor-graph document lacks {exc}") from None
    variables = [VariableNode(int(v["id"]), int(v["cardinality"]), v.get("feature")) for v in raw_vars]
    cards = {v.id: v.cardinality for v in variables}
    factors = []
    for f in raw_factors:
        scope = [int(s) for s in f["scope"]]
        log_table = None
        if f.get("table") is not None:
            try:
                shape = tuple(cards[s] for s in scope)
            except KeyError as exc:
                raise ConstructionError(f"factor {f['id']}: scope references unknown variable {exc}") from None
            flat = f["table"]
            size = math.prod(shape)
            if size > max_table_entries:
                raise CapacityError("table_entries", f"factor {f['id']}: table of {size} entries exceeds {max_table_entries}")
            if len(flat) != size:
                raise ConstructionError(f"factor {f['id']}: flat table has {len(flat)} entries, expected {size}")
            if f.get("log_space", False):
                arr = np.array([-np.inf if a is None else float(a) for a in flat], dtype=np.float64)
            else:
                lin = np.array(flat, dtype=np.float64)
                if np.any(lin < 0) or np.any(np.isnan(lin)):
                    raise ConstructionError(f"factor {f['id']}: table entries must be non-negative")
                with np.errstate(divide="ignore"):
                    arr = np.log(lin)
            log_table = arr.reshape(shape)
        factors.append(FactorNode(int(f["id"]), tuple(scope), log_table, f.get("feature"), f.get("kind", "")))
    edge_features = {(int(e["variable"]), int(e["factor"])): e["feature"] for e in doc.get("edge_features", [])}
    return build_graph(variables, factors, edge_features, max_table_entries=max_table_entries)


def dumps(g: FactorGraph) -> str:
    return json.dumps(to_dict(g), indent=1, allow_nan=False)


def loads(text: str) -> FactorGraph:
    return from_dict(json.loads(text))


def save(g: FactorGraph, path) -> None:
    Path(path).write_text(dumps(g) + "\n")


def load(path) -> FactorGraph:
    return loads(Path(path).read_text())
