"""Build factor graphs for the three scoring-function families.

* ``unary_only``: one factor per variable.
* ``unary_pairwise``: unaries plus one factor per neighbourhood edge.
* ``unary_pairwise_higher_order``: the above plus a single clique covering
  every variable.

Switching between the last two is the higher-order ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConstructionError
from .exact import MAX_STATES, ExactResult, enumerate_all
from .factor_graph import MULTI_VERTEX, FactorGraph, FactorNode, VariableNode, build_graph

UNARY_ONLY = "unary_only"
UNARY_PAIRWISE = "unary_pairwise"
UNARY_PAIRWISE_HIGHER_ORDER = "unary_pairwise_higher_order"
FAMILIES = (UNARY_ONLY, UNARY_PAIRWISE, UNARY_PAIRWISE_HIGHER_ORDER)
GLOBAL_ALL_VARIABLES = "global_all_variables"
MAX_GLOBAL_ARITY = 8


@dataclass(frozen=True)
class ScoringSpec:
    family: str = UNARY_PAIRWISE
    neighborhood: tuple[tuple[int, int], ...] = field(default_factory=tuple)
    higher_order_scope: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "neighborhood", tuple((int(a), int(b)) for a, b in self.neighborhood))
        if self.family not in FAMILIES:
            raise ConstructionError(f"unknown scoring family {self.family!r}")
        if self.family == UNARY_PAIRWISE_HIGHER_ORDER and self.higher_order_scope is None:
            object.__setattr__(self, "higher_order_scope", GLOBAL_ALL_VARIABLES)
        if self.higher_order_scope not in (None, GLOBAL_ALL_VARIABLES):
            raise ConstructionError(f"unknown higher-order scope {self.higher_order_scope!r}")
        if self.family == UNARY_ONLY and self.neighborhood:
            raise ConstructionError("unary_only scoring takes no neighbourhood edges")
        seen = set()
        for a, b in self.neighborhood:
            if a == b:
                raise ConstructionError(f"self-loop ({a}, {b}) in neighbourhood")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ConstructionError(f"edge {key} listed twice; store each unordered pair once")
            seen.add(key)

    def validate_against(self, n: int) -> None:
        for a, b in self.neighborhood:
            if not (0 <= a < n and 0 <= b < n):
                raise ConstructionError(f"neighbourhood edge ({a}, {b}) references a variable outside 0..{n - 1}")


def _base_factors(unaries: Sequence, pairwise: Sequence, spec: ScoringSpec) -> tuple[list[VariableNode], list[FactorNode]]:
    n = len(unaries)
    spec.validate_against(n)
    if len(pairwise) != len(spec.neighborhood):
        raise ConstructionError(f"{len(spec.neighborhood)} neighbourhood edges but {len(pairwise)} pairwise tables")
    variables, factors = [], []
    for i, u in enumerate(unaries):
        if u is None:
            raise ConstructionError(f"missing unary table for variable {i}")
        u = np.asarray(u, dtype=np.float64)
        variables.append(VariableNode(i, len(u)))
        factors.append(FactorNode.from_table(i, (i,), u))
    for (a, b), t in zip(spec.neighborhood, pairwise):
        if t is None:
            raise ConstructionError(f"missing pairwise table for edge ({a}, {b})")
        factors.append(FactorNode.from_table(len(factors), (a, b), t))
    return variables, factors


def build_unary_graph(unaries: Sequence, spec: ScoringSpec | None = None) -> FactorGraph:
    spec = spec or ScoringSpec(UNARY_ONLY)
    if spec.family != UNARY_ONLY:
        raise ConstructionError(f"build_unary_graph needs family unary_only, got {spec.family}")
    variables, factors = _base_factors(unaries, [], spec)
    return build_graph(variables, factors)


def build_pairwise_graph(unaries: Sequence, pairwise: Sequence, spec: ScoringSpec) -> FactorGraph:
    """Unary factors for every variable and one pairwise factor per edge."""
    if spec.family != UNARY_PAIRWISE:
        raise ConstructionError(f"build_pairwise_graph needs family unary_pairwise, got {spec.family}")
    variables, factors = _base_factors(unaries, pairwise, spec)
    return build_graph(variables, factors)


def build_higher_order_graph(unaries: Sequence, pairwise: Sequence, higher_order_factor, spec: ScoringSpec,
                             max_arity: int = MAX_GLOBAL_ARITY) -> FactorGraph:
    """Pairwise graph plus one global clique over all variables.

    ``higher_order_factor`` is a :class:`FactorNode` (its id is reassigned)
    or a raw non-negative table with one axis per variable. Tabular global
    factors are capped at ``max_arity`` variables, the limit classical
    marginalization accepts; feature-only ones are unrestricted.
    """
    if spec.family != UNARY_PAIRWISE_HIGHER_ORDER:
        raise ConstructionError(f"build_higher_order_graph needs family {UNARY_PAIRWISE_HIGHER_ORDER}, got {spec.family}")
    variables, factors = _base_factors(unaries, pairwise, spec)
    n = len(variables)
    everything = tuple(range(n))
    if isinstance(higher_order_factor, FactorNode):
        hf = higher_order_factor
        if tuple(sorted(hf.scope)) != everything:
            raise ConstructionError(f"global factor scope {list(hf.scope)} must cover all {n} variables")
        log_table, feature, scope = hf.log_table, hf.feature, hf.scope
    else:
        table = np.asarray(higher_order_factor, dtype=np.float64)
        if table.ndim != n:
            raise ConstructionError(f"global table has {table.ndim} axes, expected {n}")
        with np.errstate(divide="ignore"):
            log_table = np.log(table)
        if np.any(table < 0):
            raise ConstructionError("global table entries must be non-negative")
        feature, scope = None, everything
    if log_table is not None and n > max_arity:
        raise CapacityError("higher_order_arity", f"tabular global factor over {n} variables exceeds {max_arity}")
    factors.append(FactorNode(len(factors), scope, log_table, feature, MULTI_VERTEX))
    return build_graph(variables, factors)


def build_scored_graph(spec: ScoringSpec, unaries: Sequence, pairwise: Sequence = (), higher_order=None) -> FactorGraph:
    if spec.family == UNARY_ONLY:
        return build_unary_graph(unaries, spec)
    if spec.family == UNARY_PAIRWISE:
        return build_pairwise_graph(unaries, pairwise, spec)
    if higher_order is None:
        raise ConstructionError("higher-order family needs a global factor")
    return build_higher_order_graph(unaries, pairwise, higher_order, spec)


def posterior_from_score(g: FactorGraph, max_states: int = MAX_STATES) -> ExactResult:
    """Exact normalized posterior; ``result.posterior(x)`` gives p(x)."""
    return enumerate_all(g, max_states=max_states, keep_joint=True)
