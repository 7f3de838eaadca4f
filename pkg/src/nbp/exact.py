"""Brute-force inference by enumerating every joint assignment.

This is the reference every approximate method is checked against, so it
favours obviousness over speed: the full log-joint table is materialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, ValidationError
from .factor_graph import FactorGraph

MAX_STATES = 10**7


@dataclass
class ExactResult:
    log_partition: float
    variable_marginals: list[np.ndarray]
    factor_marginals: list[np.ndarray]
    map_assignment: tuple[int, ...]
    map_score: float
    log_map_score: float
    entropy: float
    log_posterior: np.ndarray | None = field(default=None, repr=False)

    def posterior(self, x: Sequence[int]) -> float:
        """p(x) under the normalized score; needs ``keep_joint=True``."""
        if self.log_posterior is None:
            raise ValueError("result was computed without keep_joint=True")
        return float(np.exp(self.log_posterior[tuple(int(s) for s in x)]))

    def to_dict(self) -> dict:
        return {
            "log_partition": self.log_partition,
            "variable_marginals": [m.tolist() for m in self.variable_marginals],
            "factor_marginals": [m.reshape(-1).tolist() for m in self.factor_marginals],
            "map_assignment": list(self.map_assignment),
            "map_score": self.map_score,
            "log_map_score": self.log_map_score,
            "entropy": self.entropy,
        }


def log_joint(g: FactorGraph, max_states: int = MAX_STATES) -> np.ndarray:
    """Unnormalized log score of every assignment, one array axis per variable."""
    g.require_tabular()
    size = g.state_space_size()
    if size > max_states:
        raise CapacityError("state_space", f"{size} joint states exceed the enumeration guard of {max_states}")
    cards = g.cardinalities
    joint = np.zeros(cards, dtype=np.float64)
    for f in g.factors:
        joint = joint + _broadcast(f.log_table, f.scope, len(cards))
    return joint


def _broadcast(table: np.ndarray, scope: Sequence[int], n: int) -> np.ndarray:
    perm = np.argsort(scope)
    ordered = table.transpose(perm)
    shape = [1] * n
    for s in scope:
        shape[s] = table.shape[list(scope).index(s)]
    return ordered.reshape(shape)


def _logsumexp(a: np.ndarray) -> float:
    m = float(a.max())
    if m == -np.inf:
        return -np.inf
    return m + math.log(float(np.exp(a - m).sum()))


def enumerate_all(g: FactorGraph, max_states: int = MAX_STATES, keep_joint: bool = False) -> ExactResult:
    joint = log_joint(g, max_states)
    n = g.num_variables
    log_z = _logsumexp(joint)
    if log_z == -np.inf:
        raise ValidationError("every assignment has zero score; the posterior is undefined")
    logp = joint - log_z
    p = np.exp(logp)

    var_marg = []
    for i in range(n):
        axes = tuple(a for a in range(n) if a != i)
        var_marg.append(p.sum(axis=axes) if axes else p.copy())
    fac_marg = []
    for f in g.factors:
        axes = tuple(a for a in range(n) if a not in f.scope)
        m = p.sum(axis=axes) if axes else p
        # m's axes are in sorted scope order; restore the factor's own order
        fac_marg.append(np.transpose(m, np.argsort(np.argsort(f.scope))).copy())

    flat = int(np.argmax(joint))  # first maximum in C order = lexicographically smallest
    x_map = tuple(int(s) for s in np.unravel_index(flat, g.cardinalities)) if n else ()
    log_map = float(joint.reshape(-1)[flat])
    nz = p > 0
    entropy = float(-(p[nz] * logp[nz]).sum())
    return ExactResult(
        log_partition=log_z,
        variable_marginals=var_marg,
        factor_marginals=fac_marg,
        map_assignment=x_map,
        map_score=math.exp(log_map),
        log_map_score=log_map,
        entropy=entropy,
        log_posterior=logp if keep_joint else None,
    )


def validate_product_distribution(g: FactorGraph, q: Sequence, tol: float = 1e-9) -> list[np.ndarray]:
    if len(q) != g.num_variables:
        raise ValidationError(f"q has {len(q)} factors, graph has {g.num_variables} variables")
    out = []
    for i, (qi, card) in enumerate(zip(q, g.cardinalities)):
        qi = np.asarray(qi, dtype=np.float64)
        if qi.shape != (card,):
            raise ValidationError(f"q[{i}] has shape {qi.shape}, expected ({card},)")
        if np.any(qi < 0) or abs(qi.sum() - 1.0) > tol:
            raise ValidationError(f"q[{i}] is not a normalized distribution (sum={qi.sum()!r})")
        out.append(qi)
    return out


def expected_log_score(g: FactorGraph, q: Sequence[np.ndarray]) -> float:
    """E_q[log S(x)] for a fully factorized q, enumerated factor by factor."""
    total = 0.0
    for f in g.factors:
        weights = np.ones(())
        for s in f.scope:
            weights = np.multiply.outer(weights, q[s])
        logt = f.require_table()
        mask = weights > 0
        if np.any(logt[mask] == -np.inf):
            return -np.inf
        total += float((weights[mask] * logt[mask]).sum())
    return total


def product_entropy(q: Sequence[np.ndarray]) -> float:
    h = 0.0
    for qi in q:
        nz = qi > 0
        h -= float((qi[nz] * np.log(qi[nz])).sum())
    return h


def variational_objective(g: FactorGraph, q: Sequence, temperature: float = 1.0) -> float:
    """``E_q[log S] + T * H(q)`` for a product distribution q.

    At T=1 this lower-bounds log Z; at T=0 with q a point mass it is the
    log score of that assignment.
    """
    g.require_tabular()
    qs = validate_product_distribution(g, q)
    value = expected_log_score(g, qs)
    if temperature:
        value += temperature * product_entropy(qs)
    return value
