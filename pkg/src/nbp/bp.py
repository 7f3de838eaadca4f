"""Loopy belief propagation and naive mean field on tabular factor graphs.

Messages live in the log domain and are renormalized (logsumexp = 0) after
every update. Sum-product and max-product differ only in how a factor
marginalizes out the variables it is not sending to.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, DimensionError, ValidationError
from .factor_graph import FactorGraph, FactorNode

SUM_PRODUCT, MAX_PRODUCT = "sum_product", "max_product"
SYNCHRONOUS, SEQUENTIAL = "synchronous", "sequential"
VARIABLE_TO_FACTOR, FACTOR_TO_VARIABLE = "variable_to_factor", "factor_to_variable"
MAX_TABULAR_ARITY = 8
LOG_ZERO_CLIP = -1e9


@dataclass(frozen=True)
class BpConfig:
    semiring: str = SUM_PRODUCT
    schedule: str = SYNCHRONOUS
    damping: float = 0.0
    max_iterations: int = 500
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.semiring not in (SUM_PRODUCT, MAX_PRODUCT):
            raise ValidationError(f"unknown semiring {self.semiring!r}")
        if self.schedule not in (SYNCHRONOUS, SEQUENTIAL):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.damping < 1.0:
            raise ValidationError(f"damping must lie in [0, 1), got {self.damping}")
        if int(self.max_iterations) < 1:
            raise ValidationError(f"max_iterations must be positive, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be positive, got {self.tolerance}")


@dataclass
class Message:
    source: int
    target: int
    direction: str
    log_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)


@dataclass
class BpResult:
    variable_beliefs: list[np.ndarray]
    factor_beliefs: list[np.ndarray]
    converged: bool
    iterations_used: int
    final_delta: float
    semiring: str = SUM_PRODUCT
    bethe_free_energy: float | None = None
    config: BpConfig = field(default_factory=BpConfig)

    def to_dict(self) -> dict:
        return {
            "semiring": self.semiring,
            "variable_beliefs": [b.tolist() for b in self.variable_beliefs],
            "factor_beliefs": [b.reshape(-1).tolist() for b in self.factor_beliefs],
            "converged": self.converged,
            "iterations_used": self.iterations_used,
            "final_delta": self.final_delta,
            "bethe_free_energy": self.bethe_free_energy,
            "config": asdict(self.config),
        }


# ----------------------------------------------------------------------
# single-message updates
# ----------------------------------------------------------------------

def normalize_log(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    if m == -np.inf:
        # every state ruled out: fall back to uniform instead of NaN
        return np.full(v.shape, -math.log(v.size))
    return v - (m + math.log(np.exp(v - m).sum()))


def variable_to_factor(incoming: Sequence[np.ndarray], cardinality: int) -> np.ndarray:
    """Sum of incoming factor-to-variable log messages, normalized."""
    total = np.zeros(cardinality)
    for msg in incoming:
        msg = np.asarray(msg, dtype=np.float64)
        if msg.shape != (cardinality,):
            raise DimensionError(f"incoming message of length {msg.shape} for a variable of cardinality {cardinality}")
        total = total + msg
    return normalize_log(total)


def factor_to_variable(factor: FactorNode, target: int, incoming: dict[int, np.ndarray],
                       semiring: str = SUM_PRODUCT) -> np.ndarray:
    """Message from ``factor`` to scope variable ``target``.

    ``incoming`` maps every other scope variable to its variable-to-factor
    log message.
    """
    t = factor.require_table()
    pos = factor.scope.index(target)
    acc = t
    for k, var in enumerate(factor.scope):
        if k == pos:
            continue
        msg = np.asarray(incoming[var], dtype=np.float64)
        if msg.shape != (t.shape[k],):
            raise DimensionError(f"message from variable {var} has length {msg.shape}, expected {t.shape[k]}")
        shape = [1] * t.ndim
        shape[k] = t.shape[k]
        acc = acc + msg.reshape(shape)
    axes = tuple(k for k in range(t.ndim) if k != pos)
    if not axes:
        out = acc
    elif semiring == MAX_PRODUCT:
        out = acc.max(axis=axes)
    else:
        m = acc.max(axis=axes, keepdims=True)
        safe = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            out = (np.log(np.exp(acc - safe).sum(axis=axes, keepdims=True)) + safe).reshape(-1)
    return normalize_log(out)


def _damp(computed: np.ndarray, previous: np.ndarray, damping: float) -> np.ndarray:
    if damping == 0.0:
        return computed
    return normalize_log((1.0 - damping) * computed + damping * previous)


def _change(new: np.ndarray, old: np.ndarray) -> float:
    diff = np.where(new == old, 0.0, np.abs(new - old))
    return float(diff.max()) if diff.size else 0.0


# ----------------------------------------------------------------------
# full runs
# ----------------------------------------------------------------------

class _State:
    """Edge-indexed message store for one run."""

    def __init__(self, g: FactorGraph):
        self.g = g
        self.edge_of = {e: k for k, e in enumerate(g.edges)}
        cards = g.cardinalities
        self.v2f = [np.full(cards[v], -math.log(cards[v])) for v, _ in g.edges]
        self.f2v = [np.full(cards[v], -math.log(cards[v])) for v, _ in g.edges]

    def var_message(self, var: int, factor: int) -> np.ndarray:
        incoming = [self.f2v[self.edge_of[(var, j)]] for j in self.g.variable_neighbors[var] if j != factor]
        return variable_to_factor(incoming, self.g.variables[var].cardinality)

    def factor_message(self, factor: FactorNode, var: int, semiring: str) -> np.ndarray:
        incoming = {s: self.v2f[self.edge_of[(s, factor.id)]] for s in factor.scope if s != var}
        return factor_to_variable(factor, var, incoming, semiring)


def _check_capacity(g: FactorGraph) -> None:
    g.require_tabular()
    for f in g.factors:
        if f.arity > MAX_TABULAR_ARITY:
            raise CapacityError("factor_arity", f"factor {f.id} has arity {f.arity} > {MAX_TABULAR_ARITY}; "
                                                "tabular marginalization refused")


def run_bp(g: FactorGraph, cfg: BpConfig | None = None) -> BpResult:
    cfg = cfg or BpConfig()
    _check_capacity(g)
    st = _State(g)
    lam = cfg.damping
    converged, delta, it = False, math.inf, 0
    for it in range(1, cfg.max_iterations + 1):
        delta = 0.0
        if cfg.schedule == SYNCHRONOUS:
            new_v2f = [_damp(st.var_message(v, f), st.v2f[k], lam) for k, (v, f) in enumerate(g.edges)]
            for k in range(len(new_v2f)):
                delta = max(delta, _change(new_v2f[k], st.v2f[k]))
            st.v2f = new_v2f
            new_f2v = [_damp(st.factor_message(g.factors[f], v, cfg.semiring), st.f2v[k], lam)
                       for k, (v, f) in enumerate(g.edges)]
            for k in range(len(new_f2v)):
                delta = max(delta, _change(new_f2v[k], st.f2v[k]))
            st.f2v = new_f2v
        else:
            for factor in g.factors:
                for v in factor.scope:
                    k = st.edge_of[(v, factor.id)]
                    msg = _damp(st.var_message(v, factor.id), st.v2f[k], lam)
                    delta = max(delta, _change(msg, st.v2f[k]))
                    st.v2f[k] = msg
                for v in factor.scope:
                    k = st.edge_of[(v, factor.id)]
                    msg = _damp(st.factor_message(factor, v, cfg.semiring), st.f2v[k], lam)
                    delta = max(delta, _change(msg, st.f2v[k]))
                    st.f2v[k] = msg
        if delta < cfg.tolerance:
            converged = True
            break

    # make variable-to-factor messages consistent with the final factor messages
    st.v2f = [st.var_message(v, f) for v, f in g.edges]
    result = BpResult(
        variable_beliefs=_variable_beliefs(st),
        factor_beliefs=_factor_beliefs(st),
        converged=converged,
        iterations_used=it,
        final_delta=delta,
        semiring=cfg.semiring,
        config=cfg,
    )
    if cfg.semiring == SUM_PRODUCT:
        try:
            result.bethe_free_energy = bethe_free_energy(g, result)
        except ValidationError:
            result.bethe_free_energy = None
    return result


def _variable_beliefs(st: _State) -> list[np.ndarray]:
    g = st.g
    out = []
    for v in g.variables:
        incoming = [st.f2v[st.edge_of[(v.id, j)]] for j in g.variable_neighbors[v.id]]
        out.append(np.exp(variable_to_factor(incoming, v.cardinality)))
    return out


def _factor_beliefs(st: _State) -> list[np.ndarray]:
    out = []
    for f in st.g.factors:
        acc = f.log_table
        for k, var in enumerate(f.scope):
            shape = [1] * f.arity
            shape[k] = f.log_table.shape[k]
            acc = acc + st.v2f[st.edge_of[(var, f.id)]].reshape(shape)
        out.append(np.exp(normalize_log(acc.reshape(-1))).reshape(acc.shape))
    return out


def map_decode(result: BpResult) -> tuple[int, ...]:
    """Per-variable argmax of the beliefs; ties go to the lowest state."""
    return tuple(int(np.argmax(b)) for b in result.variable_beliefs)


def _marginal(belief: np.ndarray, pos: int) -> np.ndarray:
    axes = tuple(a for a in range(belief.ndim) if a != pos)
    return belief.sum(axis=axes) if axes else belief


def bethe_free_energy(g: FactorGraph, result: BpResult, consistency_tol: float = 1e-6) -> float:
    """Bethe free energy of locally consistent beliefs; equals -log Z on trees."""
    g.require_tabular()
    for f, bf in zip(g.factors, result.factor_beliefs):
        for pos, var in enumerate(f.scope):
            gap = np.abs(_marginal(bf, pos) - result.variable_beliefs[var]).max()
            if gap > consistency_tol:
                raise ValidationError(f"factor {f.id} and variable {var} beliefs disagree by {gap:.3g}")
    energy = 0.0
    for f, bf in zip(g.factors, result.factor_beliefs):
        nz = bf > 0
        energy += float((bf[nz] * (np.log(bf[nz]) - f.log_table[nz])).sum())
    for v, bv in zip(g.variables, result.variable_beliefs):
        nz = bv > 0
        energy -= (g.degree(v.id) - 1) * float((bv[nz] * np.log(bv[nz])).sum())
    return energy


# ----------------------------------------------------------------------
# mean field
# ----------------------------------------------------------------------

@dataclass
class MeanFieldResult:
    q: list[np.ndarray]
    converged: bool
    iterations_used: int
    final_delta: float

    def to_dict(self) -> dict:
        return {"q": [x.tolist() for x in self.q], "converged": self.converged,
                "iterations_used": self.iterations_used, "final_delta": self.final_delta}


def _expected_log_factor(table: np.ndarray, scope: Sequence[int], keep: int, q: Sequence[np.ndarray]) -> np.ndarray:
    res = table
    for pos in reversed(range(len(scope))):
        if pos != keep:
            res = np.tensordot(res, q[scope[pos]], axes=([pos], [0]))
    return res


def mean_field(g: FactorGraph, max_iterations: int = 500, tolerance: float = 1e-10) -> MeanFieldResult:
    """Coordinate ascent over fully factorized q, sweeping variables in id order."""
    g.require_tabular()
    clipped = [np.maximum(f.log_table, LOG_ZERO_CLIP) for f in g.factors]
    q = [np.full(v.cardinality, 1.0 / v.cardinality) for v in g.variables]
    delta, it, converged = math.inf, 0, False
    for it in range(1, max_iterations + 1):
        delta = 0.0
        for v in g.variables:
            logits = np.zeros(v.cardinality)
            for j in g.variable_neighbors[v.id]:
                f = g.factors[j]
                logits = logits + _expected_log_factor(clipped[j], f.scope, f.scope.index(v.id), q)
            new = np.exp(normalize_log(logits))
            delta = max(delta, float(np.abs(new - q[v.id]).max()))
            q[v.id] = new
        if delta < tolerance:
            converged = True
            break
    return MeanFieldResult(q, converged, it, delta)
