"""Seeded random factor graphs: trees, grids and general small graphs."""

from __future__ import annotations

import numpy as np

from .factor_graph import FactorGraph, FactorNode, VariableNode, build_graph


def _table(rng: np.random.Generator, shape, spread: float = 1.0) -> np.ndarray:
    return np.exp(rng.normal(0.0, spread, size=shape))


def random_tree(rng: np.random.Generator, max_vars: int = 10, max_card: int = 5,
                higher_order_prob: float = 0.2, unary_prob: float = 0.6, spread: float = 1.0) -> FactorGraph:
    """Connected tree-structured factor graph with strictly positive tables.

    Variables are attached one (pairwise factor) or two at a time (a 3-ary
    factor over a parent and two fresh variables), so the bipartite graph
    never closes a cycle.
    """
    n = int(rng.integers(1, max_vars + 1))
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n)]
    scopes: list[tuple[int, ...]] = []
    placed = 1
    while placed < n:
        parent = int(rng.integers(0, placed))
        if placed + 1 < n and rng.random() < higher_order_prob:
            scopes.append((parent, placed, placed + 1))
            placed += 2
        else:
            scopes.append((parent, placed) if rng.random() < 0.5 else (placed, parent))
            placed += 1
    scopes += [(i,) for i in range(n) if rng.random() < unary_prob]
    if not scopes:
        scopes.append((0,))
    order = rng.permutation(len(scopes))
    factors = [FactorNode.from_table(k, scopes[j], _table(rng, [cards[s] for s in scopes[j]], spread))
               for k, j in enumerate(order)]
    return build_graph([VariableNode(i, c) for i, c in enumerate(cards)], factors)


def grid(rng: np.random.Generator, rows: int, cols: int, cardinality: int = 2,
         coupling: float = 1.0, field: float = 0.5) -> FactorGraph:
    """Grid with attractive pairwise factors ``exp(coupling * [x_i == x_j])`` and random unaries."""
    n = rows * cols
    factors = []
    attract = np.exp(coupling * np.eye(cardinality))
    for i in range(n):
        factors.append(FactorNode.from_table(len(factors), (i,), np.exp(rng.normal(0, field, cardinality))))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                factors.append(FactorNode.from_table(len(factors), (i, i + 1), attract))
            if r + 1 < rows:
                factors.append(FactorNode.from_table(len(factors), (i, i + cols), attract))
    return build_graph([VariableNode(i, cardinality) for i in range(n)], factors)


def random_graph(rng: np.random.Generator, max_vars: int = 6, max_card: int = 3,
                 max_factors: int = 8, max_arity: int = 3, spread: float = 1.0) -> FactorGraph:
    """Arbitrary (usually loopy) small graph; every variable gets a unary factor."""
    n = int(rng.integers(1, max_vars + 1))
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n)]
    scopes: list[tuple[int, ...]] = [(i,) for i in range(n)]
    for _ in range(int(rng.integers(0, max_factors + 1))):
        k = int(rng.integers(1, min(max_arity, n) + 1))
        scopes.append(tuple(int(s) for s in rng.choice(n, size=k, replace=False)))
    factors = [FactorNode.from_table(j, s, _table(rng, [cards[v] for v in s], spread)) for j, s in enumerate(scopes)]
    return build_graph([VariableNode(i, c) for i, c in enumerate(cards)], factors)


def fig1_graph(f1=(1.0, 2.0), f2=((1.0, 2.0), (3.0, 4.0)), f3=((2.0, 1.0), (1.0, 2.0))) -> FactorGraph:
    """Three binary variables with f1{x1}, f2{x1,x3}, f3{x2,x3}."""
    variables = [VariableNode(i, 2) for i in range(3)]
    factors = [
        FactorNode.from_table(0, (0,), f1),
        FactorNode.from_table(1, (0, 2), f2),
        FactorNode.from_table(2, (1, 2), f3),
    ]
    return build_graph(variables, factors)
