"""Neural message passing on factor graphs.

Three layer types live here:

* ``generic_mpnn_step``: plain node-to-node message passing over a pairwise graph.
* ``fgnn_vf_step`` / ``fgnn_fv_step``: one factor-graph direction. Every edge
  (i, j) turns ``[v_i, g_j]`` into an edge feature ``t_ij``, maps it to an
  m x n matrix ``Q(t_ij)`` and multiplies that by the n-vector ``M([v_i, g_j])``.
  The per-edge m-vectors are aggregated (mean or max) at the receiving node.
* ``NbpStack``: k layers that each run both directions for the pairwise
  factor list and then for the multi-vertex (global) factor list, followed
  by separate readout heads for variables and pairwise factors.

Scenes are batched as a disjoint union; all gather/scatter goes through
``EdgeIndex`` so a batch and a single scene take the same code path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CheckpointMismatchError, ConfigurationError, ConstructionError, DimensionError
from .factor_graph import MULTI_VERTEX, PAIRWISE, FactorGraph
from .tensor import (
    MlpParams,
    Tensor,
    add,
    batched_matvec,
    concat,
    gather,
    mlp_forward,
    reshape,
    segment_reduce,
    tanh,
)

AGGREGATORS = ("mean", "max")
CHECKPOINT_FORMAT = "nbp-checkpoint-v1"


# ----------------------------------------------------------------------
# index structures
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeIndex:
    """Edge list between variables and one list of factors.

    ``variables[e]`` and ``factors[e]`` are the endpoints of edge ``e`` (factor
    ids are positions within the list, not graph-wide ids).
    """

    variables: np.ndarray
    factors: np.ndarray
    num_variables: int
    num_factors: int

    def __post_init__(self):
        v = np.asarray(self.variables, dtype=np.int64).reshape(-1)
        f = np.asarray(self.factors, dtype=np.int64).reshape(-1)
        if v.shape != f.shape:
            raise DimensionError(f"edge index: {v.shape[0]} variable ends vs {f.shape[0]} factor ends")
        if v.size and (v.min() < 0 or v.max() >= self.num_variables):
            raise ConstructionError("edge index references a variable out of range")
        if f.size and (f.min() < 0 or f.max() >= self.num_factors):
            raise ConstructionError("edge index references a factor out of range")
        if self.num_factors and np.any(np.bincount(f, minlength=self.num_factors) == 0):
            raise ConstructionError("every factor needs at least one incident edge")
        object.__setattr__(self, "variables", v)
        object.__setattr__(self, "factors", f)

    @property
    def num_edges(self) -> int:
        return int(self.variables.shape[0])

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.variables.tolist(), self.factors.tolist()))

    def by_factor(self) -> list[np.ndarray]:
        """Edge positions grouped per factor; together they partition the edge list."""
        return _groups(self.factors, self.num_factors)

    def by_variable(self) -> list[np.ndarray]:
        return _groups(self.variables, self.num_variables)

    def permuted(self, perm: Sequence[int]) -> "EdgeIndex":
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.num_edges)):
            raise ValueError("not a permutation of the edge list")
        return EdgeIndex(self.variables[perm], self.factors[perm], self.num_variables, self.num_factors)

    def shifted(self, dv: int, df: int, num_variables: int, num_factors: int) -> "EdgeIndex":
        return EdgeIndex(self.variables + dv, self.factors + df, num_variables, num_factors)


def _groups(keys: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.argsort(keys, kind="stable")
    cuts = np.searchsorted(keys[order], np.arange(1, n))
    return np.split(order, cuts)


@dataclass
class NbpGraph:
    """Neural view of one scene (or a disjoint batch of scenes).

    ``pair_endpoints[p] = (subject, object)`` for pairwise factor ``p``; the
    pairwise ``EdgeIndex`` has one edge per endpoint. ``multi_vertex`` is
    ``None`` when the graph has no global factors. ``pair_features`` holds
    the pairwise factors' own input features (possibly zero columns).
    """

    variable_features: np.ndarray
    pair_endpoints: np.ndarray
    pairwise: EdgeIndex
    multi_vertex: EdgeIndex | None = None
    pair_features: np.ndarray | None = None
    # per-scene bookkeeping, filled by ``batch``
    variable_offsets: tuple[int, ...] = (0,)
    pair_offsets: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.variable_features = np.asarray(self.variable_features, dtype=np.float64)
        if self.variable_features.ndim != 2:
            raise DimensionError("variable features must be a 2-D array")
        self.pair_endpoints = np.asarray(self.pair_endpoints, dtype=np.int64).reshape(-1, 2)
        if self.pair_features is None:
            self.pair_features = np.zeros((self.num_pairs, 0))
        pf = np.asarray(self.pair_features, dtype=np.float64)
        width = pf.shape[1] if pf.ndim == 2 else (pf.size // self.num_pairs if self.num_pairs else 0)
        self.pair_features = pf.reshape(self.num_pairs, width)

    @property
    def num_variables(self) -> int:
        return self.variable_features.shape[0]

    @property
    def num_pairs(self) -> int:
        return self.pair_endpoints.shape[0]

    @classmethod
    def build(cls, variable_features, pair_endpoints, multi_vertex_groups: Sequence[Sequence[int]] | None = None,
              pair_features=None) -> "NbpGraph":
        feats = np.asarray(variable_features, dtype=np.float64)
        ends = np.asarray(pair_endpoints, dtype=np.int64).reshape(-1, 2)
        n, p = feats.shape[0], ends.shape[0]
        pair_index = EdgeIndex(ends.reshape(-1), np.repeat(np.arange(p), 2), n, p)
        mv = None
        if multi_vertex_groups:
            vs = np.concatenate([np.asarray(grp, dtype=np.int64) for grp in multi_vertex_groups])
            fs = np.concatenate([np.full(len(grp), k) for k, grp in enumerate(multi_vertex_groups)])
            mv = EdgeIndex(vs, fs, n, len(multi_vertex_groups))
        return cls(feats, ends, pair_index, mv, pair_features, (0, n), (0, p))

    @classmethod
    def from_factor_graph(cls, g: FactorGraph, features=None) -> "NbpGraph":
        """Use pairwise and multi-vertex factors of ``g``; unary factors are ignored.

        Features default to the ``feature`` field of each variable; pairwise
        factor features are used when every pairwise factor has one.
        """
        if features is None:
            if any(v.feature is None for v in g.variables):
                raise ConfigurationError("every variable needs a feature vector for the neural path")
            features = np.array([v.feature for v in g.variables], dtype=np.float64)
        pair_factors = [f for f in g.factors if f.kind == PAIRWISE]
        pairs = [f.scope for f in pair_factors]
        groups = [f.scope for f in g.factors if f.kind == MULTI_VERTEX]
        pf = None
        if pair_factors and all(f.feature is not None for f in pair_factors):
            pf = np.array([f.feature for f in pair_factors], dtype=np.float64)
        return cls.build(features, np.array(pairs, dtype=np.int64).reshape(-1, 2), groups or None, pf)

    @staticmethod
    def batch(graphs: Sequence["NbpGraph"]) -> "NbpGraph":
        if not graphs:
            raise ValueError("cannot batch an empty list of graphs")
        has_mv = {g.multi_vertex is not None for g in graphs}
        if len(has_mv) > 1:
            raise ConfigurationError("cannot batch graphs with and without multi-vertex factors")
        if len({g.pair_features.shape[1] for g in graphs}) > 1:
            raise DimensionError("cannot batch graphs with different pair feature widths")
        feats = np.concatenate([g.variable_features for g in graphs])
        n = feats.shape[0]
        p = sum(g.num_pairs for g in graphs)
        ends, pv, pf, mv_v, mv_f = [], [], [], [], []
        voff, poff, hoff = [0], [0], 0
        for g in graphs:
            dv, dp = voff[-1], poff[-1]
            ends.append(g.pair_endpoints + dv)
            pv.append(g.pairwise.variables + dv)
            pf.append(g.pairwise.factors + dp)
            if g.multi_vertex is not None:
                mv_v.append(g.multi_vertex.variables + dv)
                mv_f.append(g.multi_vertex.factors + hoff)
                hoff += g.multi_vertex.num_factors
            voff.append(dv + g.num_variables)
            poff.append(dp + g.num_pairs)
        pair_index = EdgeIndex(np.concatenate(pv), np.concatenate(pf), n, p)
        mv = EdgeIndex(np.concatenate(mv_v), np.concatenate(mv_f), n, hoff) if mv_v else None
        pair_feats = np.concatenate([g.pair_features for g in graphs])
        return NbpGraph(feats, np.concatenate(ends).reshape(-1, 2), pair_index, mv, pair_feats, tuple(voff), tuple(poff))

    def without_multi_vertex(self) -> "NbpGraph":
        return NbpGraph(self.variable_features, self.pair_endpoints, self.pairwise, None, self.pair_features,
                        self.variable_offsets, self.pair_offsets)


# ----------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------

def aggregate(messages: Tensor, targets: np.ndarray, num_targets: int, mode: str = "mean") -> Tensor:
    """Segment mean/max; targets with no incoming edge receive a zero vector."""
    if mode not in AGGREGATORS and mode != "sum":
        raise ConfigurationError(f"unknown aggregator {mode!r}")
    width = messages.shape[1]
    present = np.unique(targets)
    if present.size == num_targets:
        return segment_reduce(messages, targets, num_targets, mode)
    pad = Tensor(np.zeros((1, width)))
    if present.size:
        compact = np.searchsorted(present, targets)
        table = concat([segment_reduce(messages, compact, present.size, mode), pad], axis=0)
    else:
        table = pad
    lookup = np.full(num_targets, present.size, dtype=np.int64)
    lookup[present] = np.arange(present.size)
    return gather(table, lookup)


# ----------------------------------------------------------------------
# generic MPNN
# ----------------------------------------------------------------------

@dataclass
class MpnnParams:
    message: MlpParams  # [v_i, v_j, e_ij] -> message
    update: MlpParams   # [v_i, m_i] -> new v_i

    def parameters(self) -> list[Tensor]:
        return self.message.parameters() + self.update.parameters()

    @classmethod
    def init(cls, node_width: int, edge_width: int, message_width: int, out_width: int,
             rng: np.random.Generator) -> "MpnnParams":
        return cls(MlpParams.init([2 * node_width + edge_width, message_width], rng),
                   MlpParams.init([node_width + message_width, out_width], rng))


def generic_mpnn_step(node_features: Tensor, edges, edge_features: Tensor | None, params: MpnnParams,
                      aggregator: str = "sum") -> Tensor:
    """``m_i = agg_{j in N(i)} M(v_i, v_j, e_ij)`` then ``v_i' = U(v_i, m_i)``.

    ``edges`` are undirected pairs; each contributes a message to both ends.
    """
    v = node_features
    n, d = v.shape
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    de = 0 if edge_features is None else edge_features.shape[1]
    if params.message.in_width != 2 * d + de:
        raise DimensionError(f"message network expects width {params.message.in_width}, got {2 * d + de}")
    if params.update.in_width != d + params.message.out_width:
        raise DimensionError("update network width does not match node + message width")
    recv = np.concatenate([edges[:, 0], edges[:, 1]])
    send = np.concatenate([edges[:, 1], edges[:, 0]])
    parts = [gather(v, recv), gather(v, send)]
    if edge_features is not None:
        if edge_features.shape[0] != edges.shape[0]:
            raise DimensionError("one edge feature row per edge expected")
        parts.append(gather(edge_features, np.concatenate([np.arange(len(edges))] * 2)))
    msgs = mlp_forward(params.message, concat(parts, axis=1))
    m = aggregate(msgs, recv, n, aggregator)
    return mlp_forward(params.update, concat([v, m], axis=1))


# ----------------------------------------------------------------------
# factor-graph layers
# ----------------------------------------------------------------------

@dataclass
class DirectionParams:
    """Networks for one direction of one factor list."""

    edge: MlpParams  # [v_i, g_j] -> t_ij
    q: MlpParams     # t_ij -> m*n entries of Q
    m: MlpParams     # [v_i, g_j] -> n-vector
    out_width: int   # m
    inner_width: int  # n

    def parameters(self) -> list[Tensor]:
        return self.edge.parameters() + self.q.parameters() + self.m.parameters()

    def named_mlps(self) -> Iterator[tuple[str, MlpParams]]:
        yield "edge", self.edge
        yield "q", self.q
        yield "m", self.m

    @classmethod
    def init(cls, feature_width: int, edge_width: int, inner_width: int, out_width: int,
             rng: np.random.Generator) -> "DirectionParams":
        edge = MlpParams.init([2 * feature_width, edge_width], rng)
        # Q(t) @ M sums inner_width products; shrink Q so residual updates start
        # small and features stay O(1) through a 3-layer stack
        q = MlpParams.init([edge_width, out_width * inner_width], rng, final_gain=0.5 / np.sqrt(inner_width))
        m = MlpParams.init([2 * feature_width, inner_width], rng)
        return cls(edge, q, m, out_width, inner_width)

    def zero_(self) -> None:
        for p in self.parameters():
            p.data.flags.writeable = True
            p.data[...] = 0.0
            p.data.flags.writeable = False


def edge_messages(v_ends: Tensor, g_ends: Tensor, params: DirectionParams) -> Tensor:
    """Per-edge ``Q(t_ij) @ M([v_i, g_j])`` for stacked edge endpoints."""
    x = concat([v_ends, g_ends], axis=1)
    if x.shape[1] != params.m.in_width:
        raise DimensionError(f"direction expects [v, g] width {params.m.in_width}, got {x.shape[1]}")
    # t and M are squashed so Q(t) @ M stays bounded instead of growing
    # quadratically with the features from layer to layer
    t = tanh(mlp_forward(params.edge, x))
    q = reshape(mlp_forward(params.q, t), (x.shape[0], params.out_width, params.inner_width))
    return batched_matvec(q, tanh(mlp_forward(params.m, x)))


def fgnn_vf_step(variables: Tensor, factors: Tensor, index: EdgeIndex, params: DirectionParams,
                 aggregator: str = "mean") -> Tensor:
    """New factor features ``g_j = agg_{i in N(j)} Q(t_ij) M([v_i, g_j])``."""
    msgs = edge_messages(gather(variables, index.variables), gather(factors, index.factors), params)
    return aggregate(msgs, index.factors, index.num_factors, aggregator)


def fgnn_fv_step(variables: Tensor, factors: Tensor, index: EdgeIndex, params: DirectionParams,
                 aggregator: str = "mean") -> Tensor:
    """New variable features ``v_i = agg_{j in N(i)} Q(t_ij) M([v_i, g_j])``.

    Variables outside this factor list get a zero vector.
    """
    msgs = edge_messages(gather(variables, index.variables), gather(factors, index.factors), params)
    return aggregate(msgs, index.variables, index.num_variables, aggregator)


@dataclass
class NbpLayerParams:
    pairwise_vf: DirectionParams
    pairwise_fv: DirectionParams
    multi_vf: DirectionParams | None = None
    multi_fv: DirectionParams | None = None
    aggregator: str = "mean"

    def directions(self) -> Iterator[tuple[str, DirectionParams]]:
        for name in ("pairwise_vf", "pairwise_fv", "multi_vf", "multi_fv"):
            d = getattr(self, name)
            if d is not None:
                yield name, d

    def parameters(self) -> list[Tensor]:
        return [p for _, d in self.directions() for p in d.parameters()]

    @property
    def has_multi_vertex(self) -> bool:
        return self.multi_vf is not None


def nbp_layer(layer: NbpLayerParams, v: Tensor, g_pair: Tensor, g_multi: Tensor | None, graph: NbpGraph):
    """Pairwise list first (VF then FV), then the multi-vertex list on the updated variables.

    All updates are residual, so a zeroed multi-vertex path leaves the
    pairwise result untouched.
    """
    agg = layer.aggregator
    if graph.num_pairs:
        g_pair = add(g_pair, fgnn_vf_step(v, g_pair, graph.pairwise, layer.pairwise_vf, agg))
        v = add(v, fgnn_fv_step(v, g_pair, graph.pairwise, layer.pairwise_fv, agg))
    if layer.has_multi_vertex:
        g_multi = add(g_multi, fgnn_vf_step(v, g_multi, graph.multi_vertex, layer.multi_vf, agg))
        v = add(v, fgnn_fv_step(v, g_multi, graph.multi_vertex, layer.multi_fv, agg))
    return v, g_pair, g_multi


# ----------------------------------------------------------------------
# stack
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class NbpConfig:
    input_width: int
    instance_classes: int
    predicate_classes: int
    hidden_width: int = 64
    edge_width: int = 16
    head_hidden: int = 64
    num_layers: int = 2
    aggregator: str = "mean"
    higher_order: bool = True
    pair_input_width: int = 0

    def __post_init__(self):
        for name in ("input_width", "instance_classes", "predicate_classes", "hidden_width", "edge_width", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0 or self.pair_input_width < 0:
            raise ConfigurationError("num_layers and pair_input_width must be non-negative")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")


@dataclass
class NbpStack:
    config: NbpConfig
    variable_embed: MlpParams
    pair_embed: MlpParams
    layers: list[NbpLayerParams]
    variable_head: MlpParams
    predicate_head: MlpParams
    seed: int = 0

    def named_mlps(self) -> Iterator[tuple[str, MlpParams]]:
        yield "variable_embed", self.variable_embed
        yield "pair_embed", self.pair_embed
        for k, layer in enumerate(self.layers):
            for dname, d in layer.directions():
                for mname, mlp in d.named_mlps():
                    yield f"layers.{k}.{dname}.{mname}", mlp
        yield "variable_head", self.variable_head
        yield "predicate_head", self.predicate_head

    def parameters(self) -> list[Tensor]:
        return [p for _, mlp in self.named_mlps() for p in mlp.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def init_params(config: NbpConfig, seed: int) -> NbpStack:
    """Fan-in uniform init, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    d, e = config.hidden_width, config.edge_width
    variable_embed = MlpParams.init([config.input_width, d], rng)
    pair_embed = MlpParams.init([2 * config.input_width + config.pair_input_width, d, d], rng)
    layers = []
    for _ in range(config.num_layers):
        pv = DirectionParams.init(d, e, d, d, rng)
        pf = DirectionParams.init(d, e, d, d, rng)
        mv = mf = None
        if config.higher_order:
            mv = DirectionParams.init(d, e, d, d, rng)
            mf = DirectionParams.init(d, e, d, d, rng)
        layers.append(NbpLayerParams(pv, pf, mv, mf, config.aggregator))
    variable_head = MlpParams.init([d, config.head_hidden, config.instance_classes], rng)
    predicate_head = MlpParams.init([d, config.head_hidden, config.predicate_classes], rng)
    return NbpStack(config, variable_embed, pair_embed, layers, variable_head, predicate_head, int(seed))


@dataclass
class NbpOutput:
    variable_logits: Tensor
    predicate_logits: Tensor
    variable_features: Tensor
    pair_features: Tensor


def nbp_forward(graph: NbpGraph | FactorGraph, stack: NbpStack, features=None) -> NbpOutput:
    """Run the stack; returns per-variable and per-pairwise-factor logits."""
    if isinstance(graph, FactorGraph):
        graph = NbpGraph.from_factor_graph(graph, features)
    elif features is not None:
        graph = NbpGraph(np.asarray(features, dtype=np.float64), graph.pair_endpoints, graph.pairwise,
                         graph.multi_vertex, graph.pair_features, graph.variable_offsets, graph.pair_offsets)
    cfg = stack.config
    if graph.variable_features.shape[1] != cfg.input_width:
        raise DimensionError(f"stack expects input width {cfg.input_width}, got {graph.variable_features.shape[1]}")
    if graph.pair_features.shape[1] != cfg.pair_input_width:
        raise DimensionError(f"stack expects pair feature width {cfg.pair_input_width}, got {graph.pair_features.shape[1]}")
    wants_mv = any(layer.has_multi_vertex for layer in stack.layers)
    if wants_mv and graph.multi_vertex is None:
        raise ConfigurationError("stack has multi-vertex layers but the graph has no multi-vertex factor")
    x = Tensor(graph.variable_features)
    v = mlp_forward(stack.variable_embed, x)
    ends = graph.pair_endpoints
    g_pair = mlp_forward(stack.pair_embed, concat([gather(x, ends[:, 0]), gather(x, ends[:, 1]),
                                                   Tensor(graph.pair_features)], axis=1))
    g_multi = None
    if wants_mv:
        mv = graph.multi_vertex
        g_multi = segment_reduce(gather(v, mv.variables), mv.factors, mv.num_factors, "mean")
    for layer in stack.layers:
        v, g_pair, g_multi = nbp_layer(layer, v, g_pair, g_multi, graph)
    return NbpOutput(mlp_forward(stack.variable_head, v), mlp_forward(stack.predicate_head, g_pair), v, g_pair)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def stack_to_dict(stack: NbpStack) -> dict:
    mlps = {}
    for name, mlp in stack.named_mlps():
        mlps[name] = {
            "widths": mlp.widths,
            "weights": [w.data.reshape(-1).tolist() for w in mlp.weights],
            "biases": [b.data.tolist() for b in mlp.biases],
        }
    return {"format": CHECKPOINT_FORMAT, "config": asdict(stack.config), "seed": stack.seed, "mlps": mlps}


def stack_from_dict(doc: dict, expected: NbpConfig | None = None) -> NbpStack:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"unrecognised checkpoint format {doc.get('format')!r}")
    try:
        config = NbpConfig(**doc["config"])
    except TypeError as exc:
        raise CheckpointMismatchError(f"bad checkpoint config: {exc}") from None
    if expected is not None and expected != config:
        diffs = [k for k, v in asdict(expected).items() if asdict(config)[k] != v]
        raise CheckpointMismatchError(f"checkpoint does not match the requested model: differs in {', '.join(diffs)}")
    stack = init_params(config, doc.get("seed", 0))
    stored = doc["mlps"]
    names = [n for n, _ in stack.named_mlps()]
    if sorted(names) != sorted(stored):
        raise CheckpointMismatchError("checkpoint holds a different set of networks")
    for name, mlp in stack.named_mlps():
        entry = stored[name]
        if list(entry["widths"]) != mlp.widths:
            raise CheckpointMismatchError(f"{name}: widths {entry['widths']} vs {mlp.widths}")
        for w, flat in zip(mlp.weights, entry["weights"]):
            _load_into(w, flat, name)
        for b, flat in zip(mlp.biases, entry["biases"]):
            _load_into(b, flat, name)
    return stack


def _load_into(t: Tensor, flat, name: str) -> None:
    arr = np.asarray(flat, dtype=np.float64)
    if arr.size != t.data.size:
        raise CheckpointMismatchError(f"{name}: stored {arr.size} values, expected {t.data.size}")
    t.data.flags.writeable = True
    t.data[...] = arr.reshape(t.shape)
    t.data.flags.writeable = False


def save_checkpoint(stack: NbpStack, path) -> None:
    Path(path).write_text(json.dumps(stack_to_dict(stack)))


def load_checkpoint(path, expected: NbpConfig | None = None) -> NbpStack:
    return stack_from_dict(json.loads(Path(path).read_text()), expected)
