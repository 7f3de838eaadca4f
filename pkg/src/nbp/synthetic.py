"""Toy scene-graph data with a long-tailed predicate distribution.

Each scene has a hidden context, a handful of entities with a class, an
appearance vector (class prototype plus Gaussian noise) and a 2-D position.
An ordered pair is related when the two entities are closer than
``relation_radius``; its predicate is drawn from

    softmax((A[c_s] + B[c_o] + G[geometry] + C[context] + bias) / temperature)

over the real predicates 1..R. The biases are calibrated so the marginal
predicate frequency follows ``rank ** -zipf_exponent``. The context also
shifts which entity classes appear, so a scene-level (global) factor can
recover it. Class 0 is reserved for "no relation".
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .factor_graph import MULTI_VERTEX, PAIRWISE, FactorGraph, FactorNode, VariableNode, build_graph

log = logging.getLogger(__name__)

BACKGROUND = 0
TASKS = ("predcls", "sgcls", "sgdet_analogue")
HEAD, BODY, TAIL = "head", "body", "tail"
GEOMETRY_BINS = 8
CALIBRATION_PAIRS = 20000
CALIBRATION_ROUNDS = 60


@dataclass(frozen=True)
class DatasetSpec:
    instance_classes: int = 10
    predicate_classes: int = 12
    min_entities: int = 3
    max_entities: int = 7
    num_scenes: int = 800
    zipf_exponent: float = 1.5
    feature_dim: int = 16
    noise: float = 0.3
    seed: int = 0
    relation_radius: float = 0.28
    temperature: float = 0.25
    num_contexts: int = 3
    score_scale: float = 1.5
    prototype_scale: float = 1.0
    detector_noise: float = 0.5
    train_fraction: float = 0.7
    eval_fraction: float = 0.05

    def __post_init__(self):
        problems = []
        if self.instance_classes < 1:
            problems.append("instance_classes must be >= 1")
        if self.predicate_classes < 1:
            problems.append("predicate_classes must be >= 1")
        if not 1 <= self.min_entities <= self.max_entities:
            problems.append("need 1 <= min_entities <= max_entities")
        if self.num_scenes < 1:
            problems.append("num_scenes must be >= 1")
        if self.zipf_exponent < 0:
            problems.append("zipf_exponent must be non-negative")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        for name in ("noise", "temperature", "score_scale", "detector_noise", "prototype_scale"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                problems.append(f"{name} must be a finite non-negative number")
        if self.relation_radius <= 0:
            problems.append("relation_radius must be positive")
        if self.num_contexts < 1:
            problems.append("num_contexts must be >= 1")
        if not 0 < self.train_fraction < 1 or not 0 <= self.eval_fraction < 1:
            problems.append("train_fraction must be in (0, 1) and eval_fraction in [0, 1)")
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass(frozen=True)
class Entity:
    feature: tuple[float, ...]
    label: int
    position: tuple[float, float]


@dataclass(frozen=True)
class PredicateEdge:
    subject: int
    object: int
    label: int
    # if the instance is dropped by resampling, may it be supervised as background?
    negative_allowed: bool = False


@dataclass(frozen=True)
class SceneSample:
    id: int
    entities: tuple[Entity, ...]
    edges: tuple[PredicateEdge, ...]
    context: int = 0

    def __post_init__(self):
        n = len(self.entities)
        seen = set()
        for e in self.edges:
            if e.subject == e.object:
                raise ValidationError(f"scene {self.id}: edge with subject == object ({e.subject})")
            if not (0 <= e.subject < n and 0 <= e.object < n):
                raise ValidationError(f"scene {self.id}: edge ({e.subject}, {e.object}) outside {n} entities")
            if (e.subject, e.object) in seen:
                raise ValidationError(f"scene {self.id}: two labels for pair ({e.subject}, {e.object})")
            seen.add((e.subject, e.object))

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entities]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "context": self.context,
            "entities": [{"feature": list(e.feature), "label": e.label, "position": list(e.position)} for e in self.entities],
            "edges": [{"s": e.subject, "o": e.object, "label": e.label} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSample":
        entities = tuple(Entity(tuple(float(x) for x in e["feature"]), int(e["label"]),
                                tuple(float(x) for x in e.get("position", (0.0, 0.0))))
                         for e in doc["entities"])
        edges = tuple(PredicateEdge(int(e["s"]), int(e["o"]), int(e["label"])) for e in doc["edges"])
        return cls(int(doc["id"]), entities, edges, int(doc.get("context", 0)))


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    train: list[SceneSample]
    eval: list[SceneSample]
    test: list[SceneSample]
    prototypes: np.ndarray = field(repr=False, default=None)

    def splits(self) -> dict[str, list[SceneSample]]:
        return {"train": self.train, "eval": self.eval, "test": self.test}


@dataclass(frozen=True)
class _Tables:
    prototypes: np.ndarray
    class_profiles: np.ndarray  # (contexts, instance classes) logits
    subject: np.ndarray         # (C, R)
    object: np.ndarray          # (C, R)
    geometry: np.ndarray        # (bins, R)
    context: np.ndarray         # (contexts, R)
    bias: np.ndarray            # (R,)


def zipf_profile(k: int, exponent: float) -> np.ndarray:
    w = np.arange(1, k + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def geometry_bin(ps, po, radius: float) -> int:
    """Quadrant of the object relative to the subject, split into near and far halves."""
    dx, dy = po[0] - ps[0], po[1] - ps[1]
    quadrant = (dx >= 0) * 2 + (dy >= 0)
    near = math.hypot(dx, dy) < radius / 2
    return int(quadrant * 2 + near)


def _draw_tables(spec: DatasetSpec) -> _Tables:
    rng = np.random.default_rng([spec.seed, 1])
    c, r, k = spec.instance_classes, spec.predicate_classes, spec.num_contexts
    s = spec.score_scale
    protos = rng.normal(size=(c, spec.feature_dim)) * spec.prototype_scale
    return _Tables(
        prototypes=protos,
        class_profiles=rng.normal(size=(k, c)) * 1.5,
        subject=rng.normal(size=(c, r)) * s,
        object=rng.normal(size=(c, r)) * s,
        geometry=rng.normal(size=(GEOMETRY_BINS, r)) * s,
        context=rng.normal(size=(k, r)) * s,
        bias=np.zeros(r),
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _predicate_probs(scores: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 0:
        out = np.zeros_like(scores)
        out[np.arange(len(scores)), np.argmax(scores, axis=-1)] = 1.0
        return out
    return _softmax(scores / temperature)


def _layout(rng: np.random.Generator, spec: DatasetSpec, tables: _Tables):
    ctx = int(rng.integers(spec.num_contexts))
    n = int(rng.integers(spec.min_entities, spec.max_entities + 1))
    classes = rng.choice(spec.instance_classes, size=n, p=_softmax(tables.class_profiles[ctx]))
    positions = rng.uniform(0.0, 1.0, size=(n, 2))
    return ctx, classes, positions


def _related_pairs(positions: np.ndarray, radius: float) -> list[tuple[int, int]]:
    n = len(positions)
    return [(s, o) for s in range(n) for o in range(n)
            if s != o and math.hypot(*(positions[o] - positions[s])) < radius]


def _pair_scores(tables: _Tables, spec: DatasetSpec, ctx, classes, positions, pairs) -> np.ndarray:
    rows = []
    for s, o in pairs:
        b = geometry_bin(positions[s], positions[o], spec.relation_radius)
        rows.append(tables.subject[classes[s]] + tables.object[classes[o]] + tables.geometry[b] + tables.context[ctx])
    return np.array(rows).reshape(-1, spec.predicate_classes) + tables.bias


def _calibrate(spec: DatasetSpec, tables: _Tables) -> _Tables:
    """Fit per-predicate biases so the expected marginal matches the Zipf profile."""
    rng = np.random.default_rng([spec.seed, 2])
    raw, have = [], 0
    for _ in range(50 * CALIBRATION_PAIRS):
        if have >= CALIBRATION_PAIRS:
            break
        ctx, classes, positions = _layout(rng, spec, tables)
        pairs = _related_pairs(positions, spec.relation_radius)
        if pairs:
            raw.append(_pair_scores(tables, spec, ctx, classes, positions, pairs) - tables.bias)
            have += len(pairs)
    scores = np.concatenate(raw) if raw else np.zeros((1, spec.predicate_classes))
    target = zipf_profile(spec.predicate_classes, spec.zipf_exponent)
    # work with a softened temperature so argmax-labelled data still calibrates
    temp = max(spec.temperature, 0.05)
    bias = np.zeros(spec.predicate_classes)
    for _ in range(CALIBRATION_ROUNDS * 4):
        marginal = _softmax((scores + bias) / temp).mean(axis=0)
        step = temp * (np.log(target) - np.log(marginal))
        bias += step
        if np.abs(step).max() < 1e-6:
            break
    bias -= bias.mean()
    return _Tables(**{**tables.__dict__, "bias": bias})


def _scene(spec: DatasetSpec, tables: _Tables, scene_id: int) -> SceneSample:
    rng = np.random.default_rng([spec.seed, 3, scene_id])
    ctx, classes, positions = _layout(rng, spec, tables)
    noise = rng.normal(size=(len(classes), spec.feature_dim)) * spec.noise
    feats = tables.prototypes[classes] + noise
    entities = tuple(Entity(tuple(float(x) for x in feats[i]), int(classes[i]), (float(positions[i, 0]), float(positions[i, 1])))
                     for i in range(len(classes)))
    pairs = _related_pairs(positions, spec.relation_radius)
    edges = []
    if pairs:
        probs = _predicate_probs(_pair_scores(tables, spec, ctx, classes, positions, pairs), spec.temperature)
        for (s, o), p in zip(pairs, probs):
            label = 1 + int(rng.choice(spec.predicate_classes, p=p))
            edges.append(PredicateEdge(s, o, label))
    return SceneSample(scene_id, entities, tuple(edges), ctx)


def split_ids(spec: DatasetSpec) -> dict[str, list[int]]:
    """70/30 train/test by shuffled scene id, then a slice of train held out for eval."""
    rng = np.random.default_rng([spec.seed, 4])
    order = rng.permutation(spec.num_scenes)
    n_train_pool = int(round(spec.train_fraction * spec.num_scenes))
    n_eval = int(round(spec.eval_fraction * n_train_pool))
    pool = order[:n_train_pool]
    return {
        "train": sorted(int(i) for i in pool[n_eval:]),
        "eval": sorted(int(i) for i in pool[:n_eval]),
        "test": sorted(int(i) for i in order[n_train_pool:]),
    }


def generate(spec: DatasetSpec) -> SyntheticDataset:
    """Build the full dataset; scenes come from per-scene derived seeds."""
    tables = _calibrate(spec, _draw_tables(spec))
    scenes = [_scene(spec, tables, i) for i in range(spec.num_scenes)]
    ids = split_ids(spec)
    pick = lambda key: [scenes[i] for i in ids[key]]
    return SyntheticDataset(spec, pick("train"), pick("eval"), pick("test"), tables.prototypes)


# ----------------------------------------------------------------------
# groups
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GroupAssignment:
    groups: dict[int, str]      # predicate label (1..R) -> group
    counts: dict[int, int]
    head_min: float
    tail_max: float
    total: int

    def members(self, group: str) -> list[int]:
        return sorted(p for p, g in self.groups.items() if g == group)

    def to_dict(self) -> dict:
        return {"head_min": self.head_min, "tail_max": self.tail_max, "total": self.total,
                "groups": {str(k): v for k, v in sorted(self.groups.items())},
                "counts": {str(k): v for k, v in sorted(self.counts.items())}}

    @classmethod
    def from_dict(cls, doc: dict) -> "GroupAssignment":
        return cls({int(k): v for k, v in doc["groups"].items()}, {int(k): int(v) for k, v in doc["counts"].items()},
                   float(doc["head_min"]), float(doc["tail_max"]), int(doc["total"]))


def predicate_counts(scenes: Iterable[SceneSample], num_predicates: int) -> dict[int, int]:
    c = Counter(e.label for s in scenes for e in s.edges)
    return {p: int(c.get(p, 0)) for p in range(1, num_predicates + 1)}


def assign_groups(train: Sequence[SceneSample], num_predicates: int, head_min: float = 0.05,
                  tail_max: float = 0.02) -> GroupAssignment:
    """Head if a predicate holds more than ``head_min`` of the training instances,
    tail if less than ``tail_max``, body otherwise. Unseen predicates are tail.
    """
    if not (0 <= tail_max < head_min <= 1):
        raise ValidationError(f"thresholds must satisfy 0 <= tail_max < head_min <= 1, got {tail_max}, {head_min}")
    counts = predicate_counts(train, num_predicates)
    total = sum(counts.values())
    groups = {}
    for p, n in counts.items():
        share = n / total if total else 0.0
        if n == 0 or share < tail_max:
            groups[p] = TAIL
        elif share > head_min:
            groups[p] = HEAD
        else:
            groups[p] = BODY
    return GroupAssignment(groups, counts, head_min, tail_max, total)


# ----------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    repeat_threshold: float = 0.07
    drop_rate: float = 0.7
    enabled: bool = True

    def __post_init__(self):
        if not self.repeat_threshold > 0:
            raise ValidationError("repeat threshold t must be positive")
        if not 0 <= self.drop_rate <= 1:
            raise ValidationError("instance drop rate must lie in [0, 1]")


@dataclass(frozen=True)
class StreamItem:
    index: int                      # position in the split
    scene_id: int
    copy: int                       # 0 for the original, >0 for repeats
    dropped: tuple[int, ...] = ()   # edge positions masked out of this copy


def repeat_factors(scenes: Sequence[SceneSample], t: float) -> dict[int, float]:
    """Per predicate ``r(c) = max(1, sqrt(t / f(c)))`` with f the fraction of scenes containing c."""
    n = len(scenes)
    present = Counter(p for s in scenes for p in {e.label for e in s.edges})
    return {p: max(1.0, math.sqrt(t / (k / n))) for p, k in present.items()}


def resample(train: Sequence[SceneSample], cfg: SamplerConfig, seed: int) -> list[StreamItem]:
    """One epoch of scene-level repeat-factor sampling with instance-level drops.

    Scenes repeat ``max_c r(c)`` times on average (stochastic rounding). In the
    extra copies, instances of predicates with ``r(c) == 1`` are dropped with
    probability ``drop_rate``. The original copy is never thinned, so no
    class falls below its unsampled count.
    """
    if not cfg.enabled:
        return [StreamItem(i, s.id, 0) for i, s in enumerate(train)]
    rng = np.random.default_rng([seed, 5])
    r = repeat_factors(train, cfg.repeat_threshold)
    stream = []
    for i, s in enumerate(train):
        rs = max((r[e.label] for e in s.edges), default=1.0)
        copies = int(math.floor(rs))
        if rng.random() < rs - copies:
            copies += 1
        stream.append(StreamItem(i, s.id, 0))
        for k in range(1, copies):
            drops = tuple(j for j, e in enumerate(s.edges) if r[e.label] == 1.0 and rng.random() < cfg.drop_rate)
            stream.append(StreamItem(i, s.id, k, drops))
    order = rng.permutation(len(stream))
    return [stream[j] for j in order]


def stream_hash(stream: Iterable[StreamItem]) -> str:
    h = hashlib.sha256()
    for item in stream:
        h.update(f"{item.scene_id}:{item.copy}:{','.join(map(str, item.dropped))};".encode())
    return h.hexdigest()


def stream_frequencies(train: Sequence[SceneSample], stream: Iterable[StreamItem], num_predicates: int) -> np.ndarray:
    """Share of supervised predicate instances per class (index 0 unused)."""
    counts = np.zeros(num_predicates + 1)
    for item in stream:
        dropped = set(item.dropped)
        for j, e in enumerate(train[item.index].edges):
            if j not in dropped:
                counts[e.label] += 1
    return counts / max(counts.sum(), 1.0)


# ----------------------------------------------------------------------
# factor graph view
# ----------------------------------------------------------------------

@dataclass
class SceneTargets:
    scene_id: int
    instance_labels: np.ndarray   # (n,)
    pair_endpoints: np.ndarray    # (n(n-1), 2), subject-major order
    predicate_labels: np.ndarray  # (n(n-1),), 0 = background
    edge_positions: np.ndarray    # pair index of each labelled edge, in scene edge order
    supervise_instances: bool


def entity_inputs(sample: SceneSample, task: str, instance_classes: int, detector_noise: float = 0.0,
                  seed: int = 0) -> np.ndarray:
    """Variable input rows: appearance, position, and (predcls only) a label one-hot."""
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    feats = np.array([e.feature for e in sample.entities], dtype=np.float64)
    if task == "sgdet_analogue" and detector_noise > 0:
        rng = np.random.default_rng([seed, 6, sample.id])
        feats = feats + rng.normal(size=feats.shape) * detector_noise
    pos = np.array([e.position for e in sample.entities], dtype=np.float64).reshape(-1, 2)
    parts = [feats, pos]
    if task == "predcls":
        parts.append(np.eye(instance_classes)[sample.labels].reshape(-1, instance_classes))
    return np.concatenate(parts, axis=1)


def input_width(spec: DatasetSpec, task: str) -> int:
    return spec.feature_dim + 2 + (spec.instance_classes if task == "predcls" else 0)


PAIR_FEATURE_WIDTH = 3


def pair_geometry(sample: SceneSample, s: int, o: int, scale: float = 1.0) -> tuple[float, float, float]:
    """Offset of the object from the subject and their distance, divided by ``scale``."""
    ps, po = sample.entities[s].position, sample.entities[o].position
    dx, dy = (po[0] - ps[0]) / scale, (po[1] - ps[1]) / scale
    return (dx, dy, math.hypot(dx, dy))


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(s, o) for s in range(n) for o in range(n) if s != o]


def scene_to_factor_graph(sample: SceneSample, task: str, instance_classes: int, detector_noise: float = 0.0,
                          seed: int = 0, geometry_scale: float = 1.0) -> tuple[FactorGraph, SceneTargets] | None:
    """Variables per entity, one feature-only factor per ordered pair and one global factor.

    Pairwise factors carry the pair geometry (dx, dy, distance) as features,
    divided by ``geometry_scale`` (the relation radius keeps them O(1)).

    Returns ``None`` (with a logged warning) for scenes with fewer than two entities.
    """
    n = len(sample.entities)
    if n < 2:
        log.warning("scene %d has %d entities; skipped", sample.id, n)
        return None
    x = entity_inputs(sample, task, instance_classes, detector_noise, seed)
    variables = [VariableNode(i, instance_classes, feature=tuple(float(v) for v in x[i])) for i in range(n)]
    pairs = ordered_pairs(n)
    factors = [FactorNode(k, p, feature=pair_geometry(sample, *p, geometry_scale), kind=PAIRWISE) for k, p in enumerate(pairs)]
    factors.append(FactorNode(len(pairs), tuple(range(n)), kind=MULTI_VERTEX))
    g = build_graph(variables, factors)
    pair_pos = {p: k for k, p in enumerate(pairs)}
    labels = np.zeros(len(pairs), dtype=np.int64)
    positions = np.array([pair_pos[(e.subject, e.object)] for e in sample.edges], dtype=np.int64)
    for e, k in zip(sample.edges, positions):
        labels[k] = e.label
    targets = SceneTargets(sample.id, np.array(sample.labels, dtype=np.int64), np.array(pairs, dtype=np.int64).reshape(-1, 2),
                           labels, positions, task != "predcls")
    return g, targets


# ----------------------------------------------------------------------
# files
# ----------------------------------------------------------------------

def dumps_scene(sample: SceneSample) -> str:
    return json.dumps(sample.to_dict(), separators=(",", ":"), allow_nan=False)


def write_dataset(ds: SyntheticDataset, out_dir, head_min: float = 0.05, tail_max: float = 0.02) -> dict:
    """Write ``train/eval/test.jsonl`` plus ``dataset_manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, scenes in ds.splits().items():
        path = out / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in scenes:
                fh.write(dumps_scene(s) + "\n")
        files[name] = path.name
    groups = assign_groups(ds.train, ds.spec.predicate_classes, head_min, tail_max)
    manifest = {
        "spec": asdict(ds.spec),
        "seed": ds.spec.seed,
        "files": files,
        "splits": {name: [s.id for s in scenes] for name, scenes in ds.splits().items()},
        "groups": groups.to_dict(),
    }
    (out / "dataset_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_scenes(path) -> list[SceneSample]:
    with open(path, encoding="utf-8") as fh:
        return [SceneSample.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_dataset(path) -> tuple[SyntheticDataset, GroupAssignment]:
    """Load a directory written by :func:`write_dataset`."""
    root = Path(path)
    manifest = json.loads((root / "dataset_manifest.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    splits = {name: read_scenes(root / fname) for name, fname in manifest["files"].items()}
    ds = SyntheticDataset(spec, splits["train"], splits["eval"], splits["test"])
    return ds, GroupAssignment.from_dict(manifest["groups"])
