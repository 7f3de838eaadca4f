"""Triplet ranking and recall metrics.

A prediction per scene is a ranked list of (subject, object, subject label,
predicate, object label, score). Pairs whose background probability beats
every real predicate are left out. Recall counts a ground-truth triplet as
found when a top-K entry has the same pair and all three labels.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .synthetic import BODY, HEAD, TAIL, GroupAssignment, SceneSample, ordered_pairs
from .tensor import softmax

DEFAULT_KS = (20, 50, 100)
GROUP_K = 100


@dataclass(frozen=True)
class Triplet:
    subject: int
    object: int
    subject_label: int
    predicate: int
    object_label: int
    score: float


@dataclass
class ScenePrediction:
    scene_id: int
    triplets: list[Triplet]

    def top(self, k: int) -> list[Triplet]:
        return self.triplets[:k]


def rank_scene(scene_id: int, pairs: Sequence[tuple[int, int]], predicate_probs: np.ndarray,
               entity_labels: Sequence[int], entity_probs: Sequence[float]) -> ScenePrediction:
    """Build and rank one scene's triplets.

    ``predicate_probs`` has one row per pair with background in column 0.
    Ties keep canonical pair order (stable sort).
    """
    out = []
    for k, (s, o) in enumerate(pairs):
        row = predicate_probs[k]
        real = row[1:]
        best = int(np.argmax(real))
        if row[0] > real[best]:
            continue
        score = float(entity_probs[s] * real[best] * entity_probs[o])
        out.append(Triplet(s, o, int(entity_labels[s]), best + 1, int(entity_labels[o]), score))
    order = sorted(range(len(out)), key=lambda i: -out[i].score)
    return ScenePrediction(scene_id, [out[i] for i in order])


def predictions_from_logits(scene: SceneSample, variable_logits: np.ndarray | None, predicate_logits: np.ndarray,
                            use_gt_labels: bool) -> ScenePrediction:
    pairs = ordered_pairs(len(scene.entities))
    pred_p = softmax(np.asarray(predicate_logits))
    if use_gt_labels:
        labels, probs = scene.labels, [1.0] * len(scene.entities)
    else:
        var_p = softmax(np.asarray(variable_logits))
        labels = [int(i) for i in np.argmax(var_p, axis=1)]
        probs = [float(var_p[i, labels[i]]) for i in range(len(labels))]
    return rank_scene(scene.id, pairs, pred_p, labels, probs)


@dataclass
class EvalReport:
    recall_at_k: dict[int, float]
    mean_recall_at_k: dict[int, float]
    group_recall: dict[str, float | None]
    per_predicate_recall: dict[int, dict[int, float]]
    excluded_predicates: list[int]
    num_ground_truth: int
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "recall_at_k": {str(k): v for k, v in self.recall_at_k.items()},
            "mean_recall_at_k": {str(k): v for k, v in self.mean_recall_at_k.items()},
            "group_recall": dict(self.group_recall),
            "per_predicate_recall": {str(k): {str(p): r for p, r in v.items()} for k, v in self.per_predicate_recall.items()},
            "excluded_predicates": list(self.excluded_predicates),
            "num_ground_truth": self.num_ground_truth,
            "config": self.config,
            "seed": self.seed,
        }


def evaluate(predictions: Sequence[ScenePrediction], ground_truth: Sequence[SceneSample], num_predicates: int,
             ks: Sequence[int] = DEFAULT_KS, groups: GroupAssignment | None = None, config: dict | None = None,
             seed: int | None = None) -> EvalReport:
    """Micro-averaged R@K, per-predicate recall, mR@K and group recall at K=100."""
    by_id = {p.scene_id: p for p in predictions}
    ks = sorted(set(int(k) for k in ks) | ({GROUP_K} if groups is not None else set()))
    gt_count = Counter()
    hits = {k: Counter() for k in ks}
    for scene in ground_truth:
        pred = by_id.get(scene.id, ScenePrediction(scene.id, []))
        # rank position of each (pair, labels) key; first occurrence wins
        rank = {}
        for i, t in enumerate(pred.triplets):
            rank.setdefault((t.subject, t.object, t.subject_label, t.predicate, t.object_label), i)
        labels = scene.labels
        for e in scene.edges:
            gt_count[e.label] += 1
            pos = rank.get((e.subject, e.object, labels[e.subject], e.label, labels[e.object]))
            if pos is None:
                continue
            for k in ks:
                if pos < k:
                    hits[k][e.label] += 1
    total = sum(gt_count.values())
    evaluated = [p for p in range(1, num_predicates + 1) if gt_count[p] > 0]
    excluded = [p for p in range(1, num_predicates + 1) if gt_count[p] == 0]
    recall, mean_recall, per_pred = {}, {}, {}
    for k in ks:
        recall[k] = sum(hits[k].values()) / total if total else 0.0
        per_pred[k] = {p: hits[k][p] / gt_count[p] for p in evaluated}
        mean_recall[k] = float(np.mean(list(per_pred[k].values()))) if evaluated else 0.0
    group_recall = {}
    if groups is not None:
        for name in (HEAD, BODY, TAIL):
            members = [p for p in groups.members(name) if p in per_pred[GROUP_K]]
            group_recall[name] = float(np.mean([per_pred[GROUP_K][p] for p in members])) if members else None
    return EvalReport(recall, mean_recall, group_recall, per_pred, excluded, total, config or {}, seed)


# ----------------------------------------------------------------------
# frequency prior
# ----------------------------------------------------------------------

@dataclass
class FrequencyBaseline:
    """Most frequent training predicate for each (subject class, object class).

    Uses ground-truth entity labels, so it is a predicate-classification
    baseline. Unseen class pairs fall back to the globally most frequent
    predicate. Background is never predicted.
    """

    table: dict[tuple[int, int], tuple[int, float]]
    fallback: tuple[int, float]

    @classmethod
    def fit(cls, train: Sequence[SceneSample]) -> "FrequencyBaseline":
        counts: dict[tuple[int, int], Counter] = defaultdict(Counter)
        overall = Counter()
        for s in train:
            labels = s.labels
            for e in s.edges:
                counts[(labels[e.subject], labels[e.object])][e.label] += 1
                overall[e.label] += 1
        table = {}
        for key, c in counts.items():
            best = min(c, key=lambda p: (-c[p], p))
            table[key] = (best, c[best] / sum(c.values()))
        if overall:
            top = min(overall, key=lambda p: (-overall[p], p))
            fallback = (top, overall[top] / sum(overall.values()))
        else:
            fallback = (1, 0.0)
        return cls(table, fallback)

    def predict(self, scenes: Sequence[SceneSample]) -> list[ScenePrediction]:
        out = []
        for s in scenes:
            labels = s.labels
            trips = []
            for a, b in ordered_pairs(len(s.entities)):
                p, score = self.table.get((labels[a], labels[b]), self.fallback)
                trips.append(Triplet(a, b, labels[a], p, labels[b], score))
            order = sorted(range(len(trips)), key=lambda i: -trips[i].score)
            out.append(ScenePrediction(s.id, [trips[i] for i in order]))
        return out
