"""Training loop, optimizers and the aggregator / higher-order ablation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DivergenceError, ValidationError
from .evaluation import DEFAULT_KS, EvalReport, ScenePrediction, evaluate, predictions_from_logits
from .neural import NbpConfig, NbpGraph, NbpStack, init_params, nbp_forward
from .synthetic import (
    PAIR_FEATURE_WIDTH,
    TASKS,
    DatasetSpec,
    GroupAssignment,
    SamplerConfig,
    SceneSample,
    SceneTargets,
    StreamItem,
    SyntheticDataset,
    input_width,
    resample,
    scene_to_factor_graph,
    stream_hash,
)

DEFAULT_LAYERS = {"predcls": 2, "sgcls": 1, "sgdet_analogue": 3}
SGD_LR_PER_SAMPLE = 0.008
ADAM_DEFAULT_LR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float | None = None  # None: 0.008 * batch_size for sgd, 1e-4 for adam
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    task: str = "predcls"
    aggregator: str = "mean"
    higher_order: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hidden_width: int = 64
    edge_width: int = 16
    num_layers: int | None = None
    momentum: float = 0.0
    grad_clip: float | None = None
    lr_schedule: str = "constant"  # or "linear": decay to zero over the run
    weight_decay: float = 0.0        # decoupled, applied to weight matrices only

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            object.__setattr__(self, "sampler", SamplerConfig(**self.sampler))
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValidationError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.aggregator not in ("mean", "max"):
            raise ValidationError(f"aggregator must be mean or max, got {self.aggregator!r}")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValidationError(f"lr_schedule must be constant or linear, got {self.lr_schedule!r}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return SGD_LR_PER_SAMPLE * self.batch_size if self.optimizer == "sgd" else ADAM_DEFAULT_LR

    @property
    def layers(self) -> int:
        return DEFAULT_LAYERS[self.task] if self.num_layers is None else self.num_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved_learning_rate"] = self.lr
        d["resolved_num_layers"] = self.layers
        return d


# Settings used for the end-to-end check and the ablation. Plain SGD at the
# default rate underfits this data within a few minutes of CPU time.
REFERENCE_CONFIG = TrainConfig(optimizer="adam", learning_rate=3e-3, lr_schedule="linear", epochs=20, seed=0)


def model_config(cfg: TrainConfig, spec: DatasetSpec) -> NbpConfig:
    return NbpConfig(
        input_width=input_width(spec, cfg.task),
        instance_classes=spec.instance_classes,
        predicate_classes=spec.predicate_classes + 1,
        hidden_width=cfg.hidden_width,
        edge_width=cfg.edge_width,
        head_hidden=cfg.hidden_width,
        num_layers=cfg.layers,
        aggregator=cfg.aggregator,
        higher_order=cfg.higher_order,
        pair_input_width=PAIR_FEATURE_WIDTH,
    )


def build_model(cfg: TrainConfig, spec: DatasetSpec) -> NbpStack:
    return init_params(model_config(cfg, spec), cfg.seed)


# ----------------------------------------------------------------------
# prepared scenes
# ----------------------------------------------------------------------

@dataclass
class PreparedScene:
    sample: SceneSample
    graph: NbpGraph
    targets: SceneTargets


def prepare(scenes: Sequence[SceneSample], task: str, spec: DatasetSpec) -> list[PreparedScene]:
    """Neural view of each scene; scenes with fewer than two entities are dropped."""
    out = []
    for s in scenes:
        built = scene_to_factor_graph(s, task, spec.instance_classes, spec.detector_noise, spec.seed,
                                      spec.relation_radius)
        if built is None:
            continue
        g, targets = built
        out.append(PreparedScene(s, NbpGraph.from_factor_graph(g), targets))
    return out


def batch_loss(model: NbpStack, items: Sequence[tuple[PreparedScene, tuple[int, ...]]]) -> T.Tensor:
    """Mean over scenes of (instance CE where supervised + mean predicate CE over candidate pairs).

    Each item carries the edge positions dropped by the sampler; dropped
    instances are masked out unless the edge allows background supervision.
    """
    graph = NbpGraph.batch([p.graph for p, _ in items])
    out = nbp_forward(graph, model)
    inst_t, inst_w, pred_t, pred_w = [], [], [], []
    for prep, dropped in items:
        tg = prep.targets
        n = len(tg.instance_labels)
        inst_t.append(tg.instance_labels)
        inst_w.append(np.full(n, 1.0 / n if tg.supervise_instances else 0.0))
        labels = tg.predicate_labels.copy()
        mask = np.ones(len(labels))
        for j in dropped:
            k = tg.edge_positions[j]
            if prep.sample.edges[j].negative_allowed:
                labels[k] = 0
            else:
                mask[k] = 0.0
        pred_t.append(labels)
        pred_w.append(mask / mask.sum() if mask.sum() > 0 else mask)
    loss = T.cross_entropy_rows(out.predicate_logits, np.concatenate(pred_t), np.concatenate(pred_w))
    inst_w = np.concatenate(inst_w)
    if inst_w.sum() > 0:
        loss = T.add(loss, T.cross_entropy_rows(out.variable_logits, np.concatenate(inst_t), inst_w))
    return loss


# ----------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------

def _update(p: T.Tensor, delta: np.ndarray) -> None:
    p.data.flags.writeable = True
    p.data[...] -= delta
    p.data.flags.writeable = False


class Sgd:
    def __init__(self, params: Sequence[T.Tensor], lr: float, momentum: float = 0.0):
        self.params, self.lr, self.momentum = list(params), lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                _update(p, self.lr * v)
            else:
                _update(p, self.lr * p.grad)


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = list(params), lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            _update(p, self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr)
    return Sgd(params, cfg.lr, cfg.momentum)


def _clip(params: Sequence[T.Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: NbpStack
    loss_curve: list[float]
    eval_curve: list[float | None]
    stream_hash: str
    steps: int
    config: TrainConfig

    def curve_rows(self) -> list[tuple]:
        return [(i + 1, loss, ev) for i, (loss, ev) in enumerate(zip(self.loss_curve, self.eval_curve))]


def epoch_stream(train: Sequence[SceneSample], cfg: TrainConfig, epoch: int) -> list[StreamItem]:
    """Resampled (or identity) stream for one epoch, then a seeded shuffle."""
    seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])
    stream = resample(train, cfg.sampler, seed)
    order = np.random.default_rng([cfg.seed, 8, epoch]).permutation(len(stream))
    return [stream[i] for i in order]


def mean_loss(model: NbpStack, prepared: Sequence[PreparedScene], batch_size: int = 16) -> float:
    if not prepared:
        return float("nan")
    total = 0.0
    for i in range(0, len(prepared), batch_size):
        chunk = prepared[i:i + batch_size]
        total += batch_loss(model, [(p, ()) for p in chunk]).item() * len(chunk)
    return total / len(prepared)


def train(dataset: SyntheticDataset, model: NbpStack, cfg: TrainConfig, max_steps: int | None = None,
          log_every: int | None = None) -> TrainResult:
    """Minibatch training over resampled epochs; deterministic for a fixed seed."""
    spec = dataset.spec
    expected = model_config(cfg, spec)
    if model.config != expected:
        raise ConfigurationError(f"model widths {model.config} do not fit the dataset/task {expected}")
    train_ids = {s.id for s in dataset.train}
    held_out = {s.id for s in dataset.eval} | {s.id for s in dataset.test}
    if train_ids & held_out:
        raise ValidationError("train split overlaps eval/test")
    prepared = prepare(dataset.train, cfg.task, spec)
    by_index = {i: p for i, p in enumerate(prepared)}
    index_of = {p.sample.id: i for i, p in enumerate(prepared)}
    eval_prepared = prepare(dataset.eval, cfg.task, spec)
    params = model.parameters()
    decayed = [w for _, mlp in model.named_mlps() for w in mlp.weights]
    opt = make_optimizer(cfg, params)
    curve, eval_curve, hashes = [], [], []
    steps = 0
    train_scenes = [p.sample for p in prepared]
    streams = [epoch_stream(train_scenes, cfg, epoch) for epoch in range(cfg.epochs)]
    total_steps = sum(-(-len(st) // cfg.batch_size) for st in streams)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    for epoch, stream in enumerate(streams):
        assert not ({item.scene_id for item in stream} & held_out)
        hashes.append(stream_hash(stream))
        losses = []
        for start in range(0, len(stream), cfg.batch_size):
            chunk = stream[start:start + cfg.batch_size]
            items = [(by_index[index_of[it.scene_id]], it.dropped) for it in chunk]
            model.zero_grad()
            loss = batch_loss(model, items)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch + 1}, step {steps + 1}")
            loss.backward()
            if cfg.grad_clip is not None:
                _clip(params, cfg.grad_clip)
            if cfg.lr_schedule == "linear":
                opt.lr = cfg.lr * (1.0 - steps / total_steps)
            opt.step()
            if cfg.weight_decay:
                for w in decayed:
                    _update(w, opt.lr * cfg.weight_decay * w.data)
            losses.append(value)
            steps += 1
            if log_every and steps % log_every == 0:
                print(f"step {steps}: loss {value:.4f}")
            if max_steps is not None and steps >= max_steps:
                break
        curve.append(float(np.mean(losses)) if losses else float("nan"))
        eval_curve.append(mean_loss(model, eval_prepared) if eval_prepared else None)
        if max_steps is not None and steps >= max_steps:
            break
    combined = stream_hash([]) if not hashes else _combine(hashes)
    return TrainResult(model, curve, eval_curve, combined, steps, cfg)


def _combine(hashes: Sequence[str]) -> str:
    return hashlib.sha256("".join(hashes).encode()).hexdigest()


def train_on_scene(scene: PreparedScene, model: NbpStack, optimizer, steps: int) -> list[float]:
    """Repeated full steps on one scene (overfit check)."""
    losses = []
    for _ in range(steps):
        model.zero_grad()
        loss = batch_loss(model, [(scene, ())])
        losses.append(loss.item())
        loss.backward()
        optimizer.step()
    model.zero_grad()
    losses.append(batch_loss(model, [(scene, ())]).item())
    return losses


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------

def predict(scenes: Sequence[SceneSample], model: NbpStack, task: str, spec: DatasetSpec,
            batch_size: int = 16) -> list[ScenePrediction]:
    prepared = prepare(scenes, task, spec)
    out = []
    for i in range(0, len(prepared), batch_size):
        chunk = prepared[i:i + batch_size]
        graph = NbpGraph.batch([p.graph for p in chunk])
        fwd = nbp_forward(graph, model)
        vl, pl = fwd.variable_logits.data, fwd.predicate_logits.data
        for k, p in enumerate(chunk):
            v0, v1 = graph.variable_offsets[k], graph.variable_offsets[k + 1]
            p0, p1 = graph.pair_offsets[k], graph.pair_offsets[k + 1]
            out.append(predictions_from_logits(p.sample, vl[v0:v1], pl[p0:p1], task == "predcls"))
    return out


def train_and_evaluate(dataset: SyntheticDataset, cfg: TrainConfig, groups: GroupAssignment | None,
                       ks: Sequence[int] = DEFAULT_KS) -> tuple[TrainResult, EvalReport]:
    model = build_model(cfg, dataset.spec)
    result = train(dataset, model, cfg)
    preds = predict(dataset.test, result.model, cfg.task, dataset.spec)
    report = evaluate(preds, dataset.test, dataset.spec.predicate_classes, ks, groups, cfg.to_dict(), cfg.seed)
    return result, report


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------

ABLATION_ARMS = (("mean", True), ("mean", False), ("max", True), ("max", False))


@dataclass
class AblationTable:
    rows: list[dict]
    ks: tuple[int, ...]
    complete: bool = True
    error: str | None = None

    @property
    def columns(self) -> list[str]:
        cols = ["arm", "aggregator", "higher_order"]
        cols += [f"mR@{k}" for k in self.ks] + [f"R@{k}" for k in self.ks]
        cols += ["head", "body", "tail", "final_loss", "stream_hash"]
        return cols

    def comparisons(self) -> dict:
        """Directional checks, reported and never enforced."""
        by = {(r["aggregator"], r["higher_order"]): r for r in self.rows}
        k = f"mR@{max(self.ks)}"
        out = {}
        for ho in (True, False):
            if ("mean", ho) in by and ("max", ho) in by:
                out[f"mean>=max (HO={ho})"] = by[("mean", ho)][k] >= by[("max", ho)][k]
        for agg in ("mean", "max"):
            if (agg, True) in by and (agg, False) in by:
                out[f"HO>=noHO ({agg})"] = by[(agg, True)][k] >= by[(agg, False)][k]
        return out

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows, "ks": list(self.ks), "complete": self.complete,
                "error": self.error, "comparisons": self.comparisons()}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_csv_value(r[c]) for c in self.columns])


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def run_ablation(dataset: SyntheticDataset, base: TrainConfig, groups: GroupAssignment | None,
                 ks: Sequence[int] = DEFAULT_KS) -> AblationTable:
    """Train the four {mean, max} x {HO, no HO} arms with identical seeds and data streams."""
    ks = tuple(sorted(ks))
    table = AblationTable([], ks)
    for agg, ho in ABLATION_ARMS:
        cfg = replace(base, aggregator=agg, higher_order=ho)
        name = f"{agg}{'+HO' if ho else ''}"
        try:
            result, report = train_and_evaluate(dataset, cfg, groups, ks)
        except Exception as exc:  # keep what finished
            table.complete = False
            table.error = f"{name}: {type(exc).__name__}: {exc}"
            break
        row = {"arm": name, "aggregator": agg, "higher_order": ho}
        for k in ks:
            row[f"mR@{k}"] = report.mean_recall_at_k[k]
            row[f"R@{k}"] = report.recall_at_k[k]
        for g in ("head", "body", "tail"):
            row[g] = report.group_recall.get(g)
        row["final_loss"] = result.loss_curve[-1]
        row["stream_hash"] = result.stream_hash
        table.rows.append(row)
    return table
