"""Command-line entry point: ``nbp gen|infer|train|eval|ablate``.

Every command reads one config file (TOML, or JSON as written back by a
previous run), applies ``--set section.key=value`` overrides, and writes its
results, the resolved config and a ``manifest.json`` index of SHA-256 hashes
under ``--out``. Exit codes: 0 ok, 1 I/O, 2 validation, 3 capacity,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from threadpoolctl import threadpool_limits

from . import bp as bp_mod
from . import exact as exact_mod
from . import factor_graph as fg
from .errors import NbpError, ValidationError
from .evaluation import DEFAULT_KS, FrequencyBaseline, evaluate
from .neural import load_checkpoint, save_checkpoint
from .synthetic import DatasetSpec, SamplerConfig, assign_groups, generate, read_dataset, write_dataset
from .training import TrainConfig, build_model, model_config, predict, run_ablation, train

log = logging.getLogger("nbp")

EXIT_OK, EXIT_IO, EXIT_VALIDATION = 0, 1, 2
METHODS = ("exact", "sum_product", "max_product", "mean_field")


def _field_names(cls, drop=("seed",)) -> set[str]:
    return {f.name for f in fields(cls)} - set(drop)


# section -> allowed keys; seeds come only from the top-level ``seed``
SECTIONS = {
    "dataset": _field_names(DatasetSpec),
    "groups": {"head_min", "tail_max"},
    "sampler": _field_names(SamplerConfig, drop=()),
    "train": _field_names(TrainConfig, drop=("seed", "sampler")),
    "eval": {"ks"},
    "bp": {"schedule", "damping", "max_iterations", "tolerance"},
    "mean_field": {"max_iterations", "tolerance"},
    "exact": {"max_states"},
    "paths": {"dataset", "checkpoint"},
}
TOP_LEVEL = {"seed", "deterministic"}
GROUP_DEFAULTS = {"head_min": 0.05, "tail_max": 0.02}


# ----------------------------------------------------------------------
# config handling
# ----------------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    try:
        return json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot parse config {p}: {exc}") from None


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(cfg: dict, items) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        parts = key.strip().split(".")
        if len(parts) == 1:
            out[parts[0]] = _parse_value(raw)
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = _parse_value(raw)
        else:
            raise ValidationError(f"--set key {key!r} must be 'key' or 'section.key'")
    return out


def validate_keys(cfg: dict) -> None:
    for key, value in cfg.items():
        if key in TOP_LEVEL:
            continue
        if key not in SECTIONS:
            raise ValidationError(f"unknown config key {key!r}; expected one of {sorted(TOP_LEVEL | set(SECTIONS))}")
        if not isinstance(value, dict):
            raise ValidationError(f"config section [{key}] must be a table")
        unknown = set(value) - SECTIONS[key]
        if unknown:
            hint = " (use the top-level seed)" if "seed" in unknown else ""
            raise ValidationError(f"unknown key(s) {sorted(unknown)} in [{key}]{hint}")


def resolve(cfg: dict, seed: int | None) -> dict:
    """Fill defaults so the echoed config fully determines the run."""
    validate_keys(cfg)
    out = {"seed": int(cfg.get("seed", 0) if seed is None else seed),
           "deterministic": bool(cfg.get("deterministic", True))}
    spec = DatasetSpec(**{**cfg.get("dataset", {}), "seed": out["seed"]})
    out["dataset"] = {k: v for k, v in asdict(spec).items() if k != "seed"}
    out["groups"] = {**GROUP_DEFAULTS, **cfg.get("groups", {})}
    out["sampler"] = asdict(SamplerConfig(**cfg.get("sampler", {})))
    tc = TrainConfig(**{**cfg.get("train", {}), "seed": out["seed"], "sampler": out["sampler"]})
    out["train"] = {k: v for k, v in asdict(tc).items() if k not in ("seed", "sampler")}
    out["eval"] = {"ks": [int(k) for k in cfg.get("eval", {}).get("ks", DEFAULT_KS)]}
    bp_defaults = asdict(bp_mod.BpConfig())
    out["bp"] = {k: bp_defaults[k] for k in SECTIONS["bp"]} | cfg.get("bp", {})
    out["mean_field"] = {"max_iterations": 500, "tolerance": 1e-10} | cfg.get("mean_field", {})
    out["exact"] = {"max_states": exact_mod.MAX_STATES} | cfg.get("exact", {})
    out["paths"] = dict(cfg.get("paths", {}))
    return out


def dataset_spec(rc: dict) -> DatasetSpec:
    return DatasetSpec(**rc["dataset"], seed=rc["seed"])


def train_config(rc: dict) -> TrainConfig:
    return TrainConfig(**rc["train"], seed=rc["seed"], sampler=SamplerConfig(**rc["sampler"]))


# ----------------------------------------------------------------------
# outputs
# ----------------------------------------------------------------------

def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, rc: dict, threads: int, files: list[str]) -> dict:
    _dump_json(out / "resolved_config.json", rc)
    names = sorted(set(files) | {"resolved_config.json"})
    manifest = {
        "command": command,
        "seed": rc["seed"],
        "threads": threads,
        "deterministic": threads == 1,
        "outputs": {n: _sha256(out / n) for n in names},
    }
    _dump_json(out / "manifest.json", manifest)
    return manifest


def _load_dataset(rc: dict):
    path = rc["paths"].get("dataset")
    if path:
        ds, groups = read_dataset(path)
        return ds, groups
    ds = generate(dataset_spec(rc))
    return ds, assign_groups(ds.train, ds.spec.predicate_classes, **rc["groups"])


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen(rc: dict, out: Path, args) -> list[str]:
    ds = generate(dataset_spec(rc))
    manifest = write_dataset(ds, out, **rc["groups"])
    counts = {k: len(v) for k, v in ds.splits().items()}
    groups = manifest["groups"]["groups"]
    print(f"scenes: {counts}")
    for name in ("head", "body", "tail"):
        print(f"{name}: {[int(p) for p, g in groups.items() if g == name]}")
    return [*manifest["files"].values(), "dataset_manifest.json"]


def cmd_infer(rc: dict, out: Path, args) -> list[str]:
    if not args.graph:
        raise ValidationError("infer needs --graph")
    g = fg.load(args.graph)
    method = args.method
    doc = {"method": method, "graph": str(args.graph)}
    if method == "exact":
        res = exact_mod.enumerate_all(g, max_states=int(rc["exact"]["max_states"]))
        doc.update(res.to_dict())
        doc["decoded"] = list(res.map_assignment)
    elif method in ("sum_product", "max_product"):
        cfg = bp_mod.BpConfig(semiring=method, **rc["bp"])
        res = bp_mod.run_bp(g, cfg)
        doc.update(res.to_dict())
        doc["decoded"] = list(bp_mod.map_decode(res))
        doc["convergence"] = {"converged": res.converged, "iterations_used": res.iterations_used,
                              "final_delta": res.final_delta}
    else:
        res = bp_mod.mean_field(g, **rc["mean_field"])
        doc.update(res.to_dict())
        doc["decoded"] = [int(np.argmax(q)) for q in res.q]
        doc["objective"] = exact_mod.variational_objective(g, res.q)
    _dump_json(out / "result.json", doc)
    print(json.dumps({"method": method, "decoded": doc["decoded"]}))
    return ["result.json"]


def _write_curve(path: Path, result) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "eval_loss"])
        for epoch, loss, ev in result.curve_rows():
            w.writerow([epoch, repr(loss), "" if ev is None else repr(ev)])


def cmd_train(rc: dict, out: Path, args) -> list[str]:
    ds, _ = _load_dataset(rc)
    cfg = train_config(rc)
    result = train(ds, build_model(cfg, ds.spec), cfg)
    save_checkpoint(result.model, out / "checkpoint.json")
    _write_curve(out / "loss_curve.csv", result)
    _dump_json(out / "train_summary.json", {"steps": result.steps, "stream_hash": result.stream_hash,
                                            "final_loss": result.loss_curve[-1], "config": cfg.to_dict()})
    print(f"trained {result.steps} steps; final loss {result.loss_curve[-1]:.4f}")
    return ["checkpoint.json", "loss_curve.csv", "train_summary.json"]


def cmd_eval(rc: dict, out: Path, args) -> list[str]:
    path = rc["paths"].get("checkpoint")
    if not path:
        raise ValidationError("eval needs paths.checkpoint")
    ds, groups = _load_dataset(rc)
    cfg = train_config(rc)
    model = load_checkpoint(path, expected=model_config(cfg, ds.spec))
    ks = rc["eval"]["ks"]
    n_pred = ds.spec.predicate_classes
    report = evaluate(predict(ds.test, model, cfg.task, ds.spec), ds.test, n_pred, ks, groups, cfg.to_dict(), cfg.seed)
    base = FrequencyBaseline.fit(ds.train)
    baseline = evaluate(base.predict(ds.test), ds.test, n_pred, ks, groups)
    _dump_json(out / "report.json", {"model": report.to_dict(), "frequency_baseline": baseline.to_dict()})
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "metric", "k", "value"])
        for name, rep in (("nbp", report), ("frequency_baseline", baseline)):
            for k in sorted(rep.recall_at_k):
                w.writerow([name, "R", k, repr(rep.recall_at_k[k])])
                w.writerow([name, "mR", k, repr(rep.mean_recall_at_k[k])])
            for g, v in rep.group_recall.items():
                w.writerow([name, g, 100, "" if v is None else repr(v)])
    for name, rep in (("nbp", report), ("frequency", baseline)):
        print(f"{name}: " + " ".join(f"mR@{k}={rep.mean_recall_at_k[k]:.4f}" for k in sorted(rep.mean_recall_at_k)))
    return ["report.json", "report.csv"]


def cmd_ablate(rc: dict, out: Path, args) -> list[str]:
    ds, groups = _load_dataset(rc)
    table = run_ablation(ds, train_config(rc), groups, rc["eval"]["ks"])
    table.write(out)
    for row in table.rows:
        print(row["arm"], " ".join(f"{c}={row[c]:.4f}" for c in table.columns if c.startswith("mR@")))
    for name, ok in table.comparisons().items():
        print(f"{name}: {'yes' if ok else 'no'}")
    if not table.complete:
        raise NbpError(f"ablation incomplete: {table.error}")
    return ["ablation.json", "ablation.csv"]


COMMANDS = {"gen": cmd_gen, "infer": cmd_infer, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML (or JSON) run config")
    p.add_argument("--seed", type=int, help="global seed; overrides the config")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--graph", help="factor-graph JSON for infer")
    p.add_argument("--method", choices=METHODS, default="sum_product", help="inference method for infer")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        rc = resolve(apply_overrides(load_config(args.config), args.set), args.seed)
        if rc["deterministic"] and args.threads != 1:
            raise ValidationError("deterministic runs need --threads 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(args.threads):
            files = COMMANDS[args.command](rc, out, args)
        write_manifest(out, args.command, rc, args.threads, files)
    except NbpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError, IndexError) as exc:  # e.g. wrongly typed config values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
