import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nbp import cli, exact, generators
from nbp import factor_graph as fg
from nbp.errors import ValidationError
from nbp.factor_graph import FactorNode, VariableNode, build_graph

TINY = str(Path(__file__).parent.parent / "configs" / "tiny.toml")


def _hashes(root: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.iterdir()) if p.is_file()}


@pytest.fixture
def fig1(tmp_path):
    path = tmp_path / "fig1.json"
    fg.save(generators.fig1_graph(), path)
    return path


class TestConfig:
    def test_defaults_resolve(self):
        rc = cli.resolve({}, None)
        assert rc["seed"] == 0 and rc["deterministic"] is True
        assert rc["dataset"]["predicate_classes"] == 12
        assert rc["train"]["optimizer"] == "sgd" and rc["sampler"]["repeat_threshold"] == 0.07
        assert rc["groups"] == {"head_min": 0.05, "tail_max": 0.02}

    def test_seed_flag_wins(self):
        rc = cli.resolve({"seed": 4}, 9)
        assert rc["seed"] == 9 and cli.dataset_spec(rc).seed == 9 and cli.train_config(rc).seed == 9

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError, match="unknown config key"):
            cli.resolve({"trian": {}}, None)
        with pytest.raises(ValidationError, match="epoch"):
            cli.resolve({"train": {"epoch": 3}}, None)
        with pytest.raises(ValidationError, match="top-level seed"):
            cli.resolve({"train": {"seed": 3}}, None)

    def test_overrides_parse_toml_values(self):
        cfg = cli.apply_overrides({"train": {"epochs": 2}}, ["train.epochs=5", "train.optimizer=adam",
                                                            "seed=3", "eval.ks=[5, 10]", "train.higher_order=false"])
        assert cfg == {"train": {"epochs": 5, "optimizer": "adam", "higher_order": False}, "seed": 3,
                       "eval": {"ks": [5, 10]}}
        with pytest.raises(ValidationError):
            cli.apply_overrides({}, ["noequals"])
        with pytest.raises(ValidationError):
            cli.apply_overrides({}, ["a.b.c=1"])

    def test_resolved_config_round_trips(self, tmp_path):
        rc = cli.resolve(cli.load_config(TINY), None)
        path = tmp_path / "rc.json"
        path.write_text(json.dumps(rc))
        assert cli.resolve(cli.load_config(path), None) == rc

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[train\nepochs = 1")
        with pytest.raises(ValidationError, match="cannot parse"):
            cli.load_config(p)


class TestGen:
    def test_writes_splits_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert cli.main(["gen", "--config", TINY, "--out", str(out)]) == 0
        names = set(_hashes(out))
        assert {"train.jsonl", "eval.jsonl", "test.jsonl", "dataset_manifest.json", "manifest.json",
                "resolved_config.json"} <= names
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["deterministic"] and manifest["command"] == "gen"
        assert manifest["outputs"]["train.jsonl"] == _hashes(out)["train.jsonl"]
        assert "head:" in capsys.readouterr().out

    def test_same_config_same_hashes(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["gen", "--config", TINY, "--out", str(tmp_path / d)]) == 0
        assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
        assert cli.main(["gen", "--config", TINY, "--seed", "1", "--out", str(tmp_path / "c")]) == 0
        assert _hashes(tmp_path / "a")["train.jsonl"] != _hashes(tmp_path / "c")["train.jsonl"]

    def test_negative_noise_exit_2(self, tmp_path, capsys):
        assert cli.main(["gen", "--set", "dataset.noise=-0.5", "--out", str(tmp_path)]) == 2
        assert "noise" in capsys.readouterr().err

    def test_unknown_key_exit_2(self, tmp_path):
        assert cli.main(["gen", "--set", "dataset.nosie=0.5", "--out", str(tmp_path)]) == 2

    def test_unwritable_out_exit_1(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["gen", "--config", TINY, "--out", str(blocker / "sub")]) == 1

    def test_missing_config_exit_1(self, tmp_path):
        assert cli.main(["gen", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 1

    def test_threads_need_nondeterministic_flag(self, tmp_path):
        assert cli.main(["gen", "--config", TINY, "--threads", "2", "--out", str(tmp_path / "a")]) == 2
        assert cli.main(["gen", "--config", TINY, "--threads", "2", "--set", "deterministic=false",
                         "--out", str(tmp_path / "b")]) == 0
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["deterministic"] is False


class TestInfer:
    def _run(self, tmp_path, graph, method):
        out = tmp_path / method
        assert cli.main(["infer", "--graph", str(graph), "--method", method, "--out", str(out)]) == 0
        return json.loads((out / "result.json").read_text())

    def test_exact_vs_sum_product_on_tree(self, tmp_path, fig1):
        ex = self._run(tmp_path, fig1, "exact")
        sp = self._run(tmp_path, fig1, "sum_product")
        for a, b in zip(ex["variable_marginals"], sp["variable_beliefs"]):
            np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)
        assert sp["convergence"]["converged"]
        assert -sp["bethe_free_energy"] == pytest.approx(ex["log_partition"], abs=1e-10)

    def test_max_product_matches_exact_map(self, tmp_path, fig1):
        ex = self._run(tmp_path, fig1, "exact")
        mp = self._run(tmp_path, fig1, "max_product")
        assert mp["decoded"] == ex["map_assignment"] == ex["decoded"]

    def test_mean_field_reports_bound(self, tmp_path, fig1):
        mf = self._run(tmp_path, fig1, "mean_field")
        log_z = exact.enumerate_all(generators.fig1_graph()).log_partition
        assert mf["objective"] <= log_z + 1e-9
        assert len(mf["q"]) == 3 and len(mf["decoded"]) == 3

    def test_bp_settings_from_config(self, tmp_path, fig1):
        out = tmp_path / "o"
        assert cli.main(["infer", "--graph", str(fig1), "--set", "bp.damping=0.5", "--out", str(out)]) == 0
        assert json.loads((out / "result.json").read_text())["config"]["damping"] == 0.5

    def test_missing_graph_exit_1(self, tmp_path):
        assert cli.main(["infer", "--graph", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1

    def test_no_graph_exit_2(self, tmp_path):
        assert cli.main(["infer", "--out", str(tmp_path)]) == 2

    def test_capacity_guard_exit_3(self, tmp_path, capsys):
        big = tmp_path / "big.json"
        vs = [VariableNode(i, 2) for i in range(12)]
        fs = [FactorNode.from_table(0, tuple(range(12)), np.ones([2] * 12))]
        fg.save(build_graph(vs, fs), big)
        assert cli.main(["infer", "--graph", str(big), "--method", "sum_product", "--out", str(tmp_path / "o")]) == 3
        assert "factor_arity" in capsys.readouterr().err
        assert cli.main(["infer", "--graph", str(big), "--method", "exact", "--set", "exact.max_states=100",
                         "--out", str(tmp_path / "o")]) == 3
        assert "state_space" in capsys.readouterr().err

    def test_malformed_graph_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"variables": [{"id": 0, "cardinality": 2}],
                                   "factors": [{"id": 0, "scope": [0, 0], "table": [1, 1, 1, 1]}]}))
        assert cli.main(["infer", "--graph", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_input_not_modified(self, tmp_path, fig1):
        before = fig1.read_bytes()
        self._run(tmp_path, fig1, "sum_product")
        assert fig1.read_bytes() == before


class TestTrainEvalAblate:
    def test_round_trip(self, tmp_path, capsys):
        data, ck, ev = tmp_path / "data", tmp_path / "train", tmp_path / "eval"
        assert cli.main(["gen", "--config", TINY, "--out", str(data)]) == 0
        assert cli.main(["train", "--config", TINY, "--out", str(ck), "--set", f"paths.dataset='{data}'"]) == 0
        curve = (ck / "loss_curve.csv").read_text().splitlines()
        assert curve[0] == "epoch,loss,eval_loss" and len(curve) == 4
        assert cli.main(["eval", "--config", TINY, "--out", str(ev), "--set", f"paths.dataset='{data}'",
                         "--set", f"paths.checkpoint='{ck / 'checkpoint.json'}'"]) == 0
        report = json.loads((ev / "report.json").read_text())
        for system in ("model", "frequency_baseline"):
            values = list(report[system]["mean_recall_at_k"].values())
            assert all(0.0 <= v <= 1.0 for v in values)
        assert (ev / "report.csv").read_text().startswith("system,metric,k,value")
        assert "frequency:" in capsys.readouterr().out

    def test_eval_wrong_widths_exit_4(self, tmp_path):
        ck = tmp_path / "train"
        assert cli.main(["train", "--config", TINY, "--out", str(ck)]) == 0
        code = cli.main(["eval", "--config", TINY, "--out", str(tmp_path / "e"), "--set", "train.hidden_width=12",
                         "--set", f"paths.checkpoint='{ck / 'checkpoint.json'}'"])
        assert code == 4

    def test_eval_needs_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--config", TINY, "--out", str(tmp_path)]) == 2

    def test_ablate_four_rows(self, tmp_path):
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", TINY, "--set", "train.epochs=1", "--out", str(out)]) == 0
        doc = json.loads((out / "ablation.json").read_text())
        assert len(doc["rows"]) == 4 and doc["complete"]
        assert len((out / "ablation.csv").read_text().splitlines()) == 5
        assert set(json.loads((out / "manifest.json").read_text())["outputs"]) >= {"ablation.json", "ablation.csv"}
