import json
from pathlib import Path

import numpy as np
import pytest

from treedsb.cli import main
from treedsb.config import config_hash, parse_text, build_experiment, serialize
from treedsb.engine import init_engine, run_cycles
from treedsb.errors import ConstraintViolation, ParseError, SchemaError, UnknownKey
from treedsb.io import load_checkpoint, read_samples_csv, save_checkpoint, write_samples_csv
from treedsb.measures import GaussianMeasure, SampleSet, sample_gaussian

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL_STAR = """
tree.kind = star
leaf.1.kind = circle
leaf.2.kind = moons
leaf.3.kind = swiss_roll
"""

TINY_RUN = """
experiment.seed = 3
experiment.cycles = 1
tree.kind = star
leaf.1.kind = circle
leaf.1.count = 300
leaf.2.kind = moons
leaf.2.count = 300
leaf.3.kind = gaussian
leaf.3.count = 300
schedule.steps = 6
train.iters_per_ipf = 4
train.refresh_every = 2
train.batch = 16
train.n_traj = 32
train.dtype = float64
eval.samples = 20
"""


def build(text, env=None):
    return build_experiment(parse_text(text), env or {})


class TestParse:
    def test_minimal_star_defaults(self):
        cfg = build(MINIMAL_STAR)
        assert cfg.tree.star_center == 0 and cfg.tree.leaves == (1, 2, 3)
        assert cfg.root_mode == "leaf" and cfg.root_node == 3
        assert cfg.epsilon == 0.1 and cfg.schedule_steps == 50 and cfg.gamma0 == 1e-5
        assert cfg.cycles == 10 and cfg.train.lr == 1e-4 and cfg.train.batch == 512
        assert all(w == pytest.approx(1 / 3) for _, _, w in cfg.tree.edges)

    def test_internal_root_default_is_center(self):
        assert build(MINIMAL_STAR + "root.mode = internal\n").root_node == 0

    def test_unknown_key(self):
        with pytest.raises(UnknownKey) as info:
            build(MINIMAL_STAR + "trian.lr = 0.1\n")
        assert info.value.key == "trian.lr" and info.value.line == 6

    def test_parse_error_position(self):
        with pytest.raises(ParseError) as info:
            parse_text("tree.kind = star\ntrain.lr = fast\n")
        assert info.value.line == 2 and info.value.column == 12

    def test_missing_equals(self):
        with pytest.raises(ParseError) as info:
            parse_text("tree.kind star\n")
        assert info.value.line == 1

    def test_repeated_key(self):
        with pytest.raises(ParseError):
            parse_text("train.lr = 1\ntrain.lr = 2\n")

    @pytest.mark.parametrize(
        "extra",
        [
            "experiment.epsilon = -0.1\n",
            "root.node = 0\n",
            "train.dtype = float16\n",
            "tree.nodes = 4\n",
        ],
    )
    def test_constraints(self, extra):
        with pytest.raises(ConstraintViolation):
            build(MINIMAL_STAR + extra)

    def test_star_needs_contiguous_leaves(self):
        with pytest.raises(ConstraintViolation):
            build("tree.kind = star\nleaf.1.kind = circle\nleaf.4.kind = moons\n")

    def test_edge_tree(self):
        text = (CONFIGS / "oracle_tree5.txt").read_text()
        raw = parse_text(text)
        assert len(raw.edges) == 4 and raw.get("grid.size") == 10

    def test_comments(self):
        cfg = build("# header\n" + MINIMAL_STAR + "train.lr = 0.01  # faster\n")
        assert cfg.train.lr == 0.01

    def test_seed_override(self):
        assert build(MINIMAL_STAR, {"TREEDSB_SEED": "42"}).seed == 42
        with pytest.raises(ConstraintViolation):
            build(MINIMAL_STAR, {"TREEDSB_SEED": "x"})

    @pytest.mark.parametrize("name", ["gaussian_d2.txt", "toys2d.txt"])
    def test_round_trip(self, name):
        cfg = build((CONFIGS / name).read_text())
        again = build(serialize(cfg))
        assert serialize(again) == serialize(cfg)
        assert config_hash(again) == config_hash(cfg)


class TestIo:
    def test_csv_round_trip(self, tmp_path):
        s = sample_gaussian(GaussianMeasure([0.0, 1.0, 2.0], np.eye(3)), 50, 0)
        write_samples_csv(tmp_path / "s.csv", s)
        np.testing.assert_array_equal(read_samples_csv(tmp_path / "s.csv").data, s.data)

    @pytest.mark.parametrize(
        "body, row",
        [("x0,x1\n1,2\n3\n", 3), ("x0,x1\n1,2\n3,abc\n", 3), ("a,b\n1,2\n", 1), ("x0\nnan\n", 2), ("", 1)],
    )
    def test_schema_errors(self, tmp_path, body, row):
        (tmp_path / "bad.csv").write_text(body)
        with pytest.raises(SchemaError) as info:
            read_samples_csv(tmp_path / "bad.csv")
        assert info.value.row == row

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = build(TINY_RUN)
        models, st = init_engine(cfg)
        run_cycles(models, st, 1)
        save_checkpoint(models, tmp_path)
        back = load_checkpoint(tmp_path)
        assert set(back) == set(models)
        for e in models:
            for k, v in models[e].params.weights.items():
                np.testing.assert_array_equal(back[e].params.weights[k], v)
            assert back[e].adam.step == models[e].adam.step


def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCli:
    def test_usage_error(self, capsys):
        code, _, err = run_cli(["run"], capsys)
        assert code == 1 and "UsageError" in err

    def test_unknown_key_exit_1(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(MINIMAL_STAR + "trian.lr = 0.1\n")
        code, out, err = run_cli(["run", "--config", cfg, "--out-dir", tmp_path / "o"], capsys)
        assert code == 1 and out == ""
        e = json.loads(err)
        assert e["error"] == "UnknownKey" and e["key"] == "trian.lr"

    def test_gen_data_stdout_and_file(self, tmp_path, capsys):
        code, out, _ = run_cli(["gen-data", "--config", CONFIGS / "circle_data.txt", "--count", 5], capsys)
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "x0,x1" and len(lines) == 6
        code, _, _ = run_cli(["gen-data", "--kind", "moons", "--count", 7, "--out", tmp_path / "m.csv"], capsys)
        assert code == 0 and read_samples_csv(tmp_path / "m.csv").count == 7

    def test_gen_data_bad_kind(self, capsys):
        code, _, err = run_cli(["gen-data", "--kind", "spiral"], capsys)
        assert code == 1 and json.loads(err)["exit_code"] == 1

    def test_run_outputs_and_rerun_identical(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY_RUN)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["run", "--config", cfg, "--out-dir", a], capsys)[0] == 0
        assert run_cli(["run", "--config", cfg, "--out-dir", b], capsys)[0] == 0
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        records = [json.loads(l) for l in (a / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 3
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["status"] == "complete" and len(manifest["records"]) == 3
        for leaf in (1, 2, 3):
            for node in (0, 1, 2, 3):
                assert (a / f"samples/node_{node}_from_{leaf}.csv").exists()
        assert len(load_checkpoint(a / "checkpoint")) == 6

    def test_run_cycles_flag(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY_RUN)
        code, out, _ = run_cli(["run", "--config", cfg, "--out-dir", tmp_path / "o", "--cycles", 2], capsys)
        assert code == 0 and json.loads(out)["iterations"] == 6

    def test_oracle_sinkhorn(self, tmp_path, capsys):
        code, out, _ = run_cli(["oracle", "sinkhorn", "--config", CONFIGS / "oracle_tree5.txt", "--out-dir", tmp_path], capsys)
        assert code == 0 and json.loads(out)["final_tv"] <= 1e-10
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["dense_max_abs_diff"] <= 1e-8
        assert report["pythagorean_residual"] <= 1e-8 and report["wp_residual"] <= 1e-8
        rows = (tmp_path / "node_0.csv").read_text().splitlines()
        assert rows[0] == "grid_index,x0,weight" and len(rows) == 11

    def test_oracle_barycenter_and_eval(self, tmp_path, capsys):
        code, out, _ = run_cli(["oracle", "barycenter", "--config", CONFIGS / "gaussian_d2.txt", "--out-dir", tmp_path], capsys)
        assert code == 0
        bary = json.loads(out)
        assert bary["residual"] <= 1e-10
        target = GaussianMeasure(np.array(bary["mean"]), np.array(bary["cov"]))
        write_samples_csv(tmp_path / "s.csv", sample_gaussian(target, 100_000, 0))
        code, out, _ = run_cli(
            ["eval", "uvp", "--samples", tmp_path / "s.csv", "--barycenter-config", CONFIGS / "gaussian_d2.txt"], capsys
        )
        rec = json.loads(out)
        assert code == 0 and rec["uvp_percent"] < 0.05 and rec["count"] == 100_000

    def test_eval_target_json_and_schema_error(self, tmp_path, capsys):
        (tmp_path / "t.json").write_text(json.dumps({"mean": [0, 0], "cov": [[1, 0], [0, 1]]}))
        (tmp_path / "bad.csv").write_text("x0,x1\n1,2\n1\n")
        code, _, err = run_cli(["eval", "uvp", "--samples", tmp_path / "bad.csv", "--target", tmp_path / "t.json"], capsys)
        assert code == 1 and json.loads(err)["row"] == 3
        write_samples_csv(tmp_path / "ok.csv", SampleSet(np.random.default_rng(0).standard_normal((5000, 2))))
        code, out, _ = run_cli(["eval", "uvp", "--samples", tmp_path / "ok.csv", "--target", tmp_path / "t.json"], capsys)
        assert code == 0 and json.loads(out)["uvp_percent"] < 1.0
