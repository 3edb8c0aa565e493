import json
from pathlib import Path

import pytest

from tracerca.cli import main

GEN_TOML = """
[generator]
n_components = 18
traces_per_bucket = 8
base_buckets = 6
alert_buckets = 5
n_root_causes = 1

[train]
episodes = 6
episodes_per_update = 3
actor_epochs = 1
critic_epochs = 1
model_width = 32
n_layers = 1
n_heads = 2

[train.rca]
n_samples = 300
n_permutations = 6
exact_max_players = 6
node_cap = 20

[diagnose]
n_samples = 1000
exact_max_players = 8
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "config.toml"
    p.write_text(GEN_TOML)
    return p


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("cases")
    code = main(
        ["--config", str(config_file), "--seed", "100", "simulate", "--out", str(out), "--cases", "3"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file, case_dir):
    out = tmp_path_factory.mktemp("train") / "policy.json"
    code = main(
        ["--config", str(config_file), "--seed", "0", "train", "--cases", str(case_dir), "--out", str(out)]
    )
    assert code == 0
    return out


class TestSimulate:
    def test_files_exist_and_reparse(self, case_dir):
        from tracerca.ingest import load_case

        cases = sorted(case_dir.glob("*.case.json"))
        spans = sorted(case_dir.glob("*.spans.jsonl"))
        assert len(cases) == 3 and len(spans) == 3
        for f in cases:
            case = load_case(f)
            assert case.true_root_causes

    def test_byte_identical_rerun(self, tmp_path, config_file):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert (
                main(
                    ["--config", str(config_file), "--seed", "5", "simulate", "--out", str(out)]
                )
                == 0
            )
        fa = sorted(a.glob("*"))
        fb = sorted(b.glob("*"))
        assert [f.name for f in fa] == [f.name for f in fb]
        for x, y in zip(fa, fb):
            assert x.read_bytes() == y.read_bytes()


class TestTrain:
    def test_artifacts_written(self, trained):
        assert trained.exists()
        assert trained.with_suffix(".tree.json").exists()
        log = trained.with_suffix(".log.csv").read_text().splitlines()
        assert log[0] == "episode,mean_reward,r_com,r_rca,tree_size"
        assert len(log) == 7  # header + 6 episodes

    def test_resume_extends_log(self, tmp_path, config_file, case_dir):
        out = tmp_path / "p.json"
        args = ["--config", str(config_file), "--seed", "3", "train", "--cases", str(case_dir), "--out", str(out)]
        assert main(args + ["--episodes", "4"]) == 0
        first_log = out.with_suffix(".log.csv").read_text().splitlines()
        assert main(args + ["--episodes", "8", "--resume"]) == 0
        second_log = out.with_suffix(".log.csv").read_text().splitlines()
        assert len(first_log) == 5 and len(second_log) == 9
        assert second_log[1:5] == first_log[1:]  # earlier rows unchanged

    def test_missing_truth_rejected(self, tmp_path, config_file):
        out = tmp_path / "null_cases"
        null_cfg = tmp_path / "null.toml"
        null_cfg.write_text(GEN_TOML.replace("n_root_causes = 1", "surge_magnitude = 0.0"))
        assert main(["--config", str(null_cfg), "simulate", "--out", str(out)]) == 0
        code = main(
            ["--config", str(config_file), "train", "--cases", str(out), "--out", str(tmp_path / "p.json")]
        )
        assert code == 2


class TestPruneAndIndicators:
    def test_prune_writes_partition(self, tmp_path, config_file, case_dir, trained):
        case = sorted(case_dir.glob("*.case.json"))[0]
        out = tmp_path / "prune.json"
        code = main(
            ["prune", "--case", str(case), "--tree", str(trained.with_suffix(".tree.json")), "--out", str(out)]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert set(payload) >= {"kept", "removed", "edges", "per_leaf_removed"}
        assert payload["kept"]

    def test_indicators_dump(self, tmp_path, case_dir):
        case = sorted(case_dir.glob("*.case.json"))[0]
        out = tmp_path / "inds.json"
        assert main(["indicators", "--case", str(case), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert all("percentile_rank" in v for v in payload.values())


class TestDiagnose:
    def test_report_json_and_text(self, tmp_path, config_file, case_dir, trained):
        case = sorted(case_dir.glob("*.case.json"))[0]
        report = tmp_path / "report.json"
        code = main(
            [
                "--config", str(config_file), "--seed", "1",
                "diagnose", "--case", str(case),
                "--tree", str(trained.with_suffix(".tree.json")),
                "--report", str(report),
            ]
        )
        assert code == 0
        payload = json.loads(report.read_text())
        assert set(payload) >= {"delta_phi_ms", "ranking", "contributions", "kept", "removed"}
        assert report.with_suffix(".txt").exists()

    def test_missing_tree_exits_2(self, tmp_path, case_dir):
        case = sorted(case_dir.glob("*.case.json"))[0]
        code = main(
            ["diagnose", "--case", str(case), "--tree", str(tmp_path / "nope.json"), "--report", str(tmp_path / "r.json")]
        )
        assert code == 2

    def test_no_prune_completes(self, tmp_path, config_file, case_dir):
        case = sorted(case_dir.glob("*.case.json"))[0]
        report = tmp_path / "full.json"
        code = main(
            [
                "--config", str(config_file), "diagnose", "--case", str(case),
                "--no-prune", "--report", str(report), "--samples", "500",
            ]
        )
        assert code == 0
        payload = json.loads(report.read_text())
        assert payload["removed"] == []

    def test_tree_required_without_no_prune(self, tmp_path, case_dir):
        case = sorted(case_dir.glob("*.case.json"))[0]
        assert main(["diagnose", "--case", str(case), "--report", str(tmp_path / "r.json")]) == 2


class TestEvaluate:
    def test_rows_plus_mean(self, tmp_path, config_file, case_dir, trained):
        out = tmp_path / "eval.csv"
        code = main(
            [
                "--config", str(config_file), "--seed", "2",
                "evaluate", "--cases", str(case_dir),
                "--tree", str(trained.with_suffix(".tree.json")),
                "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "case_id,pr@1,pr@3,pr@5,pr@avg,rankscore,hitrootcause,kept_nodes"
        assert len(lines) == 5  # header + 3 cases + mean
        assert lines[-1].startswith("mean,")

    def test_deterministic_csv(self, tmp_path, config_file, case_dir, trained):
        outs = []
        for name in ("e1.csv", "e2.csv"):
            out = tmp_path / name
            assert (
                main(
                    [
                        "--config", str(config_file), "--seed", "2",
                        "evaluate", "--cases", str(case_dir),
                        "--tree", str(trained.with_suffix(".tree.json")),
                        "--out", str(out),
                    ]
                )
                == 0
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_empty_dir_exits_2(self, tmp_path, trained):
        empty = tmp_path / "none"
        empty.mkdir()
        code = main(
            ["evaluate", "--cases", str(empty), "--tree", str(trained.with_suffix(".tree.json")), "--out", str(tmp_path / "o.csv")]
        )
        assert code == 2


class TestConfigHandling:
    def test_bad_config_exits_2(self, tmp_path, case_dir):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nnonsense_option = 3\n")
        code = main(
            ["--config", str(bad), "train", "--cases", str(case_dir), "--out", str(tmp_path / "p.json")]
        )
        assert code == 2

    def test_missing_config_exits_2(self, tmp_path):
        code = main(["--config", str(tmp_path / "nope.toml"), "simulate", "--out", str(tmp_path / "o")])
        assert code == 2

    def test_env_var_fallback(self, tmp_path, config_file, monkeypatch):
        monkeypatch.setenv("TRACERCA_CONFIG", str(config_file))
        out = tmp_path / "via_env"
        assert main(["--seed", "9", "simulate", "--out", str(out)]) == 0
        assert len(list(out.glob("*.case.json"))) == 1

    def test_json_config_accepted(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"generator": {"n_components": 12, "traces_per_bucket": 6,
                                                 "base_buckets": 4, "alert_buckets": 3}}))
        out = tmp_path / "o"
        assert main(["--config", str(cfg), "simulate", "--out", str(out)]) == 0
