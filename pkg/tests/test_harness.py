import json

import pytest
from click.testing import CliRunner

from demotesim import harness
from demotesim.cli import main
from demotesim.config import build_config

SMALL = {
    "bench": {"samples": 500},
    "algorithm1": {"iterations": 400},
    "demote-time": {"state_samples": 500, "table_samples": 300, "counter_ops": 1000,
                    "adversarial_ops": 300},
    "page-levels": {"samples": 500},
    "covert": {"bits": 2000},
    "kaslr": {"trials": 2, "reboots": 1},
    "evset": {"runs": 1},
    "reverse-llc": {"samples": 500},
    "reverse-dir": {"samples": 500},
    "taxonomy": {},
}


def test_experiment_list():
    assert set(harness.EXPERIMENTS) == set(SMALL)


@pytest.mark.parametrize("name", sorted(SMALL))
def test_small_runs_pass(name):
    rep = harness.run(name, seed=1, **SMALL[name])
    assert rep.experiment == name
    assert rep.checks
    assert rep.passed, {k: v for k, v in rep.checks.items() if not v}
    assert rep.config == build_config({}).to_dict()


def test_kaslr_twice_is_identical():
    a = harness.run("kaslr", seed=1, trials=2, reboots=1)
    b = harness.run("kaslr", seed=1, trials=2, reboots=1)
    assert a.body_json() == b.body_json()
    assert a.metrics_json() == b.metrics_json()
    # wall-clock data lives only in meta, outside the compared body
    assert set(a.meta) == {"elapsed_s", "backend", "generated_at"}
    assert "elapsed_s" not in a.body_json()


def test_seed_changes_results():
    a = harness.run("covert", seed=1, bits=4000, window=560)
    b = harness.run("covert", seed=2, bits=4000, window=560)
    assert a.metrics["run"]["errors"] > 0
    assert a.metrics_json() != b.metrics_json()


def test_unknown_experiment():
    with pytest.raises(harness.UnknownExperiment):
        harness.run("rowhammer")


def test_module_errors_get_context():
    with pytest.raises(harness.ExperimentError, match="covert"):
        harness.run("covert", window=100, bits=10)


def test_write_files(tmp_path):
    rep = harness.run("taxonomy", out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["taxonomy.json", "taxonomy.metrics.csv", "taxonomy.table.csv"]
    d = json.loads((tmp_path / "taxonomy.json").read_text())
    assert d["schema_version"] == harness.SCHEMA_VERSION
    assert d["passed"] is True
    assert "meta" in d and "elapsed_s" in d["meta"]
    assert d["config"] == rep.config
    table = (tmp_path / "taxonomy.table.csv").read_text().splitlines()
    assert table[0].startswith("instruction,")
    assert len(table) == 8


def test_env_var_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env"))
    harness.run("taxonomy")
    assert (tmp_path / "env" / "taxonomy.json").exists()
    assert harness.resolve_out_dir("x").name == "x"


def test_no_files_without_out_dir(tmp_path, monkeypatch):
    monkeypatch.delenv(harness.OUT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    harness.run("taxonomy")
    assert list(tmp_path.iterdir()) == []


def test_config_path_is_loaded(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("noise.sigma = 0\n")
    rep = harness.run("bench", str(f), samples=200)
    assert rep.config["latency"]["noise_sigma"] == 0
    assert rep.passed


# -- CLI -----------------------------------------------------------------------


@pytest.fixture
def cli(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "out"))
    return CliRunner()


def test_cli_taxonomy_json(cli, tmp_path):
    r = cli.invoke(main, ["taxonomy", "check"])
    assert r.exit_code == 0, r.output
    body = json.loads(r.output)
    assert body["metrics"]["rows_ok"] == 7
    assert (tmp_path / "out" / "taxonomy.json").exists()


def test_cli_taxonomy_eval_csv(cli):
    r = cli.invoke(main, ["taxonomy", "eval", "--profile", "U,I,S", "--format", "csv"])
    assert r.exit_code == 0, r.output
    assert "profile.feasible.fast_evset,yes" in r.output


def test_cli_bad_profile(cli):
    r = cli.invoke(main, ["taxonomy", "eval", "--profile", "U,Q"])
    assert r.exit_code == 2


def test_cli_exit_code_reflects_checks(cli, tmp_path):
    f = tmp_path / "counter.cfg"
    f.write_text("countermeasures.privileged_only = false\nnoise.sigma = 0\n")
    ok = cli.invoke(main, ["kaslr", "--trials", "1", "--reboots", "1", "--config", str(f)])
    assert ok.exit_code == 0, ok.output
    # a threshold below every slot mean: nothing is found and the accuracy check fails
    g = tmp_path / "broken.cfg"
    g.write_text("kaslr.threshold = 100\n")
    bad = cli.invoke(main, ["attack", "kaslr", "--trials", "1", "--reboots", "1",
                            "--config", str(g)])
    assert bad.exit_code == 1
    assert "FAILED check: accuracy_ge_99pct" in bad.output


def test_cli_unknown_config_key(cli, tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("nope = 1\n")
    r = cli.invoke(main, ["taxonomy", "--config", str(f)])
    assert r.exit_code == 1
    assert "nope" in r.output


def test_cli_covert_sweep(cli):
    r = cli.invoke(main, ["covert", "--bits", "1000", "--sweep", "500:1000:100",
                          "--sweep-bits", "2000", "--format", "csv"])
    assert r.exit_code == 0, r.output
    assert "check.sweep_single_interior_maximum,True" in r.output
    bad = cli.invoke(main, ["covert", "--sweep", "500-600"])
    assert bad.exit_code == 2


def test_cli_grouped_forms(cli):
    r = cli.invoke(main, ["primitives", "bench", "--samples", "300", "--kind", "FlushDemote"])
    assert r.exit_code == 0, r.output
    r = cli.invoke(main, ["evset", "build", "--runs", "1", "--placement", "cldemote"])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["metrics"]["cldemote"]["success"] == 1


def test_cli_version(cli):
    r = cli.invoke(main, ["--version"])
    assert r.exit_code == 0
    assert "demotesim" in r.output
