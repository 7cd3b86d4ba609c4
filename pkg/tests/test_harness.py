import dataclasses
import json

import numpy as np
import pytest

from actseg import segmentor as seg
from actseg.act import ActConfig, emd_lambda
from actseg.datagen import DataConfig, make_splits
from actseg.harness import cli
from actseg.harness.config import ConfigError, RunConfig, apply_overrides, load_config
from actseg.harness.experiment import parse_values, run_experiment, run_mode, sweep
from actseg.harness.plots import consensus_curve, emit_plots, lambda_curve
from actseg.harness.reports import ReportError, load_report, read_csv, save_report
from actseg.metrics import aggregate

TINY = DataConfig(height=32, width=32, n_source=10, n_target_labeled=1, n_target_unlabeled=4, n_test=2)
FAST = ActConfig(eta=0.1, batch_size=2, total_iterations=6, checkpoint_every=3)


def tiny_config(mode="act", runs=2, **act):
    return RunConfig(mode=mode, data=TINY, act=dataclasses.replace(FAST, **act), runs=runs)


# ---------------------------------------------------------------------------
# config


def test_default_config_loads():
    cfg = load_config()
    assert cfg.mode == "act" and cfg.runs == 5
    assert (cfg.data.height, cfg.data.n_source, cfg.data.n_target_unlabeled, cfg.data.n_test) == (64, 40, 32, 12)
    assert cfg.act.total_iterations == 2000 and cfg.act.epsilon == 0.5 and cfg.act.lambda0 == 1.0


def test_overrides_parse_yaml_scalars():
    tree = apply_overrides({"act": {"eta": 0.1}}, ["act.eta=0.05", "runs=1", "act.use_emd=false", "data.n_test=4"])
    assert tree == {"act": {"eta": 0.05, "use_emd": False}, "runs": 1, "data": {"n_test": 4}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


@pytest.mark.parametrize(
    "override",
    ["mode=bogus", "runs=0", "act.epsilon=1.5", "act.unknown=1", "data.colour=3", "extra=1", "act.total_iterations=0"],
)
def test_invalid_config_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_config_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("mode: joint\nruns: 1\nact:\n  eta: 0.2\n", encoding="utf-8")
    cfg = load_config(path, ["master_seed=3"])
    assert (cfg.mode, cfg.runs, cfg.act.eta, cfg.master_seed) == ("joint", 1, 0.2, 3)
    path.write_text("mode: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


# ---------------------------------------------------------------------------
# reports


@pytest.fixture(scope="module")
def act_report():
    splits = make_splits(TINY, 0)
    _, report = run_mode("act", splits, FAST, 0)
    report.config = {"act": FAST.to_dict(), "seed": 0}
    return report


def test_report_roundtrip(tmp_path, act_report):
    path = save_report(act_report, tmp_path / "report_0.jsonl")
    back = load_report(path)
    assert back == act_report
    save_report(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_report_truncated(tmp_path, act_report):
    path = save_report(act_report, tmp_path / "r.jsonl")
    raw = path.read_bytes()
    lines = raw.splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:-1]))
    with pytest.raises(ReportError, match="truncated"):
        load_report(path)
    path.write_bytes(raw[:-10])
    with pytest.raises(ReportError, match="byte"):
        load_report(path)


def test_report_corrupt_record_offset(tmp_path, act_report):
    path = save_report(act_report, tmp_path / "r.jsonl")
    lines = path.read_bytes().splitlines(keepends=True)
    offset = len(lines[0]) + len(lines[1])
    lines[2] = b"{not json\n"
    path.write_bytes(b"".join(lines))
    with pytest.raises(ReportError, match=f"byte {offset}"):
        load_report(path)


def test_report_version_mismatch(tmp_path, act_report):
    path = save_report(act_report, tmp_path / "r.jsonl")
    lines = path.read_bytes().splitlines(keepends=True)
    header = json.loads(lines[0])
    header["schema_version"] = 99
    lines[0] = (json.dumps(header) + "\n").encode()
    path.write_bytes(b"".join(lines))
    with pytest.raises(ReportError, match="schema version 99"):
        load_report(path)


# ---------------------------------------------------------------------------
# experiments


def test_run_experiment_outputs(tmp_path):
    rows = run_experiment(tiny_config(runs=2), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "config.yaml",
        "params_0_phi.bin",
        "params_0_theta.bin",
        "params_1_phi.bin",
        "params_1_theta.bin",
        "report_0.jsonl",
        "report_1.jsonl",
        "summary.csv",
    ]
    header = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert header == "mode,metric,class,mean,std"
    reports = [load_report(tmp_path / f"report_{s}.jsonl") for s in (0, 1)]
    expected = aggregate(reports)
    got = read_csv(tmp_path / "summary.csv")
    assert len(got) == len(expected) == len(rows)
    for g, e in zip(got, expected):
        assert (g["mode"], g["metric"], g["class"]) == (e["mode"], e["metric"], e["class"])
        assert g["mean"] == e["mean"] and g["std"] == e["std"]
    theta = seg.load_params(tmp_path / "params_1_theta.bin")
    assert theta.num_classes == 4


def test_single_run_has_zero_std(tmp_path):
    rows = run_experiment(tiny_config("source_only", runs=1), tmp_path)
    assert len(list(tmp_path.glob("report_*.jsonl"))) == 1
    assert all(r["std"] == 0 for r in rows)
    assert [p.name for p in tmp_path.glob("params_*")] == ["params_0_theta.bin"]


def test_runs_are_byte_identical(tmp_path):
    for sub in ("a", "b"):
        run_experiment(tiny_config(runs=2), tmp_path / sub)
    for name in ("report_0.jsonl", "report_1.jsonl", "summary.csv", "params_1_theta.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("mode", ["source_only", "target_only_ssl", "uda_branch", "act_no_emd", "joint"])
def test_every_mode_runs(tmp_path, mode):
    run_experiment(tiny_config(mode, runs=1), tmp_path)
    report = load_report(tmp_path / "report_0.jsonl")
    assert report.mode == mode and len(report.per_iteration) == FAST.total_iterations


def test_uda_branch_snapshot_is_phi(tmp_path):
    run_experiment(tiny_config("uda_branch", runs=1), tmp_path)
    assert [p.name for p in tmp_path.glob("params_*")] == ["params_0_phi.bin"]


class CountingSplits:
    """Wraps a DatasetSplits and counts attribute reads."""

    def __init__(self, inner):
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "reads", {})

    def __getattr__(self, name):
        self.reads[name] = self.reads.get(name, 0) + 1
        return getattr(self._inner, name)


@pytest.fixture(scope="module")
def tiny_splits():
    return make_splits(TINY, 1)


def test_source_only_never_reads_target_labels(tiny_splits):
    spy = CountingSplits(tiny_splits)
    run_mode("source_only", spy, FAST, 0)
    assert "target_labeled" not in spy.reads
    assert "target_unlabeled_labels" not in spy.reads
    assert "target_unlabeled" not in spy.reads
    assert spy.reads["source_labeled"] >= 1


def test_target_only_never_reads_source(tiny_splits):
    spy = CountingSplits(tiny_splits)
    run_mode("target_only_ssl", spy, FAST, 0)
    assert "source_labeled" not in spy.reads and "source_test" not in spy.reads
    assert "target_unlabeled_labels" not in spy.reads
    assert spy.reads["target_labeled"] >= 1


@pytest.mark.parametrize("mode", ["uda_branch", "act", "act_no_emd"])
def test_only_joint_reads_revealed_labels(tiny_splits, mode):
    spy = CountingSplits(tiny_splits)
    run_mode(mode, spy, FAST, 0)
    assert "target_unlabeled_labels" not in spy.reads
    spy = CountingSplits(tiny_splits)
    run_mode("joint", spy, FAST, 0)
    assert spy.reads["target_unlabeled_labels"] == 1


def test_joint_without_revealed_labels_is_config_error(tiny_splits):
    hidden = dataclasses.replace(tiny_splits, target_unlabeled_labels=None)
    with pytest.raises(ConfigError):
        run_mode("joint", hidden, FAST, 0)


def test_sweep_pair_fraction(tmp_path):
    rows = sweep(tiny_config(runs=1), "pair_fraction", [0.5, 1.0], tmp_path)
    assert {r["value"] for r in rows} == {0.5, 1.0}
    assert (tmp_path / "sweep_pair_fraction.csv").is_file()
    report = load_report(tmp_path / "pair_fraction_0.5" / "report_0.jsonl")
    assert report.config["act"]["pair_fraction"] == 0.5


def test_sweep_n_lt_shares_source_pool(tmp_path):
    sweep(tiny_config(runs=1), "n_lt", [1, 2], tmp_path)
    cfgs = [load_report(tmp_path / f"n_lt_{v}" / "report_0.jsonl").config["data"] for v in (1, 2)]
    assert [c["n_target_labeled"] for c in cfgs] == [1, 2]
    assert cfgs[0]["n_source"] == cfgs[1]["n_source"] == 20


@pytest.mark.parametrize(
    "axis,values",
    [("n_lt", [0]), ("n_lt", [1.5]), ("pair_fraction", [0.0]), ("pair_fraction", [1.2]), ("depth", [1]), ("n_lt", [])],
)
def test_sweep_rejects_bad_values(tmp_path, axis, values):
    with pytest.raises(ConfigError):
        sweep(tiny_config(runs=1), axis, values, tmp_path)
    assert not list(tmp_path.iterdir())


def test_parse_values():
    assert parse_values("n_lt", "1, 5") == [1, 5]
    assert parse_values("pair_fraction", "0.25,0.5,1") == [0.25, 0.5, 1.0]
    with pytest.raises(ConfigError):
        parse_values("n_lt", "")
    with pytest.raises(ConfigError):
        parse_values("n_lt", "one")


# ---------------------------------------------------------------------------
# plots


def test_lambda_curve_endpoints():
    it, lam = lambda_curve(ActConfig(total_iterations=50).to_dict())
    assert it[0] == 0 and it[-1] == 50
    assert lam[0] == 1.0 and lam[-1] == pytest.approx(np.exp(-5), abs=1e-12)
    assert lam[-1] == emd_lambda(50, ActConfig(total_iterations=50))


def test_consensus_points_sum_to_one(act_report):
    its, fr = consensus_curve(act_report)
    assert list(its) == [0, 3, 6]
    np.testing.assert_allclose(fr.sum(axis=1), 1.0, atol=1e-6)


def test_emit_plots_deterministic(tmp_path):
    run_experiment(tiny_config(runs=1), tmp_path / "run")
    sweep(tiny_config(runs=1), "pair_fraction", [0.5, 1.0], tmp_path / "run")
    a = emit_plots(tmp_path / "run", tmp_path / "a")
    b = emit_plots(tmp_path / "run", tmp_path / "b")
    assert sorted(p.name for p in a) == ["consensus.svg", "dsc_vs_pair_fraction.svg", "lambda.svg"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
        assert x.read_bytes().lstrip().startswith(b"<?xml")


def test_emit_plots_missing_reports(tmp_path):
    with pytest.raises(FileNotFoundError, match="report_<seed>.jsonl"):
        emit_plots(tmp_path)


# ---------------------------------------------------------------------------
# CLI


def _cli_args(out):
    return [
        "--out", str(out), "--set", "runs=1", "--set", "act.total_iterations=4",
        "--set", "data.height=32", "--set", "data.width=32", "--set", "data.n_source=10",
        "--set", "data.n_target_unlabeled=4", "--set", "data.n_test=2",
    ]


def test_cli_run_sweep_plot(tmp_path, capsys):
    assert cli.main(["run", "--mode", "source_only", "--seed", "4", *_cli_args(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "report_4.jsonl").is_file()
    assert cli.main(["sweep", "--axis", "pair_fraction", "--values", "0.5,1.0", *_cli_args(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "sweep_pair_fraction.csv").is_file()
    assert cli.main(["plot", "--in", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "dsc_vs_pair_fraction.svg").is_file()


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--mode", "nope"],
        ["run", "--set", "act.eta=-1"],
        ["run", "--config", "/does/not/exist.yaml"],
        ["sweep", "--axis", "n_lt", "--values", ""],
        ["sweep", "--axis", "pair_fraction", "--values", "2.0"],
        ["frobnicate"],
    ],
)
def test_cli_config_errors_exit_1(argv, tmp_path):
    assert cli.main([*argv, *(["--out", str(tmp_path)] if argv[0] in ("run", "sweep") else [])]) == 1


def test_cli_runtime_errors_exit_2(tmp_path):
    assert cli.main(["plot", "--in", str(tmp_path / "empty")]) == 2
    manifest = tmp_path / "m.tsv"
    manifest.write_text("source\tmissing.pgm\t-\n", encoding="utf-8")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"runs: 1\ndata:\n  manifest: {manifest}\n", encoding="utf-8")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
