import csv
import json

import numpy as np
import pytest

from fedatoms.analysis import comm_cost
from fedatoms.checkpoint import load_checkpoint, save_checkpoint
from fedatoms.cli import build_spec, main
from fedatoms.config import OUTPUT_ROOT_ENV, apply_overrides, from_dict, parse_config
from fedatoms.errors import ConfigError, ContractError
from fedatoms.fl_core import GlobalModel, init_params

MINIMAL = {"dataset": {"kind": "mixture"}, "partition": {"clients": 4}, "federation": {"rounds": 2}}
SMALL_RUN = """
master_seed = 3

[dataset]
kind = "mixture"
params = { num_classes = 4, n = 200, test_n = 100, side = 6 }

[partition]
clients = 4
shards_per_client = 2

[federation]
rounds = 3
fraction = 0.5
strategy = "{strategy}"
variance_repeats = 2
"""


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_minimal_config_gets_defaults():
    cfg = from_dict(MINIMAL)
    f = cfg.federation
    assert (f.lr, f.momentum, cfg.model.atoms) == (0.01, 0.9, 9)
    assert cfg.model.decomposed and len(cfg.model.conv) == 2
    assert cfg.partition.mode == "shards" and cfg.partition.shards_per_client == 2
    assert cfg.dataset.seed == cfg.master_seed


def test_beta_needs_fast_slow():
    raw = apply_overrides(MINIMAL, [("federation.beta", 0.2)])
    with pytest.raises(ConfigError, match="federation.beta"):
        from_dict(raw)
    raw = apply_overrides(raw, [("federation.strategy", "fast_slow")])
    assert from_dict(raw).federation.beta == 0.2


@pytest.mark.parametrize("override,where", [
    (("federation.lrate", 0.1), "federation"),
    (("model.atoms", 4), "model.atoms"),
    (("partition.concentration", 0.3), "partition.concentration"),
    (("federation.fraction", 0.0), "federation.fraction"),
    (("federation.epochs", "two"), "federation.epochs"),
])
def test_inconsistent_configs_are_named(override, where):
    raw = apply_overrides(MINIMAL, [override])
    if override[0] == "model.atoms":
        raw["model"]["decomposed"] = False
        raw["federation"]["strategy"] = "plain"
    with pytest.raises(ConfigError, match=where):
        from_dict(raw)


def test_missing_required_field():
    with pytest.raises(ConfigError, match="partition.clients"):
        from_dict({"dataset": {"kind": "mixture"}, "federation": {"rounds": 1}})


def test_round_trip_through_json(tmp_path):
    raw = apply_overrides(MINIMAL, [("federation.strategy", "fast_slow"), ("federation.beta", 0.5),
                                    ("partition.mode", "dirichlet")])
    cfg = from_dict(raw)
    path = write_config(tmp_path, cfg.to_json(), "resolved.json")
    again = parse_config(path)
    assert again == cfg and again.hash() == cfg.hash()


def test_toml_and_overrides(tmp_path, monkeypatch):
    path = write_config(tmp_path, SMALL_RUN.replace("{strategy}", "plain"))
    cfg = parse_config(path, [("federation.lr", 0.05)])
    assert cfg.federation.lr == 0.05 and cfg.federation.strategy == "plain"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cfg.output_dir() == tmp_path / "root" / "runs" / "default"


def run_cli(tmp_path, strategy="decomposed", out="out", extra=()):
    cfg = write_config(tmp_path, SMALL_RUN.replace("{strategy}", strategy))
    code = main(["fed-run", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def test_fed_run_outputs(tmp_path, capsys):
    code, out = run_cli(tmp_path, extra=["--output.checkpoints", "true", "--output.checkpoint_every", "2"])
    assert code == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["round", "strategy", "train_loss", "test_acc", "variance", "params_tx_cum", "ms"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["uploaded_total"] == int(rows[-1][5])
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["federation"]["lr"] == 0.01
    assert (out / "checkpoints" / "round_0002.json").exists()
    assert (out / "checkpoints" / "final.json").exists()


def test_fed_run_is_byte_identical(tmp_path):
    run_cli(tmp_path, out="a")
    run_cli(tmp_path, out="b", extra=["--federation.workers", "3"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert main(["fed-run", str(tmp_path / "missing.toml")]) == 4
    bad = write_config(tmp_path, SMALL_RUN.replace("{strategy}", "decomposed") + "beta = 0.5\n")
    assert main(["fed-run", str(bad)]) == 2
    assert "federation.beta" in capsys.readouterr().err
    bad = write_config(tmp_path, "[dataset\n", "broken.toml")
    assert main(["fed-run", str(bad)]) == 2
    assert main(["fed-run", str(write_config(tmp_path, "{}", "x.yaml"))]) == 2


def test_abort_flushes_partial_metrics(tmp_path, monkeypatch):
    from fedatoms.fl_core.federation import Federation
    original = Federation.step

    def flaky(self):
        if self.model.round == 2:
            raise FloatingPointError("overflow in local step")
        return original(self)

    monkeypatch.setattr(Federation, "step", flaky)
    code, out = run_cli(tmp_path)
    assert code == 3
    assert len((out / "metrics.csv").read_text().strip().split("\n")) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "aborted" and summary["rounds_completed"] == 2


def test_checkpoint_round_trip(tmp_path):
    cfg = from_dict(MINIMAL)
    spec = build_spec(cfg, (1, 8, 8), 10)
    model = GlobalModel(spec, init_params(spec, np.random.default_rng(0)), round=7)
    path = save_checkpoint(tmp_path / "ck.json", model, "abc")
    back = load_checkpoint(path, spec)
    assert back.round == 7 and back.meta["config_hash"] == "abc"
    for k, v in model.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    other = build_spec(from_dict(apply_overrides(MINIMAL, [("model.atoms", 4)])), (1, 8, 8), 10)
    with pytest.raises(ContractError):
        load_checkpoint(path, other)


def test_bound_calc_remark2(capsys):
    assert main(["bound-calc", "--m", "100", "--M", "100"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["variant"] for r in rows] == ["plain", "decomposed"]
    assert all(float(r["D_term"]) == 0.0 for r in rows)


def test_comm_cost_matches_formula(capsys):
    assert main(["comm-cost", "--beta", "0.2", "--rounds", "5"]) == 0
    report = json.loads(capsys.readouterr().out)
    spec = build_spec(from_dict({**MINIMAL, "federation": {"rounds": 5}}), (1, 8, 8), 10)
    groups = report["parameters"]
    full = sum(groups.values())
    expected = (0.2 * full + 0.8 * (full - groups["coefficients"])) / full
    assert report["reduction_rate"] == pytest.approx(expected, rel=1e-15)
    assert report["reduction_rate"] == comm_cost(spec, "fast_slow", 0.2)[1]


def test_variance_check_and_loss_grid(tmp_path, capsys):
    assert main(["variance-check", "--clients", "5", "--trials", "2000"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["reduction_holds"] and report["analytic_gap"] < 0
    out = tmp_path / "grid.csv"
    assert main(["loss-grid", "--resolution", "3", "--out", str(out)]) == 0
    assert out.read_text().startswith("x,y,loss\n") and len(out.read_text().splitlines()) == 10


def test_partition_stats(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL_RUN.replace("{strategy}", "plain"))
    assert main(["partition-stats", str(cfg)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert len(stats) == 4 and all(len([c for c in s["class_counts"] if c]) <= 2 for s in stats)


def test_unknown_flag_is_rejected(capsys):
    with pytest.raises(SystemExit):
        main(["bound-calc", "--nope", "1"])
