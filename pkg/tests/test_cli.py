import json
import logging
import subprocess
import sys

import pytest

from amlodab import cli, ledger
from amlodab.timeseries import ingest_csv, ingest_csv_all

SUBCOMMANDS = [
    "gen-data",
    "train-attack",
    "train-surrogate",
    "defend",
    "chain-build",
    "chain-verify",
    "run-experiment",
    "report",
]

TINY = {
    "households": 3,
    "duration_s": 6 * 3600,
    "population_epochs": 1,
    "population_windows": 300,
    "surrogate_epochs": 1,
    "attacker_epochs": 2,
    "difficulty": 2,
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.csv"
    assert run("gen-data", "--households", 2, "--hours", 4, "--seed", 7, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text("".join(f"{k}: {v}\n" for k, v in TINY.items()))
    return path


# --- exit code contract ---------------------------------------------------------------------

@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_every_subcommand_has_help(sub):
    proc = subprocess.run([sys.executable, "-m", "amlodab.cli", sub, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage" in proc.stdout


def test_unknown_flag_is_usage_error(capsys):
    assert run("gen-data", "--bogus") == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error(capsys):
    assert run("run-experiment") == 2
    assert "--seed" in capsys.readouterr().err


def test_no_subcommand_is_usage_error():
    assert run() == 2


def test_missing_input_file_is_operational_error(tmp_path, capsys):
    assert run("chain-verify", "--chain", tmp_path / "absent.bin") == 1
    assert "error" in capsys.readouterr().err


def test_bad_log_level_is_usage_error(monkeypatch, capsys):
    monkeypatch.setenv("AMLB_LOG", "loud")
    assert run("report", "--help") == 2
    assert "AMLB_LOG" in capsys.readouterr().err


def test_log_level_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("AMLB_LOG", "debug")
    assert run("gen-data", "--hours", 0.01, "--seed", 1, "--out", tmp_path / "x.csv") == 0
    assert logging.getLogger("amlodab").level == logging.DEBUG
    monkeypatch.setenv("AMLB_LOG", "error")
    assert run("gen-data", "--hours", 0.01, "--seed", 1, "--out", tmp_path / "x.csv") == 0
    assert logging.getLogger("amlodab").level == logging.ERROR


# --- gen-data ----------------------------------------------------------------------------------

def test_gen_data_row_count(tmp_path):
    out = tmp_path / "d.csv"
    assert run("gen-data", "--households", 3, "--hours", 1, "--seed", 7, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 3 * 3600
    profiles = ingest_csv_all(out)
    assert [len(p) for p in profiles] == [3600] * 3


def test_gen_data_is_seeded(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    run("gen-data", "--hours", 0.5, "--seed", 3, "--out", a)
    run("gen-data", "--hours", 0.5, "--seed", 3, "--out", b)
    run("gen-data", "--hours", 0.5, "--seed", 4, "--out", c)
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert len(ingest_csv(a)) == 1800


def test_config_file_feeds_generator(tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"generator": {"base_load_w": 100.0, "appliance_pool": [], "background_pool": [], "noise_std_w": 0.0}}))
    out = tmp_path / "flat.csv"
    assert run("gen-data", "--hours", 0.1, "--seed", 1, "--out", out, "--config", cfg) == 0
    assert set(ingest_csv(out).readings) == {100.0}


def test_bad_config_file_is_operational_error(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("- just\n- a list\n")
    assert run("gen-data", "--hours", 0.1, "--seed", 1, "--out", tmp_path / "o.csv", "--config", cfg) == 1
    cfg.write_text("unknown_key: 3\n")
    assert run("gen-data", "--hours", 0.1, "--seed", 1, "--out", tmp_path / "o.csv", "--config", cfg) == 1


# --- training and defense --------------------------------------------------------------------------

def test_train_attack(data, tmp_path, capsys):
    out = tmp_path / "atk.bin"
    assert run("train-attack", "--data", data, "--out", out, "--epochs", 2, "--seed", 1) == 0
    assert out.read_bytes()[:4] == b"AMLA"
    assert "held-out accuracy" in capsys.readouterr().out


def test_train_surrogate_then_defend(data, tmp_path, capsys):
    weights = tmp_path / "s.bin"
    assert run("train-surrogate", "--data", data, "--household", "household-001", "--out", weights, "--epochs", 1) == 0
    out = tmp_path / "p.csv"
    assert run("defend", "--data", data, "--household", "household-001", "--surrogate", weights, "--out", out) == 0
    text = capsys.readouterr().out
    assert "relative delta" in text
    original = [p for p in ingest_csv_all(data) if p.household_id == "household-001"][0]
    perturbed = ingest_csv(out)
    assert len(perturbed) == len(original)
    assert perturbed.readings.min() >= 0
    assert abs(perturbed.readings.sum() - original.readings.sum()) <= 1e-9 * original.readings.sum()


def test_unknown_household_is_operational_error(data, tmp_path):
    assert run("train-surrogate", "--data", data, "--household", "nobody", "--out", tmp_path / "s.bin") == 1


def test_defend_rejects_non_sequence_weights(data, tmp_path):
    atk = tmp_path / "atk.bin"
    run("train-attack", "--data", data, "--out", atk, "--epochs", 1)
    assert run("defend", "--data", data, "--surrogate", atk, "--out", tmp_path / "p.csv") == 1


# --- chain ---------------------------------------------------------------------------------------------

def test_chain_build_verify_and_tamper(data, tmp_path, capsys):
    chain = tmp_path / "chain.bin"
    assert run("chain-build", "--data", data, "--out", chain, "--difficulty", 4, "--epochs", 2, "--seed", 5, "--no-model") == 0
    assert run("chain-verify", "--chain", chain) == 0
    assert "chain OK" in capsys.readouterr().out

    raw = bytearray(chain.read_bytes())
    parsed = ledger.deserialize_chain(bytes(raw))
    payload = parsed.blocks[2].transactions[0].payload
    raw[bytes(raw).index(payload) + 9] ^= 0x10
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    assert run("chain-verify", "--chain", bad) == 1
    assert "chain invalid at block 2" in capsys.readouterr().err


def test_chain_build_publishes_weights(data, tmp_path):
    chain, weights = tmp_path / "c.bin", tmp_path / "w.bin"
    args = ["chain-build", "--data", data, "--out", chain, "--difficulty", 2, "--seed", 5, "--weights-out", weights]
    cfg = tmp_path / "c.yaml"
    cfg.write_text("population_epochs: 1\npopulation_windows: 200\n")
    assert run(*args, "--config", cfg) == 0
    assert run("chain-verify", "--chain", chain) == 0
    assert weights.read_bytes()[:4] == b"AMLB"
    published = ledger.deserialize_chain(chain.read_bytes())
    assert list(published.transactions(ledger.TX_MODEL))[0].payload == weights.read_bytes()


# --- experiment and report -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def report_path(tmp_path_factory, tiny_config_file):
    out = tmp_path_factory.mktemp("exp") / "r.json"
    assert run("run-experiment", "--seed", 42, "--level", "high", "--out", out, "--config", tiny_config_file) == 0
    return out


def test_run_experiment_is_byte_identical(report_path, tiny_config_file, tmp_path):
    again = tmp_path / "r2.json"
    assert run("run-experiment", "--seed", 42, "--level", "high", "--out", again, "--config", tiny_config_file) == 0
    assert again.read_bytes() == report_path.read_bytes()


def test_flags_override_config_file(report_path, tiny_config_file, tmp_path):
    report = json.loads(report_path.read_text())
    assert report["config"]["households"] == 3 and report["seed"] == 42
    out = tmp_path / "r.json"
    assert run("run-experiment", "--seed", 1, "--households", 2, "--out", out, "--config", tiny_config_file) == 0
    cfg = json.loads(out.read_text())["config"]
    assert cfg["households"] == 2 and cfg["seed"] == 1 and cfg["duration_s"] == TINY["duration_s"]


def test_report_table(report_path, capsys):
    assert run("report", "--in", report_path) == 0
    text = capsys.readouterr().out
    for word in ("pre", "off", "low", "medium", "high", "max relative bill delta"):
        assert word in text


def test_report_figures(report_path, tmp_path, capsys):
    figs = tmp_path / "figs"
    assert run("report", "--in", report_path, "--figures", figs) == 0
    names = sorted(p.name for p in figs.iterdir())
    assert names == ["accuracy_by_level.png", "bills.png"]
    for p in figs.iterdir():
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_rejects_non_json(tmp_path):
    bad = tmp_path / "r.json"
    bad.write_text("not json")
    assert run("report", "--in", bad) == 1
