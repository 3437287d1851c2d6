"""Acceptance run on the seeded default benchmark.

Each test records one ``PASS``/``FAIL`` line for its criterion (echoed in the
terminal summary) and then asserts.
The full benchmark runs twice per session: once through the CLI as a
subprocess (timed end to end) and once in process, which also exposes the
chain and perturbed streams for the billing and unlinkability checks.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from amlodab import defense, ledger, sim

from conftest import ACCEPTANCE_LINES
from gradcheck import dense_case, lstm_case
from tamper import build_small_chain, flip_all_bits

SEED = 42
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 30.0
SUM_REL_TOL = 1e-9
BILL_REL_TOL = 1e-9
BILLING_BUDGET_S = 60.0
PRE_ACCURACY_MIN = 0.85
HIGH_DROP_MIN_PP = 20.0
TAMPER_BUDGET_S = 120.0
POW_DIFFICULTY = 12
POW_BLOCKS = 50
POW_MEAN_RANGE = (2048, 8192)
E2E_BUDGET_S = 300.0


def verdict(number, name, ok, detail):
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "report.json"
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "amlodab.cli", "run-experiment", "--seed", str(SEED), "--out", str(out)],
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    return out.read_bytes(), elapsed


@pytest.fixture(scope="module")
def cli_report(cli_run):
    return json.loads(cli_run[0])


@pytest.fixture(scope="module")
def in_process_run():
    cfg = sim.SimConfig(seed=SEED)
    artifacts = {}
    report = sim.run_experiment(cfg, artifacts=artifacts)
    return cfg, report, artifacts


# --- 1 ------------------------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    lstm = max(lstm_case(rng) for _ in range(100))
    dense = max(dense_case(rng) for _ in range(100))
    elapsed = time.perf_counter() - start
    ok = lstm < GRAD_TOL and dense < GRAD_TOL and elapsed < GRAD_BUDGET_S
    verdict(1, "gradient fidelity", ok, f"max rel err LSTM {lstm:.2e}, DNN {dense:.2e} (< {GRAD_TOL:g}); {elapsed:.1f} s (< {GRAD_BUDGET_S:g} s)")


# --- 2 ------------------------------------------------------------------------------------------

def _bill(readings, cfg):
    # independent tariff oracle: per-slot energy in kWh times the cycling slot rate
    res = cfg.tariff_resolution_s
    rates = np.asarray(cfg.tariff_rates)
    n_slots = -(-len(readings) // res)
    slot_wh = np.add.reduceat(readings, np.arange(0, len(readings), res)) / 3600.0
    return float(np.sum(slot_wh / 1000.0 * rates[np.arange(n_slots) % len(rates)]))


def test_criterion_2_billing_conservation(in_process_run):
    cfg, report, artifacts = in_process_run
    assert "error" not in report, report.get("error")
    w = cfg.billing_window
    start = time.perf_counter()
    worst_window, worst_bill, checked = 0.0, 0.0, 0
    for h in artifacts["online"]:
        x = h.test.readings
        full = len(x) // w * w
        before = x[:full].reshape(-1, w).sum(axis=1)
        for name in defense.LEVEL_ORDER:
            y = h.streams[name].readings
            assert len(y) == len(x)
            after = y[:full].reshape(-1, w).sum(axis=1)
            nz = before != 0
            if np.any(after[~nz] != 0):
                worst_window = np.inf
            if nz.any():
                worst_window = max(worst_window, float(np.max(np.abs(after[nz] - before[nz]) / before[nz])))
            b0, b1 = _bill(x, cfg), _bill(y, cfg)
            worst_bill = max(worst_bill, abs(b1 - b0) / b0)
            checked += 1
    elapsed = time.perf_counter() - start
    perturb_s = artifacts["timings"]["online"]
    ok = worst_window <= SUM_REL_TOL and worst_bill <= BILL_REL_TOL and elapsed < BILLING_BUDGET_S
    verdict(
        2,
        "billing conservation",
        ok,
        f"{checked} household-levels; max window rel delta {worst_window:.2e}, max bill rel delta {worst_bill:.2e} "
        f"(<= {SUM_REL_TOL:g}); check {elapsed:.1f} s (< {BILLING_BUDGET_S:g} s); "
        f"fine-tune + perturbation of all levels took {perturb_s:.1f} s",
    )


# --- 3 ------------------------------------------------------------------------------------------

def test_criterion_3_attack_viability(cli_report):
    acc = cli_report["attack"]["pre"]["accuracy"]
    verdict(3, "attack viability", acc >= PRE_ACCURACY_MIN, f"pre-defense accuracy {acc:.4f} (>= {PRE_ACCURACY_MIN})")


# --- 4 ------------------------------------------------------------------------------------------

def test_criterion_4_defense_efficacy(cli_report):
    pre = cli_report["attack"]["pre"]["accuracy"]
    post = {k: v["accuracy"] for k, v in cli_report["attack"]["post_by_level"].items()}
    seq = [post[k] for k in defense.LEVEL_ORDER]
    drop_pp = 100.0 * (pre - post["high"])
    monotone = all(b <= a for a, b in zip(seq, seq[1:]))
    ok = drop_pp >= HIGH_DROP_MIN_PP and monotone
    levels = ", ".join(f"{k} {post[k]:.4f}" for k in defense.LEVEL_ORDER)
    verdict(4, "defense efficacy", ok, f"drop at high {drop_pp:.1f} pp (>= {HIGH_DROP_MIN_PP:g}); {levels}; monotone {monotone}")


# --- 5 ------------------------------------------------------------------------------------------

def test_criterion_5_tamper_detection():
    chain = build_small_chain()
    assert len(chain) == 5
    assert all(len(tx.payload) <= 1024 for tx in chain.transactions())
    assert ledger.validate_chain(chain).ok
    start = time.perf_counter()
    flips, undetected, reasons = flip_all_bits(chain)
    elapsed = time.perf_counter() - start
    expected = 8 * (sum(len(b.to_bytes()) for b in chain.blocks) + len(chain.tip))
    ok = flips == expected and not undetected and elapsed < TAMPER_BUDGET_S
    top = ", ".join(f"{k} {v}" for k, v in sorted(reasons.items(), key=lambda kv: -kv[1])[:3])
    verdict(5, "tamper detection", ok, f"{flips - len(undetected)}/{flips} flips detected ({top}); {elapsed:.1f} s (< {TAMPER_BUDGET_S:g} s)")


# --- 6 ------------------------------------------------------------------------------------------

def test_criterion_6_proof_of_work_statistics():
    chain = ledger.new_chain(POW_DIFFICULTY, timestamp=1_700_000_000)
    for i in range(POW_BLOCKS - 1):
        ledger.append_block(chain, [], 1_700_000_000 + 600 * (i + 1))
    assert len(chain) == POW_BLOCKS and ledger.validate_chain(chain).ok
    mean = float(np.mean(chain.attempts))
    header = chain.blocks[0].header
    zero = ledger.mine(header, 0)
    lo, hi = POW_MEAN_RANGE
    ok = lo <= mean <= hi and zero == 0
    verdict(6, "proof-of-work statistics", ok, f"mean attempts {mean:.0f} over {POW_BLOCKS} blocks in [{lo}, {hi}]; difficulty-0 nonce {zero}")


# --- 7 ------------------------------------------------------------------------------------------

def test_criterion_7_unlinkability(in_process_run):
    cfg, _, artifacts = in_process_run
    setup = artifacts["setup"]
    raw = ledger.serialize_chain(setup.chain)
    leaked = [p.household_id for p in setup.households if p.household_id.encode() in raw]
    names = [tx.pseudonym for tx in setup.chain.transactions()]
    unique = len(names) == len(set(names))
    ok = not leaked and unique and b"household" not in raw
    verdict(7, "unlinkability scan", ok, f"{len(raw)} chain bytes, {len(leaked)} ids found; {len(names)} pseudonyms, all unique {unique}")


# --- 8 ------------------------------------------------------------------------------------------

def test_criterion_8_determinism(cli_run, in_process_run):
    _, report, _ = in_process_run
    first = cli_run[0]
    second = sim.report_json(report).encode()
    verdict(8, "determinism", first == second, f"two seed-{SEED} reports, {len(first)} bytes, identical {first == second}")


# --- 9 ------------------------------------------------------------------------------------------

def test_criterion_9_end_to_end_runtime(cli_run):
    elapsed = cli_run[1]
    verdict(9, "end-to-end runtime", elapsed < E2E_BUDGET_S, f"run-experiment --seed {SEED}: {elapsed:.1f} s (< {E2E_BUDGET_S:g} s)")
