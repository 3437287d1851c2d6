"""End-to-end orchestration of the setup and online phases.

Setup: every grid user (GU) submits per-epoch billing-window energies under a
fresh one-time pseudonym issued by the key distribution center (KDC). The
utility company (UC) trains a population LSTM from the chain alone and
publishes its weights in a UC-signed transaction.

Online: each GU fine-tunes a local surrogate from the published weights and
perturbs its test-period stream. The UC, acting as adversary, trains a
feature DNN on clean data and is scored on clean and perturbed streams.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, attack, defense, ledger, neural
from .errors import AmlodaError, InvalidArgument
from .timeseries import GeneratorParams, LoadProfile, Tariff, generate_profile, labelled_windows, window_slices

log = logging.getLogger(__name__)

# hourly time-of-use rates per kWh, midnight first
TOU_RATES = (0.10,) * 7 + (0.18,) * 10 + (0.32,) * 4 + (0.18,) * 3


@dataclass(frozen=True)
class SimConfig:
    households: int = 20
    duration_s: int = 48 * 3600
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    billing_window: int = 2
    attack_window: int = 60
    context_len: int = defense.CONTEXT_LEN
    level: str = "high"
    tariff_resolution_s: int = 3600
    tariff_rates: tuple = TOU_RATES
    difficulty: int = 12
    setup_epochs: int = 2
    train_fraction: float = 0.7
    attacker_epochs: int = 20
    attacker_lr: float = 0.01
    attacker_batch: int = 128
    population_epochs: int = 10
    population_windows: int = 8000
    population_lr: float = 0.01
    surrogate_epochs: int = 8
    surrogate_lr: float = 0.005
    surrogate_batch: int = 64
    start_timestamp: int = 1_600_000_000
    seed: int = 42

    def __post_init__(self):
        if self.households < 1:
            raise InvalidArgument("need at least one household")
        if self.level not in defense.LEVELS:
            raise InvalidArgument(f"unknown privacy level {self.level!r}")
        if self.billing_window < 2:
            raise InvalidArgument("billing window must span at least 2 samples")
        if self.context_len % self.billing_window:
            raise InvalidArgument("context_len must be a multiple of the billing window")
        if not 0 < self.train_fraction < 1:
            raise InvalidArgument("train_fraction must lie in (0, 1)")
        if self.setup_epochs < 1:
            raise InvalidArgument("setup_epochs must be >= 1")
        if not 0 <= self.difficulty <= ledger.MAX_DIFFICULTY:
            raise InvalidArgument(f"difficulty must be in [0, {ledger.MAX_DIFFICULTY}]")
        if self.duration_s < 2 * max(self.attack_window, self.context_len):
            raise InvalidArgument("duration is too short for the analysis windows")
        self.tariff  # validates resolution against the billing window

    @property
    def tariff(self) -> Tariff:
        return Tariff(self.tariff_resolution_s, self.tariff_rates, self.billing_window)

    @property
    def split_index(self) -> int:
        # aligned to both window lengths so train and test windows never straddle the split
        unit = int(np.lcm(self.attack_window, self.context_len))
        return int(self.duration_s * self.train_fraction) // unit * unit

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["generator"]["appliance_pool"] = [list(p) for p in self.generator.appliance_pool]
        d["generator"]["background_pool"] = [list(p) for p in self.generator.background_pool]
        d["tariff_rates"] = list(self.tariff_rates)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(sorted(unknown))}")
        if isinstance(data.get("generator"), dict):
            gen = dict(data["generator"])
            bad = set(gen) - {f.name for f in dataclasses.fields(GeneratorParams)}
            if bad:
                raise InvalidArgument(f"unknown generator keys: {', '.join(sorted(bad))}")
            data["generator"] = GeneratorParams(**gen)
        if "tariff_rates" in data:
            data["tariff_rates"] = tuple(data["tariff_rates"])
        return cls(**data)


def derive_seed(master: int, role: str, index: int = 0) -> int:
    """64-bit sub-seed: first 8 bytes of SHA-256(master || role || index)."""
    material = int(master).to_bytes(8, "big", signed=False) + role.encode() + int(index).to_bytes(4, "big")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def household_id(i: int) -> str:
    return f"household-{i:03d}"


def generate_households(cfg: SimConfig) -> List[LoadProfile]:
    return [
        generate_profile(cfg.generator.with_seed(derive_seed(cfg.seed, "household", i)), cfg.duration_s, household_id(i))
        for i in range(cfg.households)
    ]


class KeyDistributionCenter:
    """Issues one-time keypairs. Holds no reference to the chain."""

    def __init__(self, master_seed: int):
        self._seed = master_seed
        self._issued = 0

    def issue(self) -> ledger.LamportKeypair:
        seed = derive_seed(self._seed, "kdc", self._issued)
        self._issued += 1
        return ledger.keygen(seed.to_bytes(8, "big"))


@dataclass
class SetupResult:
    chain: ledger.Chain
    population_weights: bytes
    households: List[LoadProfile]

    @property
    def population_model(self) -> neural.SequenceClassifier:
        return neural.load_weights(self.population_weights)


def _epoch_bounds(n: int, epochs: int, w: int):
    per = (n // epochs) // w * w
    return [(e * per, (e + 1) * per) for e in range(epochs)]


def activity_labels(windows) -> np.ndarray:
    """UC-side proxy labels: windows whose summed absolute power change exceeds the pool median.

    The UC never sees occupancy on-chain, so the population model is fitted
    to this activity proxy and personalised later with true local labels.
    """
    W = np.asarray(windows)
    activity = np.abs(np.diff(W, axis=1)).sum(axis=1)
    return (activity > np.median(activity)).astype(np.int8)


def train_population_model(chain: ledger.Chain, cfg: SimConfig) -> neural.SequenceClassifier:
    """UC side: rebuild mean-power sequences from on-chain window energies and fit the LSTM."""
    w = cfg.billing_window
    L = cfg.context_len
    pool = []
    for tx in chain.transactions(ledger.TX_METER):
        _, energies = ledger.decode_payload(tx.payload)
        power = np.repeat(energies * 3600.0 / w, w)
        n = len(power) // L * L
        if n:
            pool.append(power[:n].reshape(-1, L))
    if not pool:
        raise InvalidArgument("chain carries no meter data")
    W = np.vstack(pool)
    rng = np.random.default_rng(derive_seed(cfg.seed, "uc-sample"))
    if len(W) > cfg.population_windows:
        W = W[np.sort(rng.choice(len(W), cfg.population_windows, replace=False))]
    y = activity_labels(W)
    scale = 1.0 / max(float(W.max()), 1e-9)
    seed = derive_seed(cfg.seed, "uc-population")
    model = neural.init_sequence_classifier(defense.SURROGATE_HIDDEN, 2, seed=seed, input_scale=scale)
    tcfg = neural.TrainConfig(
        learning_rate=cfg.population_lr,
        epochs=cfg.population_epochs,
        batch_size=cfg.surrogate_batch,
        seed=seed,
        clip_norm=1.0,
    )
    model, _ = neural.train(model, defense.encode_windows(W, scale), y, tcfg)
    return model


def build_meter_chain(cfg: SimConfig, households: Sequence[LoadProfile], kdc: KeyDistributionCenter) -> ledger.Chain:
    """One block per setup epoch, each holding one pseudonymous transaction per household."""
    w = cfg.billing_window
    chain = ledger.new_chain(cfg.difficulty, cfg.start_timestamp)
    for e, (a, b) in enumerate(_epoch_bounds(cfg.split_index, cfg.setup_epochs, w)):
        txs = []
        for p in households:
            energies = window_slices(p.readings[a:b], w).windows.sum(axis=1) * p.sampling_period_s / 3600.0
            txs.append(ledger.MeterTransaction.create(kdc.issue(), ledger.encode_payload(e, energies)))
        # ordering by pseudonym keeps block position from linking epochs of one household
        txs.sort(key=lambda tx: tx.pseudonym)
        ledger.append_block(chain, txs, cfg.start_timestamp + b)
        log.info("setup epoch %d mined after %d attempts", e, chain.attempts[-1])
    return chain


def run_setup_phase(cfg: SimConfig, households: Optional[List[LoadProfile]] = None) -> SetupResult:
    households = households if households is not None else generate_households(cfg)
    split = cfg.split_index
    kdc = KeyDistributionCenter(cfg.seed)
    chain = build_meter_chain(cfg, households, kdc)

    model = train_population_model(chain, cfg)
    weights = neural.save_weights(model)
    uc_key = kdc.issue()
    ledger.append_block(
        chain,
        [ledger.MeterTransaction.create(uc_key, weights, kind=ledger.TX_MODEL)],
        cfg.start_timestamp + split,
    )
    result = ledger.validate_chain(chain)
    if not result:
        raise AmlodaError(f"setup chain failed validation at block {result.index}: {result.reason}")
    return SetupResult(chain, weights, households)


def published_weights(chain: ledger.Chain) -> bytes:
    models = list(chain.transactions(ledger.TX_MODEL))
    if not models:
        raise InvalidArgument("chain carries no published model")
    return models[-1].payload


@dataclass
class HouseholdOnline:
    household_id: str
    test: LoadProfile
    surrogate_accuracy: float
    streams: Dict[str, defense.PerturbedStream]


def run_online_phase(
    cfg: SimConfig,
    population_weights: bytes,
    households: Sequence[LoadProfile],
    levels: Optional[Sequence[str]] = None,
) -> List[HouseholdOnline]:
    """Local fine-tuning and perturbation. Takes no attacker state by construction."""
    levels = list(levels) if levels is not None else [cfg.level]
    population = neural.load_weights(population_weights)
    split = cfg.split_index
    out = []
    for i, p in enumerate(households):
        history, test = p.slice(0, split), p.slice(split, len(p))
        seed = derive_seed(cfg.seed, "surrogate", i)
        tcfg = neural.TrainConfig(
            learning_rate=cfg.surrogate_lr,
            epochs=cfg.surrogate_epochs,
            batch_size=cfg.surrogate_batch,
            seed=seed,
            clip_norm=1.0,
        )
        surrogate, _ = defense.train_surrogate(history, tcfg, cfg.context_len, warm_start=population)
        acc = defense.surrogate_accuracy(surrogate, test)
        streams = {}
        for name in levels:
            level = defense.PrivacyLevel.named(name)
            stream = defense.perturb(surrogate, test.readings, test.occupancy, level, cfg.billing_window)
            if not defense.stream_ok(test.readings, stream, level):
                raise AmlodaError(f"{p.household_id}: perturbed stream violates its invariants at level {name}")
            streams[name] = stream
        log.info("%s surrogate accuracy %.3f", p.household_id, acc)
        out.append(HouseholdOnline(p.household_id, test, acc, streams))
    return out


def _stack_windows(profiles: Sequence[LoadProfile], length: int):
    parts = [labelled_windows(p, length) for p in profiles]
    return np.vstack([W for W, _ in parts]), np.concatenate([y for _, y in parts])


def _metrics_summary(m: attack.Metrics) -> dict:
    return {"accuracy": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1}


def train_benchmark_attacker(cfg: SimConfig, households: Sequence[LoadProfile]) -> attack.AttackModel:
    split = cfg.split_index
    W, y = _stack_windows([p.slice(0, split) for p in households], cfg.attack_window)
    tcfg = neural.TrainConfig(
        learning_rate=cfg.attacker_lr,
        epochs=cfg.attacker_epochs,
        batch_size=cfg.attacker_batch,
        seed=derive_seed(cfg.seed, "attacker"),
    )
    return attack.train_attacker(W, y, tcfg, cfg.generator.onoff_threshold_w)


def run_experiment(cfg: SimConfig, levels: Optional[Sequence[str]] = None, artifacts: Optional[dict] = None) -> dict:
    """Full benchmark; returns the JSON-ready report (key order is part of the format).

    Pass a dict as ``artifacts`` to also receive the setup result, the
    per-household online results and per-phase wall times.
    """
    artifacts = {} if artifacts is None else artifacts
    timings = artifacts.setdefault("timings", {})
    t0 = time.perf_counter()
    levels = list(levels) if levels is not None else list(defense.LEVEL_ORDER)
    if cfg.level not in levels:
        levels.append(cfg.level)
    report = {"config": cfg.to_dict()}
    try:
        setup = run_setup_phase(cfg)
        artifacts["setup"] = setup
        timings["setup"] = time.perf_counter() - t0
        chain = setup.chain
        report["setup"] = {
            "chain_blocks": len(chain),
            "mean_mining_attempts": float(np.mean(chain.attempts)),
            "meter_transactions": sum(1 for _ in chain.transactions(ledger.TX_METER)),
            "model_transactions": sum(1 for _ in chain.transactions(ledger.TX_MODEL)),
        }
        t = time.perf_counter()
        attacker = train_benchmark_attacker(cfg, setup.households)
        timings["attacker"] = time.perf_counter() - t
        t = time.perf_counter()
        online = run_online_phase(cfg, published_weights(chain), setup.households, levels)
        artifacts["online"] = online
        timings["online"] = time.perf_counter() - t

        tests = [h.test for h in online]
        W, y = _stack_windows(tests, cfg.attack_window)
        pre = attack.evaluate(attacker, W, y)
        post = {}
        for name in levels:
            perturbed = [
                LoadProfile(h.household_id, h.streams[name].readings, h.test.occupancy, h.test.sampling_period_s)
                for h in online
            ]
            Wp, yp = _stack_windows(perturbed, cfg.attack_window)
            post[name] = _metrics_summary(attack.evaluate(attacker, Wp, yp))
        report["attack"] = {
            "pre": _metrics_summary(pre),
            "post_by_level": post,
            "accuracy_drop_at_level": pre.accuracy - post[cfg.level]["accuracy"],
            "mean_surrogate_accuracy": float(np.mean([h.surrogate_accuracy for h in online])),
            "surrogate_accuracy_by_household": {h.household_id: h.surrogate_accuracy for h in online},
        }

        tariff = cfg.tariff
        per_household = []
        max_window, max_bill = 0.0, 0.0
        for h in online:
            entry = {"household": h.household_id, "levels": {}}
            for name in levels:
                stream = h.streams[name]
                bill = defense.verify_billing(h.test, stream, tariff)
                d = stream.per_window_delta
                rel = float(np.max(np.abs(d[:, 1] - d[:, 0]) / np.maximum(1.0, d[:, 0]))) if len(d) else 0.0
                max_window = max(max_window, rel)
                max_bill = max(max_bill, bill.rel_bill_delta)
                entry["levels"][name] = {"bill_before": bill.bill_before, "bill_after": bill.bill_after}
            per_household.append(entry)
        report["billing"] = {
            "max_window_delta": max_window,
            "max_bill_rel_delta": max_bill,
            "households": per_household,
        }
    except AmlodaError as exc:
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
    report["seed"] = cfg.seed
    report["version"] = __version__
    timings["total"] = time.perf_counter() - t0
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
