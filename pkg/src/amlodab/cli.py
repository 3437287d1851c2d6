"""Command-line frontend: ``amlodab <subcommand> ...``.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import __version__, attack, defense, ledger, neural, sim
from .errors import AmlodaError, InvalidArgument
from .timeseries import LoadProfile, export_csv, generate_profile, ingest_csv_all, labelled_windows

log = logging.getLogger("amlodab")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def load_config_file(path) -> dict:
    """Read a YAML or JSON mapping (JSON is accepted by the YAML parser)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise AmlodaError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidArgument(f"config {path} is not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidArgument(f"config {path} must hold a mapping at the top level")
    return data


def build_config(args, **overrides) -> sim.SimConfig:
    """File values first, then any flag the user actually passed."""
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return sim.SimConfig.from_dict(data)


def _read_profiles(path) -> List[LoadProfile]:
    profiles = ingest_csv_all(path)
    if not profiles:
        raise InvalidArgument(f"{path} holds no readings")
    return profiles


def _pick_household(profiles: List[LoadProfile], household: Optional[str]) -> LoadProfile:
    if household is None:
        if len(profiles) != 1:
            ids = ", ".join(p.household_id for p in profiles)
            raise InvalidArgument(f"file holds several households ({ids}); choose one with --household")
        return profiles[0]
    for p in profiles:
        if p.household_id == household:
            return p
    raise InvalidArgument(f"household {household!r} not found")


def _split(profile: LoadProfile, fraction: float, unit: int) -> int:
    return int(len(profile) * fraction) // unit * unit


def _write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.households < 1:
        raise InvalidArgument("--households must be at least 1")
    cfg = build_config(args, seed=args.seed)
    duration = int(round(args.hours * 3600))
    profiles = [
        generate_profile(cfg.generator.with_seed(sim.derive_seed(cfg.seed, "household", i)), duration, sim.household_id(i))
        for i in range(args.households)
    ]
    export_csv(profiles[0] if len(profiles) == 1 else profiles, args.out, start_ts=args.start)
    log.info("wrote %d households x %d samples to %s", len(profiles), duration, args.out)
    return 0


def cmd_train_attack(args) -> int:
    profiles = _read_profiles(args.data)
    W_tr, y_tr, W_te, y_te = [], [], [], []
    for p in profiles:
        k = _split(p, args.train_fraction, args.window)
        for lo, hi, Ws, ys in ((0, k, W_tr, y_tr), (k, len(p), W_te, y_te)):
            W, y = labelled_windows(p.slice(lo, hi), args.window)
            Ws.append(W)
            ys.append(y)
    W_tr, y_tr = np.vstack(W_tr), np.concatenate(y_tr)
    thr = args.threshold if args.threshold is not None else sim.SimConfig().generator.onoff_threshold_w
    tcfg = neural.TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    model = attack.train_attacker(W_tr, y_tr, tcfg, thr)
    _write_bytes(args.out, attack.save_attack_model(model))
    W_te, y_te = np.vstack(W_te), np.concatenate(y_te)
    if len(W_te):
        m = attack.evaluate(model, W_te, y_te)
        print(f"held-out accuracy {m.accuracy:.4f}  precision {m.precision:.4f}  recall {m.recall:.4f}  f1 {m.f1:.4f}")
    return 0


def cmd_train_surrogate(args) -> int:
    profile = _pick_household(_read_profiles(args.data), args.household)
    k = _split(profile, args.train_fraction, args.context)
    history, test = profile.slice(0, k), profile.slice(k, len(profile))
    warm = neural.load_weights(_read_bytes(args.warm_start)) if args.warm_start else None
    if warm is not None and not isinstance(warm, neural.SequenceClassifier):
        raise InvalidArgument("warm-start weights are not a sequence model")
    tcfg = neural.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, clip_norm=1.0
    )
    surrogate, losses = defense.train_surrogate(history, tcfg, args.context, warm_start=warm)
    _write_bytes(args.out, neural.save_weights(surrogate.classifier))
    if losses:
        print(f"final training loss {losses[-1]:.4f}")
    if len(test) >= args.context:
        print(f"held-out accuracy {defense.surrogate_accuracy(surrogate, test):.4f}")
    return 0


def cmd_defend(args) -> int:
    profile = _pick_household(_read_profiles(args.data), args.household)
    model = neural.load_weights(_read_bytes(args.surrogate))
    if not isinstance(model, neural.SequenceClassifier):
        raise InvalidArgument("surrogate weights are not a sequence model")
    surrogate = defense.SurrogateModel(model, args.context)
    level = defense.PrivacyLevel.named(args.level)
    stream = defense.perturb(surrogate, profile.readings, profile.occupancy, level, args.window)
    if not defense.stream_ok(profile.readings, stream, level):
        raise AmlodaError("perturbed stream failed its invariant check")
    out = LoadProfile(profile.household_id, stream.readings, profile.occupancy, profile.sampling_period_s)
    export_csv(out, args.out, start_ts=args.start)
    tariff = sim.SimConfig(billing_window=args.window).tariff
    bill = defense.verify_billing(profile, stream, tariff)
    print(
        f"bill before {bill.bill_before:.6f}  after {bill.bill_after:.6f}  "
        f"relative delta {bill.rel_bill_delta:.3e}  max window delta {bill.max_window_delta:.3e}"
    )
    return 0


def cmd_chain_build(args) -> int:
    profiles = _read_profiles(args.data)
    n = min(len(p) for p in profiles)
    profiles = [p.slice(0, n) for p in profiles]
    cfg = build_config(args, seed=args.seed, difficulty=args.difficulty, setup_epochs=args.epochs)
    cfg = dataclasses.replace(cfg, households=len(profiles), duration_s=n)
    if args.no_model:
        chain = sim.build_meter_chain(cfg, profiles, sim.KeyDistributionCenter(cfg.seed))
    else:
        chain = sim.run_setup_phase(cfg, profiles).chain
    _write_bytes(args.out, ledger.serialize_chain(chain))
    print(f"chain of {len(chain)} blocks, mean mining attempts {np.mean(chain.attempts):.1f}")
    if args.weights_out:
        _write_bytes(args.weights_out, sim.published_weights(chain))
    return 0


def cmd_chain_verify(args) -> int:
    result = ledger.validate_chain_bytes(_read_bytes(args.chain))
    if result:
        print("chain OK")
        return 0
    print(f"chain invalid at block {result.index}: {result.reason}", file=sys.stderr)
    return 1


def cmd_run_experiment(args) -> int:
    overrides = {"seed": args.seed, "level": args.level, "households": args.households, "difficulty": args.difficulty}
    if args.hours is not None:
        overrides["duration_s"] = int(round(args.hours * 3600))
    cfg = build_config(args, **overrides)
    report = sim.run_experiment(cfg)
    text = sim.report_json(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if "error" in report:
        print(f"experiment failed: {report['error']['message']}", file=sys.stderr)
        return 1
    return 0


def format_report(report: dict) -> str:
    lines = [f"seed {report.get('seed')}  version {report.get('version')}"]
    setup = report.get("setup")
    if setup:
        lines.append(
            f"chain: {setup['chain_blocks']} blocks, mean mining attempts {setup['mean_mining_attempts']:.1f}"
        )
    atk = report.get("attack")
    if atk:
        lines.append("")
        lines.append(f"{'stage':<10}{'accuracy':>10}{'precision':>11}{'recall':>9}{'f1':>9}")
        rows = [("pre", atk["pre"])] + [(k, v) for k, v in atk["post_by_level"].items()]
        for name, m in rows:
            lines.append(f"{name:<10}{m['accuracy']:>10.4f}{m['precision']:>11.4f}{m['recall']:>9.4f}{m['f1']:>9.4f}")
        lines.append("")
        lines.append(f"accuracy drop at configured level: {100 * atk['accuracy_drop_at_level']:.1f} points")
        lines.append(f"mean surrogate accuracy: {atk['mean_surrogate_accuracy']:.4f}")
    bill = report.get("billing")
    if bill:
        lines.append(f"max window-sum delta: {bill['max_window_delta']:.3e}")
        lines.append(f"max relative bill delta: {bill['max_bill_rel_delta']:.3e}")
    if "error" in report:
        lines.append(f"error: {report['error']['type']}: {report['error']['message']}")
    return "\n".join(lines) + "\n"


def render_figures(report: dict, out_dir) -> List[Path]:
    """Accuracy-by-level and bill-before/after charts as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    atk = report.get("attack")
    if atk:
        names = list(atk["post_by_level"])
        acc = [atk["post_by_level"][n]["accuracy"] for n in names]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(names, acc, marker="o", label="after perturbation")
        ax.axhline(atk["pre"]["accuracy"], color="grey", linestyle="--", label="before perturbation")
        ax.set_xlabel("privacy level")
        ax.set_ylabel("attacker accuracy")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "accuracy_by_level.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    bill = report.get("billing")
    if bill and bill.get("households"):
        hh = bill["households"]
        level = report.get("config", {}).get("level", "high")
        before = [h["levels"][level]["bill_before"] for h in hh if level in h["levels"]]
        after = [h["levels"][level]["bill_after"] for h in hh if level in h["levels"]]
        x = np.arange(len(before))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(x - 0.2, before, width=0.4, label="original")
        ax.bar(x + 0.2, after, width=0.4, label=f"perturbed ({level})")
        ax.set_xlabel("household")
        ax.set_ylabel("bill")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "bills.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{args.input} is not a JSON report: {exc}") from None
    sys.stdout.write(format_report(report))
    if args.figures:
        for path in render_figures(report, args.figures):
            print(f"wrote {path}")
    return 0


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amlodab", description="Smart-meter occupancy privacy testbed.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate synthetic household profiles as CSV")
    p.add_argument("--households", type=int, default=1)
    p.add_argument("--hours", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--start", type=int, default=0, help="first timestamp (Unix seconds)")
    p.add_argument("--config", help="YAML/JSON config; its generator section is used")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-attack", help="train the feature DNN attacker on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="attack model file")
    p.add_argument("--window", type=int, default=attack.ATTACK_WINDOW)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--threshold", type=float, help="on/off threshold in watts")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_attack)

    p = sub.add_parser("train-surrogate", help="train one household's LSTM surrogate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="weight file")
    p.add_argument("--household")
    p.add_argument("--warm-start", help="population weight file to start from")
    p.add_argument("--context", type=int, default=defense.CONTEXT_LEN)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("defend", help="perturb a household's readings")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True, help="weight file from train-surrogate")
    p.add_argument("--out", required=True, help="perturbed CSV")
    p.add_argument("--household")
    p.add_argument("--level", choices=list(defense.LEVELS), default="high")
    p.add_argument("--window", type=int, default=2, help="billing window in samples")
    p.add_argument("--context", type=int, default=defense.CONTEXT_LEN)
    p.add_argument("--start", type=int, default=0, help="first timestamp of the output")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("chain-build", help="run the setup phase and write the chain file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="chain file")
    p.add_argument("--difficulty", type=int)
    p.add_argument("--epochs", type=int, help="setup epochs (one block each)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-model", action="store_true", help="skip training and publishing the population model")
    p.add_argument("--weights-out", help="also write the published population weights here")
    p.add_argument("--config")
    p.set_defaults(func=cmd_chain_build)

    p = sub.add_parser("chain-verify", help="validate a chain file")
    p.add_argument("--chain", required=True)
    p.set_defaults(func=cmd_chain_verify)

    p = sub.add_parser("run-experiment", help="run the full benchmark and write a JSON report")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--level", choices=list(defense.LEVELS))
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--config")
    p.add_argument("--households", type=int)
    p.add_argument("--hours", type=float)
    p.add_argument("--difficulty", type=int)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("report", help="summarise a JSON report as a text table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--figures", help="directory for optional PNG figures")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    name = os.environ.get("AMLB_LOG", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"AMLB_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    # basicConfig is a no-op once configured, so repeated in-process calls still need this
    log.setLevel(LOG_LEVELS[name])


def main(argv: Optional[List[str]] = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (AmlodaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
