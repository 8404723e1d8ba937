"""Command-line entry point: ``amlab <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Artifacts land in ``<out>/<first 12 hex digits of the config hash>/``, so runs
with different settings never share a directory. Exit codes: 0 success,
2 configuration error, 3 missing artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from amlab import __version__
from amlab.attacks import run_attack
from amlab.config import ExperimentConfig, dump_config, load_config
from amlab.data import save_dataset
from amlab.defense import DefendedModel, msp
from amlab.errors import AmlabError, ConfigurationError, NotFoundError
from amlab.evaluation import (
    SweepAborted,
    KNOBS,
    accuracy,
    calibrate_tau,
    defense_for,
    emit_report,
    hellinger_cdf,
    match_knob,
    msp_cdf,
    read_cdf_csv,
    read_tradeoff_csv,
    sweep,
    tau_for_acceptance,
    write_tradeoff_csv,
)
from amlab.nncore import load_classifier, save_classifier
from amlab.pipeline import (
    CLONE_INIT,
    architecture,
    attack_for_seed,
    build_bundle,
    build_misinformer,
    fit_temperature,
    prepare,
    train_defender,
)
from amlab.storage import write_file

log = logging.getLogger("amlab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
THREADS_ENV = "AMLAB_THREADS"
DEFENDER_FILE = "defender.amlm"
MISINFORMER_FILE = "misinformer.amlm"


def _write_json(path: Path, obj) -> Path:
    return write_file(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def _prepare_run(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    write_file(run / "config.yaml", dump_config(cfg).encode())
    return run


def _load_artifact(path: Path):
    if not path.exists():
        raise NotFoundError(f"missing artifact {str(path)!r}; run the stage that produces it first")
    return load_classifier(path)


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def cmd_train_defender(cfg: ExperimentConfig) -> int:
    seed = cfg.rng_seed
    run = _prepare_run(cfg)
    bundle = build_bundle(cfg.task, seed)
    bundle.write_manifest(run / "manifest.json")
    model = train_defender(cfg, bundle, seed)
    save_classifier(model, run / DEFENDER_FILE)
    metrics = {
        "test_accuracy": accuracy(model, bundle.test),
        "mean_msp_test": float(np.mean(msp(model.predict_proba(bundle.test.inputs)))),
        "mean_msp_surrogate": float(np.mean(msp(model.predict_proba(bundle.surrogate.inputs)))),
    }
    if len(bundle.outliers):
        metrics["mean_msp_outliers"] = float(np.mean(msp(model.predict_proba(bundle.outliers.inputs))))
    _write_json(run / "defender_metrics.json", metrics)
    print(f"defender test accuracy: {metrics['test_accuracy']:.4f}")
    for key in ("mean_msp_test", "mean_msp_outliers", "mean_msp_surrogate"):
        if key in metrics:
            print(f"{key.replace('_', ' ')}: {metrics[key]:.4f}")
    print(f"saved {run / DEFENDER_FILE}")
    return EXIT_OK


def cmd_train_misinformer(cfg: ExperimentConfig) -> int:
    seed = cfg.rng_seed
    run = _prepare_run(cfg)
    bundle = build_bundle(cfg.task, seed)
    model = build_misinformer(cfg, bundle, seed)
    save_classifier(model, run / MISINFORMER_FILE)
    acc = accuracy(model, bundle.test)
    _write_json(run / "misinformer_metrics.json", {"test_accuracy": acc})
    print(f"misinformer test accuracy: {acc:.4f}")
    print(f"saved {run / MISINFORMER_FILE}")
    return EXIT_OK


def _calibrated_defense(cfg: ExperimentConfig, defender, misinformer, bundle):
    defense = cfg.defense
    cal = cfg.calibration
    if defense.kind != "am" or cal.mode == "fixed":
        return defense
    if cal.mode == "acceptance":
        tau = tau_for_acceptance(defender, bundle.val, cal.benign_acceptance)
    else:
        probe = DefendedModel(defender, defense, misinformer)
        tau = calibrate_tau(probe, bundle.val, cal.max_drop)
    log.info("calibrated tau = %.6f (%s)", tau, cal.mode)
    return replace(defense, tau=min(max(tau, 0.0), 1.0))


def cmd_attack(cfg: ExperimentConfig) -> int:
    seed = cfg.rng_seed
    run = cfg.run_dir()
    defender = _load_artifact(run / DEFENDER_FILE)
    misinformer = _load_artifact(run / MISINFORMER_FILE) if cfg.defense.kind == "am" else None
    bundle = build_bundle(cfg.task, seed)
    defense = _calibrated_defense(cfg, defender, misinformer, bundle)
    temperature = 1.0
    if defense.kind == "am" and defense.match_msp:
        temperature = fit_temperature(defender, misinformer, bundle)
    victim = DefendedModel(defender, defense, misinformer, temperature)
    attack = attack_for_seed(cfg, seed)
    arch = architecture(cfg, bundle.input_shape, bundle.num_classes, seed + CLONE_INIT)
    clone, harvest = run_attack(victim, attack, arch, cfg.clone.train_config(seed), bundle.surrogate, bundle.seed_pool)
    save_classifier(clone, run / "clone.amlm")
    save_dataset(harvest, run / "harvest.amld", provenance=harvest.source_attack)
    audit = run / "audit.csv"
    if audit.exists():
        audit.unlink()  # a rerun replaces the log rather than appending to it
    victim.write_audit_log(audit)
    metrics = {
        "attack": attack.kind,
        "label_strategy": attack.label_strategy,
        "defense": defense.to_dict(),
        "queries": len(harvest),
        "halted": harvest.halted,
        "defender_accuracy": accuracy(victim, bundle.test),
        "clone_accuracy": accuracy(clone, bundle.test),
        "attacker_ood_fraction": victim.audit_user("attacker"),
    }
    _write_json(run / "attack_metrics.json", metrics)
    print(f"{attack.kind} vs {defense.kind}: {metrics['queries']} queries")
    print(f"defender accuracy (served): {metrics['defender_accuracy']:.4f}")
    print(f"clone accuracy: {metrics['clone_accuracy']:.4f}")
    print(f"attacker OOD fraction: {metrics['attacker_ood_fraction']:.4f}")
    return EXIT_OK


def _report_cdfs(cfg: ExperimentConfig):
    """MSP CDFs for benign and attacker queries, Hellinger CDFs for AM and matched PP."""
    ctx = prepare(cfg, cfg.rng_seed)
    b = ctx.bundle
    cdfs = [msp_cdf(ctx.defender, b.test, "msp:benign"), msp_cdf(ctx.defender, b.surrogate, "msp:surrogate")]
    if len(b.outliers):
        cdfs.append(msp_cdf(ctx.defender, b.outliers, "msp:outlier"))
    base = ctx.defended(defense_for("am", 0.0, cfg.defense))
    tau = calibrate_tau(base, b.val, cfg.calibration.max_drop)
    am = ctx.defended(defense_for("am", tau, cfg.defense))
    target = accuracy(am, b.test)
    alpha, _, _ = match_knob(lambda a: accuracy(ctx.defended(defense_for("pp", a)), b.test), target, 0.0, 1.0)
    pp = ctx.defended(defense_for("pp", alpha))
    cdfs.append(hellinger_cdf(am, ctx.defender, b.surrogate, "hellinger:am"))
    cdfs.append(hellinger_cdf(pp, ctx.defender, b.surrogate, "hellinger:pp"))
    return cdfs


def cmd_sweep(cfg: ExperimentConfig) -> int:
    run = _prepare_run(cfg)
    report = run / "report"
    workers = _workers()
    points = []
    for kind in cfg.sweep.defenses:
        if not cfg.sweep.grid(kind):
            raise ConfigurationError(f"sweep.{KNOBS[kind]}: the grid is empty")
    for kind in cfg.sweep.defenses:
        for attack_kind in cfg.sweep.attacks:
            attack = replace(cfg.attack, kind=attack_kind)
            try:
                points.extend(
                    sweep(kind, cfg.sweep.grid(kind), attack, cfg, cfg.sweep.accuracy_floor, workers=workers)
                )
            except SweepAborted as exc:
                write_tradeoff_csv(points + exc.points, report / "tradeoff.csv")
                raise
    files = emit_report(points, _report_cdfs(cfg), report)
    for f in files:
        print(f"wrote {f}")
    flagged = sum(p.below_floor for p in points)
    if flagged:
        print(f"{flagged} points fall below the accuracy floor")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    report = cfg.run_dir() / "report"
    csv_path = report / "tradeoff.csv"
    if not csv_path.exists():
        raise NotFoundError(f"missing artifact {str(csv_path)!r}; run the sweep first")
    points = read_tradeoff_csv(csv_path)
    cdf_path = report / "cdf.csv"
    cdfs = read_cdf_csv(cdf_path) if cdf_path.exists() else []
    for f in emit_report(points, cdfs, report):
        print(f"wrote {f}")
    return EXIT_OK


def cmd_print_config(cfg: ExperimentConfig) -> int:
    sys.stdout.write(dump_config(cfg))
    print(f"# run directory: {cfg.run_dir()}")
    return EXIT_OK


COMMANDS = {
    "train-defender": (cmd_train_defender, "train the defender (with outlier exposure) and save it"),
    "train-misinformer": (cmd_train_misinformer, "train the misinformation model and save it"),
    "attack": (cmd_attack, "run the configured attack against the configured defense"),
    "sweep": (cmd_sweep, "trade-off sweeps over the defense knobs plus CDF reports"),
    "report": (cmd_report, "re-render charts from an existing sweep"),
    "print-config": (cmd_print_config, "print the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amlab", description="Model extraction attacks and defenses on small numpy nets.")
    parser.add_argument("--version", action="version", version=f"amlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("--out", help="override out_dir")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError("--seed must be a non-negative integer")
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        return func(resolve_config(args))
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotFoundError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (AmlabError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
