"""Interface en ligne de commande."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

import pandas as pd

from . import bd_analytics, harness, oracle, planner
from .config_loader import ConfigLoader, get_config_loader
from .mdp_core import load_spec
from .statistics import SweepStats
from .ucrl2 import LearnerConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_MISMATCH = 3


def _learner_overrides(args: argparse.Namespace, loader: ConfigLoader) -> Dict[str, Any]:
    overrides = loader.learner.as_overrides()
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.delta is not None:
        overrides["delta"] = args.delta
    return overrides


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def cmd_solve(args: argparse.Namespace, loader: ConfigLoader) -> int:
    spec = load_spec(args.spec)
    result = planner.optimal_policy(spec)
    _print_json({
        "spec_id": spec.spec_id,
        "gain": result.gain,
        "policy": list(result.policy.speeds),
        "span": result.span,
        "iterations": result.iterations,
    })
    return EXIT_OK


def cmd_learn(args: argparse.Namespace, loader: ConfigLoader) -> int:
    spec = load_spec(args.spec)
    config = LearnerConfig.for_spec(spec, _learner_overrides(args, loader))
    checkpoints = args.checkpoints or loader.harness.checkpoints
    logging.info("🔍 Apprentissage sur %s : T=%d, graine %d, mode %s", spec.spec_id, args.T, args.seed, config.mode)
    trace = harness.run_experiment(spec, config, args.T, args.seed, checkpoints)
    diagnostics = harness.episode_diagnostics(trace, spec)

    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        harness.export_traces([trace], args.out / "trace.csv")
        harness.export_episodes([trace], args.out / "episodes.csv")
    _print_json({
        "spec_id": spec.spec_id,
        "seed": trace.seed,
        "T": trace.horizon,
        "optimal_gain": trace.optimal_gain,
        "realized_regret": float(trace.realized_regret[-1]),
        "pseudo_regret": float(trace.pseudo_regret[-1]),
        "episodes": trace.num_episodes,
        "episode_bound": diagnostics.episode_bound,
        "membership_failures": trace.membership_failures,
        "wall_time": trace.wall_time,
    })
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, loader: ConfigLoader) -> int:
    grid, grid_checkpoints = harness.load_grid(args.grid)
    overrides = _learner_overrides(args, loader)
    grid = [
        harness.GridPoint(point.point_id, point.spec, {**overrides, **point.learner}, point.horizon)
        for point in grid
    ]
    master_seed = args.master_seed if args.master_seed is not None else loader.harness.master_seed
    parallelism = args.parallelism if args.parallelism is not None else loader.harness.parallelism
    checkpoints = args.checkpoints or grid_checkpoints

    stats = SweepStats()
    stats.start_processing()
    result = harness.sweep(
        grid,
        seeds=args.seeds,
        parallelism=parallelism,
        master_seed=master_seed,
        checkpoints=checkpoints,
        progress=loader.harness.progress and not args.no_progress,
        stats=stats,
    )
    stats.end_processing()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    stats.add_exported_file(harness.export_traces(result.traces, out / "traces.csv"))
    stats.add_exported_file(harness.export_episodes(result.traces, out / "episodes.csv"))

    summaries = [
        harness.aggregate_traces(traces)
        for traces in harness.group_by_spec(result.traces).values()
        if len(traces) >= 2
    ]
    specs = {point.point_id: point.spec for point in grid}
    stats.add_exported_file(harness.export_summary(summaries, specs, out / "summary.json"))

    stats.print_console_summary()
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    stats.save_detailed_report(out / f"sweep_report_{timestamp}.json")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, loader: ConfigLoader) -> int:
    spec = load_spec(args.spec)
    bundle = bd_analytics.e2_constants(spec)
    bounds = bd_analytics.regret_bounds(spec, args.T, bundle)
    per_state = pd.DataFrame({
        "s": range(spec.num_states),
        "m_pi0": bd_analytics.pi0_closed_form(spec).probabilities,
        "delta": bundle.delta,
        "f": bundle.f_table,
    })
    summary = {
        "spec_id": spec.spec_id,
        "diameter": None if bundle.diameter == float("inf") else bundle.diameter,
        "log_diameter": bundle.log_diameter,
        "big_f": bundle.big_f,
        "e2": bundle.e2,
        "q_max": None if bundle.q_max == float("inf") else bundle.q_max,
        "log_q_max": bundle.log_q_max,
        "m_max_last": bundle.m_max_last,
        "T": args.T,
        "upper_main": bounds.upper_main,
        "log_upper_secondary": bounds.log_upper_secondary,
        "minimax_lower": bounds.minimax_lower,
        "minimax_label": bounds.minimax_label,
    }
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        stem = spec.spec_id or "spec"
        per_state.to_csv(args.out / f"analyze_{stem}.csv", index=False, lineterminator="\n")
        with (args.out / f"analyze_{stem}.json").open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(summary, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        logging.info("📄 Analyse exportée dans %s", args.out)
    _print_json(summary)
    if args.out is None:
        print(per_state.to_csv(index=False, lineterminator="\n"), end="")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, loader: ConfigLoader) -> int:
    seed = args.seed if args.seed is not None else loader.verify.seed
    logging.info("🔍 Vérification par oracles (%s)", "rapide" if args.small else "complète")
    report = oracle.run_verification(
        small=args.small, seed=seed, strict=False, policy_cap=loader.verify.policy_cap
    )
    for check in report.checks:
        status = "✅" if check.passed else "❌"
        print(f"{status} {check.name} : {check.detail} ({check.duration:.2f}s)")
    if not report.passed:
        raise oracle.VerificationMismatch(
            ", ".join(check.name for check in report.failures)
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Regret d'UCRL2 sur les MDP de naissance et de mort : planification, apprentissage, analyses"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Activer les logs détaillés (niveau DEBUG)")
    parser.add_argument("--config-dir", type=Path, default=None, help="Dossier de configuration (defaults.json, .env)")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="Politique optimale, gain ρ* et span du biais")
    solve.add_argument("spec", type=Path, help="Spécification JSON")
    solve.set_defaults(handler=cmd_solve)

    def add_learner_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--mode", choices=("classic", "tweaked"), default=None, help="Ensembles de confiance")
        p.add_argument("--delta", type=float, default=None, help="Paramètre de confiance δ (mode classic)")
        p.add_argument("--checkpoints", default=None, help="Grille de points de contrôle : pow2 ou every:k")

    learn = sub.add_parser("learn", help="Une trace de regret")
    learn.add_argument("spec", type=Path, help="Spécification JSON")
    learn.add_argument("--T", type=int, required=True, help="Horizon")
    learn.add_argument("--seed", type=int, default=0, help="Graine du flux aléatoire")
    learn.add_argument("--out", type=Path, default=None, help="Dossier d'export CSV")
    add_learner_flags(learn)
    learn.set_defaults(handler=cmd_learn)

    sweep = sub.add_parser("sweep", help="Balayage grille × graines")
    sweep.add_argument("grid", type=Path, help="Grille JSON")
    sweep.add_argument("--seeds", type=int, required=True, help="Nombre de graines par point")
    sweep.add_argument("--out", type=Path, required=True, help="Dossier de sortie")
    sweep.add_argument("--master-seed", type=int, default=None, help="Graine maîtresse")
    sweep.add_argument("--parallelism", type=int, default=None, help="Nombre de processus")
    sweep.add_argument("--no-progress", action="store_true", help="Masquer la barre de progression")
    add_learner_flags(sweep)
    sweep.set_defaults(handler=cmd_sweep)

    analyze = sub.add_parser("analyze", help="Constantes analytiques et bornes de regret")
    analyze.add_argument("spec", type=Path, help="Spécification JSON")
    analyze.add_argument("--T", type=int, default=10**5, help="Horizon des bornes")
    analyze.add_argument("--out", type=Path, default=None, help="Dossier d'export")
    analyze.set_defaults(handler=cmd_analyze)

    verify = sub.add_parser("verify", help="Suite d'oracles sur les fixtures intégrées")
    verify.add_argument("--small", action="store_true", help="Contrôles rapides uniquement")
    verify.add_argument("--seed", type=int, default=None, help="Graine des instances aléatoires")
    verify.set_defaults(handler=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configuration du logging avec le niveau approprié
    log_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        force=True,
    )

    try:
        if args.config_dir is not None:
            loader = ConfigLoader(args.config_dir)
            loader.load_config()
        else:
            loader = get_config_loader()
        return args.handler(args, loader)
    except oracle.VerificationMismatch as exc:
        logging.error("❌ Vérification en échec : %s", exc)
        return EXIT_MISMATCH
    except (ValueError, FileNotFoundError) as exc:
        logging.error("❌ Entrée invalide : %s", exc)
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as exc:
        logging.error("❌ Échec de l'exécution : %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover - CLI entry
    sys.exit(main())
