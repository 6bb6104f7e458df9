"""Tests pour le harnais : traces, balayages, agrégation, exports et diagnostics."""

import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from birth_death_rl import harness
from birth_death_rl.harness import (
    CSV_COLUMNS,
    EPISODE_COLUMNS,
    CheckpointMismatchError,
    GridPoint,
    aggregate_traces,
    checkpoint_grid,
    run_experiment,
    sweep,
)
from birth_death_rl.mdp_core import Policy, build_spec
from birth_death_rl.oracle import fixture_spec
from birth_death_rl.planner import gain_and_bias, optimal_policy
from birth_death_rl.statistics import SweepStats
from birth_death_rl.ucrl2 import LearnerConfig

FIXTURES_DIR = Path(__file__).resolve().parents[1] / "config" / "fixtures"


@pytest.fixture
def spec():
    return fixture_spec("s3")


@pytest.fixture
def config(spec):
    return LearnerConfig.for_spec(spec)


@pytest.fixture
def traces(spec, config):
    return [run_experiment(spec, config, 1000, seed) for seed in range(3)]


@pytest.mark.parametrize(
    "horizon, scheme, expected",
    [
        (10, "pow2", [0, 1, 2, 4, 8, 10]),
        (8, "pow2", [0, 1, 2, 4, 8]),
        (1, "pow2", [0, 1]),
        (10, "every:3", [0, 3, 6, 9, 10]),
    ],
)
def test_checkpoint_grid(horizon, scheme, expected):
    """Tester les grilles pow2 et every:k."""
    np.testing.assert_array_equal(checkpoint_grid(horizon, scheme), expected)


@pytest.mark.parametrize("horizon, scheme", [(0, "pow2"), (10, "every:0"), (10, "every:x"), (10, "log")])
def test_checkpoint_grid_rejections(horizon, scheme):
    """Tester le rejet des horizons et des grilles invalides."""
    with pytest.raises(ValueError):
        checkpoint_grid(horizon, scheme)


def test_run_experiment_trace(spec, config):
    """Tester la forme de la trace, le regret nul en t = 0 et la cohérence avec ρ*."""
    trace = run_experiment(spec, config, 1000, seed=5)
    np.testing.assert_array_equal(trace.times, checkpoint_grid(1000))
    assert trace.realized_regret[0] == 0.0
    assert trace.pseudo_regret[0] == 0.0
    assert trace.optimal_gain == pytest.approx(optimal_policy(spec).gain)
    assert trace.horizon == 1000
    assert np.all(np.diff(trace.episode_index[1:]) >= 0)
    assert trace.episode_index[-1] == trace.num_episodes
    assert trace.state_visits.sum() == 1000
    assert trace.final_counts.sum() == 1000
    assert sum(record.length for record in trace.episode_log) == 1000
    assert all(record.membership_flag is not None for record in trace.episode_log)
    # Le pseudo-regret est au plus T·ρ* puisque r̄ ≥ 0
    assert trace.pseudo_regret[-1] <= 1000 * trace.optimal_gain
    assert list(trace.to_frame().columns) == CSV_COLUMNS


def test_run_experiment_is_deterministic(spec, config):
    """Tester que la même graine donne la même trace."""
    first = run_experiment(spec, config, 500, seed=42)
    second = run_experiment(spec, config, 500, seed=42)
    np.testing.assert_array_equal(first.realized_regret, second.realized_regret)
    np.testing.assert_array_equal(first.pseudo_regret, second.pseudo_regret)


def grid_points(spec):
    return [
        GridPoint("s3", spec, {"mode": "tweaked"}, 300),
        GridPoint("s3-classic", build_spec({**spec.to_dict(), "id": "s3-classic"}), {"mode": "classic"}, 300),
    ]


def test_sweep_independent_of_parallelism(spec):
    """Tester que le balayage donne les mêmes traces en séquentiel et avec 2 processus."""
    sequential = sweep(grid_points(spec), seeds=2, parallelism=1, master_seed=9, progress=False)
    parallel = sweep(grid_points(spec), seeds=2, parallelism=2, master_seed=9, progress=False)
    assert not sequential.failures and not parallel.failures
    assert [(t.spec_id, t.seed) for t in sequential.traces] == [(t.spec_id, t.seed) for t in parallel.traces]
    for left, right in zip(sequential.traces, parallel.traces):
        np.testing.assert_array_equal(left.realized_regret, right.realized_regret)
    assert [t.seed for t in sequential.traces] == [0, 1, 0, 1]


def test_sweep_records_failures_without_stopping(spec):
    """Tester qu'une exécution invalide est comptée en échec sans interrompre le balayage."""
    stats = SweepStats()
    grid = [GridPoint("ok", spec, {}, 100), GridPoint("ko", spec, {"mode": "inexistant"}, 100)]
    result = sweep(grid, seeds=2, progress=False, stats=stats)
    assert len(result.traces) == 2
    assert len(result.failures) == 2
    assert {failure.point_id for failure in result.failures} == {"ko"}
    assert stats.total_runs_planned == 4
    assert stats.total_completed == 2
    assert stats.total_failed == 2
    assert stats.errors_by_type == {"ValueError": 2}


def test_sweep_rejects_empty_grid():
    """Tester le rejet d'une grille vide."""
    with pytest.raises(ValueError):
        sweep([], seeds=1, progress=False)


def test_aggregate_traces(traces):
    """Tester moyenne, erreur standard (ddof=1), quantiles et pente sur la dernière décade."""
    summary = aggregate_traces(traces)
    pseudo = np.vstack([trace.pseudo_regret for trace in traces])
    np.testing.assert_allclose(summary.mean_pseudo, pseudo.mean(axis=0))
    np.testing.assert_allclose(summary.se_pseudo[1:], pseudo.std(axis=0, ddof=1)[1:] / math.sqrt(3))
    np.testing.assert_allclose(summary.quantiles[0.5], np.median(pseudo, axis=0))
    assert summary.num_traces == 3
    assert set(summary.quantiles) == {0.1, 0.5, 0.9}
    document = summary.to_dict()
    assert document["checkpoints"][-1]["t"] == 1000
    assert "q90_pseudo" in document["checkpoints"][0]


def test_aggregate_traces_rejections(spec, config, traces):
    """Tester le refus d'une seule trace et de grilles différentes."""
    with pytest.raises(ValueError):
        aggregate_traces(traces[:1])
    other = run_experiment(spec, config, 512, seed=0)
    with pytest.raises(CheckpointMismatchError):
        aggregate_traces([traces[0], other])


def test_export_and_load_traces(tmp_path, traces):
    """Tester l'export CSV (colonnes, ordre) et la relecture exacte des flottants."""
    path = harness.export_traces(traces, tmp_path / "traces.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == CSV_COLUMNS
    assert len(frame) == sum(trace.times.size for trace in traces)

    loaded = harness.load_traces(path)
    assert [(t.spec_id, t.seed) for t in loaded] == [("s3", 0), ("s3", 1), ("s3", 2)]
    for original, reloaded in zip(traces, loaded):
        np.testing.assert_array_equal(original.times, reloaded.times)
        np.testing.assert_array_equal(original.realized_regret, reloaded.realized_regret)
        np.testing.assert_array_equal(original.pseudo_regret, reloaded.pseudo_regret)


def test_load_traces_errors(tmp_path):
    """Tester les erreurs de relecture : fichier absent et colonnes manquantes."""
    with pytest.raises(FileNotFoundError):
        harness.load_traces(tmp_path / "absent.csv")
    broken = tmp_path / "broken.csv"
    broken.write_text("spec_id,seed,t\ns3,0,1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="Colonnes manquantes"):
        harness.load_traces(broken)


def test_export_episodes(tmp_path, traces):
    """Tester le journal d'épisodes exporté."""
    path = harness.export_episodes(traces, tmp_path / "episodes.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == EPISODE_COLUMNS
    assert len(frame) == sum(trace.num_episodes for trace in traces)
    assert frame.groupby("seed")["episode_length"].sum().tolist() == [1000, 1000, 1000]


def test_export_summary(tmp_path, spec, traces):
    """Tester la synthèse JSON avec les bornes de référence et le libellé minimax."""
    summary = aggregate_traces(traces)
    path = harness.export_summary([summary], {"s3": spec}, tmp_path / "summary.json")
    document = json.loads(path.read_text(encoding="utf-8"))
    assert document[0]["spec_id"] == "s3"
    bounds = document[0]["bounds"]
    assert bounds[0]["upper_main"] is None
    assert bounds[-1]["t"] == 1000
    assert bounds[-1]["upper_main"] > 0
    assert "minimax_label" in document[0]


def test_bound_overlays(spec):
    """Tester les bornes absentes pour t < 2 et présentes au-delà."""
    overlays = harness.bound_overlays(spec, [0, 1, 2, 4])
    assert overlays[0]["upper_main"] is None
    assert overlays[1]["minimax_lower"] is None
    assert overlays[2]["minimax_lower"] == pytest.approx(0.015 * math.sqrt(20 * 3 * 2 * 2))


def test_load_grid_fixture():
    """Tester la grille fournie : fichiers relatifs, identifiants et spécification en ligne."""
    points, checkpoints = harness.load_grid(FIXTURES_DIR / "grid.json")
    assert checkpoints == "pow2"
    assert [point.point_id for point in points] == ["s3", "s3-classic", "s8"]
    assert points[1].spec.spec_id == "s3-classic"
    assert points[1].learner == {"mode": "classic", "delta": 0.05}
    assert points[2].spec.num_states == 8
    assert points[2].horizon == 100000


@pytest.mark.parametrize(
    "document, message",
    [
        ({"points": [{"id": "x", "horizon": 10}]}, "spec"),
        ({"points": [{"id": "x", "spec_file": "s3.json", "horizon": 0}]}, "Horizon"),
    ],
)
def test_load_grid_errors(tmp_path, document, message):
    """Tester les points de grille invalides."""
    (tmp_path / "s3.json").write_text((FIXTURES_DIR / "s3.json").read_text(encoding="utf-8"), encoding="utf-8")
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ValueError, match=message):
        harness.load_grid(path)


def test_episode_diagnostics(spec, config):
    """Tester le nombre d'épisodes sous SA·log₂(8T/SA) et les ratios de visites."""
    trace = run_experiment(spec, config, 4000, seed=1)
    diagnostics = harness.episode_diagnostics(trace, spec)
    assert diagnostics.within_bound
    assert diagnostics.num_episodes == trace.num_episodes
    assert diagnostics.episode_bound == pytest.approx(6 * math.log2(8 * 4000 / 6))
    assert diagnostics.visit_ratio_violations == 0
    assert len(diagnostics.worst_count_ratios) == trace.num_episodes
    assert harness.episode_bound(spec, 6) is None


def test_no_optimism_violation(spec, config):
    """Tester ρ̃_k ≥ ρ* - r_max/√t_k à chaque épisode où le vrai MDP est plausible."""
    trace = run_experiment(spec, config, 3000, seed=2)
    assert harness.optimism_violations(trace, spec.r_max) == []


def test_confidence_failure_rate(spec, config):
    """Tester que la fréquence d'échec de l'appartenance reste sous S/(2t³) + 3σ."""
    report = harness.confidence_failure_rate(spec, config, runs=10, horizon=100, times=(10, 100))
    assert set(report) == {10, 100}
    assert report[10]["bound"] == pytest.approx(3 / 2000)
    assert all(entry["within"] for entry in report.values())


def test_occupancy_dominance(spec, config):
    """Tester que l'occupation empirique ne dépasse pas la queue de π⁰ au-delà du bruit."""
    trace = run_experiment(spec, config, 5000, seed=4)
    gap = harness.occupancy_dominance(trace, spec)
    assert gap[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(gap <= 0.15)


def speed_spec(num_states, max_speed=2):
    """Paramètres de la fixture S=8 (λ = μ = 1, C = 2), taille et vitesse maximale variables."""
    energy = [0.0, 1.0, 4.0][: max_speed + 1]
    return build_spec({
        "id": f"S{num_states}A{max_speed}", "lambda": 1.0, "mu": 1.0, "deadline_cost": 2.0,
        "num_states": num_states, "max_speed": max_speed, "lambda_max": 1.0, "mu_max": 1.0,
        "energy_table": energy,
    })


@pytest.mark.slow
def test_single_action_regret_stays_bounded():
    """Tester A_max = 0 : une seule politique, regrets moyens bornés par span(h) à 3 erreurs standard près."""
    single = speed_spec(3, max_speed=0)
    horizon = 10**4
    evaluation = gain_and_bias(single, Policy.zeros(single))
    config = LearnerConfig.for_spec(single)
    runs = [run_experiment(single, config, horizon, seed) for seed in range(20)]
    assert runs[0].optimal_gain == pytest.approx(evaluation.gain)

    summary = aggregate_traces(runs)
    assert abs(summary.mean_pseudo[-1]) / horizon < 0.01
    assert abs(summary.mean_pseudo[-1]) <= evaluation.span + 3.0 * summary.se_pseudo[-1]
    assert abs(summary.mean_realized[-1]) <= evaluation.span + 3.0 * summary.se_realized[-1]


@pytest.mark.slow
def test_regret_flavours_agree_on_average(spec, config):
    """Tester que pseudo-regret et regret réalisé ont la même moyenne sur les graines (bruit centré)."""
    runs = [run_experiment(spec, config, 10**4, seed) for seed in range(30)]
    gaps = np.array([run.pseudo_regret[-1] - run.realized_regret[-1] for run in runs])
    assert abs(gaps.mean()) <= 3.0 * stats.sem(gaps)
    assert abs(gaps.mean()) / 10**4 < 0.01


@pytest.mark.slow
def test_sweep_regret_nearly_independent_of_state_count():
    """Tester que le pseudo-regret moyen à T = 10⁵ varie de moins de 25 % pour S ∈ {8, 16, 32}."""
    grid = [GridPoint(f"S{S}", speed_spec(S), {"mode": "tweaked"}, 10**5) for S in (8, 16, 32)]
    result = sweep(grid, seeds=10, parallelism=4, master_seed=11, progress=False)
    assert not result.failures
    means = [
        aggregate_traces(traces).mean_pseudo[-1]
        for traces in harness.group_by_spec(result.traces).values()
    ]
    assert len(means) == 3
    assert (max(means) - min(means)) / max(means) < 0.25
