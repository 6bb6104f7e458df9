"""Harnais d'expériences : traces de regret, balayages, agrégation et diagnostics.

Chaque exécution (point de grille, graine) dispose de son propre flux
``numpy.random.Generator`` dérivé de ``SeedSequence(master_seed, spawn_key=(i, j))`` ;
les résultats ne dépendent donc pas de l'ordonnancement des processus.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats as scipy_stats
from tqdm import tqdm

from . import bd_analytics, oracle, planner
from .mdp_core import MdpSpec, Policy, load_spec, build_spec, sample_step
from .statistics import SweepStats
from .ucrl2 import (
    EpisodeRecord,
    EviAbortError,
    LearnerConfig,
    Ucrl2Learner,
    membership_at,
    membership_check,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["spec_id", "seed", "t", "realized_regret", "pseudo_regret", "episode_index"]
EPISODE_COLUMNS = ["spec_id", "seed", "k", "t_k", "episode_length", "rho_tilde", "evi_iterations", "membership_flag"]
QUANTILES = (0.1, 0.5, 0.9)
PROPAGATION_CAP = 200_000
Seed = Union[int, np.random.SeedSequence]


class CheckpointMismatchError(ValueError):
    """Traces agrégées sur des grilles de points de contrôle différentes."""


@dataclass
class RegretTrace:
    """Regret réalisé et pseudo-regret aux points de contrôle d'une exécution."""

    spec_id: str
    seed: int
    times: np.ndarray
    realized_regret: np.ndarray
    pseudo_regret: np.ndarray
    episode_index: np.ndarray
    episode_log: List[EpisodeRecord] = field(default_factory=list, repr=False)
    num_episodes: int = 0
    membership_failures: int = 0
    wall_time: float = 0.0
    optimal_gain: float = math.nan
    state_visits: Optional[np.ndarray] = field(default=None, repr=False)
    final_counts: Optional[np.ndarray] = field(default=None, repr=False)
    visit_ratio_sums: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return int(self.times[-1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "spec_id": self.spec_id,
            "seed": self.seed,
            "t": self.times,
            "realized_regret": self.realized_regret,
            "pseudo_regret": self.pseudo_regret,
            "episode_index": self.episode_index,
        }, columns=CSV_COLUMNS)


@dataclass(frozen=True)
class GridPoint:
    point_id: str
    spec: MdpSpec
    learner: Mapping[str, Any]
    horizon: int


@dataclass
class RunFailure:
    point_id: str
    seed: int
    error_type: str
    message: str


@dataclass
class SweepResult:
    traces: List[RegretTrace] = field(default_factory=list)
    failures: List[RunFailure] = field(default_factory=list)


@dataclass
class AggregateSummary:
    """Moyennes, erreurs standard et quantiles par point de contrôle, pente log-log."""

    spec_id: str
    times: np.ndarray
    num_traces: int
    mean_realized: np.ndarray
    se_realized: np.ndarray
    mean_pseudo: np.ndarray
    se_pseudo: np.ndarray
    quantiles: Dict[float, np.ndarray]
    slope: float
    intercept: float

    def to_dict(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "num_traces": self.num_traces,
            "slope": self.slope,
            "intercept": self.intercept,
            "checkpoints": [
                {
                    "t": int(t),
                    "mean_realized": float(self.mean_realized[i]),
                    "se_realized": float(self.se_realized[i]),
                    "mean_pseudo": float(self.mean_pseudo[i]),
                    "se_pseudo": float(self.se_pseudo[i]),
                    **{f"q{int(q * 100)}_pseudo": float(v[i]) for q, v in self.quantiles.items()},
                }
                for i, t in enumerate(self.times)
            ],
        }


@dataclass
class EpisodeDiagnostics:
    num_episodes: int
    episode_bound: Optional[float]
    within_bound: bool
    visit_ratio_violations: int
    worst_count_ratios: List[float] = field(default_factory=list)


def checkpoint_grid(horizon: int, scheme: str = "pow2") -> np.ndarray:
    """Points de contrôle : 0, puissances de 2 sous T, puis T ; ou ``every:k``."""
    if horizon < 1:
        raise ValueError(f"L'horizon doit être ≥ 1 (T={horizon})")
    if scheme == "pow2":
        powers = [2**i for i in range(int(math.log2(horizon)) + 1) if 2**i < horizon]
        points = [0, *powers, horizon]
    elif scheme.startswith("every:"):
        try:
            step = int(scheme.split(":", 1)[1])
        except ValueError as exc:
            raise ValueError(f"Grille de points de contrôle invalide : {scheme!r}") from exc
        if step < 1:
            raise ValueError(f"Pas de points de contrôle invalide : {step}")
        points = [*range(0, horizon, step), horizon]
    else:
        raise ValueError(f"Grille de points de contrôle inconnue : {scheme!r}")
    return np.unique(np.asarray(points, dtype=np.int64))


@lru_cache(maxsize=64)
def optimal_gain(spec: MdpSpec) -> float:
    """ρ* de ``spec``, calculé une fois par spécification."""
    return planner.optimal_policy(spec).gain


def run_experiment(
    spec: MdpSpec,
    learner_config: LearnerConfig,
    horizon: int,
    seed: Seed,
    checkpoints: str = "pow2",
    seed_label: Optional[int] = None,
) -> RegretTrace:
    """Simuler T pas de l'apprenant depuis s_0 = 0 et enregistrer les deux regrets."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    label = seed_label if seed_label is not None else (seed if isinstance(seed, int) else 0)
    rho_star = optimal_gain(spec)
    grid = checkpoint_grid(horizon, checkpoints)

    learner = Ucrl2Learner.for_spec(spec, learner_config)
    mean_table = spec.mean_reward_table().tolist()
    realized = np.zeros(grid.size)
    pseudo = np.zeros(grid.size)
    episodes = np.zeros(grid.size, dtype=np.int64)
    visits = np.zeros(spec.num_states, dtype=np.int64)
    membership_failures = 0

    state, observation = 0, None
    reward_total = mean_total = 0.0
    next_checkpoint = 1
    for t in range(1, horizon + 1):
        previous_episode = learner.state.episode_index
        try:
            action = learner.next_action(state, observation)
        except EviAbortError as exc:
            exc.spec_id, exc.seed = spec.spec_id, label
            raise
        if learner.state.episode_index != previous_episode:
            member = membership_check(spec, learner.state, learner.radii)
            learner.episode_log[-1].membership_flag = member
            membership_failures += not member

        next_state, reward = sample_step(spec, state, action, rng)
        reward_total += reward
        mean_total += mean_table[state][action]
        visits[state] += 1
        observation = (state, action, reward, next_state)
        state = next_state

        if t == grid[next_checkpoint]:
            realized[next_checkpoint] = t * rho_star - reward_total
            pseudo[next_checkpoint] = t * rho_star - mean_total
            episodes[next_checkpoint] = learner.state.episode_index
            next_checkpoint = min(next_checkpoint + 1, grid.size - 1)

    learner.observe(observation)
    learner.finalize()
    wall_time = time.perf_counter() - started
    logger.debug(
        "Exécution %s/%s : T=%d, K_T=%d, regret réalisé %.4g (%.2fs)",
        spec.spec_id, label, horizon, learner.num_episodes, realized[-1], wall_time,
    )
    return RegretTrace(
        spec_id=spec.spec_id,
        seed=int(label),
        times=grid,
        realized_regret=realized,
        pseudo_regret=pseudo,
        episode_index=episodes,
        episode_log=learner.episode_log,
        num_episodes=learner.num_episodes,
        membership_failures=membership_failures,
        wall_time=wall_time,
        optimal_gain=rho_star,
        state_visits=visits,
        final_counts=learner.state.visit_counts.copy(),
        visit_ratio_sums=learner.visit_ratio_sums.copy(),
    )


def _run_task(task: Tuple[int, int, GridPoint, int, str]) -> Union[RegretTrace, RunFailure]:
    point_index, seed_index, point, master_seed, checkpoints = task
    seed = np.random.SeedSequence(master_seed, spawn_key=(point_index, seed_index))
    try:
        config = LearnerConfig.for_spec(point.spec, point.learner)
        return run_experiment(point.spec, config, point.horizon, seed, checkpoints, seed_label=seed_index)
    except (ValueError, RuntimeError) as exc:
        return RunFailure(point.point_id, seed_index, type(exc).__name__, str(exc))


def sweep(
    grid: Sequence[GridPoint],
    seeds: int,
    parallelism: int = 1,
    master_seed: int = 0,
    checkpoints: str = "pow2",
    progress: bool = True,
    stats: Optional[SweepStats] = None,
) -> SweepResult:
    """Toutes les paires (point, graine), en séquentiel ou avec un ``multiprocessing.Pool``.

    L'ordre des résultats est celui des tâches ; un échec individuel est
    enregistré sans interrompre le balayage.
    """
    if not grid:
        raise ValueError("La grille de balayage est vide")
    tasks = [
        (i, j, point, master_seed, checkpoints)
        for i, point in enumerate(grid)
        for j in range(seeds)
    ]
    stats = stats if stats is not None else SweepStats()
    stats.total_runs_planned += len(tasks)
    logger.info("🔍 Balayage : %d points × %d graines (parallélisme %d)", len(grid), seeds, parallelism)

    result = SweepResult()
    if not tasks:
        return result

    bar = tqdm(total=len(tasks), desc="Balayage", unit="run", disable=None if progress else True)
    try:
        if parallelism > 1:
            with Pool(processes=parallelism) as pool:
                outcomes = []
                for outcome in pool.imap(_run_task, tasks):
                    outcomes.append(outcome)
                    bar.update(1)
        else:
            outcomes = []
            for task in tasks:
                outcomes.append(_run_task(task))
                bar.update(1)
    finally:
        bar.close()

    for outcome in outcomes:
        if isinstance(outcome, RunFailure):
            result.failures.append(outcome)
            stats.add_failed_run(f"{outcome.point_id}/{outcome.seed}", outcome.error_type, outcome.message)
            logger.warning("⚠️ Exécution %s/%d en échec : %s", outcome.point_id, outcome.seed, outcome.message)
        else:
            result.traces.append(outcome)
            stats.add_completed_run(outcome.horizon, outcome.num_episodes)
    logger.info("✅ Balayage terminé : %d traces, %d échecs", len(result.traces), len(result.failures))
    return result


def aggregate_traces(traces: Sequence[RegretTrace]) -> AggregateSummary:
    """Moyenne, erreur standard et quantiles par point de contrôle.

    La pente est ajustée par moindres carrés sur log(moyenne du pseudo-regret)
    contre log t, sur la dernière décade (t ≥ T/10, moyenne positive).
    """
    if len(traces) < 2:
        raise ValueError(f"Au moins 2 traces sont nécessaires ({len(traces)} reçue(s))")
    times = traces[0].times
    for trace in traces[1:]:
        if not np.array_equal(trace.times, times):
            raise CheckpointMismatchError(
                f"Points de contrôle différents entre {traces[0].spec_id}/{traces[0].seed} "
                f"et {trace.spec_id}/{trace.seed}"
            )
    realized = np.vstack([trace.realized_regret for trace in traces])
    pseudo = np.vstack([trace.pseudo_regret for trace in traces])
    mean_pseudo = pseudo.mean(axis=0)

    horizon = times[-1]
    window = (times >= horizon / 10) & (times > 0) & (mean_pseudo > 0)
    if window.sum() >= 2:
        fit = scipy_stats.linregress(np.log(times[window]), np.log(mean_pseudo[window]))
        slope, intercept = float(fit.slope), float(fit.intercept)
    else:
        slope = intercept = math.nan

    return AggregateSummary(
        spec_id=traces[0].spec_id,
        times=times,
        num_traces=len(traces),
        mean_realized=realized.mean(axis=0),
        se_realized=scipy_stats.sem(realized, axis=0, ddof=1),
        mean_pseudo=mean_pseudo,
        se_pseudo=scipy_stats.sem(pseudo, axis=0, ddof=1),
        quantiles={q: np.quantile(pseudo, q, axis=0) for q in QUANTILES},
        slope=slope,
        intercept=intercept,
    )


def group_by_spec(traces: Iterable[RegretTrace]) -> Dict[str, List[RegretTrace]]:
    groups: Dict[str, List[RegretTrace]] = {}
    for trace in traces:
        groups.setdefault(trace.spec_id, []).append(trace)
    return groups


def episode_bound(spec: MdpSpec, horizon: int) -> Optional[float]:
    """SA·log₂(8T/SA), défini pour T > SA."""
    sa = spec.num_states * spec.num_actions
    if horizon <= sa:
        return None
    return sa * math.log2(8.0 * horizon / sa)


def episode_diagnostics(trace: RegretTrace, spec: MdpSpec, length_threshold: int = 0) -> EpisodeDiagnostics:
    """Nombre d'épisodes, somme des ratios de visites par paire, ratio du pire compteur.

    Le ratio ν_k(x_k, a_k)/(m^max(S-1)·I_k), où (x_k, a_k) minimise N_{t_k}, est
    rapporté pour les épisodes plus longs que ``length_threshold``, jamais vérifié.
    """
    bound = episode_bound(spec, trace.horizon)
    within = bound is None or trace.num_episodes <= bound

    violations = 0
    if trace.visit_ratio_sums is not None and trace.final_counts is not None:
        limit = 3.0 * np.sqrt(trace.final_counts)
        violations = int(np.sum(trace.visit_ratio_sums > limit + 1e-9))

    m_max_last = math.exp(planner.log_stationary_measure(spec, Policy.full_speed(spec))[-1])
    ratios = []
    for record in trace.episode_log:
        if record.length <= length_threshold or record.episode_counts is None:
            continue
        x, a = np.unravel_index(np.argmin(record.start_counts), record.start_counts.shape)
        ratios.append(float(record.episode_counts[x, a]) / (m_max_last * record.length))
    return EpisodeDiagnostics(
        num_episodes=trace.num_episodes,
        episode_bound=bound,
        within_bound=within,
        visit_ratio_violations=violations,
        worst_count_ratios=ratios,
    )


def optimism_violations(trace: RegretTrace, r_max: float) -> List[EpisodeRecord]:
    """Épisodes où le vrai MDP est plausible mais ρ̃_k < ρ* - r_max/√t_k."""
    return [
        record
        for record in trace.episode_log
        if record.membership_flag
        and record.rho_tilde < trace.optimal_gain - r_max / math.sqrt(record.start)
    ]


def confidence_failure_rate(
    spec: MdpSpec,
    learner_config: LearnerConfig,
    runs: int,
    horizon: int,
    times: Sequence[int] = (10, 100, 1000),
    master_seed: int = 0,
) -> Dict[int, Dict[str, float]]:
    """Fréquence d'échec de l'appartenance au temps t, comparée à S/(2t³) + 3σ."""
    checkpoints = sorted(t for t in times if t <= horizon)
    failures = {t: 0 for t in checkpoints}
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(run,)))
        learner = Ucrl2Learner.for_spec(spec, learner_config)
        state, observation = 0, None
        for t in range(1, horizon + 1):
            action = learner.next_action(state, observation)
            if t in failures and not membership_at(spec, learner.state, t, learner_config):
                failures[t] += 1
            next_state, reward = sample_step(spec, state, action, rng)
            observation = (state, action, reward, next_state)
            state = next_state

    report = {}
    for t in checkpoints:
        bound = spec.num_states / (2.0 * t**3)
        p = min(bound, 1.0)
        band = 3.0 * math.sqrt(p * (1.0 - p) / runs) if runs else math.inf
        frequency = failures[t] / runs if runs else 0.0
        report[t] = {
            "failures": failures[t],
            "frequency": frequency,
            "bound": bound,
            "band": band,
            "within": frequency <= bound + band,
        }
    return report


def occupancy_dominance(trace: RegretTrace, spec: MdpSpec) -> np.ndarray:
    """Excès de la queue d'occupation empirique sur la queue exacte moyenne sous π⁰.

    La référence moyenne les lois exactes μ_t^{π⁰} pour t < T (au-delà de
    ``PROPAGATION_CAP`` pas, la dernière loi calculée est prolongée).
    """
    if trace.state_visits is None:
        raise ValueError("La trace ne contient pas les visites par état")
    horizon = trace.horizon
    steps = min(horizon, PROPAGATION_CAP)
    marginals = oracle.exact_distribution_propagation(spec, Policy.zeros(spec), steps).marginals
    reference = marginals[:steps].sum(axis=0) + (horizon - steps) * marginals[steps]
    reference_tail = np.cumsum((reference / horizon)[::-1])[::-1]
    occupancy = trace.state_visits / trace.state_visits.sum()
    empirical_tail = np.cumsum(occupancy[::-1])[::-1]
    return empirical_tail - reference_tail


def bound_overlays(spec: MdpSpec, times: Sequence[int]) -> List[Dict[str, Optional[float]]]:
    """Bornes de référence à chaque point de contrôle (``None`` pour t < 2)."""
    bundle = bd_analytics.e2_constants(spec)
    overlays = []
    for t in times:
        if t < 2:
            overlays.append({"t": int(t), "upper_main": None, "log_upper_secondary": None, "minimax_lower": None})
        else:
            overlays.append(bd_analytics.regret_bounds(spec, int(t), bundle).to_dict())
    return overlays


def export_traces(traces: Sequence[RegretTrace], path: Path) -> Path:
    """CSV une ligne par point de contrôle, colonnes dans l'ordre de ``CSV_COLUMNS``."""
    path = Path(path)
    frame = (
        pd.concat([trace.to_frame() for trace in traces], ignore_index=True)
        if traces
        else pd.DataFrame(columns=CSV_COLUMNS)
    )
    try:
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"Écriture impossible : {path}") from exc
    logger.info("📄 Traces exportées : %s (%d lignes)", path, len(frame))
    return path


def export_episodes(traces: Sequence[RegretTrace], path: Path) -> Path:
    path = Path(path)
    rows = [
        {"spec_id": trace.spec_id, "seed": trace.seed, **record.to_dict()}
        for trace in traces
        for record in trace.episode_log
    ]
    frame = pd.DataFrame(rows, columns=EPISODE_COLUMNS)
    try:
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"Écriture impossible : {path}") from exc
    return path


def load_traces(path: Path) -> List[RegretTrace]:
    """Relire un CSV de traces (sans journal d'épisodes)."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"spec_id": str}, float_precision="round_trip")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"Fichier de traces introuvable : {path}") from exc
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"Colonnes manquantes dans {path} : {missing}")
    traces = []
    for (spec_id, seed), group in frame.groupby(["spec_id", "seed"], sort=False):
        traces.append(RegretTrace(
            spec_id=str(spec_id),
            seed=int(seed),
            times=group["t"].to_numpy(dtype=np.int64),
            realized_regret=group["realized_regret"].to_numpy(dtype=float),
            pseudo_regret=group["pseudo_regret"].to_numpy(dtype=float),
            episode_index=group["episode_index"].to_numpy(dtype=np.int64),
        ))
    return traces


def export_summary(
    summaries: Sequence[AggregateSummary], specs: Mapping[str, MdpSpec], path: Path
) -> Path:
    """JSON des agrégats avec les bornes de référence par point de contrôle."""
    path = Path(path)
    document = []
    for summary in summaries:
        entry = summary.to_dict()
        spec = specs.get(summary.spec_id)
        if spec is not None:
            entry["bounds"] = bound_overlays(spec, summary.times)
            entry["minimax_label"] = bd_analytics.MINIMAX_LABEL
        document.append(entry)
    try:
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(document, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"Écriture impossible : {path}") from exc
    logger.info("📄 Synthèse exportée : %s", path)
    return path


def load_grid(path: Path) -> Tuple[List[GridPoint], str]:
    """Lire une grille JSON ``{"points": [...], "checkpoints": "pow2"}``.

    ``spec_file`` est résolu relativement au dossier de la grille.
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"Grille introuvable : {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"JSON invalide dans {path}") from exc

    points = []
    for index, entry in enumerate(document.get("points", [])):
        if "spec" in entry:
            params = dict(entry["spec"])
            params.setdefault("id", entry.get("id", f"point{index}"))
            spec = build_spec(params)
        elif "spec_file" in entry:
            spec = load_spec(path.parent / entry["spec_file"])
        else:
            raise ValueError(f"Point {index} de {path} sans 'spec' ni 'spec_file'")
        point_id = str(entry.get("id", spec.spec_id or f"point{index}"))
        if spec.spec_id != point_id:
            spec = build_spec({**spec.to_dict(), "id": point_id})
        horizon = int(entry.get("horizon", 0))
        if horizon < 1:
            raise ValueError(f"Horizon invalide pour le point {point_id} : {horizon}")
        points.append(GridPoint(point_id, spec, dict(entry.get("learner", {})), horizon))
    return points, str(document.get("checkpoints", "pow2"))
