"""Apprenant UCRL2 pour les MDP de naissance et de mort.

Compteurs et estimations empiriques, ensembles de confiance (mode ``classic``
avec δ, mode ``tweaked`` restreint au support), Extended Value Iteration
vectorisée sur le voisinage {s-1, s, s+1} et boucle d'épisodes à doublement
des compteurs.

L'apprenant ne connaît de l'environnement que S, A_max+1 et r_max.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .mdp_core import MdpSpec, structural_support
from .planner import greedy_speeds

logger = logging.getLogger(__name__)

MODES = ("classic", "tweaked")
ACCURACY_MODES = ("r_max", "unit")
DEFAULT_MAX_EVI_ITERATIONS = 20000
APERIODICITY_KAPPA = 0.01
# Position des voisins s-1, s, s+1 dans les tableaux de forme (..., 3)
NEIGHBOUR_OFFSETS = np.array([-1, 0, 1])

Observation = Tuple[int, int, float, int]


class EviAbortError(RuntimeError):
    """EVI n'a pas convergé, même après la transformation apériodique."""

    def __init__(self, message: str, *, t_k: int = 0, episode: int = 0, iterations: int = 0):
        super().__init__(message)
        self.t_k = t_k
        self.episode = episode
        self.iterations = iterations


@dataclass(frozen=True)
class LearnerConfig:
    """Paramètres de l'apprenant ; ``delta`` ne sert qu'en mode ``classic``."""

    r_max_known: float
    mode: str = "tweaked"
    delta: float = 0.05
    evi_accuracy_mode: str = "r_max"
    max_evi_iterations: int = DEFAULT_MAX_EVI_ITERATIONS

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"Mode inconnu : {self.mode!r} (attendu {MODES})")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"δ doit être dans ]0, 1[ : {self.delta}")
        if not self.r_max_known > 0:
            raise ValueError(f"r_max connu doit être strictement positif : {self.r_max_known}")
        if self.evi_accuracy_mode not in ACCURACY_MODES:
            raise ValueError(f"Précision EVI inconnue : {self.evi_accuracy_mode!r}")
        if self.max_evi_iterations < 1:
            raise ValueError("max_evi_iterations doit être ≥ 1")

    @classmethod
    def for_spec(cls, spec: MdpSpec, overrides: Optional[Mapping[str, Any]] = None) -> "LearnerConfig":
        """Configuration pour ``spec`` (r_max transmis), surchargée par ``overrides``."""
        values = dict(overrides or {})
        values.setdefault("r_max_known", spec.r_max)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Clés de configuration inconnues : {sorted(unknown)}")
        return cls(**values)

    def evi_threshold(self, t_k: int) -> float:
        scale = self.r_max_known if self.evi_accuracy_mode == "r_max" else 1.0
        return scale / math.sqrt(t_k)


@dataclass
class LearnerState:
    """Compteurs de l'apprenant ; ``visit_counts`` est N_t, ``episode_start_counts`` N_{t_k}."""

    visit_counts: np.ndarray
    episode_counts: np.ndarray
    episode_start_counts: np.ndarray
    reward_sums: np.ndarray
    transition_counts: np.ndarray
    current_policy: np.ndarray
    episode_index: int = 0
    episode_start: int = 0
    time: int = 0

    @classmethod
    def empty(cls, num_states: int, num_actions: int) -> "LearnerState":
        return cls(
            visit_counts=np.zeros((num_states, num_actions), dtype=np.int64),
            episode_counts=np.zeros((num_states, num_actions), dtype=np.int64),
            episode_start_counts=np.zeros((num_states, num_actions), dtype=np.int64),
            reward_sums=np.zeros((num_states, num_actions)),
            transition_counts=np.zeros((num_states, num_actions, num_states), dtype=np.int64),
            current_policy=np.zeros(num_states, dtype=int),
        )

    @property
    def num_states(self) -> int:
        return self.visit_counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.visit_counts.shape[1]


@dataclass
class Estimates:
    rewards: np.ndarray
    transitions: np.ndarray


@dataclass
class Radii:
    rewards: np.ndarray
    transitions: np.ndarray


@dataclass
class EviResult:
    policy: np.ndarray
    rho_tilde: float
    values: np.ndarray
    iterations: int
    converged: bool
    used_fallback: bool = False
    final_span: float = math.nan


@dataclass
class EpisodeRecord:
    """Journal d'un épisode : (k, t_k, durée, ρ̃_k, itérations EVI, appartenance)."""

    index: int
    start: int
    rho_tilde: float
    evi_iterations: int
    start_counts: np.ndarray = field(repr=False)
    length: int = 0
    membership_flag: Optional[bool] = None
    used_fallback: bool = False
    episode_counts: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "k": self.index,
            "t_k": self.start,
            "episode_length": self.length,
            "rho_tilde": self.rho_tilde,
            "evi_iterations": self.evi_iterations,
            "membership_flag": self.membership_flag,
        }


def neighbourhood(num_states: int) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (S, 3) des voisins s-1, s, s+1 (tronqués) et masque de validité."""
    states = np.arange(num_states)[:, None]
    raw = states + NEIGHBOUR_OFFSETS[None, :]
    mask = (raw >= 0) & (raw < num_states)
    return np.clip(raw, 0, num_states - 1), mask


def empirical_estimates(state: LearnerState) -> Estimates:
    """r̂ = somme/max(1, N), p̂ = n(s,a,·)/max(1, N) ; uniforme sur le support si N = 0."""
    counts = state.visit_counts
    divisor = np.maximum(1, counts).astype(float)
    rewards = state.reward_sums / divisor
    transitions = state.transition_counts / divisor[:, :, None]

    unvisited = np.argwhere(counts == 0)
    for s, a in unvisited:
        support = list(structural_support(state.num_states, int(s)))
        transitions[s, a] = 0.0
        transitions[s, a, support] = 1.0 / len(support)
    return Estimates(rewards=rewards, transitions=transitions)


def confidence_radii(
    config: LearnerConfig, t_k: int, counts, num_states: int, num_actions: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Rayons (ε_r, ε_p), bornés par r_max et 2."""
    if t_k < 1:
        raise ValueError(f"t_k doit être ≥ 1 : {t_k}")
    n = np.maximum(1.0, np.asarray(counts, dtype=float))
    A, S = num_actions, num_states
    if config.mode == "classic":
        eps_r = config.r_max_known * np.sqrt(7.0 * math.log(2.0 * S * A * t_k / config.delta) / (2.0 * n))
        eps_p = np.sqrt(14.0 * S * math.log(2.0 * A * t_k / config.delta) / n)
    else:
        eps_r = config.r_max_known * np.sqrt(2.0 * math.log(2.0 * A * t_k) / n)
        eps_p = np.sqrt(8.0 * math.log(2.0 * A * t_k) / n)
    return np.minimum(eps_r, config.r_max_known), np.minimum(eps_p, 2.0)


def _inner_max_batch(
    p: np.ndarray, eps: np.ndarray, values: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Maximisation interne ligne par ligne sur des voisinages de 3 positions.

    Ajoute min(ε/2, 1 - p(best)) à la meilleure position puis retire l'excédent
    par valeur croissante ; les positions masquées ont une masse nulle.
    """
    rows = np.arange(p.shape[0])
    best = np.argmax(np.where(mask, values, -np.inf), axis=1)
    q = p.copy()
    excess = np.minimum(eps / 2.0, 1.0 - q[rows, best])
    q[rows, best] += excess

    ranking = np.where(mask, values, np.inf)
    ranking[rows, best] = np.inf
    order = np.argsort(ranking, axis=1, kind="stable")
    for rank in range(p.shape[1]):
        idx = order[:, rank]
        take = np.where(idx == best, 0.0, np.minimum(q[rows, idx], excess))
        q[rows, idx] -= take
        excess -= take
    return q


def inner_max(p_hat, eps_p: float, u, support: Sequence[int]) -> np.ndarray:
    """Distribution q maximisant q·u dans la boule L1 de rayon ε_p autour de p̂, sur ``support``."""
    p_hat = np.asarray(p_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    support = np.asarray(tuple(support), dtype=int)
    width = len(NEIGHBOUR_OFFSETS)
    if not 0 < support.size <= width:
        raise ValueError(f"Support de taille {support.size} non géré (1 à {width})")

    p = np.zeros((1, width))
    values = np.zeros((1, width))
    mask = np.zeros((1, width), dtype=bool)
    p[0, : support.size] = p_hat[support]
    values[0, : support.size] = u[support]
    mask[0, : support.size] = True
    q_slots = _inner_max_batch(p, np.array([float(eps_p)]), values, mask)

    q = np.zeros_like(p_hat)
    q[support] = q_slots[0, : support.size]
    return q


def _neighbour_transitions(transitions: np.ndarray) -> np.ndarray:
    """Passer de p̂ de forme (S, A, S) à la forme (S, A, 3) du voisinage."""
    num_states = transitions.shape[0]
    index, mask = neighbourhood(num_states)
    states = np.arange(num_states)[:, None]
    gathered = transitions[states[:, :, None], np.arange(transitions.shape[1])[None, :, None], index[:, None, :]]
    return np.where(mask[:, None, :], gathered, 0.0)


def bellman_sweep(
    u: np.ndarray,
    optimistic_rewards: np.ndarray,
    neighbour_p: np.ndarray,
    eps_p: np.ndarray,
) -> np.ndarray:
    """Une passe d'EVI : valeurs optimistes Q[s, a] = r̃(s, a) + max_q q·u."""
    S, A = optimistic_rewards.shape
    index, mask = neighbourhood(S)
    neighbour_u = u[index]
    values = np.broadcast_to(neighbour_u[:, None, :], (S, A, 3)).reshape(S * A, 3)
    masks = np.broadcast_to(mask[:, None, :], (S, A, 3)).reshape(S * A, 3)
    q = _inner_max_batch(neighbour_p.reshape(S * A, 3), eps_p.reshape(-1), values, masks)
    expected = np.sum(np.where(masks, q * values, 0.0), axis=1).reshape(S, A)
    return optimistic_rewards + expected


def _run_evi(
    optimistic_rewards: np.ndarray,
    neighbour_p: np.ndarray,
    eps_p: np.ndarray,
    threshold: float,
    max_iterations: int,
    kappa: float = 0.0,
) -> EviResult:
    u = np.zeros(optimistic_rewards.shape[0])
    span = math.inf
    for iteration in range(1, max_iterations + 1):
        q_values = bellman_sweep(u, optimistic_rewards, neighbour_p, eps_p)
        updated = q_values.max(axis=1)
        diff = updated - u
        span = float(diff.max() - diff.min())
        u = u + (1.0 - kappa) * diff
        u -= u.min()
        if span < threshold:
            return EviResult(
                policy=greedy_speeds(q_values),
                rho_tilde=float(diff.max() + diff.min()) / 2.0,
                values=u,
                iterations=iteration,
                converged=True,
                used_fallback=kappa > 0,
                final_span=span,
            )
    return EviResult(
        policy=greedy_speeds(q_values),
        rho_tilde=math.nan,
        values=u,
        iterations=max_iterations,
        converged=False,
        used_fallback=kappa > 0,
        final_span=span,
    )


def extended_value_iteration(
    estimates: Estimates, radii: Radii, t_k: int, config: LearnerConfig
) -> EviResult:
    """EVI depuis u_0 = 0, arrêtée quand span(u_{i+1} - u_i) < seuil(t_k).

    Sans convergence après ``max_evi_iterations`` passes, relance avec
    u ← (1-κ)·T(u) + κ·u ; en cas de nouvel échec lève :class:`EviAbortError`.
    """
    optimistic_rewards = np.minimum(estimates.rewards + radii.rewards, config.r_max_known)
    neighbour_p = _neighbour_transitions(estimates.transitions)
    threshold = config.evi_threshold(t_k)

    result = _run_evi(optimistic_rewards, neighbour_p, radii.transitions, threshold, config.max_evi_iterations)
    if result.converged:
        return result

    logger.warning(
        "⚠️ EVI non convergée en %d passes (t_k=%d, span=%.3g) : transformation apériodique κ=%g",
        result.iterations, t_k, result.final_span, APERIODICITY_KAPPA,
    )
    fallback = _run_evi(
        optimistic_rewards, neighbour_p, radii.transitions, threshold,
        config.max_evi_iterations, kappa=APERIODICITY_KAPPA,
    )
    if not fallback.converged:
        raise EviAbortError(
            f"EVI abandonnée à t_k={t_k} (span {fallback.final_span:.3g} ≥ {threshold:.3g})",
            t_k=t_k,
            iterations=result.iterations + fallback.iterations,
        )
    fallback.iterations += result.iterations
    return fallback


def membership_check(spec: MdpSpec, state: LearnerState, radii: Radii) -> bool:
    """Diagnostic : le vrai MDP appartient-il à l'ensemble de confiance ?"""
    estimates = empirical_estimates(state)
    reward_gap = np.abs(estimates.rewards - spec.mean_reward_table())
    kernel_gap = np.abs(estimates.transitions - spec.transition_tensor()).sum(axis=2)
    return bool(np.all(reward_gap <= radii.rewards) and np.all(kernel_gap <= radii.transitions))


def membership_at(spec: MdpSpec, state: LearnerState, t: int, config: LearnerConfig) -> bool:
    """Appartenance avec des rayons construits au temps ``t`` à partir des compteurs courants."""
    eps_r, eps_p = confidence_radii(config, t, state.visit_counts, state.num_states, state.num_actions)
    return membership_check(spec, state, Radii(rewards=eps_r, transitions=eps_p))


class Ucrl2Learner:
    """Boucle d'épisodes UCRL2 : un épisode se termine quand ν_k(s, π̃(s)) atteint max(1, N_{t_k})."""

    def __init__(self, num_states: int, num_actions: int, config: LearnerConfig):
        self.config = config
        self.state = LearnerState.empty(num_states, num_actions)
        self.episode_log: List[EpisodeRecord] = []
        self.visit_ratio_sums = np.zeros((num_states, num_actions))
        self.radii: Optional[Radii] = None
        self.last_evi: Optional[EviResult] = None

    @classmethod
    def for_spec(cls, spec: MdpSpec, config: LearnerConfig) -> "Ucrl2Learner":
        return cls(spec.num_states, spec.num_actions, config)

    def observe(self, observation: Observation) -> None:
        s, a, reward, next_state = observation
        st = self.state
        st.visit_counts[s, a] += 1
        st.episode_counts[s, a] += 1
        st.reward_sums[s, a] += reward
        st.transition_counts[s, a, next_state] += 1

    def next_action(self, s_t: int, observation: Optional[Observation] = None) -> int:
        """Action π̃_k(s_t) au temps t ; démarre un nouvel épisode si le critère se déclenche."""
        if observation is not None:
            self.observe(observation)
        st = self.state
        st.time += 1
        if st.episode_index == 0:
            self._start_episode()
        else:
            a = st.current_policy[s_t]
            if st.episode_counts[s_t, a] >= max(1, st.episode_start_counts[s_t, a]):
                self._start_episode()
        return int(st.current_policy[s_t])

    def _close_episode(self, end_time: int) -> None:
        st = self.state
        record = self.episode_log[-1]
        record.length = end_time - record.start
        record.episode_counts = st.episode_counts.copy()
        self.visit_ratio_sums += st.episode_counts / np.sqrt(np.maximum(1, st.episode_start_counts))

    def _start_episode(self) -> None:
        st = self.state
        t = st.time
        if self.episode_log:
            self._close_episode(t)
        st.episode_index += 1
        st.episode_start = t
        st.episode_start_counts = st.visit_counts.copy()
        st.episode_counts = np.zeros_like(st.visit_counts)

        estimates = empirical_estimates(st)
        eps_r, eps_p = confidence_radii(self.config, t, st.visit_counts, st.num_states, st.num_actions)
        self.radii = Radii(rewards=eps_r, transitions=eps_p)
        try:
            result = extended_value_iteration(estimates, self.radii, t, self.config)
        except EviAbortError as exc:
            exc.episode = st.episode_index
            raise
        st.current_policy = result.policy
        self.last_evi = result
        self.episode_log.append(
            EpisodeRecord(
                index=st.episode_index,
                start=t,
                rho_tilde=result.rho_tilde,
                evi_iterations=result.iterations,
                start_counts=st.episode_start_counts.copy(),
                used_fallback=result.used_fallback,
            )
        )
        logger.debug(
            "Épisode %d : t_k=%d, ρ̃=%.6g, %d itérations EVI",
            st.episode_index, t, result.rho_tilde, result.iterations,
        )

    def finalize(self) -> None:
        """Clore l'épisode en cours après la dernière observation."""
        if self.episode_log and self.episode_log[-1].episode_counts is None:
            self._close_episode(self.state.time + 1)

    @property
    def num_episodes(self) -> int:
        return self.state.episode_index
