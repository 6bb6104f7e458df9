"""Grandeurs analytiques de la classe : loi binomiale de π⁰, temps d'atteinte,
diamètre, borne Δ(s) sur les variations du biais, constantes f, F, E₂, Q_max
et bornes de regret de référence.

Les quantités qui dépassent la précision double (D, Q_max, second terme de la
borne) sont calculées en logarithme naturel ; la valeur flottante vaut ``inf``
lorsqu'elle déborde.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from .mdp_core import MdpSpec, Policy
from .planner import (
    DegenerateChainError,
    SolverError,
    StationaryMeasure,
    ensure_irreducible,
    greedy_speeds,
    log_stationary_measure,
    solve_with_target_removed,
    stationary_measure,
)

logger = logging.getLogger(__name__)

# Au-delà, exp() déborde en double précision
LOG_FLOAT_MAX = math.log(np.finfo(float).max)
DIAMETER_METHODS = ("extremal", "dp")
MINIMAX_LABEL = "pire cas sur la classe de MDP, pas une borne pour cette instance"


@dataclass(frozen=True)
class HittingProfile:
    """Temps d'atteinte moyens E[τ_{s→target}] pour tous les états s."""

    policy: Policy
    target: int
    expected_times: np.ndarray


@dataclass(frozen=True)
class DiameterResult:
    """Diamètre D avec son logarithme ; ``value`` vaut ``inf`` en cas de débordement."""

    log_value: float
    method: str

    @property
    def value(self) -> float:
        return _exp_or_inf(self.log_value)

    @property
    def is_log_scale(self) -> bool:
        return self.log_value >= LOG_FLOAT_MAX


@dataclass(frozen=True)
class AnalyticsBundle:
    """Δ, f, F, E₂, D, Q_max et m^max(S-1) d'une spécification.

    ``delta[0]`` vaut NaN : Δ n'est défini que pour 1 ≤ s ≤ S-1.
    """

    delta: np.ndarray
    f_table: np.ndarray
    big_f: float
    e2: float
    log_diameter: float
    log_q_max: float
    log_m_max_last: float

    @property
    def diameter(self) -> float:
        return _exp_or_inf(self.log_diameter)

    @property
    def q_max(self) -> float:
        return _exp_or_inf(self.log_q_max)

    @property
    def m_max_last(self) -> float:
        return math.exp(self.log_m_max_last)


@dataclass(frozen=True)
class RegretBounds:
    horizon: int
    upper_main: float
    log_upper_secondary: float
    minimax_lower: float
    minimax_label: str = MINIMAX_LABEL

    @property
    def upper_secondary(self) -> float:
        return _exp_or_inf(self.log_upper_secondary)

    def to_dict(self) -> Dict[str, float]:
        return {
            "t": self.horizon,
            "upper_main": self.upper_main,
            "log_upper_secondary": self.log_upper_secondary,
            "minimax_lower": self.minimax_lower,
        }


def _exp_or_inf(log_value: float) -> float:
    return math.exp(log_value) if log_value < LOG_FLOAT_MAX else math.inf


def _load_ratio(spec: MdpSpec) -> float:
    return spec.lam / ((spec.num_states - 1) * spec.mu)


def pi0_log_closed_form(spec: MdpSpec) -> np.ndarray:
    """log m^{π⁰}(s) : loi binomiale B(S-1, ρ/(1+ρ)) avec ρ = λ/((S-1)μ)."""
    ensure_irreducible(spec)
    n = spec.num_states - 1
    s = np.arange(spec.num_states, dtype=float)
    ratio = _load_ratio(spec)
    log_binomial = gammaln(n + 1) - gammaln(s + 1) - gammaln(n - s + 1)
    return log_binomial + s * math.log(ratio) - n * math.log1p(ratio)


def pi0_closed_form(spec: MdpSpec) -> StationaryMeasure:
    return StationaryMeasure(np.exp(pi0_log_closed_form(spec)))


def hitting_times(spec: MdpSpec, policy: Policy, target: int) -> HittingProfile:
    """Temps d'atteinte de ``target`` par le système de premier passage tridiagonal."""
    ensure_irreducible(spec)
    times = solve_with_target_removed(spec, policy, target, np.ones(spec.num_states))
    return HittingProfile(policy=policy, target=target, expected_times=times)


def hit0_recursion(spec: MdpSpec, policy: Policy) -> np.ndarray:
    """Temps d'atteinte de 0 par la récurrence explicite.

    E τ_s = E τ_{s-1} + (U/μ_s) Σ_{s'=s}^{S-1} Π_{i=s+1}^{s'} λ_{i-1}/μ_i avec
    μ_i = π(i) + μi ; la somme G(s) vérifie G(s) = 1 + (λ_s/μ_{s+1}) G(s+1).
    """
    ensure_irreducible(spec)
    S = spec.num_states
    departures = policy.array + np.arange(S) * spec.mu
    arrivals = spec.arrival_rates
    tail_sums = np.ones(S)
    for s in range(S - 2, 0, -1):
        tail_sums[s] = 1.0 + arrivals[s] / departures[s + 1] * tail_sums[s + 1]
    times = np.zeros(S)
    for s in range(1, S):
        times[s] = times[s - 1] + spec.uniformization / departures[s] * tail_sums[s]
    return times


def lemma_hit0_bound(spec: MdpSpec, policy: Policy) -> np.ndarray:
    """Majorant m^π(0)⁻¹ Σ_{i=1}^{s} U/(π(i)+μi) de E τ_s vers 0."""
    measure = stationary_measure(spec, policy)
    departures = policy.array[1:] + np.arange(1, spec.num_states) * spec.mu
    partial = np.concatenate(([0.0], np.cumsum(spec.uniformization / departures)))
    return partial / measure.probabilities[0]


def passage_times(spec: MdpSpec, policy: Policy) -> Tuple[np.ndarray, np.ndarray]:
    """Log des temps moyens de montée s→s+1 (s = 0..S-2) et de descente s→s-1 (s = 1..S-1).

    Pour une chaîne de naissance et de mort de mesure m, la montée depuis s prend
    Σ_{j≤s} m(j) / (m(s) p_up(s)) pas et la descente Σ_{j≥s} m(j) / (m(s) p_down(s)).
    """
    log_m = log_stationary_measure(spec, policy)
    states = np.arange(spec.num_states, dtype=float)
    U = spec.uniformization
    log_up = np.log(spec.arrival_rates[:-1] / U)
    log_down = np.log((policy.array[1:] + states[1:] * spec.mu) / U)

    prefix = np.logaddexp.accumulate(log_m)
    suffix = np.logaddexp.accumulate(log_m[::-1])[::-1]
    ascents = prefix[:-1] - log_m[:-1] - log_up
    descents = suffix[1:] - log_m[1:] - log_down
    return ascents, descents


def local_log_diameter(spec: MdpSpec) -> float:
    """log max_s τ(s-1 → s) sous π⁰, la plus longue montée d'un pas."""
    ascents, _ = passage_times(spec, Policy.zeros(spec))
    return float(ascents.max())


def _extremal_log_diameter(spec: MdpSpec) -> float:
    # Montées minimales sous π⁰, descentes minimales sous π^max
    ascents, _ = passage_times(spec, Policy.zeros(spec))
    _, descents = passage_times(spec, Policy.full_speed(spec))
    return float(max(logsumexp(ascents), logsumexp(descents)))


def _min_hitting_times(spec: MdpSpec, target: int, max_iterations: int = 1000) -> np.ndarray:
    """Temps d'atteinte minimaux sur les politiques (plus court chemin stochastique)."""
    policy = Policy.zeros(spec)
    U = spec.uniformization
    states = np.arange(spec.num_states, dtype=float)[:, None]
    speeds = np.arange(spec.num_actions, dtype=float)[None, :]
    down = (speeds + states * spec.mu) / U
    down[0, :] = 0.0
    up = (spec.arrival_rates / U)[:, None]
    for _ in range(max_iterations):
        times = hitting_times(spec, policy, target).expected_times
        below = np.concatenate(([times[0]], times[:-1]))[:, None]
        above = np.concatenate((times[1:], [times[-1]]))[:, None]
        costs = 1.0 + down * below + up * above + (1.0 - down - up) * times[:, None]
        speeds_new = greedy_speeds(-costs)
        speeds_new[target] = policy.speeds[target]
        candidate = Policy(tuple(int(a) for a in speeds_new))
        if candidate == policy:
            return times
        policy = candidate
    raise SolverError(f"Programmation dynamique non stabilisée pour la cible {target}")


def diameter(spec: MdpSpec, method: str = "extremal") -> DiameterResult:
    """Diamètre D : max sur les couples s ≠ s' du temps d'atteinte minimal sur les politiques.

    ``extremal`` : montées sous π⁰ et descentes sous π^max, en log.
    ``dp`` : itération sur les politiques pour chaque cible (petites instances).
    """
    ensure_irreducible(spec)
    if method == "extremal":
        log_value = _extremal_log_diameter(spec)
    elif method == "dp":
        best = max(
            float(_min_hitting_times(spec, target).max()) for target in range(spec.num_states)
        )
        log_value = math.log(best)
    else:
        raise ValueError(f"Méthode de diamètre inconnue : {method!r} (attendu {DIAMETER_METHODS})")
    logger.debug("Diamètre (%s) : log D = %.6g", method, log_value)
    return DiameterResult(log_value=log_value, method=method)


def diameter_growth_lower_bound(spec: MdpSpec) -> float:
    """log[exp(λ/μ - 2) (μ/λ)^{S-2} S^{S-2}], tendance de croissance du diamètre."""
    ensure_irreducible(spec)
    S = spec.num_states
    return spec.lam / spec.mu - 2.0 + (S - 2) * (math.log(spec.mu / spec.lam) + math.log(S))


def _delta(spec: MdpSpec, s: np.ndarray) -> np.ndarray:
    return 2.0 * spec.r_max * math.exp(spec.lam / spec.mu) * (1.0 + np.log(s))


def delta_bound(spec: MdpSpec) -> np.ndarray:
    """Δ(s) = 2 r_max e^{λ/μ} (1 + log s) pour 1 ≤ s ≤ S-1 ; l'entrée 0 vaut NaN."""
    table = np.full(spec.num_states, np.nan)
    table[1:] = _delta(spec, np.arange(1, spec.num_states, dtype=float))
    return table


def span_bound(spec: MdpSpec) -> float:
    """Majorant linéaire C·(S-1) du span du biais optimal."""
    return spec.deadline_cost * (spec.num_states - 1)


def gain_difference_bound(
    spec: MdpSpec, policy: Policy, other: Policy
) -> float:
    """‖r - r'‖∞ + r_max·D_π·‖P - P'‖∞ avec D_π = max_i E_i τ_0 sous ``policy``."""
    reward_gap = float(np.max(np.abs(spec.reward_vector(policy) - spec.reward_vector(other))))
    kernel_gap = float(np.max(np.abs(spec.kernel(policy) - spec.kernel(other)).sum(axis=1)))
    d_pi = float(hitting_times(spec, policy, 0).expected_times.max())
    return reward_gap + spec.r_max * d_pi * kernel_gap


def e2_constants(spec: MdpSpec) -> AnalyticsBundle:
    """f(s) = max{1, s(s-1)}/(Δ(s+1)+r_max)², F = Σ 1/f, E₂ = F Σ max{1, s(s-1)} m^{π⁰}(s).

    Q_max = X² log(X⁴) avec X = 10D/m^max(S-1), calculé en log.
    """
    S = spec.num_states
    states = np.arange(S, dtype=float)
    weights = np.maximum(1.0, states * (states - 1.0))
    scale = _delta(spec, states + 1.0) + spec.r_max
    with np.errstate(divide="ignore"):
        f_table = weights / scale**2
    big_f = float(np.sum(scale**2 / weights))
    m_pi0 = np.exp(pi0_log_closed_form(spec))
    e2 = big_f * float(np.sum(weights * m_pi0))

    log_diameter = _extremal_log_diameter(spec)
    log_m_max_last = float(log_stationary_measure(spec, Policy.full_speed(spec))[-1])
    log_x = math.log(10.0) + log_diameter - log_m_max_last
    log_q_max = 2.0 * log_x + math.log(4.0 * log_x)

    return AnalyticsBundle(
        delta=delta_bound(spec),
        f_table=f_table,
        big_f=big_f,
        e2=e2,
        log_diameter=log_diameter,
        log_q_max=log_q_max,
        log_m_max_last=log_m_max_last,
    )


def e2_cap(spec: MdpSpec) -> float:
    """Plafond 60 e^{2λ/μ} r_max² (1 + λ²/μ²) de E₂."""
    ratio = spec.lam / spec.mu
    return 60.0 * math.exp(2.0 * ratio) * spec.r_max**2 * (1.0 + ratio**2)


def big_f_cap(spec: MdpSpec) -> float:
    """Plafond 60 e^{2λ/μ} r_max² de F."""
    return 60.0 * math.exp(2.0 * spec.lam / spec.mu) * spec.r_max**2


def regret_bounds(
    spec: MdpSpec, horizon: int, bundle: AnalyticsBundle | None = None
) -> RegretBounds:
    """Terme principal, second terme (log) et borne minimax de référence à l'horizon T."""
    if horizon < 2:
        raise ValueError(f"L'horizon doit être ≥ 2 (T={horizon})")
    if bundle is None:
        bundle = e2_constants(spec)
    A = spec.num_actions
    S = spec.num_states
    log_2at = math.log(2.0 * A * horizon)

    upper_main = 19.0 * math.sqrt(bundle.e2 * A * horizon * log_2at)
    if spec.r_max > 0:
        log_secondary = (
            math.log(97.0 * spec.r_max * S * A)
            + 2.0 * bundle.log_diameter
            + max(bundle.log_q_max, 0.25 * math.log(horizon))
            + 2.0 * math.log(log_2at)
        )
    else:
        log_secondary = -math.inf
    minimax_lower = 0.015 * _exp_or_inf(0.5 * (bundle.log_diameter + math.log(S * A * horizon)))
    return RegretBounds(
        horizon=horizon,
        upper_main=upper_main,
        log_upper_secondary=log_secondary,
        minimax_lower=minimax_lower,
    )


__all__ = [
    "AnalyticsBundle",
    "DegenerateChainError",
    "DiameterResult",
    "HittingProfile",
    "RegretBounds",
    "big_f_cap",
    "delta_bound",
    "diameter",
    "diameter_growth_lower_bound",
    "e2_cap",
    "e2_constants",
    "gain_difference_bound",
    "hit0_recursion",
    "hitting_times",
    "lemma_hit0_bound",
    "local_log_diameter",
    "passage_times",
    "pi0_closed_form",
    "pi0_log_closed_form",
    "regret_bounds",
    "span_bound",
]
