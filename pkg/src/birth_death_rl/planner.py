"""Évaluation et optimisation exactes au critère du gain moyen.

Les chaînes induites sont des processus de naissance et de mort : la mesure
stationnaire a une forme produit (équilibre détaillé) et les systèmes linéaires
(biais, temps d'atteinte) sont tridiagonaux, résolus par ``solve_banded``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Set, Tuple

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .mdp_core import MdpSpec, Policy

logger = logging.getLogger(__name__)

BELLMAN_TOLERANCE = 1e-9
TIE_TOLERANCE = 1e-12
DEFAULT_MAX_ITERATIONS = 1000


class DegenerateChainError(ValueError):
    """Chaîne non irréductible (λ = 0 ou μ = 0)."""


class SolverError(RuntimeError):
    """Résidu de Bellman hors tolérance, cycle ou plafond d'itérations."""


@dataclass(frozen=True)
class StationaryMeasure:
    """Loi stationnaire m^π, une probabilité par état."""

    probabilities: np.ndarray

    def tail(self) -> np.ndarray:
        """Queues Σ_{i≥s} m(i) pour chaque s."""
        return np.cumsum(self.probabilities[::-1])[::-1]


@dataclass
class SolveResult:
    """Gain, biais (h(0) = 0), variations ∂H(s) = h(s) - h(s-1) et span."""

    gain: float
    bias: np.ndarray
    variations: np.ndarray
    span: float
    policy: Policy
    iterations: int = 0
    measure: Optional[StationaryMeasure] = field(default=None, repr=False)


def ensure_irreducible(spec: MdpSpec) -> None:
    if spec.lam <= 0:
        raise DegenerateChainError("λ = 0 : les états supérieurs ne sont jamais atteints")
    if spec.mu <= 0:
        raise DegenerateChainError("μ = 0 : la chaîne n'est pas irréductible")


def _rates(spec: MdpSpec, policy: Policy) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilités de descente et de montée par état sous ``policy``."""
    states = np.arange(spec.num_states, dtype=float)
    U = spec.uniformization
    down = (policy.array + states * spec.mu) / U
    down[0] = 0.0
    up = spec.arrival_rates / U
    return down, up


def log_stationary_measure(spec: MdpSpec, policy: Policy) -> np.ndarray:
    """Log de la mesure stationnaire, normalisée par ``logsumexp``.

    log m(s+1) - log m(s) = log λ_s - log(π(s+1) + μ(s+1)) ; la constante U se
    simplifie.
    """
    ensure_irreducible(spec)
    states = np.arange(1, spec.num_states, dtype=float)
    departures = policy.array[1:] + states * spec.mu
    steps = np.log(spec.arrival_rates[:-1]) - np.log(departures)
    log_weights = np.concatenate(([0.0], np.cumsum(steps)))
    return log_weights - logsumexp(log_weights)


def stationary_measure(spec: MdpSpec, policy: Policy) -> StationaryMeasure:
    return StationaryMeasure(np.exp(log_stationary_measure(spec, policy)))


def solve_with_target_removed(
    spec: MdpSpec, policy: Policy, target: int, rhs: np.ndarray
) -> np.ndarray:
    """Résoudre (I - P)x = rhs hors de ``target`` avec x(target) = 0.

    La ligne et la colonne de ``target`` sont supprimées ; la matrice restante
    est encore tridiagonale (couplage nul de part et d'autre de la cible).
    Sert au biais (cible 0) et aux temps d'atteinte.
    """
    spec.check_state(target)
    down, up = _rates(spec, policy)
    states = np.arange(spec.num_states)
    kept = states[states != target]
    adjacent = kept[1:] == kept[:-1] + 1

    bands = np.zeros((3, kept.size))
    bands[0, 1:] = np.where(adjacent, -up[kept[:-1]], 0.0)
    bands[1] = down[kept] + up[kept]
    bands[2, :-1] = np.where(adjacent, -down[kept[1:]], 0.0)

    try:
        solution = solve_banded((1, 1), bands, np.asarray(rhs, dtype=float)[kept])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"Système tridiagonal singulier (cible {target})") from exc
    full = np.zeros(spec.num_states)
    full[kept] = solution
    return full


def bellman_residual(spec: MdpSpec, result: SolveResult) -> np.ndarray:
    """r̄(s, π(s)) - ρ + Σ P(s'|s, π(s)) h(s') - h(s) pour chaque s."""
    kernel = spec.kernel(result.policy)
    rewards = spec.reward_vector(result.policy)
    return rewards - result.gain + kernel @ result.bias - result.bias


def gain_and_bias(spec: MdpSpec, policy: Policy) -> SolveResult:
    """Gain ρ = Σ r̄ m^π et biais h solution de (I - P)h = r̄ - ρ avec h(0) = 0."""
    measure = stationary_measure(spec, policy)
    rewards = spec.reward_vector(policy)
    gain = float(rewards @ measure.probabilities)
    bias = solve_with_target_removed(spec, policy, 0, rewards - gain)
    variations = np.diff(bias)
    result = SolveResult(
        gain=gain,
        bias=bias,
        variations=variations,
        span=float(bias.max() - bias.min()),
        policy=policy,
        measure=measure,
    )
    residual = float(np.max(np.abs(bellman_residual(spec, result))))
    if residual > BELLMAN_TOLERANCE * max(1.0, result.span):
        raise SolverError(f"Résidu de Bellman trop grand : {residual:.3e}")
    return result


def improvement_values(spec: MdpSpec, bias: np.ndarray) -> np.ndarray:
    """Q[s, a] = r̄(s, a) + Σ P(s'|s, a) h(s') pour toutes les vitesses."""
    S, U = spec.num_states, spec.uniformization
    states = np.arange(S, dtype=float)[:, None]
    speeds = np.arange(spec.num_actions, dtype=float)[None, :]
    down = (speeds + states * spec.mu) / U
    down[0, :] = 0.0
    up = (spec.arrival_rates / U)[:, None]

    below = np.concatenate(([bias[0]], bias[:-1]))[:, None]
    above = np.concatenate((bias[1:], [bias[-1]]))[:, None]
    here = bias[:, None]
    return spec.mean_reward_table() + down * below + up * above + (1.0 - down - up) * here


def greedy_speeds(values: np.ndarray, tolerance: float = TIE_TOLERANCE) -> np.ndarray:
    """Plus petite vitesse à ``tolerance`` près du maximum, ligne par ligne."""
    best = values.max(axis=1, keepdims=True)
    slack = tolerance * np.maximum(1.0, np.abs(best))
    return np.argmax(values >= best - slack, axis=1)


def optimal_policy(spec: MdpSpec, max_iterations: int = DEFAULT_MAX_ITERATIONS) -> SolveResult:
    """Itération sur les politiques depuis π⁰ jusqu'à stabilité."""
    ensure_irreducible(spec)
    policy = Policy.zeros(spec)
    seen: Set[Policy] = {policy}
    for iteration in range(1, max_iterations + 1):
        result = gain_and_bias(spec, policy)
        speeds = greedy_speeds(improvement_values(spec, result.bias))
        candidate = Policy(tuple(int(a) for a in speeds))
        if candidate == policy:
            result.iterations = iteration
            logger.debug("Itération sur les politiques : %d itérations, ρ*=%.12g", iteration, result.gain)
            return result
        if candidate in seen:
            raise SolverError(f"Cycle détecté dans l'itération sur les politiques ({iteration})")
        seen.add(candidate)
        policy = candidate
    raise SolverError(f"Plafond de {max_iterations} itérations atteint sans politique stable")


def bias_variations(result: SolveResult) -> Tuple[np.ndarray, float]:
    """∂H(1..S-1) et span du biais."""
    variations = np.diff(result.bias)
    return variations, float(result.bias.max() - result.bias.min())
