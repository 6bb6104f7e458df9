"""Vérificateurs par force brute, volontairement lents et simples.

Ils ne servent qu'aux tests et à la sous-commande ``verify`` ; aucun chemin de
calcul de production n'en dépend.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve
from scipy.sparse.csgraph import connected_components

from . import bd_analytics, planner, ucrl2
from .mdp_core import MdpSpec, Policy, build_spec, structural_support

logger = logging.getLogger(__name__)

POWER_TOLERANCE = 1e-13
POWER_MAX_ITERATIONS = 10**6
DEFAULT_POLICY_CAP = 10**5
TAIL_TOLERANCE = 1e-12

FIXTURES: Dict[str, dict] = {
    "s3": {
        "id": "s3", "lambda": 1.0, "mu": 1.0, "deadline_cost": 2.0, "num_states": 3,
        "max_speed": 1, "lambda_max": 1.0, "mu_max": 1.0, "energy_table": [0.0, 1.0],
    },
    "s2": {
        "id": "s2", "lambda": 1.0, "mu": 1.0, "deadline_cost": 2.0, "num_states": 2,
        "max_speed": 2, "lambda_max": 1.0, "mu_max": 1.0, "energy_table": [0.0, 1.0, 4.0],
    },
    "s4": {
        "id": "s4", "lambda": 1.5, "mu": 0.7, "deadline_cost": 3.0, "num_states": 4,
        "max_speed": 2, "lambda_max": 2.0, "mu_max": 1.0, "energy_table": [0.0, 0.5, 2.0],
    },
    "s5": {
        "id": "s5", "lambda": 0.8, "mu": 0.4, "deadline_cost": 1.0, "num_states": 5,
        "max_speed": 2, "lambda_max": 1.0, "mu_max": 0.5, "energy_table": [0.2, 0.6, 1.5],
    },
}


class CapExceededError(ValueError):
    """Trop de politiques à énumérer."""


class ConvergenceError(RuntimeError):
    """L'itération de la puissance n'a pas atteint son point fixe."""


class VerificationMismatch(AssertionError):
    """Un contrôle de ``run_verification`` a échoué."""


@dataclass
class DistributionTrajectory:
    """Lois marginales μ_0, ..., μ_T de l'état sous une politique fixe."""

    policy: Policy
    marginals: np.ndarray

    def tails(self) -> np.ndarray:
        return np.cumsum(self.marginals[:, ::-1], axis=1)[:, ::-1]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    duration: float = 0.0


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [check for check in self.checks if not check.passed]


def fixture_spec(name: str) -> MdpSpec:
    return build_spec(FIXTURES[name])


def random_spec(
    rng: np.random.Generator,
    num_states: Optional[int] = None,
    max_states: int = 5,
    max_speed: Optional[int] = None,
) -> MdpSpec:
    """Spécification aléatoire valide (w convexe croissante, λ ≤ λ_max, μ ≤ μ_max)."""
    S = num_states if num_states is not None else int(rng.integers(2, max_states + 1))
    A_max = max_speed if max_speed is not None else int(rng.integers(1, 3))
    lam = float(rng.uniform(0.2, 2.0))
    mu = float(rng.uniform(0.2, 2.0))
    increments = np.sort(rng.uniform(0.0, 2.0, size=A_max))
    energy = float(rng.uniform(0.0, 0.5)) + np.concatenate(([0.0], np.cumsum(increments)))
    return build_spec({
        "lambda": lam,
        "mu": mu,
        "deadline_cost": float(rng.uniform(0.0, 3.0)),
        "num_states": S,
        "max_speed": A_max,
        "lambda_max": lam * float(rng.uniform(1.0, 1.5)),
        "mu_max": mu * float(rng.uniform(1.0, 1.5)),
        "energy_table": energy.tolist(),
    })


def power_iteration_measure(
    kernel: np.ndarray,
    tolerance: float = POWER_TOLERANCE,
    max_iterations: int = POWER_MAX_ITERATIONS,
) -> planner.StationaryMeasure:
    """Itérer m ← mP depuis la masse en 0 jusqu'à ‖m_{i+1} - m_i‖₁ < ``tolerance``.

    Un noyau réductible (identité, classes fermées multiples) n'a pas de loi
    stationnaire unique : il lève :class:`ConvergenceError` sans itérer.
    """
    kernel = np.asarray(kernel, dtype=float)
    num_classes, _ = connected_components(kernel > 0, directed=True, connection="strong")
    if num_classes > 1:
        raise ConvergenceError(
            f"Noyau réductible ({num_classes} classes communicantes) : pas de loi stationnaire unique"
        )
    measure = np.zeros(kernel.shape[0])
    measure[0] = 1.0
    for _ in range(max_iterations):
        updated = measure @ kernel
        if np.abs(updated - measure).sum() < tolerance:
            return planner.StationaryMeasure(updated)
        measure = updated
    raise ConvergenceError(f"Itération de la puissance non convergée en {max_iterations} pas")


def dense_hitting_times(kernel: np.ndarray, target: int) -> np.ndarray:
    """E[τ_target] par inversion dense de I - P privée de la ligne et de la colonne cible."""
    n = kernel.shape[0]
    kept = [s for s in range(n) if s != target]
    system = np.eye(n - 1) - kernel[np.ix_(kept, kept)]
    times = np.zeros(n)
    times[kept] = solve(system, np.ones(n - 1))
    return times


def enumerate_diameter(spec: MdpSpec, cap: int = DEFAULT_POLICY_CAP) -> float:
    """Diamètre par énumération de toutes les politiques déterministes stationnaires."""
    count = spec.num_actions**spec.num_states
    if count > cap:
        raise CapExceededError(f"{count} politiques dépassent le plafond {cap}")
    S = spec.num_states
    best = np.full((S, S), np.inf)
    for policy in Policy.all_policies(spec):
        kernel = spec.kernel(policy)
        for target in range(S):
            best[:, target] = np.minimum(best[:, target], dense_hitting_times(kernel, target))
    off_diagonal = ~np.eye(S, dtype=bool)
    return float(best[off_diagonal].max())


def enumerate_optimal_gain(spec: MdpSpec, cap: int = DEFAULT_POLICY_CAP) -> Tuple[float, Policy]:
    """(ρ*, politique) par énumération ; à égalité près, la première dans l'ordre lexicographique."""
    count = spec.num_actions**spec.num_states
    if count > cap:
        raise CapExceededError(f"{count} politiques dépassent le plafond {cap}")
    gains = [(planner.gain_and_bias(spec, policy).gain, policy) for policy in Policy.all_policies(spec)]
    best_gain = max(gain for gain, _ in gains)
    slack = 1e-12 * max(1.0, abs(best_gain))
    return next((gain, policy) for gain, policy in gains if gain >= best_gain - slack)


def grid_inner_max(
    p_hat, eps_p: float, u, support: Sequence[int], step: float = 0.001
) -> np.ndarray:
    """Recherche exhaustive sur la grille de pas ``step`` du simplexe restreint à ``support``.

    Si aucun point de grille n'est dans la boule, renvoie le point le plus proche de p̂.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    support = list(support)
    if not 1 <= len(support) <= 3:
        raise ValueError("Le support doit compter 1 à 3 états")
    n = int(round(1.0 / step))

    if len(support) == 1:
        points = np.ones((1, 1))
    else:
        axes = np.indices((n + 1,) * (len(support) - 1)).reshape(len(support) - 1, -1).T
        axes = axes[axes.sum(axis=1) <= n]
        points = np.column_stack((axes, n - axes.sum(axis=1))) / n

    distances = np.abs(points - p_hat[support]).sum(axis=1)
    admissible = distances <= eps_p + 1e-12
    if admissible.any():
        values = np.where(admissible, points @ u[support], -np.inf)
        chosen = points[int(np.argmax(values))]
    else:
        chosen = points[int(np.argmin(distances))]
    q = np.zeros_like(p_hat)
    q[support] = chosen
    return q


def exact_distribution_propagation(
    spec: MdpSpec, policy: Policy, horizon: int, initial: Optional[np.ndarray] = None
) -> DistributionTrajectory:
    """μ_t = μ_{t-1}P pour t = 1..T, depuis ``initial`` (masse en 0 par défaut)."""
    kernel = spec.kernel(policy)
    marginals = np.zeros((horizon + 1, spec.num_states))
    if initial is None:
        marginals[0, 0] = 1.0
    else:
        marginals[0] = initial
    for t in range(1, horizon + 1):
        marginals[t] = marginals[t - 1] @ kernel
    return DistributionTrajectory(policy=policy, marginals=marginals)


def tail_dominance_violations(
    spec: MdpSpec, policy: Policy, horizon: int, tolerance: float = TAIL_TOLERANCE
) -> int:
    """Nombre de couples (t, s) où Σ_{i≥s} μ_t^π(i) dépasse la queue sous π⁰."""
    tails = exact_distribution_propagation(spec, policy, horizon).tails()
    reference = exact_distribution_propagation(spec, Policy.zeros(spec), horizon).tails()
    return int(np.sum(tails - reference > tolerance))


def weighted_visit_gap(
    spec: MdpSpec, policy: Policy, horizon: int, weights: np.ndarray
) -> np.ndarray:
    """E[Σ_{s'≥s} f(s') N_T(s')] - T Σ_{s'≥s} f(s') m^{π⁰}(s') pour chaque seuil s.

    Négatif ou nul quand f est croissante et positive.
    """
    marginals = exact_distribution_propagation(spec, policy, horizon).marginals[:horizon]
    visits = marginals.sum(axis=0) * weights
    reference = horizon * bd_analytics.pi0_closed_form(spec).probabilities * weights
    return np.cumsum(visits[::-1])[::-1] - np.cumsum(reference[::-1])[::-1]


def _check(name: str, func: Callable[[], str]) -> CheckResult:
    started = time.perf_counter()
    try:
        detail = func()
        passed = True
    except AssertionError as exc:
        detail, passed = str(exc), False
    return CheckResult(name=name, passed=passed, detail=detail, duration=time.perf_counter() - started)


def _policies_for(spec: MdpSpec, rng: np.random.Generator, extra: int) -> List[Policy]:
    policies = [Policy.zeros(spec), Policy.full_speed(spec), planner.optimal_policy(spec).policy]
    policies.extend(Policy.random(spec, rng) for _ in range(extra))
    return policies


def run_verification(
    small: bool = False, seed: int = 0, strict: bool = False, policy_cap: int = DEFAULT_POLICY_CAP
) -> VerificationReport:
    """Exécuter la suite d'oracles sur les fixtures intégrées.

    ``small`` limite la suite aux contrôles de moins d'une seconde ; ``strict``
    lève :class:`VerificationMismatch` au premier rapport en échec ; ``policy_cap``
    borne les énumérations de politiques.
    """
    rng = np.random.default_rng(seed)
    specs = [fixture_spec(name) for name in FIXTURES]
    extra_specs = 3 if small else 20
    random_specs = [random_spec(rng) for _ in range(extra_specs)]
    n_policies = 5 if small else 100
    report = VerificationReport()

    def stationary() -> str:
        for spec in specs + random_specs:
            closed = bd_analytics.pi0_closed_form(spec).probabilities
            oracle = power_iteration_measure(spec.kernel(Policy.zeros(spec))).probabilities
            assert np.max(np.abs(closed - oracle)) <= 1e-10, f"π⁰ : écart sur {spec.spec_id or spec}"
            policy = Policy.random(spec, rng)
            fast = planner.stationary_measure(spec, policy).probabilities
            oracle = power_iteration_measure(spec.kernel(policy)).probabilities
            assert np.max(np.abs(fast - oracle)) <= 1e-10, "mesure stationnaire : écart"
        return f"{len(specs) + len(random_specs)} spécifications"

    def hitting() -> str:
        for spec in specs + random_specs:
            for policy in _policies_for(spec, rng, 2):
                fast = bd_analytics.hitting_times(spec, policy, 0).expected_times
                recursion = bd_analytics.hit0_recursion(spec, policy)
                assert np.allclose(fast, recursion, rtol=1e-9, atol=1e-9), "récurrence de τ_0 : écart"
        return "tridiagonal ≡ récurrence"

    def diameters() -> str:
        for spec in specs + random_specs:
            fast = bd_analytics.diameter(spec).value
            brute = enumerate_diameter(spec, cap=policy_cap)
            assert abs(fast - brute) <= 1e-6 * max(1.0, brute), f"diamètre {fast} ≠ {brute}"
        return "extrémal ≡ énumération"

    def optimality() -> str:
        for spec in specs + random_specs:
            result = planner.optimal_policy(spec)
            gain, _ = enumerate_optimal_gain(spec, cap=policy_cap)
            assert abs(result.gain - gain) <= 1e-9, f"ρ* {result.gain} ≠ {gain}"
        return "itération sur les politiques ≡ énumération"

    def inner() -> str:
        count = 50 if small else 1000
        for _ in range(count):
            support = list(structural_support(3, int(rng.integers(0, 3))))
            p_hat = np.zeros(3)
            p_hat[support] = rng.dirichlet(np.ones(len(support)))
            u = rng.uniform(-1.0, 1.0, size=3)
            eps = float(rng.uniform(0.03, 2.0))
            fast = ucrl2.inner_max(p_hat, eps, u, support) @ u
            brute = grid_inner_max(p_hat, eps, u, support, step=0.01) @ u
            assert fast >= brute - 1e-9, f"maximisation interne sous la grille ({fast} < {brute})"
        return f"{count} instances"

    def dominance() -> str:
        horizon = 200 if small else 500
        for spec in specs + random_specs:
            for policy in _policies_for(spec, rng, 2):
                violations = tail_dominance_violations(spec, policy, horizon)
                assert violations == 0, f"{violations} violations de dominance"
        return f"T={horizon}"

    def variations() -> str:
        for spec in specs + random_specs:
            delta = bd_analytics.delta_bound(spec)[1:]
            for policy in _policies_for(spec, rng, n_policies):
                bias = planner.gain_and_bias(spec, policy)
                assert np.all(np.abs(bias.variations) <= delta), "|∂H(s)| > Δ(s)"
        return f"{n_policies} politiques aléatoires par spécification"

    def constants() -> str:
        for spec in specs + random_specs:
            bundle = bd_analytics.e2_constants(spec)
            assert bundle.big_f <= bd_analytics.big_f_cap(spec), "F au-dessus du plafond"
            assert bundle.e2 <= bd_analytics.e2_cap(spec), "E₂ au-dessus du plafond"
        return "F et E₂ sous leurs plafonds"

    for name, func in (
        ("stationary_measure", stationary),
        ("hitting_times", hitting),
        ("diameter", diameters),
        ("optimal_policy", optimality),
        ("inner_max", inner),
        ("tail_dominance", dominance),
        ("bias_variations", variations),
        ("e2_constants", constants),
    ):
        result = _check(name, func)
        report.checks.append(result)
        if result.passed:
            logger.info("✅ %s (%s, %.2fs)", name, result.detail, result.duration)
        else:
            logger.error("❌ %s : %s", name, result.detail)
            if strict:
                raise VerificationMismatch(f"{name} : {result.detail}")
    return report
