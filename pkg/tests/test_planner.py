"""Tests pour l'évaluation exacte des politiques et l'itération sur les politiques."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from birth_death_rl.bd_analytics import pi0_log_closed_form
from birth_death_rl.mdp_core import Policy, build_spec, sample_step
from birth_death_rl.oracle import (
    FIXTURES,
    dense_hitting_times,
    enumerate_optimal_gain,
    fixture_spec,
    power_iteration_measure,
    random_spec,
)
from birth_death_rl.planner import (
    DegenerateChainError,
    SolverError,
    bellman_residual,
    bias_variations,
    gain_and_bias,
    greedy_speeds,
    improvement_values,
    log_stationary_measure,
    optimal_policy,
    solve_with_target_removed,
    stationary_measure,
)


@pytest.fixture
def spec():
    return fixture_spec("s3")


def expensive_deadline_spec():
    """Échéances très coûteuses et vitesse presque gratuite : π⁰ n'est pas optimale."""
    return build_spec({
        "id": "cher", "lambda": 1.0, "mu": 0.1, "deadline_cost": 10.0, "num_states": 4,
        "max_speed": 1, "lambda_max": 1.0, "mu_max": 0.1, "energy_table": [0.0, 0.01],
    })


def test_stationary_measure_of_zero_policy(spec):
    """Tester m^{π⁰} = (4/9, 4/9, 1/9) sur la fixture S=3."""
    measure = stationary_measure(spec, Policy.zeros(spec))
    np.testing.assert_allclose(measure.probabilities, [4 / 9, 4 / 9, 1 / 9], atol=1e-14)
    np.testing.assert_allclose(measure.tail(), [1.0, 5 / 9, 1 / 9], atol=1e-14)


def test_gain_of_zero_policy(spec):
    """Tester ρ(π⁰) = 8/3 et la normalisation h(0) = 0."""
    result = gain_and_bias(spec, Policy.zeros(spec))
    assert result.gain == pytest.approx(8 / 3, abs=1e-12)
    assert result.bias[0] == 0.0
    assert result.span == pytest.approx(result.bias.max() - result.bias.min())
    assert np.max(np.abs(bellman_residual(spec, result))) <= 1e-9


def test_hitting_times_of_zero_policy(spec):
    """Tester E τ_{1→0} = 5 et E τ_{2→0} = 7 par le système tridiagonal."""
    times = solve_with_target_removed(spec, Policy.zeros(spec), 0, np.ones(3))
    np.testing.assert_allclose(times, [0.0, 5.0, 7.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_fast_paths_match_dense_references(seed):
    """Tester la forme produit et le solveur tridiagonal contre la puissance et l'inversion dense."""
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, max_states=6)
    policy = Policy.random(spec, rng)
    kernel = spec.kernel(policy)

    fast = stationary_measure(spec, policy).probabilities
    assert fast.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(fast, power_iteration_measure(kernel).probabilities, atol=1e-10)

    target = int(rng.integers(0, spec.num_states))
    times = solve_with_target_removed(spec, policy, target, np.ones(spec.num_states))
    np.testing.assert_allclose(times, dense_hitting_times(kernel, target), rtol=1e-9, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_optimal_policy_matches_enumeration(seed):
    """Tester ρ* de l'itération sur les politiques contre l'énumération des A^S politiques."""
    spec = random_spec(np.random.default_rng(seed), max_states=5)
    result = optimal_policy(spec)
    gain, _ = enumerate_optimal_gain(spec)
    assert result.gain == pytest.approx(gain, abs=1e-9)
    assert np.max(np.abs(bellman_residual(spec, result))) <= 1e-9 * max(1.0, result.span)


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_optimal_policy_on_fixtures(name):
    """Tester l'optimalité sur les fixtures : aucune vitesse n'améliore la valeur Q."""
    spec = fixture_spec(name)
    result = optimal_policy(spec)
    q_values = improvement_values(spec, result.bias)
    chosen = q_values[np.arange(spec.num_states), result.policy.array]
    assert np.all(chosen >= q_values.max(axis=1) - 1e-9)
    assert result.iterations >= 1
    for policy in (Policy.zeros(spec), Policy.full_speed(spec)):
        assert gain_and_bias(spec, policy).gain <= result.gain + 1e-12


def test_optimal_policy_improves_on_zero_policy():
    """Tester qu'avec des échéances coûteuses la politique optimale accélère."""
    spec = expensive_deadline_spec()
    result = optimal_policy(spec)
    assert result.policy != Policy.zeros(spec)
    assert result.iterations >= 2
    assert result.gain > gain_and_bias(spec, Policy.zeros(spec)).gain


def test_optimal_policy_iteration_cap():
    """Tester qu'un plafond d'itérations trop bas lève SolverError."""
    spec = expensive_deadline_spec()
    iterations = optimal_policy(spec).iterations
    with pytest.raises(SolverError, match="Plafond"):
        optimal_policy(spec, max_iterations=iterations - 1)


def test_degenerate_chain_rejected():
    """Tester que λ = 0 est refusé par le planificateur."""
    params = dict(FIXTURES["s3"], **{"lambda": 0.0})
    degenerate = build_spec(params)
    with pytest.raises(DegenerateChainError):
        optimal_policy(degenerate)
    with pytest.raises(DegenerateChainError):
        gain_and_bias(degenerate, Policy.zeros(degenerate))


def test_greedy_speeds_prefers_smallest_tie():
    """Tester le départage vers la plus petite vitesse."""
    values = np.array([[1.0, 1.0, 0.5], [0.0, 2.0, 2.0 + 1e-14], [3.0, 1.0, 2.0]])
    np.testing.assert_array_equal(greedy_speeds(values), [0, 1, 0])


def test_bias_variations(spec):
    """Tester ∂H(s) = h(s) - h(s-1) et le span retournés ensemble."""
    result = gain_and_bias(spec, Policy.full_speed(spec))
    variations, span = bias_variations(result)
    np.testing.assert_allclose(variations, np.diff(result.bias))
    assert span == pytest.approx(result.span)
    # Partir plus haut coûte plus d'échéances manquées
    assert np.all(variations < 0)


def test_log_stationary_measure_large_chain():
    """Tester la forme produit en log pour S=200 : finie, normalisée et égale à la binomiale sous π⁰."""
    big = build_spec({
        "lambda": 2.0, "mu": 0.5, "deadline_cost": 1.0, "num_states": 200, "max_speed": 1,
        "lambda_max": 2.0, "mu_max": 0.5, "energy_table": [0.0, 1.0],
    })
    log_measure = log_stationary_measure(big, Policy.zeros(big))
    assert np.all(np.isfinite(log_measure))
    assert np.exp(log_measure).sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(log_measure, pi0_log_closed_form(big), rtol=1e-9, atol=1e-9)
    assert log_measure[-1] < -500.0


@pytest.mark.slow
def test_gain_matches_long_simulation(spec):
    """Tester ρ* contre la récompense moyenne de 10⁷ pas simulés (3σ par moyennes de lots)."""
    result = optimal_policy(spec)
    speeds = result.policy.speeds
    rng = np.random.default_rng(7)
    num_batches, batch_length = 100, 10**5
    batch_means = np.zeros(num_batches)
    state = 0
    for batch in range(num_batches):
        total = 0.0
        for _ in range(batch_length):
            state, reward = sample_step(spec, state, speeds[state], rng)
            total += reward
        batch_means[batch] = total / batch_length
    assert abs(batch_means.mean() - result.gain) <= 3.0 * stats.sem(batch_means)
