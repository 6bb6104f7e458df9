"""Tests pour la construction des spécifications et la simulation d'un pas."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birth_death_rl.mdp_core import (
    ActionRangeError,
    DegenerateRateError,
    EnergyTableError,
    MdpSpec,
    NegativeParameterError,
    NonConvexEnergyError,
    NonFiniteParameterError,
    Policy,
    RateBoundError,
    SpecValidationError,
    StateCountError,
    StateRangeError,
    build_spec,
    dump_spec,
    load_spec,
    mean_reward,
    sample_step,
    support_of,
    transition_row,
)
from birth_death_rl.oracle import FIXTURES, random_spec


@pytest.fixture
def params():
    return dict(FIXTURES["s3"])


@pytest.fixture
def spec(params):
    return build_spec(params)


def test_build_spec_derived_quantities(spec):
    """Tester U, r_max et les taux d'arrivée décroissants de la fixture S=3."""
    assert spec.uniformization == 4.0
    assert spec.r_max == 3.0
    np.testing.assert_allclose(spec.arrival_rates, [1.0, 0.5, 0.0])
    assert spec.num_actions == 2
    assert spec.spec_id == "s3"


@pytest.mark.parametrize(
    "override, error",
    [
        ({"num_states": 1}, StateCountError),
        ({"lambda": -1.0}, NegativeParameterError),
        ({"deadline_cost": -0.5}, NegativeParameterError),
        ({"energy_table": [-1.0, 1.0]}, NegativeParameterError),
        ({"lambda": float("nan")}, NonFiniteParameterError),
        ({"mu": float("inf")}, NonFiniteParameterError),
        ({"lambda": 2.0}, RateBoundError),
        ({"mu": 1.5}, RateBoundError),
        ({"energy_table": [0.0, 1.0, 2.0]}, EnergyTableError),
        ({"energy_table": [1.0, 0.5]}, EnergyTableError),
        ({"mu": 0.0}, DegenerateRateError),
        ({"num_states": 2.5}, SpecValidationError),
    ],
)
def test_build_spec_rejections(params, override, error):
    """Tester que chaque violation lève son erreur de validation distincte."""
    params.update(override)
    with pytest.raises(error):
        build_spec(params)


def test_build_spec_rejects_non_convex_energy(params):
    """Tester le rejet de w=[0,1,1,3] (différence seconde négative en a=1)."""
    params.update({"max_speed": 3, "energy_table": [0.0, 1.0, 1.0, 3.0]})
    with pytest.raises(NonConvexEnergyError):
        build_spec(params)


def test_build_spec_missing_key(params):
    """Tester qu'une clé manquante est une erreur de validation."""
    del params["mu_max"]
    with pytest.raises(SpecValidationError, match="mu_max"):
        build_spec(params)


def test_build_spec_accepts_zero_arrival(params):
    """Tester que λ = 0 est accepté à la construction (r_max reste défini)."""
    params["lambda"] = 0.0
    spec = build_spec(params)
    assert spec.arrival_rates.sum() == 0.0


def test_validation_errors_are_value_errors():
    """Tester que les erreurs de validation restent des ValueError."""
    assert issubclass(NonConvexEnergyError, ValueError)
    assert issubclass(StateRangeError, ValueError)


def test_transition_row_example(spec):
    """Tester la ligne (s=1, a=0) : descente 1/4, boucle 5/8, montée 1/8."""
    np.testing.assert_allclose(transition_row(spec, 1, 0), [0.25, 0.625, 0.125])


def test_transition_row_boundaries(spec):
    """Tester les états extrêmes : pas de descente en 0, pas de montée en S-1."""
    for a in range(spec.num_actions):
        assert transition_row(spec, 0, a)[0] > 0
        assert transition_row(spec, 0, a)[1] == 0.25
        assert transition_row(spec, 2, a)[1] > 0
    assert transition_row(spec, 2, 1)[1] == pytest.approx(0.75)


def test_transition_row_out_of_range(spec):
    """Tester les erreurs de domaine sur s et a."""
    with pytest.raises(StateRangeError):
        transition_row(spec, 3, 0)
    with pytest.raises(ActionRangeError):
        transition_row(spec, 0, 2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_rows_are_distributions_on_support(seed):
    """Tester sur des spécifications aléatoires : lignes positives, somme 1, support structurel."""
    spec = random_spec(np.random.default_rng(seed), max_states=8)
    for s in range(spec.num_states):
        allowed = set(support_of(spec, s, 0))
        for a in range(spec.num_actions):
            row = transition_row(spec, s, a)
            assert np.all(row >= 0)
            assert abs(row.sum() - 1.0) <= 1e-15
            assert set(np.flatnonzero(row)) <= allowed
            assert 0.0 <= mean_reward(spec, s, a) <= spec.r_max + 1e-12


def test_mean_reward_examples(spec):
    """Tester r̄(0,0)=3, r̄(2,0)=2 et r̄(1,1)=2.25."""
    assert mean_reward(spec, 0, 0) == pytest.approx(3.0)
    assert mean_reward(spec, 2, 0) == pytest.approx(2.0)
    assert mean_reward(spec, 1, 1) == pytest.approx(2.25)


def test_mean_reward_table_matches_scalar(spec):
    """Tester la cohérence entre la table vectorisée et mean_reward."""
    table = spec.mean_reward_table()
    for s in range(spec.num_states):
        for a in range(spec.num_actions):
            assert table[s, a] == pytest.approx(mean_reward(spec, s, a))


def test_support_of(spec):
    """Tester le support tronqué aux bords et complet à l'intérieur."""
    assert support_of(spec, 0, 0) == (0, 1)
    assert support_of(spec, 2, 1) == (1, 2)
    assert support_of(spec, 1, 0) == (0, 1, 2)


def test_sample_step_zero_state_reward_is_deterministic(spec):
    """Tester qu'en s=0 la récompense vaut toujours r_max - w(a)/U."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        _, reward = sample_step(spec, 0, 1, rng)
        assert reward == pytest.approx(3.0 - 0.25)


def test_sample_step_reproducible(spec):
    """Tester que deux flux de même graine produisent la même suite."""
    first = np.random.default_rng(42)
    second = np.random.default_rng(42)
    draws_a = [sample_step(spec, 1, 0, first) for _ in range(200)]
    draws_b = [sample_step(spec, 1, 0, second) for _ in range(200)]
    assert draws_a == draws_b


@pytest.mark.parametrize("s, a, error", [
    (-1, 0, StateRangeError),
    (3, 0, StateRangeError),
    (1, -1, ActionRangeError),
    (1, 2, ActionRangeError),
])
def test_sample_step_rejects_out_of_range(spec, s, a, error):
    """Tester que sample_step refuse (s, a) hors domaine sans consommer le flux."""
    rng = np.random.default_rng(0)
    with pytest.raises(error):
        sample_step(spec, s, a, rng)
    assert rng.random() == np.random.default_rng(0).random()


@pytest.mark.slow
def test_sample_step_marginals(spec):
    """Tester les fréquences empiriques de 10⁶ tirages contre la ligne exacte (3σ)."""
    rng = np.random.default_rng(2024)
    n = 10**6
    next_states = np.zeros(3)
    rewards = 0.0
    for _ in range(n):
        nxt, _ = sample_step(spec, 1, 0, rng)
        next_states[nxt] += 1
        _, reward = sample_step(spec, 2, 0, rng)
        rewards += reward
    row = transition_row(spec, 1, 0)
    sigma = np.sqrt(row * (1 - row) / n)
    assert np.all(np.abs(next_states / n - row) <= 3 * sigma)
    # Bernoulli d'échéance de paramètre 2·1/4, amplitude C = 2
    assert abs(rewards / n - 2.0) <= 3 * 2.0 * np.sqrt(0.25 / n)


def test_policies(spec):
    """Tester les politiques de référence et la validation des vitesses."""
    assert Policy.zeros(spec).speeds == (0, 0, 0)
    assert Policy.full_speed(spec).speeds == (1, 1, 1)
    assert len(list(Policy.all_policies(spec))) == 8
    with pytest.raises(ActionRangeError):
        Policy.for_spec(spec, [0, 2, 0])
    with pytest.raises(ActionRangeError):
        Policy.for_spec(spec, [0, 1])


def test_kernel_and_reward_vector(spec):
    """Tester le noyau induit par π^max et son vecteur de récompenses."""
    policy = Policy.full_speed(spec)
    kernel = spec.kernel(policy)
    assert kernel.shape == (3, 3)
    np.testing.assert_allclose(kernel.sum(axis=1), 1.0)
    np.testing.assert_allclose(spec.reward_vector(policy), [2.75, 2.25, 1.75])
    assert spec.transition_tensor().shape == (3, 2, 3)


def test_load_and_dump_spec(tmp_path, spec):
    """Tester l'aller-retour JSON et l'identifiant par défaut tiré du nom de fichier."""
    path = tmp_path / "instance.json"
    dump_spec(spec, path)
    assert load_spec(path) == spec
    data = json.loads(path.read_text(encoding="utf-8"))
    del data["id"]
    path.write_text(json.dumps(data), encoding="utf-8")
    assert load_spec(path).spec_id == "instance"


def test_load_spec_errors(tmp_path):
    """Tester les erreurs de lecture avec le chemin en contexte."""
    with pytest.raises(FileNotFoundError, match="absent.json"):
        load_spec(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{ pas du json", encoding="utf-8")
    with pytest.raises(SpecValidationError, match="broken.json"):
        load_spec(broken)


def test_spec_is_hashable_and_immutable(spec):
    """Tester que la spécification est immuable et utilisable comme clé."""
    assert {spec: 1}[spec] == 1
    with pytest.raises(Exception):
        spec.lam = 2.0
    assert isinstance(spec, MdpSpec)
