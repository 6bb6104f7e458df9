"""Classe des MDP de naissance et de mort contrôlés (file à vitesse réglable).

Un MDP de la classe modélise un processeur DVFS : les tâches arrivent avec un
taux décroissant ``λ_i = λ(1 - i/(S-1))``, quittent la file à cause de leur
échéance (taux ``μ`` par tâche, coût ``C``) ou parce qu'elles sont servies à la
vitesse ``a`` choisie (énergie ``w(a)``). La chaîne est uniformisée par la
constante ``U = λ_max + (S-1)μ_max + A_max``.

Ce module construit et valide les paramètres, expose les lignes de transition
exactes, les récompenses moyennes et la simulation d'un pas.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Clés du format JSON des spécifications (interface de la CLI)
SPEC_KEYS = (
    "lambda",
    "mu",
    "deadline_cost",
    "num_states",
    "max_speed",
    "lambda_max",
    "mu_max",
    "energy_table",
)

CONVEXITY_TOLERANCE = 1e-12


class SpecValidationError(ValueError):
    """Paramètres incompatibles avec la classe de MDP."""


class StateCountError(SpecValidationError):
    """Moins de deux états."""


class NegativeParameterError(SpecValidationError):
    """Un taux, un coût ou une entrée de la table d'énergie est négatif."""


class NonFiniteParameterError(SpecValidationError):
    """Un paramètre numérique est NaN ou infini."""


class RateBoundError(SpecValidationError):
    """λ > λ_max ou μ > μ_max."""


class EnergyTableError(SpecValidationError):
    """Table d'énergie de mauvaise longueur ou non croissante."""


class NonConvexEnergyError(SpecValidationError):
    """La fonction d'énergie w n'est pas convexe."""


class DegenerateRateError(SpecValidationError):
    """μ = 0 : la borne r_max = C + w(A_max)/μ n'est pas définie."""


class StateRangeError(ValueError):
    """État hors de {0, ..., S-1}."""


class ActionRangeError(ValueError):
    """Action (vitesse) hors de {0, ..., A_max}."""


@dataclass(frozen=True)
class MdpSpec:
    """Paramétrage complet d'un MDP de la classe.

    Les grandeurs dérivées (``uniformization``, ``arrival_rates``, ``r_max``)
    sont calculées à la demande puis mises en cache ; l'objet reste immuable.
    """

    lam: float
    mu: float
    deadline_cost: float
    num_states: int
    max_speed: int
    lam_max: float
    mu_max: float
    energy_table: Tuple[float, ...]
    spec_id: str = field(default="", compare=False)

    @property
    def num_actions(self) -> int:
        return self.max_speed + 1

    @cached_property
    def uniformization(self) -> float:
        """Constante U = λ_max + (S-1)μ_max + A_max."""
        return self.lam_max + (self.num_states - 1) * self.mu_max + self.max_speed

    @cached_property
    def arrival_rates(self) -> np.ndarray:
        """Taux d'arrivée décroissants λ_i = λ(1 - i/(S-1)), avec λ_{S-1} = 0."""
        states = np.arange(self.num_states, dtype=float)
        rates = self.lam * (1.0 - states / (self.num_states - 1))
        rates[-1] = 0.0
        return rates

    @cached_property
    def r_max(self) -> float:
        return self.deadline_cost + self.energy_table[self.max_speed] / self.mu

    @cached_property
    def _step_table(self) -> List[List[Tuple[float, float, float, float]]]:
        # (descente, montée, récompense sans échéance manquée, proba d'échéance manquée)
        U = self.uniformization
        table = []
        for s in range(self.num_states):
            up = float(self.arrival_rates[s]) / U if s < self.num_states - 1 else 0.0
            row = []
            for a in range(self.num_actions):
                down = (a + s * self.mu) / U if s > 0 else 0.0
                base = self.r_max - self.energy_table[a] / U
                row.append((down, up, base, s * self.mu / U))
            table.append(row)
        return table

    def check_state(self, s: int) -> None:
        if not 0 <= s < self.num_states:
            raise StateRangeError(f"État {s} hors de [0, {self.num_states - 1}]")

    def check_action(self, a: int) -> None:
        if not 0 <= a <= self.max_speed:
            raise ActionRangeError(f"Vitesse {a} hors de [0, {self.max_speed}]")

    def transition_tensor(self) -> np.ndarray:
        """Noyau complet P[s, a, s'] de forme (S, A, S)."""
        S, A = self.num_states, self.num_actions
        tensor = np.zeros((S, A, S))
        for s in range(S):
            for a in range(A):
                tensor[s, a] = transition_row(self, s, a)
        return tensor

    def mean_reward_table(self) -> np.ndarray:
        """Récompenses moyennes r̄[s, a] de forme (S, A)."""
        states = np.arange(self.num_states, dtype=float)[:, None]
        energy = np.asarray(self.energy_table, dtype=float)[None, :]
        U = self.uniformization
        return self.r_max - energy / U - self.deadline_cost * states * self.mu / U

    def kernel(self, policy: "Policy") -> np.ndarray:
        """Matrice de transition S×S de la chaîne induite par ``policy``."""
        return np.vstack([transition_row(self, s, a) for s, a in enumerate(policy.speeds)])

    def reward_vector(self, policy: "Policy") -> np.ndarray:
        table = self.mean_reward_table()
        return table[np.arange(self.num_states), policy.array]

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "lambda": self.lam,
            "mu": self.mu,
            "deadline_cost": self.deadline_cost,
            "num_states": self.num_states,
            "max_speed": self.max_speed,
            "lambda_max": self.lam_max,
            "mu_max": self.mu_max,
            "energy_table": list(self.energy_table),
        }
        if self.spec_id:
            data["id"] = self.spec_id
        return data


@dataclass(frozen=True)
class Policy:
    """Politique stationnaire déterministe : une vitesse par état."""

    speeds: Tuple[int, ...]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.speeds, dtype=int)

    @classmethod
    def for_spec(cls, spec: MdpSpec, speeds: Sequence[int]) -> "Policy":
        """Construire une politique en vérifiant sa compatibilité avec ``spec``."""
        speeds = tuple(int(a) for a in speeds)
        if len(speeds) != spec.num_states:
            raise ActionRangeError(
                f"La politique a {len(speeds)} entrées pour {spec.num_states} états"
            )
        for a in speeds:
            spec.check_action(a)
        return cls(speeds)

    @classmethod
    def zeros(cls, spec: MdpSpec) -> "Policy":
        """Politique de référence π⁰ (vitesse nulle partout)."""
        return cls((0,) * spec.num_states)

    @classmethod
    def full_speed(cls, spec: MdpSpec) -> "Policy":
        """Politique π^max (vitesse A_max partout)."""
        return cls((spec.max_speed,) * spec.num_states)

    @classmethod
    def random(cls, spec: MdpSpec, rng: np.random.Generator) -> "Policy":
        return cls(tuple(int(a) for a in rng.integers(0, spec.num_actions, size=spec.num_states)))

    @classmethod
    def all_policies(cls, spec: MdpSpec) -> Iterator["Policy"]:
        """Énumérer les A^S politiques déterministes (petites instances uniquement)."""
        for speeds in itertools.product(range(spec.num_actions), repeat=spec.num_states):
            yield cls(speeds)


def _as_float(params: Mapping[str, Any], key: str) -> float:
    try:
        value = float(params[key])
    except KeyError as exc:
        raise SpecValidationError(f"Paramètre '{key}' manquant") from exc
    except (TypeError, ValueError) as exc:
        raise SpecValidationError(f"Paramètre '{key}' non numérique : {params[key]!r}") from exc
    if not math.isfinite(value):
        raise NonFiniteParameterError(f"Paramètre '{key}' non fini : {value}")
    return value


def _as_int(params: Mapping[str, Any], key: str) -> int:
    value = _as_float(params, key)
    if value != int(value):
        raise SpecValidationError(f"Paramètre '{key}' doit être entier : {value}")
    return int(value)


def build_spec(params: Mapping[str, Any]) -> MdpSpec:
    """Valider ``params`` (clés du format JSON) et construire un :class:`MdpSpec`.

    Chaque violation lève une sous-classe distincte de :class:`SpecValidationError`.
    """
    lam = _as_float(params, "lambda")
    mu = _as_float(params, "mu")
    deadline_cost = _as_float(params, "deadline_cost")
    lam_max = _as_float(params, "lambda_max")
    mu_max = _as_float(params, "mu_max")
    num_states = _as_int(params, "num_states")
    max_speed = _as_int(params, "max_speed")

    raw_table = params.get("energy_table")
    if not isinstance(raw_table, (list, tuple)):
        raise EnergyTableError("La table d'énergie doit être une liste de nombres")
    energy_table = []
    for a, value in enumerate(raw_table):
        try:
            value = float(value)
        except (TypeError, ValueError) as exc:
            raise EnergyTableError(f"w({a}) non numérique : {value!r}") from exc
        if not math.isfinite(value):
            raise NonFiniteParameterError(f"w({a}) non fini : {value}")
        energy_table.append(value)

    for name, value in (
        ("lambda", lam), ("mu", mu), ("deadline_cost", deadline_cost),
        ("lambda_max", lam_max), ("mu_max", mu_max), ("max_speed", max_speed),
    ):
        if value < 0:
            raise NegativeParameterError(f"Paramètre '{name}' négatif : {value}")
    for a, value in enumerate(energy_table):
        if value < 0:
            raise NegativeParameterError(f"w({a}) négatif : {value}")

    if num_states < 2:
        raise StateCountError(f"Il faut au moins 2 états (S={num_states})")
    if len(energy_table) != max_speed + 1:
        raise EnergyTableError(
            f"La table d'énergie doit avoir A_max+1 = {max_speed + 1} entrées, "
            f"{len(energy_table)} reçues"
        )
    if mu == 0:
        raise DegenerateRateError("μ = 0 : r_max = C + w(A_max)/μ n'est pas défini")
    if lam > lam_max:
        raise RateBoundError(f"λ = {lam} dépasse λ_max = {lam_max}")
    if mu > mu_max:
        raise RateBoundError(f"μ = {mu} dépasse μ_max = {mu_max}")

    for a in range(1, len(energy_table)):
        if energy_table[a] < energy_table[a - 1]:
            raise EnergyTableError(f"w n'est pas croissante en a={a}")
    for a in range(1, max_speed):
        second = energy_table[a + 1] - 2 * energy_table[a] + energy_table[a - 1]
        if second < -CONVEXITY_TOLERANCE:
            raise NonConvexEnergyError(
                f"w n'est pas convexe en a={a} (différence seconde {second:g})"
            )

    spec = MdpSpec(
        lam=lam,
        mu=mu,
        deadline_cost=deadline_cost,
        num_states=num_states,
        max_speed=max_speed,
        lam_max=lam_max,
        mu_max=mu_max,
        energy_table=tuple(energy_table),
        spec_id=str(params.get("id", "")),
    )
    logger.debug(
        "Spécification construite : S=%d, A=%d, U=%g, r_max=%g",
        spec.num_states, spec.num_actions, spec.uniformization, spec.r_max,
    )
    return spec


def load_spec(path: Path) -> MdpSpec:
    """Lire une spécification JSON ; l'identifiant par défaut est le nom du fichier."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"Spécification introuvable : {path}") from exc
    except json.JSONDecodeError as exc:
        raise SpecValidationError(f"JSON invalide dans {path}") from exc
    if not isinstance(data, dict):
        raise SpecValidationError(f"La spécification {path} doit être un objet JSON")
    data.setdefault("id", path.stem)
    return build_spec(data)


def dump_spec(spec: MdpSpec, path: Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def structural_support(num_states: int, s: int) -> Tuple[int, ...]:
    """Voisinage {s-1, s, s+1} tronqué à [0, S-1] ; ne dépend que de S."""
    return tuple(x for x in (s - 1, s, s + 1) if 0 <= x < num_states)


def support_of(spec: MdpSpec, s: int, a: int) -> Tuple[int, ...]:
    """Support structurel de P(·|s, a), indépendant des valeurs des probabilités."""
    spec.check_state(s)
    spec.check_action(a)
    return structural_support(spec.num_states, s)


def transition_row(spec: MdpSpec, s: int, a: int) -> np.ndarray:
    """Ligne P(·|s, a) ; la boucle sur s est calculée comme le résidu."""
    spec.check_state(s)
    spec.check_action(a)
    down, up, _, _ = spec._step_table[s][a]
    row = np.zeros(spec.num_states)
    if s > 0:
        row[s - 1] = down
    if s < spec.num_states - 1:
        row[s + 1] = up
    row[s] = 1.0 - down - up
    return row


def mean_reward(spec: MdpSpec, s: int, a: int) -> float:
    """r̄(s, a) = r_max - w(a)/U - C·sμ/U."""
    spec.check_state(s)
    spec.check_action(a)
    _, _, base, miss = spec._step_table[s][a]
    return base - spec.deadline_cost * miss


def sample_step(spec: MdpSpec, s: int, a: int, rng: np.random.Generator) -> Tuple[int, float]:
    """Simuler un pas depuis (s, a).

    Le flux ``rng`` est consommé dans un ordre fixe : un uniforme pour l'état
    suivant, puis un uniforme pour la Bernoulli d'échéance manquée.
    """
    spec.check_state(s)
    spec.check_action(a)
    down, up, base, miss = spec._step_table[s][a]
    u_state = rng.random()
    u_reward = rng.random()
    if u_state < down:
        next_state = s - 1
    elif u_state < down + up:
        next_state = s + 1
    else:
        next_state = s
    reward = base - spec.deadline_cost if u_reward < miss else base
    return next_state, reward
