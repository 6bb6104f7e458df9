"""Regret d'UCRL2 sur les MDP de naissance et de mort contrôlés (files à vitesse réglable)."""

__all__ = [
    "mdp_core",
    "planner",
    "bd_analytics",
    "ucrl2",
    "harness",
    "oracle",
]
