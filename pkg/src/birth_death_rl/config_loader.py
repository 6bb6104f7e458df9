"""
Configuration loader pour l'apprenant, le harnais et la vérification.
Permet de charger la configuration depuis JSON, .env et l'environnement.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

ENV_PREFIX = "BDRL_"

# Variable d'environnement -> (section, clé)
ENV_KEYS = {
    "BDRL_MODE": ("learner", "mode"),
    "BDRL_DELTA": ("learner", "delta"),
    "BDRL_MAX_EVI_ITERATIONS": ("learner", "max_evi_iterations"),
    "BDRL_EVI_ACCURACY_MODE": ("learner", "evi_accuracy_mode"),
    "BDRL_MASTER_SEED": ("harness", "master_seed"),
    "BDRL_PARALLELISM": ("harness", "parallelism"),
    "BDRL_CHECKPOINTS": ("harness", "checkpoints"),
    "BDRL_PROGRESS": ("harness", "progress"),
    "BDRL_VERIFY_SEED": ("verify", "seed"),
    "BDRL_POLICY_CAP": ("verify", "policy_cap"),
}


@dataclass
class LearnerDefaults:
    """Valeurs par défaut de l'apprenant UCRL2"""
    mode: str = "tweaked"
    delta: float = 0.05
    max_evi_iterations: int = 20000
    evi_accuracy_mode: str = "r_max"

    def as_overrides(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "delta": self.delta,
            "max_evi_iterations": self.max_evi_iterations,
            "evi_accuracy_mode": self.evi_accuracy_mode,
        }


@dataclass
class HarnessDefaults:
    """Valeurs par défaut du harnais d'expériences"""
    master_seed: int = 0
    parallelism: int = 1
    checkpoints: str = "pow2"
    progress: bool = True


@dataclass
class VerifyDefaults:
    """Valeurs par défaut de la suite d'oracles"""
    seed: int = 0
    policy_cap: int = 100000


class ConfigLoader:
    """Chargeur de configuration flexible"""

    def __init__(self, config_dir: Optional[Path] = None):
        if config_dir is None:
            project_root = Path(__file__).parent.parent.parent
            config_dir = project_root / "config"
        self.config_dir = Path(config_dir)
        self.config: Dict[str, Any] = {}
        self.learner = LearnerDefaults()
        self.harness = HarnessDefaults()
        self.verify = VerifyDefaults()

    def load_config(self, json_file: str = "defaults.json", env_file: str = ".env") -> Dict[str, Any]:
        """Charge la configuration depuis JSON, .env puis l'environnement"""

        # 1. Charger la configuration JSON de base
        json_path = self.config_dir / json_file
        if json_path.exists():
            try:
                with open(json_path, "r", encoding="utf-8") as f:
                    self.config = json.load(f)
            except json.JSONDecodeError as exc:
                raise ValueError(f"Configuration JSON invalide : {json_path}") from exc
            logger.info(f"Configuration JSON chargée depuis {json_path}")
        else:
            logger.warning(f"Fichier de configuration JSON non trouvé : {json_path}")
            self.config = self._get_default_config()

        # 2. Charger les overrides depuis .env
        env_path = self.config_dir / env_file
        if env_path.exists():
            self._load_env_overrides(env_path)
            logger.info(f"Overrides .env chargés depuis {env_path}")

        # 3. Charger les variables d'environnement
        self._load_env_variables()

        # 4. Parser les sections typées
        self._parse_sections()

        return self.config

    def _load_env_overrides(self, env_path: Path):
        """Charge les overrides depuis un fichier .env"""
        with open(env_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, value = line.split("=", 1)
                    self._apply_env_override(key.strip(), value.strip())

    def _load_env_variables(self):
        """Charge les variables d'environnement système"""
        for key, value in os.environ.items():
            if key.startswith(ENV_PREFIX):
                self._apply_env_override(key, value)

    def _apply_env_override(self, key: str, value: str):
        """Applique un override depuis une variable d'environnement"""
        target = ENV_KEYS.get(key)
        if target is None:
            if key.startswith(ENV_PREFIX):
                logger.warning(f"⚠️ Variable de configuration inconnue ignorée : {key}")
            return

        # Conversion des types
        converted: Any = value
        if value.lower() in ("true", "false"):
            converted = value.lower() == "true"
        elif value.isdigit():
            converted = int(value)
        elif value.replace(".", "", 1).isdigit():
            converted = float(value)

        section, name = target
        self.config.setdefault(section, {})[name] = converted

    def _parse_sections(self):
        """Parse les sections learner, harness et verify"""
        learner = self.config.get("learner", {})
        self.learner = LearnerDefaults(
            mode=str(learner.get("mode", "tweaked")),
            delta=float(learner.get("delta", 0.05)),
            max_evi_iterations=int(learner.get("max_evi_iterations", 20000)),
            evi_accuracy_mode=str(learner.get("evi_accuracy_mode", "r_max")),
        )
        harness = self.config.get("harness", {})
        self.harness = HarnessDefaults(
            master_seed=int(harness.get("master_seed", 0)),
            parallelism=int(harness.get("parallelism", 1)),
            checkpoints=str(harness.get("checkpoints", "pow2")),
            progress=bool(harness.get("progress", True)),
        )
        verify = self.config.get("verify", {})
        self.verify = VerifyDefaults(
            seed=int(verify.get("seed", 0)),
            policy_cap=int(verify.get("policy_cap", 100000)),
        )

    def _get_default_config(self) -> Dict[str, Any]:
        """Configuration par défaut si aucun fichier n'est trouvé"""
        return {
            "learner": LearnerDefaults().as_overrides(),
            "harness": {"master_seed": 0, "parallelism": 1, "checkpoints": "pow2", "progress": True},
            "verify": {"seed": 0, "policy_cap": 100000},
        }


# Instance globale
_config_loader = None


def get_config_loader() -> ConfigLoader:
    """Récupère l'instance globale du loader de configuration"""
    global _config_loader
    if _config_loader is None:
        _config_loader = ConfigLoader()
        _config_loader.load_config()
    return _config_loader


def reload_config():
    """Recharge la configuration"""
    global _config_loader
    _config_loader = None
    return get_config_loader()
