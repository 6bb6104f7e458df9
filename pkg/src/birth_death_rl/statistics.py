"""Module de gestion des statistiques de balayage et rapport de synthèse."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class SweepStats:
    """Statistiques d'un balayage d'expériences (points de grille × graines)."""

    # Totaux
    total_runs_planned: int = 0
    total_completed: int = 0
    total_failed: int = 0

    # Volume simulé
    total_steps: int = 0
    total_episodes: int = 0

    # Listes de détails pour le rapport détaillé
    failed_runs: List[str] = field(default_factory=list)
    exported_files: List[str] = field(default_factory=list)

    # Erreurs par catégorie
    errors_by_type: Dict[str, int] = field(default_factory=dict)

    # Timing
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None

    def start_processing(self) -> None:
        """Marquer le début du balayage."""
        self.start_time = datetime.now()

    def end_processing(self) -> None:
        """Marquer la fin du balayage."""
        self.end_time = datetime.now()

    @property
    def duration(self) -> Optional[float]:
        """Durée du balayage en secondes."""
        if self.start_time and self.end_time:
            return (self.end_time - self.start_time).total_seconds()
        return None

    @property
    def success_rate(self) -> float:
        """Taux de réussite en pourcentage."""
        if self.total_runs_planned == 0:
            return 0.0
        return (self.total_completed / self.total_runs_planned) * 100

    def add_completed_run(self, steps: int, episodes: int) -> None:
        self.total_completed += 1
        self.total_steps += steps
        self.total_episodes += episodes

    def add_failed_run(self, run_label: str, error_type: str, error_msg: str) -> None:
        """Ajouter une exécution en échec."""
        self.total_failed += 1
        self.failed_runs.append(f"{run_label}: {error_msg}")
        self.errors_by_type[error_type] = self.errors_by_type.get(error_type, 0) + 1

    def add_exported_file(self, path: Path) -> None:
        self.exported_files.append(str(path))

    def print_console_summary(self) -> None:
        """Afficher un résumé concis dans la console."""
        print("\n" + "=" * 60)
        print("📊 RÉSUMÉ DU BALAYAGE")
        print("=" * 60)

        print(f"🧪 Exécutions prévues : {self.total_runs_planned}")
        print(f"✅ Exécutions terminées : {self.total_completed}")
        if self.total_steps > 0:
            print(f"   👣 Pas simulés : {self.total_steps}")
            print(f"   🔁 Épisodes : {self.total_episodes}")

        if self.total_failed > 0:
            print(f"❌ Exécutions en échec : {self.total_failed}")

        if self.total_runs_planned > 0:
            print(f"📈 Taux de réussite : {self.success_rate:.1f}%")

        if self.duration:
            print(f"⏱️  Durée : {self.duration:.1f}s")

        if self.errors_by_type:
            print("\n🔍 Types d'erreurs principales :")
            for error_type, count in sorted(self.errors_by_type.items(), key=lambda x: x[1], reverse=True)[:3]:
                print(f"   • {error_type}: {count} exécution(s)")

        print("=" * 60)

        if self.total_failed > 0:
            print("💡 Consultez le rapport détaillé pour plus d'informations.")

    def to_report(self) -> dict:
        return {
            "execution_timestamp": datetime.now().isoformat(),
            "summary": {
                "total_runs_planned": self.total_runs_planned,
                "total_completed": self.total_completed,
                "total_failed": self.total_failed,
                "total_steps": self.total_steps,
                "total_episodes": self.total_episodes,
                "success_rate": self.success_rate,
                "duration_seconds": self.duration,
            },
            "details": {
                "failed_runs": self.failed_runs,
                "exported_files": self.exported_files,
                "errors_by_type": self.errors_by_type,
            },
        }

    def save_detailed_report(self, log_file: Path) -> None:
        """Sauvegarder un rapport détaillé dans un fichier spécifique à ce balayage."""
        try:
            with open(log_file, "w", encoding="utf-8", newline="\n") as f:
                json.dump(self.to_report(), f, indent=2, ensure_ascii=False)
            logger.info(f"📄 Rapport détaillé sauvegardé : {log_file}")
        except OSError as e:
            logger.error(f"Erreur lors de la sauvegarde du rapport : {e}")
