"""Point d'entrée principal du paquet birth_death_rl."""

import sys

from birth_death_rl.cli import main

if __name__ == "__main__":
    sys.exit(main())
