"""Entry point for ``python -m modnet``."""

import sys

from modnet.cli import main

if __name__ == "__main__":
    sys.exit(main())
