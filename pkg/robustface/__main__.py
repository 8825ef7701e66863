"""``python -m robustface``: same entry point as the ``robustface`` console script."""

import sys

from robustface.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
