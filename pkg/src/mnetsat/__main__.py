"""Allow ``python -m mnetsat``."""

import sys

from .cli import main

sys.exit(main())
