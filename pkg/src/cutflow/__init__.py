"""Monte Carlo laboratory for diffusions in finite-range random drift environments."""

import os

# the TBB layer shipped with some numba wheels is too old; prefer the portable one
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
