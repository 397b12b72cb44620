"""Select the pair-sum backend at import time.

The compiled extension is preferred when present; setting the environment
variable ``QUADEST_BACKEND=python`` forces the NumPy fallback (useful for
benchmarking and for debugging backend-equivalence issues).
"""

from __future__ import annotations

import os

from . import _fastpath_py

if os.environ.get("QUADEST_BACKEND", "").lower() == "python":
    impl = _fastpath_py
else:
    try:
        from . import _fastpath as impl  # type: ignore[no-redef]
    except ImportError:
        impl = _fastpath_py

BACKEND = impl.BACKEND
pair_sum_dense = impl.pair_sum_dense
asym_pair_sum_dense = impl.asym_pair_sum_dense
cell_sums = impl.cell_sums
cell_pair_sum = impl.cell_pair_sum
trig_pair_stats = impl.trig_pair_stats
