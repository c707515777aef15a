"""Select the event-loop implementation at import time.

The compiled extension is used when it imports; setting
``TWOLEVEL_PURE_PYTHON=1`` forces the pure-Python fallback.
"""

import os

from . import _kernel_py

python_run_chain = _kernel_py.run_chain

try:
    from . import _kernel as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and os.environ.get("TWOLEVEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    run_chain = _compiled.run_chain
    IMPLEMENTATION = _compiled.IMPLEMENTATION
else:
    run_chain = python_run_chain
    IMPLEMENTATION = _kernel_py.IMPLEMENTATION

compiled_run_chain = _compiled.run_chain if _compiled is not None else None

BUFFER = _kernel_py.BUFFER
ROWS = ("F", "G", "XF", "Q", "F2", "RF", "RF2")
