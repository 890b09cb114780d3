"""Scenario-tree evaluation backends.

Two implementations of the hot rollout/adjoint loop: a Cython extension
covering scalar problems in the coefficient family (expectation,
softplus-AV@R, and KL stage risks), and a pure-numpy engine that handles
every Problem and every smooth risk spec. The compiled backend is picked
at import time when present; RISKMPC_BACKEND=pure|compiled|auto forces
the choice.
"""

import os

from . import pure

_env = os.environ.get("RISKMPC_BACKEND", "auto").lower()
if _env not in ("auto", "pure", "compiled"):
    raise ValueError(f"RISKMPC_BACKEND must be auto, pure or compiled, got {_env!r}")

try:
    from . import _core

    COMPILED_AVAILABLE = True
except ImportError:
    _core = None
    COMPILED_AVAILABLE = False

if _env == "compiled" and not COMPILED_AVAILABLE:
    raise ImportError("RISKMPC_BACKEND=compiled but the compiled kernel is not built")

USE_COMPILED = COMPILED_AVAILABLE and _env != "pure"


def backend_name() -> str:
    return "compiled" if USE_COMPILED else "pure"
