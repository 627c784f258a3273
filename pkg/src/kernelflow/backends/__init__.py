"""Backend selection for the hot field-recursion kernels.

The compiled extension (``kernelflow.backends._fieldcore``, Cython) and
the pure-numpy implementation expose the same ``field_chunk`` contract.
The extension is preferred when importable; set ``KERNELFLOW_BACKEND``
to ``numpy`` or ``cython`` to force one (``cython`` raises if the
extension is missing).  Both produce the same results to floating-point
roundoff; see ``benchmarks/bench_backends.py`` for the speed comparison.
"""

from __future__ import annotations

import os

from . import fields_numpy

_FORCED = os.environ.get("KERNELFLOW_BACKEND", "auto").lower()

if _FORCED not in {"auto", "numpy", "cython"}:
    raise ValueError(f"KERNELFLOW_BACKEND must be auto|numpy|cython, got '{_FORCED}'")

_compiled = None
if _FORCED in {"auto", "cython"}:
    try:
        from . import _fieldcore as _compiled  # type: ignore[attr-defined]
    except ImportError:
        if _FORCED == "cython":
            raise ImportError(
                "KERNELFLOW_BACKEND=cython but the compiled extension is not "
                "available; reinstall with a working C toolchain"
            ) from None

if _compiled is not None:
    active = _compiled
else:
    active = fields_numpy

BACKEND_NAME: str = active.NAME
field_chunk = active.field_chunk


def get_backend(name: str = "active"):
    """Return a backend module by name ('active', 'numpy', 'cython')."""
    if name == "active":
        return active
    if name == "numpy":
        return fields_numpy
    if name == "cython":
        if _compiled is None:
            from . import _fieldcore  # raises ImportError with the real cause

            return _fieldcore
        return _compiled
    raise ValueError(f"unknown backend '{name}'")
