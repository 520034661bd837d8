"""Per-node kernel backends.

The compiled extension is used when it imports; the numpy fallback otherwise.
Set ``HOGWILD_GNN_KERNELS=python`` (or ``compiled``) to force a choice.
"""
from __future__ import annotations

import os

from . import _pykernels

try:  # pragma: no cover - depends on the build
    from . import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels


def available() -> list:
    return sorted(_BACKENDS)


def get(name: str | None = None):
    """Kernel module by name; default honours the environment variable."""
    if name is None:
        name = os.environ.get("HOGWILD_GNN_KERNELS", "").strip().lower() or None
    if name is None:
        return _BACKENDS.get("compiled", _pykernels)
    if name not in _BACKENDS:
        raise ImportError(f"kernel backend {name!r} is not available (have {available()})")
    return _BACKENDS[name]


BACKEND = get().BACKEND
