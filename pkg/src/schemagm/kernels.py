"""Hot-kernel dispatch.

The compiled ``_fastcore`` extension is used when it imports; otherwise the
numpy implementations in ``_purecore`` are used. Both expose the same
functions with the same contracts.
"""
from . import _purecore

try:
    from . import _fastcore
except ImportError:  # extension not built
    _fastcore = None

_BACKENDS = {"python": _purecore}
if _fastcore is not None:
    _BACKENDS["compiled"] = _fastcore

_active = _fastcore if _fastcore is not None else _purecore


def available_backends():
    return sorted(_BACKENDS)


def backend():
    """Name of the active backend."""
    return "compiled" if _active is _fastcore else "python"


def set_backend(name):
    """Select a kernel backend by name ("compiled" or "python")."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    _active = _BACKENDS[name]


def digamma(x):
    return _active.digamma(x)


def scatter_add_rows(out, index, values):
    return _active.scatter_add_rows(out, index, values)


def softmax_rows(logits):
    return _active.softmax_rows(logits)


def coupled_sweep(*args):
    return _active.coupled_sweep(*args)
