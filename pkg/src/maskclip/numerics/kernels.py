"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

The active backend is chosen once at import. ``use_backend`` switches it for
benchmarks and cross-backend tests; results of the two backends agree to
rounding but are not bitwise identical, so a training run must not switch
mid-way.
"""

from contextlib import contextmanager

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_forward",
    "softmax_backward",
    "log_softmax_forward",
    "log_softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "smooth_l1_forward",
    "smooth_l1_backward",
)

BACKENDS = {"python": _fallback}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels

_active = None


def available_backends():
    return sorted(BACKENDS)


def backend():
    """Name of the backend currently serving kernel calls."""
    return _active


def set_backend(name):
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    mod = BACKENDS[name]
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    _active = name


@contextmanager
def use_backend(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


set_backend("compiled" if _ckernels is not None else "python")
