"""Backend selection for the conv/pool hot kernels.

Two interchangeable implementations exist:

* ``_ckernels`` -- compiled Cython extension, preferred when built;
* ``_pykernels`` -- vectorized numpy fallback, always available.

``impl`` holds the active module; the environment variable
``GUTSEG_KERNELS`` (``auto``/``c``/``py``, default ``auto``) picks the
backend at import, and :func:`set_backend` switches it at runtime (used
by the benchmark and the cross-backend tests).
"""
from __future__ import annotations

import os

from ..errors import ConfigError
from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"py": _pykernels, "c": _ckernels}

impl = _pykernels
impl_name = "py"


def available_backends() -> tuple[str, ...]:
    return tuple(name for name, mod in _BACKENDS.items() if mod is not None)


def get_backend(name: str):
    """Return the backend module for ``name`` ('py' or 'c')."""
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; choose from py, c")
    mod = _BACKENDS[name]
    if mod is None:
        raise ConfigError("compiled kernels are not built; reinstall with a C compiler "
                          "or use the 'py' backend")
    return mod


def set_backend(name: str) -> None:
    global impl, impl_name
    impl = get_backend(name)
    impl_name = name


def _select_from_env() -> None:
    choice = os.environ.get("GUTSEG_KERNELS", "auto").lower()
    if choice == "auto":
        set_backend("c" if _ckernels is not None else "py")
    elif choice in _BACKENDS:
        set_backend(choice)
    else:
        raise ConfigError(f"GUTSEG_KERNELS={choice!r} is not one of auto, c, py")


_select_from_env()
