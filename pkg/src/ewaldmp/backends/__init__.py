"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist:

* ``python``   -- NumPy reference (always available),
* ``compiled`` -- Cython extension built at install time.

The compiled one is preferred when importable.  ``EWALDMP_BACKEND=python``
or ``EWALDMP_BACKEND=compiled`` forces the choice; forcing ``compiled`` when
the extension is missing raises ImportError rather than silently falling
back.
"""

import os

from ..errors import ConfigError
from . import reference

_VALID = {"python", "compiled", ""}


def _load_compiled():
    from . import fast

    return fast


def _select():
    forced = os.environ.get("EWALDMP_BACKEND", "")
    if forced not in _VALID:
        raise ConfigError(
            f"EWALDMP_BACKEND must be 'python' or 'compiled', got {forced!r}"
        )
    if forced == "python":
        return reference
    if forced == "compiled":
        return _load_compiled()
    try:
        return _load_compiled()
    except ImportError:
        return reference


active = _select()


def active_name():
    return active.NAME


def available_backends():
    names = ["python"]
    try:
        _load_compiled()
        names.append("compiled")
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == "python":
        return reference
    if name == "compiled":
        return _load_compiled()
    raise ConfigError(f"unknown backend {name!r}")
