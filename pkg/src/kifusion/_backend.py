"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
numpy implementation in ``_pykernels`` takes over.  Both expose the same
functions with the same argument conventions.
"""

from __future__ import annotations

from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

kernels: ModuleType = _ckernels if _ckernels is not None else _pykernels
name: str = "cython" if _ckernels is not None else "python"


def available() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use(backend: str) -> None:
    """Switch the active kernel module (``"python"`` or ``"cython"``)."""
    global kernels, name
    if backend == "python":
        kernels, name = _pykernels, "python"
    elif backend == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        kernels, name = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {backend!r}")
