"""Backend selection for the hot loops.

``BRWRE_BACKEND=numba`` (default) uses the compiled kernels; ``numpy`` uses
the vectorized fallback.  Walk kernels agree bit for bit across backends.

Walk kernel contract
--------------------
``thr`` is the ``(n_sites, 2d)`` threshold table of a walk table
(see ``Environment.walk_table``).  The move taken from a site is the number
of thresholds ``<= u`` where ``u`` is the step uniform; 0 means hold and
``2i+1`` / ``2i+2`` mean ``+e_i`` / ``-e_i``.  ``mode`` 0 reads a box of
radius ``R`` and flags escapes, ``mode`` 1 wraps on a torus of side
``2R + 1``.  Status codes: 0 ran to the horizon, 1 exited, 2 hit the step
cap, 3 escaped the table.
"""
from __future__ import annotations

import contextlib
import logging
import os

import numpy as np

from . import _kernels_numpy

log = logging.getLogger(__name__)

HORIZON, EXITED, CAPPED, ESCAPED = 0, 1, 2, 3
NORM_NONE, NORM_L2, NORM_LINF = 0, 1, 2

try:
    from . import _kernels_numba
except Exception as exc:  # pragma: no cover - numba missing or broken
    _kernels_numba = None
    log.warning("numba kernels unavailable (%s); using numpy", exc)

_state = {"name": None}


def _resolve(name: str | None) -> str:
    name = (name or os.environ.get("BRWRE_BACKEND", "numba")).strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r} (expected numba or numpy)")
    if name == "numba" and _kernels_numba is None:
        return "numpy"
    return name


def backend() -> str:
    """Name of the active backend."""
    return _resolve(_state["name"])


@contextlib.contextmanager
def use_backend(name: str):
    old = _state["name"]
    _state["name"] = _resolve(name)
    try:
        yield
    finally:
        _state["name"] = old


def _impl():
    return _kernels_numba if backend() == "numba" else _kernels_numpy


def _walk_args(table, x0, keys):
    thr, mode, R = table
    return (
        np.ascontiguousarray(thr, dtype=np.float64),
        int(mode),
        int(R),
        np.ascontiguousarray(x0, dtype=np.int64),
        np.ascontiguousarray(keys, dtype=np.uint64),
    )


def run_stopped(table, x0, keys, n_max: int, norm: int = NORM_NONE, radius: float = 0.0):
    """Run one walk per key until exit (``norm``/``radius``) or ``n_max`` steps."""
    thr, mode, R, x0, keys = _walk_args(table, x0, keys)
    return _impl().run_stopped(thr, mode, R, x0, keys, int(n_max), int(norm), float(radius))


def annulus_visits(table, x0, target, keys, radii, cap: int):
    """Visits to ``target`` in each window [tau_k, tau_{k+1}) with tau_0 = 0."""
    thr, mode, R, x0, keys = _walk_args(table, x0, keys)
    return _impl().annulus_visits(
        thr, mode, R, x0, np.ascontiguousarray(target, dtype=np.int64), keys,
        np.ascontiguousarray(radii, dtype=np.float64), int(cap),
    )


def time_visits(table, x0, target, keys, horizons):
    """Visits to ``target`` at times 0..h for each (sorted) horizon h."""
    thr, mode, R, x0, keys = _walk_args(table, x0, keys)
    horizons = np.ascontiguousarray(horizons, dtype=np.int64)
    if np.any(np.diff(horizons) < 0) or (horizons.size and horizons[0] < 0):
        raise ValueError("horizons must be sorted and nonnegative")
    return _impl().time_visits(
        thr, mode, R, x0, np.ascontiguousarray(target, dtype=np.int64), keys, horizons
    )


def sample_path(table, x0, key: int, n: int):
    """Path of length ``n``; the flag is False if the walk escaped the table."""
    thr, mode, R, x0, _ = _walk_args(table, x0, np.zeros(0, np.uint64))
    return _impl().sample_path(thr, mode, R, x0, np.uint64(key), int(n))


def torus_push(phi, stay, axis, side: int, d: int):
    """One step of the adjoint: ``(phi P)(x)`` on the torus, flat row-major arrays."""
    return _impl().torus_push(
        np.ascontiguousarray(phi, dtype=np.float64),
        np.ascontiguousarray(stay, dtype=np.float64),
        np.ascontiguousarray(axis, dtype=np.float64),
        int(side), int(d),
    )


def label_clusters(open_flat, side: int, d: int):
    """Nearest-neighbour cluster labels of a cube, -1 on closed sites."""
    return _impl().label_clusters(np.ascontiguousarray(open_flat, dtype=np.bool_), int(side), int(d))


def origin_clusters(open_batch, side: int, d: int):
    """Per-sample statistics of the open cluster of the cube centre."""
    return _impl().origin_clusters(
        np.ascontiguousarray(open_batch, dtype=np.bool_), int(side), int(d)
    )
