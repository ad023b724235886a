"""Finite site sets, grid functions and lattice domains on Z^d."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np

_BITS = 15
_OFFSET = 1 << (_BITS - 1)
MAX_COORD = _OFFSET - 1


def as_sites(sites, d: int | None = None) -> np.ndarray:
    """Coerce to an ``(n, d)`` int64 array."""
    arr = np.asarray(sites, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :] if d is None or arr.shape[0] == d else arr.reshape(-1, d)
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"expected sites of dimension {d}, got {arr.shape[1]}")
    return arr


def encode(sites: np.ndarray) -> np.ndarray:
    """Pack integer sites into sortable int64 keys (|coordinate| < 2**14, d <= 4)."""
    sites = np.asarray(sites, dtype=np.int64)
    if sites.size and np.abs(sites).max() > MAX_COORD:
        raise ValueError("site coordinate out of encodable range")
    key = np.zeros(sites.shape[0], dtype=np.int64)
    for i in range(sites.shape[1]):
        key = (key << _BITS) | (sites[:, i] + _OFFSET)
    return key


def decode(keys: np.ndarray, d: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], d), dtype=np.int64)
    mask = (1 << _BITS) - 1
    for i in range(d - 1, -1, -1):
        out[:, i] = (keys & mask) - _OFFSET
        keys = keys >> _BITS
    return out


class SiteIndex:
    """Sorted lookup table from sites to row numbers."""

    def __init__(self, sites: np.ndarray):
        self.sites = as_sites(sites)
        self.d = self.sites.shape[1]
        keys = encode(self.sites)
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]
        if np.any(np.diff(self._keys) == 0):
            raise ValueError("duplicate sites")

    def __len__(self) -> int:
        return self.sites.shape[0]

    def lookup(self, sites) -> np.ndarray:
        """Row index of each site, or -1 when absent."""
        q = encode(as_sites(sites, self.d))
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, len(self._keys) - 1)
        found = self._keys[pos] == q if len(self._keys) else np.zeros(q.shape, bool)
        out = np.full(q.shape[0], -1, dtype=np.int64)
        out[found] = self._order[pos[found]]
        return out

    def contains(self, sites) -> np.ndarray:
        return self.lookup(sites) >= 0


def unique_sites(sites: np.ndarray) -> np.ndarray:
    """Distinct sites in lexicographic order."""
    sites = as_sites(sites)
    if sites.shape[0] == 0:
        return sites
    d = sites.shape[1]
    return decode(np.unique(encode(sites)), d)


def setdiff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sites of ``a`` not in ``b`` (lexicographic order, distinct)."""
    a, b = as_sites(a), as_sites(b)
    ka = np.unique(encode(a))
    kb = encode(b) if b.shape[0] else np.empty(0, np.int64)
    return decode(np.setdiff1d(ka, kb, assume_unique=False), a.shape[1])


def unit_vectors(d: int) -> np.ndarray:
    return np.eye(d, dtype=np.int64)


def nn_moves(d: int) -> np.ndarray:
    """Moves in kernel order: +e_1, -e_1, +e_2, -e_2, ..."""
    e = unit_vectors(d)
    return np.stack([s * e[i] for i in range(d) for s in (1, -1)])


def linf_offsets(d: int) -> np.ndarray:
    """The 3**d - 1 nonzero offsets with sup-norm 1."""
    return np.array([v for v in itertools.product((-1, 0, 1), repeat=d) if any(v)], dtype=np.int64)


def box_sites(radius: int, d: int) -> np.ndarray:
    """All sites with |x|_inf <= radius in row-major order (last axis fastest)."""
    r = np.arange(-radius, radius + 1, dtype=np.int64)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def l1(x) -> np.ndarray:
    return np.abs(np.asarray(x)).sum(axis=-1)


def linf(x) -> np.ndarray:
    return np.abs(np.asarray(x)).max(axis=-1)


def l2sq(x) -> np.ndarray:
    x = np.asarray(x)
    return (x * x).sum(axis=-1)


def mean_norm(values, j: float) -> float:
    """Normalized l^j average (|E|^-1 sum |f|^j)^(1/j); j may be inf."""
    v = np.abs(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("norm over an empty set")
    if np.isinf(j):
        return float(v.max())
    with np.errstate(over="ignore"):
        return float(np.mean(v ** j) ** (1.0 / j))


ValueSpec = Union[float, int, Callable[[np.ndarray], np.ndarray], "GridFunction", np.ndarray]


class GridFunction:
    """A real function on a finite set of lattice sites."""

    def __init__(self, sites, values):
        self.sites = as_sites(sites)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.sites.shape[0]:
            raise ValueError("sites and values differ in length")
        self.index = SiteIndex(self.sites)

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_callable(cls, sites, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        sites = as_sites(sites)
        return cls(sites, np.broadcast_to(np.asarray(fn(sites), dtype=float), (sites.shape[0],)))

    @classmethod
    def constant(cls, sites, c: float) -> "GridFunction":
        sites = as_sites(sites)
        return cls(sites, np.full(sites.shape[0], float(c)))

    def __call__(self, sites) -> np.ndarray:
        """Values at ``sites``; raises ``KeyError`` when a site is missing."""
        idx = self.index.lookup(sites)
        if np.any(idx < 0):
            missing = as_sites(sites, self.d)[idx < 0][0]
            raise KeyError(f"grid function undefined at {tuple(int(c) for c in missing)}")
        return self.values[idx]

    def at(self, x) -> float:
        return float(self(as_sites(x, self.d))[0])

    def restrict(self, sites) -> "GridFunction":
        sites = as_sites(sites, self.d)
        return GridFunction(sites, self(sites))

    def map(self, fn) -> "GridFunction":
        return GridFunction(self.sites, fn(self.values))

    def merged(self, other: "GridFunction") -> "GridFunction":
        """Union of two grid functions; ``self`` wins on overlaps."""
        extra = ~self.index.contains(other.sites)
        return GridFunction(
            np.concatenate([self.sites, other.sites[extra]]),
            np.concatenate([self.values, other.values[extra]]),
        )


def evaluate(spec: ValueSpec, sites: np.ndarray) -> np.ndarray:
    """Resolve scalars, callables, arrays or grid functions to values at ``sites``."""
    sites = as_sites(sites)
    if isinstance(spec, GridFunction):
        return spec(sites)
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(sites), dtype=float), (sites.shape[0],)).copy()
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(sites.shape[0], float(arr))
    if arr.shape != (sites.shape[0],):
        raise ValueError("value array does not match site count")
    return arr.copy()


@dataclass(frozen=True, eq=False)
class LatticeDomain:
    """A finite site set E with its sup-norm boundary and closure."""

    sites: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sites", unique_sites(self.sites))
        if self.sites.shape[0] == 0:
            raise ValueError("empty domain")

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return self.sites.shape[0]

    @cached_property
    def index(self) -> SiteIndex:
        return SiteIndex(self.sites)

    @cached_property
    def boundary(self) -> np.ndarray:
        """{y not in E : |x - y|_inf = 1 for some x in E}."""
        nbrs = (self.sites[:, None, :] + linf_offsets(self.d)[None, :, :]).reshape(-1, self.d)
        return setdiff(nbrs, self.sites)

    @cached_property
    def closure(self) -> np.ndarray:
        return np.concatenate([self.sites, self.boundary])

    @property
    def diam_closure(self) -> int:
        """Sup-norm diameter of the closure."""
        c = self.closure
        return int((c.max(axis=0) - c.min(axis=0)).max())

    def contains(self, sites) -> np.ndarray:
        return self.index.contains(sites)

    @classmethod
    def box(cls, radius: int, d: int, center=None) -> "LatticeDomain":
        s = box_sites(radius, d)
        if center is not None:
            s = s + np.asarray(center, dtype=np.int64)
        return cls(s)

    @classmethod
    def ball(cls, radius: float, d: int, center=None) -> "LatticeDomain":
        """Open Euclidean ball {x : |x - center| < radius}."""
        s = box_sites(int(np.ceil(radius)), d)
        s = s[l2sq(s) < radius * radius]
        if center is not None:
            s = s + np.asarray(center, dtype=np.int64)
        return cls(s)

    @classmethod
    def closed_ball(cls, radius: float, d: int) -> "LatticeDomain":
        """{x : |x| <= radius}, the region before the Euclidean exit time."""
        s = box_sites(int(np.floor(radius)), d)
        return cls(s[l2sq(s) <= radius * radius])
