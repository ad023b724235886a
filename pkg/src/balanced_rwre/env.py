"""Balanced lattice environments.

A site kernel stores one weight per axis (the mass on +e_i, equal to the
mass on -e_i) plus the holding mass, so balance holds by construction.
Environments materialize an l-infinity box of kernels; sites outside the box
are generated on demand from the same per-site hash, so any two boxes built
from one ``(spec, seed)`` agree wherever they overlap.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng
from .lattice import as_sites, box_sites

STOCHASTIC_TOL = 1e-12
TRAP_DEPTH_FLOOR = 2.0 ** -40
FILE_MAGIC = "RWRE-ENV 1"

VARIANTS = ("uniform-srw", "iid-elliptic", "iid-max-jump", "layered", "trap", "table")


class EnvSpecError(ValueError):
    """Raised for parameter sets that do not define a valid site law."""


@dataclass(frozen=True)
class SiteKernel:
    d: int
    stay: float
    axis: tuple

    @property
    def elliptic(self) -> bool:
        return all(a > 0 for a in self.axis)

    @property
    def total(self) -> float:
        return self.stay + 2.0 * sum(self.axis)

    @property
    def epsilon(self) -> float:
        return float(np.prod(self.axis) ** (1.0 / self.d))


@dataclass(frozen=True)
class EnvSpec:
    """Site law of an environment.

    Variants and their parameters:

    ``uniform-srw``
        simple symmetric walk, every axis weight 1/(2d).
    ``iid-elliptic`` (tail, stay_max)
        raw weights ``r_i = U_i**(1/tail)`` normalized to the non-holding mass,
        holding mass ``stay_max * U``.  ``P(r_i < t) = t**tail``, so
        ``E eps(o)**-p`` is finite exactly when ``p < tail * d``.
    ``iid-max-jump`` (p_bad, bad_scale, tail, spread)
        with probability ``p_bad`` a random axis carries almost all mass and the
        others get ``bad_scale * U**(1/tail)``; otherwise weights ``1 - spread*U``
        normalized.  No holding.  Any threshold in ``(bad_scale, good_floor]``
        makes exactly the bad sites open.
    ``layered`` (law, value | low, high | scale, tail)
        axis 1 weight ``eps_z`` depending on ``(x_2, ..., x_d)`` only, other axes
        ``(1 - 2 eps_z) / (2 (d - 1))``.
    ``trap`` (exponent, lazy)
        holding mass ``1 - delta`` with ``delta = U**(1/exponent)``, axes
        ``delta / (2d)``.  ``lazy=False`` keeps only the jump chain (simple walk).
    ``table``
        kernels read from a file or built by hand; no generator.
    """

    variant: str
    d: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise EnvSpecError(f"unknown variant {self.variant!r}")
        if not 2 <= self.d <= 4:
            raise EnvSpecError(f"dimension {self.d} outside supported range 2..4")
        object.__setattr__(self, "params", {**self._defaults(), **dict(self.params)})
        self._check_params()

    # -- constructors -------------------------------------------------------
    @classmethod
    def uniform(cls, d: int) -> "EnvSpec":
        return cls("uniform-srw", d)

    @classmethod
    def iid_elliptic(cls, d: int, tail: float = 4.0, stay_max: float = 0.0) -> "EnvSpec":
        return cls("iid-elliptic", d, {"tail": tail, "stay_max": stay_max})

    @classmethod
    def iid_max_jump(cls, d: int, p_bad: float = 0.1, bad_scale: float = 0.05,
                     tail: float = 0.5, spread: float = 0.5) -> "EnvSpec":
        return cls("iid-max-jump", d, {"p_bad": p_bad, "bad_scale": bad_scale,
                                       "tail": tail, "spread": spread})

    @classmethod
    def layered(cls, d: int, law: str = "constant", **params) -> "EnvSpec":
        return cls("layered", d, {"law": law, **params})

    @classmethod
    def trap(cls, d: int, exponent: float = 0.5, lazy: bool = True) -> "EnvSpec":
        return cls("trap", d, {"exponent": exponent, "lazy": lazy})

    def _defaults(self) -> dict:
        return {
            "iid-elliptic": {"tail": 4.0, "stay_max": 0.0},
            "iid-max-jump": {"p_bad": 0.1, "bad_scale": 0.05, "tail": 0.5, "spread": 0.5},
            "layered": {"law": "constant", "value": 0.25},
            "trap": {"exponent": 0.5, "lazy": True},
        }.get(self.variant, {})

    def _check_params(self) -> None:
        p, d = self.params, self.d
        if self.variant == "iid-elliptic":
            if not p["tail"] > 0:
                raise EnvSpecError("iid-elliptic: tail must be positive")
            if not 0 <= p["stay_max"] < 1:
                raise EnvSpecError("iid-elliptic: stay_max must lie in [0, 1)")
        elif self.variant == "iid-max-jump":
            if not 0 <= p["p_bad"] <= 1:
                raise EnvSpecError("iid-max-jump: p_bad must lie in [0, 1]")
            if not 0 <= p["spread"] < 1:
                raise EnvSpecError("iid-max-jump: spread must lie in [0, 1)")
            if not p["tail"] > 0:
                raise EnvSpecError("iid-max-jump: tail must be positive")
            if not 0 < p["bad_scale"] < self.good_floor:
                raise EnvSpecError(
                    f"iid-max-jump: bad_scale must lie in (0, {self.good_floor:.6g})")
            if (d - 1) * p["bad_scale"] >= 0.5 - 1.0 / (2 * d):
                raise EnvSpecError("iid-max-jump: bad_scale too large for the dominant axis")
        elif self.variant == "layered":
            law = p["law"]
            if law == "constant":
                lo = hi = float(p["value"])
            elif law == "uniform":
                lo, hi = float(p["low"]), float(p["high"])
                if lo > hi:
                    raise EnvSpecError("layered: low exceeds high")
            elif law == "power":
                lo, hi = 0.0, float(p["scale"])
                if not p["tail"] > 0:
                    raise EnvSpecError("layered: tail must be positive")
                if not 0 < hi <= 0.5:
                    raise EnvSpecError("layered: scale must lie in (0, 1/2]")
                return
            else:
                raise EnvSpecError(f"layered: unknown law {law!r}")
            if not (0 < lo and hi < 0.5):
                raise EnvSpecError(
                    f"layered: eps_z law support [{lo}, {hi}] not inside (0, 1/2)")
        elif self.variant == "trap":
            if not p["exponent"] > 0:
                raise EnvSpecError("trap: exponent must be positive")

    # -- properties ---------------------------------------------------------
    @property
    def good_floor(self) -> float:
        """Smallest axis weight of a good site (max-jump variant)."""
        s = self.params.get("spread", 0.5)
        return (1 - s) / (2 * ((1 - s) + (self.d - 1)))

    @property
    def generatable(self) -> bool:
        return self.variant != "table"

    @property
    def homogeneous(self) -> bool:
        """True when every site carries the same kernel."""
        if self.variant == "uniform-srw":
            return True
        if self.variant == "layered" and self.params["law"] == "constant":
            return True
        return self.variant == "trap" and not self.params["lazy"]

    @property
    def n_uniforms(self) -> int:
        return {"uniform-srw": 0, "iid-elliptic": self.d + 1, "iid-max-jump": self.d + 2,
                "layered": 1, "trap": 1}[self.variant]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "d": self.d, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "EnvSpec":
        return cls(data["variant"], int(data["d"]), dict(data.get("params", {})))

    # -- sampling -------------------------------------------------------------
    def sample(self, env_key: int, sites) -> tuple[np.ndarray, np.ndarray]:
        """Kernels ``(stay, axis)`` at ``sites`` for the environment keyed ``env_key``."""
        if not self.generatable:
            raise EnvSpecError("table environments have no generator")
        d = self.d
        sites = as_sites(sites, d)
        n = sites.shape[0]
        p = self.params
        stay = np.zeros(n)
        if self.variant == "uniform-srw" or (self.variant == "trap" and not p["lazy"]):
            return stay, np.full((n, d), 1.0 / (2 * d))
        if self.variant == "layered":
            z = sites.copy()
            z[:, 0] = 0
            u = rng.site_uniforms(env_key, z, 1)[:, 0]
            eps = self._layer_eps(u)
            axis = np.empty((n, d))
            axis[:, 0] = eps
            axis[:, 1:] = ((1.0 - 2.0 * eps) / (2 * (d - 1)))[:, None]
            return stay, axis
        u = rng.site_uniforms(env_key, sites, self.n_uniforms)
        if self.variant == "iid-elliptic":
            r = u[:, :d] ** (1.0 / p["tail"])
            stay = p["stay_max"] * u[:, d]
            axis = r * ((1.0 - stay) / (2.0 * r.sum(axis=1)))[:, None]
        elif self.variant == "iid-max-jump":
            bad = u[:, 0] < p["p_bad"]
            dom = np.minimum((u[:, 1] * d).astype(np.int64), d - 1)
            good_r = 1.0 - p["spread"] * u[:, 2:]
            axis = good_r / (2.0 * good_r.sum(axis=1))[:, None]
            small = p["bad_scale"] * u[:, 2:] ** (1.0 / p["tail"])
            rows = np.nonzero(bad)[0]
            if rows.size:
                b = small[rows].copy()
                b[np.arange(rows.size), dom[rows]] = 0.0
                b[np.arange(rows.size), dom[rows]] = 0.5 - b.sum(axis=1)
                axis[rows] = b
        else:  # trap
            delta = np.maximum(u[:, 0] ** (1.0 / p["exponent"]), TRAP_DEPTH_FLOOR)
            stay = 1.0 - delta
            axis = np.repeat((delta / (2 * d))[:, None], d, axis=1)
        return stay, axis

    def _layer_eps(self, u: np.ndarray) -> np.ndarray:
        p = self.params
        if p["law"] == "constant":
            return np.full(u.shape, float(p["value"]))
        if p["law"] == "uniform":
            return p["low"] + (p["high"] - p["low"]) * u
        return p["scale"] * u ** (1.0 / p["tail"])

    def check(self, n: int = 10_000, seed: int = 0) -> None:
        """Sample ``n`` kernels and raise :class:`EnvSpecError` on any invalid one."""
        sites = np.zeros((n, self.d), dtype=np.int64)
        sites[:, -1] = np.arange(n)
        if self.variant == "layered":
            sites[:, 1] = np.arange(n)
        stay, axis = self.sample(rng.derive_key(seed, "spec-check"), sites)
        total = stay + 2 * axis.sum(axis=1)
        if np.any(np.abs(total - 1) > STOCHASTIC_TOL) or np.any(axis < 0) or np.any(stay < 0):
            raise EnvSpecError(f"{self.variant}: sampled kernel violates stochasticity")

    def open_probability(self, eps0: float, n: int = 100_000, seed: int = 0) -> float:
        """Monte Carlo estimate of P(min_i axis_i < eps0) (exact for degenerate laws)."""
        sites = np.zeros((n, self.d), dtype=np.int64)
        sites[:, 0] = np.arange(n)
        if self.variant == "layered":
            sites[:, 1] = np.arange(n)
        _, axis = self.sample(rng.derive_key(seed, "open-probability"), sites)
        return float(np.mean(axis.min(axis=1) < eps0))


def move_thresholds(stay: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Cumulative move thresholds, shape (n, 2d), in the order of ``nn_moves``.

    A uniform ``u`` selects move ``k = #{thresholds <= u}`` (0 = hold).
    Thresholds past the last move of positive mass are pinned to 1 so that
    rounding never selects a move of zero probability.
    """
    n, d = axis.shape
    w = np.repeat(axis, 2, axis=1)
    # thr[:, k] = stay + mass of moves 1..k
    thr = stay[:, None] + np.concatenate([np.zeros((n, 1)), np.cumsum(w, axis=1)[:, :-1]], axis=1)
    last = np.where(w > 0, np.arange(1, 2 * d + 1)[None, :], 0).max(axis=1)
    kk = np.arange(2 * d)[None, :]
    thr = np.where(kk >= last[:, None], 1.0, thr)
    return np.ascontiguousarray(thr)


@dataclass(frozen=True, eq=False)
class Environment:
    """Kernels on the box ``[-radius, radius]**d`` plus an optional generator.

    ``stay`` has shape ``(2R+1,)*d`` and ``axis`` shape ``(2R+1,)*d + (d,)``,
    indexed by ``x + R`` (row-major, last coordinate fastest).
    """

    d: int
    radius: int
    stay: np.ndarray
    axis: np.ndarray
    spec: EnvSpec | None = None
    seed: int | None = None

    def __post_init__(self):
        side = 2 * self.radius + 1
        if self.stay.shape != (side,) * self.d or self.axis.shape != (side,) * self.d + (self.d,):
            raise ValueError("kernel arrays do not match dimension and radius")
        self.stay.setflags(write=False)
        self.axis.setflags(write=False)

    @classmethod
    def from_arrays(cls, stay, axis, spec: EnvSpec | None = None, seed=None) -> "Environment":
        axis = np.array(axis, dtype=np.float64)
        stay = np.array(stay, dtype=np.float64)
        d = axis.shape[-1]
        radius = (axis.shape[0] - 1) // 2
        return cls(d, radius, stay, axis, spec if spec is not None else EnvSpec("table", d), seed)

    @classmethod
    def constant(cls, d: int, radius: int, stay: float, axis) -> "Environment":
        side = 2 * radius + 1
        ax = np.broadcast_to(np.asarray(axis, dtype=float), (side,) * d + (d,)).copy()
        return cls.from_arrays(np.full((side,) * d, float(stay)), ax)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def homogeneous(self) -> bool:
        return self.spec is not None and self.spec.homogeneous

    @property
    def env_key(self) -> int:
        return rng.derive_key(0 if self.seed is None else self.seed, "env")

    @cached_property
    def sites(self) -> np.ndarray:
        return box_sites(self.radius, self.d)

    def in_box(self, sites) -> np.ndarray:
        return (np.abs(as_sites(sites, self.d)) <= self.radius).all(axis=1)

    def flat_index(self, sites) -> np.ndarray:
        s = as_sites(sites, self.d) + self.radius
        return np.ravel_multi_index(tuple(s.T), (self.side,) * self.d)

    def kernels_at(self, sites) -> tuple[np.ndarray, np.ndarray]:
        """``(stay, axis)`` at arbitrary sites, extending lazily past the box."""
        sites = as_sites(sites, self.d)
        inside = self.in_box(sites)
        stay = np.empty(sites.shape[0])
        axis = np.empty((sites.shape[0], self.d))
        if inside.any():
            idx = self.flat_index(sites[inside])
            stay[inside] = self.stay.reshape(-1)[idx]
            axis[inside] = self.axis.reshape(-1, self.d)[idx]
        if not inside.all():
            if self.spec is None or not self.spec.generatable:
                bad = sites[~inside][0]
                raise KeyError(f"site {tuple(int(c) for c in bad)} outside materialized box "
                               f"(radius {self.radius}) and environment has no generator")
            s, a = self.spec.sample(self.env_key, sites[~inside])
            stay[~inside] = s
            axis[~inside] = a
        return stay, axis

    def kernel(self, x) -> SiteKernel:
        s, a = self.kernels_at(as_sites(x, self.d))
        return SiteKernel(self.d, float(s[0]), tuple(float(v) for v in a[0]))

    def materialized_kernel(self, x) -> SiteKernel:
        """Kernel at a site inside the box; raises ``KeyError`` otherwise."""
        x = as_sites(x, self.d)
        if not self.in_box(x)[0]:
            raise KeyError(f"site {tuple(int(c) for c in x[0])} is not materialized")
        return self.kernel(x)

    def extend(self, radius: int) -> "Environment":
        """Same environment materialized on a larger box."""
        if self.spec is None or not self.spec.generatable:
            raise ValueError("cannot extend an environment without a generator")
        return generate(self.spec, self.seed, radius)

    @cached_property
    def thresholds(self) -> np.ndarray:
        return move_thresholds(self.stay.reshape(-1), self.axis.reshape(-1, self.d))

    def walk_table(self) -> tuple[np.ndarray, int, int]:
        """``(thresholds, mode, radius)`` for the Monte Carlo kernels.

        mode 0 looks sites up in the box (leaving it aborts the sample);
        mode 1 wraps coordinates onto a torus of the given radius.  Homogeneous
        environments use a one-site torus.
        """
        if self.homogeneous:
            s, a = self.kernels_at(np.zeros((1, self.d), np.int64))
            return move_thresholds(s, a), 1, 0
        return self.thresholds, 0, self.radius

    def epsilon_field(self) -> np.ndarray:
        return np.prod(self.axis, axis=-1) ** (1.0 / self.d)


def generate(spec: EnvSpec, seed: int, radius: int) -> Environment:
    """Materialize ``spec`` on the box of the given radius."""
    if radius < 1:
        raise ValueError("radius must be at least 1")
    if not spec.generatable:
        raise EnvSpecError("table specs cannot be generated")
    seed = int(seed)
    env_key = rng.derive_key(seed, "env")
    sites = box_sites(radius, spec.d)
    stay, axis = spec.sample(env_key, sites)
    side = 2 * radius + 1
    return Environment(spec.d, radius, stay.reshape((side,) * spec.d),
                       axis.reshape((side,) * spec.d + (spec.d,)), spec, seed)


def epsilon(env: Environment, x) -> float:
    """Geometric mean of the axis weights at a materialized site."""
    return env.materialized_kernel(x).epsilon


def remove_laziness(env: Environment) -> Environment:
    """Jump chain of ``env``: holding mass removed, axis weights rescaled."""
    stay = env.stay
    if np.any(stay >= 1.0):
        idx = np.unravel_index(int(np.argmax(stay >= 1.0)), stay.shape)
        site = tuple(int(i) - env.radius for i in idx)
        raise ValueError(f"absorbing site {site}: holding probability 1")
    if not np.any(stay > 0):
        return env
    axis = env.axis / (1.0 - stay)[..., None]
    axis = axis * (0.5 / axis.sum(axis=-1))[..., None]
    spec = EnvSpec("table", env.d)
    return Environment(env.d, env.radius, np.zeros_like(stay), axis, spec, env.seed)


@dataclass
class Violation:
    site: tuple
    kind: str
    value: float


@dataclass
class EnvReport:
    violations: list
    min_epsilon: float
    xi_hat: float
    n_sites: int

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(env: Environment, tol: float = STOCHASTIC_TOL) -> EnvReport:
    """Per-site stochasticity, sign and ellipticity report."""
    stay = env.stay.reshape(-1)
    axis = env.axis.reshape(-1, env.d)
    sites = env.sites
    out = []
    total = stay + 2 * axis.sum(axis=1)
    for i in np.nonzero(np.abs(total - 1) > tol)[0]:
        out.append(Violation(tuple(int(c) for c in sites[i]), "stochasticity", float(total[i])))
    for i in np.nonzero((axis < 0).any(axis=1) | (stay < 0))[0]:
        out.append(Violation(tuple(int(c) for c in sites[i]), "negative-weight",
                             float(min(axis[i].min(), stay[i]))))
    for i in np.nonzero((axis <= 0).any(axis=1))[0]:
        out.append(Violation(tuple(int(c) for c in sites[i]), "ellipticity", float(axis[i].min())))
    eps = np.prod(np.clip(axis, 0, None), axis=1) ** (1.0 / env.d)
    return EnvReport(out, float(eps.min()), float(axis.max(axis=1).min()), int(stay.size))


# -- file format --------------------------------------------------------------

def _header(env: Environment, encoding: str) -> dict:
    return {
        "format": "rwre-env",
        "version": 1,
        "d": env.d,
        "radius": env.radius,
        "seed": env.seed,
        "spec": env.spec.to_dict() if env.spec is not None else None,
        "order": "row-major over [-radius, radius]^d, last coordinate fastest",
        "columns": ["stay"] + [f"axis{i + 1}" for i in range(env.d)],
        "encoding": encoding,
    }


def save_env(env: Environment, path) -> None:
    """Write ``env``; ``.csv`` paths get a text table, anything else float64 binary."""
    path = Path(path)
    table = np.concatenate([env.stay.reshape(-1, 1), env.axis.reshape(-1, env.d)], axis=1)
    if path.suffix == ".csv":
        buf = io.StringIO()
        buf.write(f"# {FILE_MAGIC}\n# {json.dumps(_header(env, 'csv'), sort_keys=True)}\n")
        buf.write(",".join(_header(env, "csv")["columns"]) + "\n")
        for row in table:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        path.write_text(buf.getvalue())
    else:
        head = f"{FILE_MAGIC}\n{json.dumps(_header(env, 'float64-le'), sort_keys=True)}\n"
        with open(path, "wb") as fh:
            fh.write(head.encode("utf-8"))
            fh.write(table.astype("<f8").tobytes())


def load_env(path) -> Environment:
    path = Path(path)
    if path.suffix == ".csv":
        lines = path.read_text().splitlines()
        if lines[0] != f"# {FILE_MAGIC}":
            raise ValueError(f"{path}: not an environment file")
        head = json.loads(lines[1][2:])
        table = np.array([[float(v) for v in ln.split(",")] for ln in lines[3:] if ln], dtype=float)
    else:
        with open(path, "rb") as fh:
            magic = fh.readline().decode("utf-8").rstrip("\n")
            if magic != FILE_MAGIC:
                raise ValueError(f"{path}: not an environment file")
            head = json.loads(fh.readline().decode("utf-8"))
            table = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    d, radius = int(head["d"]), int(head["radius"])
    side = 2 * radius + 1
    table = table.reshape(side ** d, d + 1)
    spec = EnvSpec.from_dict(head["spec"]) if head.get("spec") else EnvSpec("table", d)
    return Environment(d, radius, table[:, 0].reshape((side,) * d).copy(),
                       table[:, 1:].reshape((side,) * d + (d,)).copy(), spec, head.get("seed"))


def env_digest_table(env: Environment) -> bytes:
    """Raw kernel table bytes (used for byte-identity checks)."""
    return np.concatenate([env.stay.reshape(-1, 1), env.axis.reshape(-1, env.d)], axis=1).tobytes()
