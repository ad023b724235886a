"""Periodized environments and their stationary densities.

The torus of period radius N is represented by the box [-N, N]^d in
row-major order (last coordinate fastest); ``x`` is identified with
``((x + N) mod (2N+1)) - N``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .env import Environment, SiteKernel, move_thresholds
from .lattice import GridFunction, as_sites, box_sites, mean_norm

log = logging.getLogger(__name__)

PHI_TOL = 1e-10
DIRECT_MAX_N = 16


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (best residual {residual:.3g})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TorusEnv:
    """The environment restricted to [-N, N]^d and tiled periodically."""

    base: Environment
    N: int

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @cached_property
    def sites(self) -> np.ndarray:
        return box_sites(self.N, self.d)

    @cached_property
    def stay(self) -> np.ndarray:
        return self.base.kernels_at(self.sites)[0]

    @cached_property
    def axis(self) -> np.ndarray:
        return self.base.kernels_at(self.sites)[1]

    @property
    def homogeneous(self) -> bool:
        return self.base.homogeneous

    def wrap(self, sites) -> np.ndarray:
        return (as_sites(sites, self.d) + self.N) % self.side - self.N

    def flat_index(self, sites) -> np.ndarray:
        w = self.wrap(sites) + self.N
        return np.ravel_multi_index(tuple(w.T), (self.side,) * self.d)

    def kernels_at(self, sites):
        idx = self.flat_index(sites)
        return self.stay[idx], self.axis[idx]

    def kernel(self, x) -> SiteKernel:
        s, a = self.kernels_at(as_sites(x, self.d))
        return SiteKernel(self.d, float(s[0]), tuple(float(v) for v in a[0]))

    def walk_table(self):
        return move_thresholds(self.stay, self.axis), 1, self.N

    def epsilon(self) -> np.ndarray:
        return np.prod(self.axis, axis=1) ** (1.0 / self.d)

    def transition_matrix(self) -> sp.csr_matrix:
        """Sparse torus kernel P(x, y) on the flat site order."""
        n, d = self.n_sites, self.d
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [self.stay]
        for i in range(d):
            for sgn in (1, -1):
                shift = np.zeros(d, np.int64)
                shift[i] = sgn
                rows.append(np.arange(n))
                cols.append(self.flat_index(self.sites + shift))
                vals.append(self.axis[:, i])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))


def periodize(env: Environment, N: int) -> TorusEnv:
    if N < 1:
        raise ValueError("period radius must be at least 1")
    if N > env.radius:
        raise ValueError(f"period radius {N} exceeds materialized radius {env.radius}")
    return TorusEnv(env, int(N))


@dataclass(eq=False)
class StationaryDensity:
    """Phi_N on the torus sites (flat order), normalized to mean 1."""

    tenv: TorusEnv
    values: np.ndarray
    residual: float
    iterations: int
    method: str

    @property
    def N(self) -> int:
        return self.tenv.N

    def as_grid(self) -> GridFunction:
        return GridFunction(self.tenv.sites, self.values)

    def at(self, sites) -> np.ndarray:
        return self.values[self.tenv.flat_index(sites)]

    def to_csv(self, path) -> None:
        d = self.tenv.d
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["phi"])
            for s, v in zip(self.tenv.sites, self.values):
                w.writerow([int(c) for c in s] + [repr(float(v))])


def stationarity_residual(tenv: TorusEnv, phi: np.ndarray) -> float:
    """max_x |(phi P)(x) - phi(x)|."""
    push = kernels.torus_push(phi, tenv.stay, tenv.axis, tenv.side, tenv.d)
    return float(np.abs(push - phi).max())


def _normalize(phi):
    return phi * (phi.size / phi.sum())


def _direct(tenv: TorusEnv) -> np.ndarray:
    n = tenv.n_sites
    A = (tenv.transition_matrix().T - sp.identity(n, format="csr")).tolil()
    A[0, :] = np.ones(n)
    b = np.zeros(n)
    b[0] = n
    return spla.spsolve(A.tocsc(), b)


def solve_phi(tenv: TorusEnv, tol: float = PHI_TOL, max_iter: int = 200_000,
              check_every: int = 25) -> StationaryDensity:
    """Stationary density by damped power iteration, phi <- (phi + phi P) / 2.

    Falls back to a sparse direct solve of (P^T - I) phi = 0 plus a
    normalization row for N <= 16 when the iteration cap is reached.
    """
    n = tenv.n_sites
    phi = np.ones(n)
    best = np.inf
    args = (tenv.stay, tenv.axis, tenv.side, tenv.d)
    it = 0
    while it < max_iter:
        push = kernels.torus_push(phi, *args)
        it += 1
        if it % check_every == 0 or it == 1:
            res = float(np.abs(push - phi).max()) * n / phi.sum()
            best = min(best, res)
            if res <= tol / 4:
                break
        phi = 0.5 * (phi + push)
    phi = _normalize(phi)
    res = stationarity_residual(tenv, phi)
    if res <= tol and phi.min() >= 0:
        return StationaryDensity(tenv, phi, res, it, "power")
    if tenv.N > DIRECT_MAX_N:
        raise ConvergenceError("power iteration did not reach tolerance", min(best, res))
    log.info("power iteration stalled at %.3g after %d sweeps; direct solve", res, it)
    phi = _normalize(_direct(tenv))
    res = stationarity_residual(tenv, phi)
    if res > tol or phi.min() < -tol:
        raise ConvergenceError("direct solve did not reach tolerance", res)
    return StationaryDensity(tenv, np.maximum(phi, 0.0), res, it, "direct")


def norm(f, E, j: float) -> float:
    """||f||_{E,j} = (|E|^-1 sum_{x in E} |f(x)|^j)^(1/j)."""
    E = as_sites(E)
    if E.shape[0] == 0:
        raise ValueError("norm over an empty set")
    vals = f(E) if callable(f) else np.asarray(f, dtype=float)
    return mean_norm(vals, j)


def holder_exponents(d: int, p: float) -> tuple[float, float]:
    """(alpha, beta) with beta = d/(d-1) and alpha = (1 - 1/d + 1/p)^-1."""
    beta = d / (d - 1)
    alpha = 1.0 / (1.0 - 1.0 / d + (0.0 if np.isinf(p) else 1.0 / p))
    return alpha, beta


@dataclass
class PhiDiagnostics:
    N: int
    d: int
    p: float
    alpha: float
    beta: float
    phi_eps_beta: float
    phi_alpha: float
    inv_eps_p: float
    residual: float

    def to_dict(self) -> dict:
        return {"N": self.N, "alpha": self.alpha, "beta": self.beta, "p": self.p,
                "norms": {"phi_eps_beta": self.phi_eps_beta, "phi_alpha": self.phi_alpha,
                          "inv_eps_p": self.inv_eps_p},
                "residual": self.residual}


def phi_bound_diagnostics(tenv: TorusEnv, phi: StationaryDensity, p: float) -> PhiDiagnostics:
    alpha, beta = holder_exponents(tenv.d, p)
    eps = tenv.epsilon()
    with np.errstate(divide="ignore"):
        inv = np.where(eps > 0, 1.0 / np.where(eps > 0, eps, 1.0), np.inf)
    inv_norm = float("inf") if np.isinf(inv).any() else mean_norm(inv, p)
    return PhiDiagnostics(tenv.N, tenv.d, float(p), alpha, beta,
                          mean_norm(phi.values * eps, beta), mean_norm(phi.values, alpha),
                          inv_norm, phi.residual)


@dataclass
class PhicontrolViolation:
    site: tuple
    l: int
    phi: float
    bound: float


@dataclass
class PhicontrolReport:
    violations: list
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return not self.violations


def phicontrol_check(tenv: TorusEnv, phi: StationaryDensity, cmap, xi0: float | None = None,
                     rtol: float = 1e-9) -> PhicontrolReport:
    """Phi(x) <= xi0^-l_x * sum_{y in dA_x, y in Delta_N} Phi(y) for open x with l_x <= N.

    ``cmap`` must be built on the base environment over a box of radius at
    least 2N + 1 so every checked cluster closure is fully visible.
    """
    N, d = tenv.N, tenv.d
    if xi0 is None:
        xi0 = 1.0 / (2 * d)
    if cmap.radius < 2 * N + 1:
        raise ValueError(f"cluster map radius {cmap.radius} < 2N+1 = {2 * N + 1}")
    sites = tenv.sites
    labels = cmap.labels_at(sites)
    out, checked, skipped = [], 0, 0
    for k in np.unique(labels[labels >= 0]):
        members = np.nonzero(labels == k)[0]
        l = int(cmap.cluster_l[k])
        if cmap.cluster_censored[k] or l > N:
            skipped += members.size
            continue
        bd = cmap.cluster_boundary(k)
        bd = bd[(np.abs(bd) <= N).all(axis=1)]
        total = float(phi.at(bd).sum()) if len(bd) else 0.0
        bound = xi0 ** (-l) * total
        for i in members:
            checked += 1
            v = float(phi.values[i])
            if v > bound * (1 + rtol):
                out.append(PhicontrolViolation(tuple(int(c) for c in sites[i]), l, v, bound))
    return PhicontrolReport(out, checked, skipped)
