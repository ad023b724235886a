"""Balanced difference operators, Dirichlet problems and maximum-principle checks.

Sign convention: ``dirichlet_solve`` returns f with ``L f = -h`` on E and
``f = g`` on the boundary, so that

    f(x) = E^x[ sum_{j < exit} h(X_j) ] + E^x[ g(X_exit) ].

With ``h >= 0`` the solution is superharmonic (expected occupation).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .env import Environment
from .lattice import (GridFunction, LatticeDomain, SiteIndex, as_sites, evaluate, l2sq, mean_norm,
                      setdiff, unique_sites)

log = logging.getLogger(__name__)

BALANCE_TOL = 1e-10
RESIDUAL_TOL = 1e-10
CONTACT_SLACK = 1e-9
STRICT_SLACK = 1e-12
DIRECT_LIMIT = 50_000
KRYLOV_MIN = 2_000


class NotEllipticError(ValueError):
    pass


class HypothesisViolation(ValueError):
    pass


# -- jump operators -----------------------------------------------------------

class JumpOperator:
    """Row-stochastic jump kernel a(x, .) for x in a finite domain E.

    Rows are stored CSR-style: the support of ``a(sites[i], .)`` is
    ``targets[indptr[i]:indptr[i+1]]`` with weights from ``weights``.
    """

    def __init__(self, sites, indptr, targets, weights):
        self.sites = as_sites(sites)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.targets = as_sites(targets, self.sites.shape[1])
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.indptr.shape[0] != self.sites.shape[0] + 1:
            raise ValueError("indptr length must be n_sites + 1")
        if np.any(self.weights < 0):
            raise ValueError("negative jump weight")

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return self.sites.shape[0]

    @classmethod
    def from_rows(cls, sites, rows) -> "JumpOperator":
        """Build from a list of ``(targets, weights)`` pairs, one per site."""
        sites = as_sites(sites)
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        tg, wt = [], []
        for i, (t, w) in enumerate(rows):
            t = as_sites(t, sites.shape[1])
            w = np.asarray(w, dtype=float)
            keep = w > 0
            tg.append(t[keep])
            wt.append(w[keep])
            indptr[i + 1] = indptr[i] + int(keep.sum())
        return cls(sites, indptr, np.concatenate(tg) if tg else np.empty((0, sites.shape[1])),
                   np.concatenate(wt) if wt else np.empty(0))

    @classmethod
    def from_env(cls, env: Environment, sites) -> "JumpOperator":
        """Nearest-neighbour kernel of ``env`` (holding mass kept as a self-loop)."""
        sites = as_sites(sites, env.d)
        d, n = env.d, sites.shape[0]
        stay, axis = env.kernels_at(sites)
        offs = np.concatenate([np.zeros((1, d), np.int64), np.eye(d, dtype=np.int64),
                               -np.eye(d, dtype=np.int64)])
        w = np.concatenate([stay[:, None], axis, axis], axis=1)
        tg = sites[:, None, :] + offs[None, :, :]
        keep = w > 0
        indptr = np.concatenate([[0], np.cumsum(keep.sum(axis=1))])
        return cls(sites, indptr, tg[keep], w[keep])

    @cached_property
    def row_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.indptr))

    @cached_property
    def index(self) -> SiteIndex:
        return SiteIndex(self.sites)

    @cached_property
    def reach(self) -> np.ndarray:
        """h_x: largest Euclidean jump length in the support of a(x, .)."""
        disp = np.sqrt(l2sq(self.targets - self.sites[self.row_of_entry]))
        out = np.zeros(len(self))
        np.maximum.at(out, self.row_of_entry, disp)
        return out

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_of_entry, self.weights, minlength=len(self))

    def drift(self) -> np.ndarray:
        """sum_y a(x,y)(y - x) per site, shape (n, d)."""
        disp = (self.targets - self.sites[self.row_of_entry]) * self.weights[:, None]
        out = np.zeros((len(self), self.d))
        np.add.at(out, self.row_of_entry, disp)
        return out

    def balance_error(self) -> float:
        return float(np.abs(self.drift()).max(initial=0.0))

    def stochasticity_error(self) -> float:
        return float(np.abs(self.row_sums() - 1.0).max(initial=0.0))

    @cached_property
    def boundary(self) -> np.ndarray:
        """E^b: sites outside E charged by some a(x, .)."""
        return setdiff(self.targets, self.sites) if len(self.targets) else self.targets

    @cached_property
    def closure(self) -> np.ndarray:
        return np.concatenate([self.sites, self.boundary])

    @property
    def diam_closure(self) -> int:
        c = self.closure
        return int((c.max(axis=0) - c.min(axis=0)).max())

    def apply(self, f) -> np.ndarray:
        """(L_a f)(x) = sum_y a(x,y)(f(y) - f(x)) for every x in E."""
        fy = evaluate(f, self.targets) if len(self.targets) else np.empty(0)
        fx = evaluate(f, self.sites)
        contrib = self.weights * (fy - fx[self.row_of_entry])
        return np.bincount(self.row_of_entry, contrib, minlength=len(self))

    def restrict(self, sites) -> "JumpOperator":
        """Rows for a subset of E."""
        rows = self.index.lookup(sites)
        if np.any(rows < 0):
            raise KeyError("restriction sites not in operator domain")
        parts_t, parts_w, indptr = [], [], [0]
        for r in rows:
            a, b = self.indptr[r], self.indptr[r + 1]
            parts_t.append(self.targets[a:b])
            parts_w.append(self.weights[a:b])
            indptr.append(indptr[-1] + b - a)
        return JumpOperator(self.sites[rows], indptr, np.concatenate(parts_t),
                            np.concatenate(parts_w))

    def matrices(self):
        """(A_EE, A_Eb) as sparse matrices; columns of A_Eb follow ``boundary``."""
        n = len(self)
        col = self.index.lookup(self.targets)
        inner = col >= 0
        A_ee = sp.csr_matrix((self.weights[inner], (self.row_of_entry[inner], col[inner])),
                             shape=(n, n))
        bidx = SiteIndex(self.boundary).lookup(self.targets[~inner]) if len(self.boundary) else col[~inner]
        A_eb = sp.csr_matrix((self.weights[~inner], (self.row_of_entry[~inner], bidx)),
                             shape=(n, len(self.boundary)))
        return A_ee, A_eb


def _solve(A_ee, rhs):
    """Solve (I - A_EE) f = rhs; rhs may be 1-D or 2-D."""
    n = A_ee.shape[0]
    M = (sp.identity(n, format="csc") - A_ee).tocsc()
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1 and n > KRYLOV_MIN:
        # I - A_EE is a diagonally dominant M-matrix; Krylov beats LU fill-in by far
        x, info = spla.bicgstab(M, rhs, rtol=1e-14, atol=0.0, maxiter=50 * n)
        scale = max(1.0, float(np.abs(x).max(initial=0.0)))
        if info == 0 and np.abs(M @ x - rhs).max(initial=0.0) <= 0.1 * RESIDUAL_TOL * scale:
            return x
        log.info("bicgstab fell short (info=%d); falling back", info)
    if n <= DIRECT_LIMIT:
        try:
            lu = spla.splu(M)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"singular absorbing system: {exc}") from None
        out = lu.solve(np.asarray(rhs, dtype=float))
    else:
        cols = rhs if np.ndim(rhs) == 2 else rhs[:, None]
        sol = []
        for j in range(cols.shape[1]):
            x, info = spla.gmres(M, cols[:, j], rtol=1e-13, atol=0.0, restart=200, maxiter=2000)
            if info != 0:
                raise np.linalg.LinAlgError(f"iterative solve did not converge (info={info})")
            sol.append(x)
        out = np.stack(sol, axis=1) if np.ndim(rhs) == 2 else sol[0]
    if not np.all(np.isfinite(out)):
        raise np.linalg.LinAlgError("singular absorbing system (non-exiting chain)")
    res = np.abs(M @ out - rhs).max(initial=0.0)
    scale = max(1.0, float(np.abs(out).max(initial=0.0)))
    if res > RESIDUAL_TOL * scale:
        raise np.linalg.LinAlgError(f"absorbing solve residual {res:.3g} exceeds tolerance")
    return out


def operator_dirichlet_solve(op: JumpOperator, h=0.0, g=0.0) -> GridFunction:
    """f on E u E^b with L_a f = -h on E and f = g on E^b."""
    A_ee, A_eb = op.matrices()
    hv = evaluate(h, op.sites)
    gv = evaluate(g, op.boundary) if len(op.boundary) else np.empty(0)
    f = _solve(A_ee, hv + A_eb @ gv)
    return GridFunction(op.closure, np.concatenate([f, gv]))


def exit_distribution(op: JumpOperator) -> np.ndarray:
    """Matrix of P^x(exit E at y), rows = E sites, columns = ``op.boundary``."""
    A_ee, A_eb = op.matrices()
    return _solve(A_ee, A_eb.toarray())


def _require_elliptic(env: Environment, sites) -> None:
    _, axis = env.kernels_at(sites)
    bad = (axis <= 0).any(axis=1)
    if bad.any():
        x = as_sites(sites, env.d)[np.argmax(bad)]
        raise NotEllipticError(f"site {tuple(int(c) for c in x)} is not elliptic")


def apply_L(env: Environment, f, x):
    """(L_w f)(x) = sum_i w(x,e_i)[f(x+e_i) + f(x-e_i) - 2 f(x)].

    ``x`` may be a single site (returns a float) or an array of sites.
    """
    sites = as_sites(x, env.d)
    _, axis = env.kernels_at(sites)
    fx = evaluate(f, sites)
    out = np.zeros(sites.shape[0])
    for i in range(env.d):
        e = np.zeros(env.d, np.int64)
        e[i] = 1
        out += axis[:, i] * (evaluate(f, sites + e) + evaluate(f, sites - e) - 2 * fx)
    if np.ndim(x) == 1:
        return float(out[0])
    return out


def dirichlet_solve(env: Environment, dom: LatticeDomain, h=0.0, g=0.0) -> GridFunction:
    """f on the closure of ``dom`` with L_w f = -h on E and f = g on the boundary."""
    _require_elliptic(env, dom.sites)
    op = JumpOperator.from_env(env, dom.sites)
    A_ee, A_eb = op.matrices()
    gb = evaluate(g, dom.boundary)
    gi = GridFunction(dom.boundary, gb)
    f = _solve(A_ee, evaluate(h, dom.sites) + A_eb @ gi(op.boundary))
    return GridFunction(dom.closure, np.concatenate([f, gb]))


# -- contact sets ---------------------------------------------------------------

@dataclass
class ContactSet:
    """Upper contact set of u over a closure.

    ``member`` uses the feasibility slack ``CONTACT_SLACK`` (times the scale
    of u), ``strict`` the rounding-level slack; ``strict`` is a subset of
    ``member``.  ``witness`` holds a verified slope s for members, NaN
    elsewhere.
    """

    sites: np.ndarray
    member: np.ndarray
    strict: np.ndarray
    witness: np.ndarray
    method: str

    def __len__(self) -> int:
        return int(self.member.sum())

    @property
    def members(self) -> np.ndarray:
        return self.sites[self.member]


def _witness_gap(s, x, ux, Z, uz):
    """max_z [ u(z) - u(x) - s.(z - x) ] for rows of (s, x, ux); <= 0 iff s is in I_u(x)."""
    lin = s @ Z.T - (s * x).sum(axis=1)[:, None]
    return (uz[None, :] - ux[:, None] - lin).max(axis=1)


def _verify(s, X, ux, Z, uz, chunk=128):
    out = np.empty(X.shape[0])
    for a in range(0, X.shape[0], chunk):
        b = a + chunk
        out[a:b] = _witness_gap(s[a:b], X[a:b], ux[a:b], Z, uz)
    return out


def lp_witness(x, ux, Z, uz):
    """Slope s minimizing t = max_z [u(z) - u(x) - s.(z - x)]; returns (s, t).

    x is a member of the contact set iff t <= 0 (t >= 0 whenever x is in Z).
    """
    x = np.asarray(x, float)
    d = Z.shape[1]
    A = np.c_[x - Z, -np.ones(len(Z))]
    c = np.zeros(d + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=A, b_ub=ux - uz, bounds=[(None, None)] * (d + 1), method="highs")
    if res.status != 0:
        raise RuntimeError(f"contact LP failed: {res.message}")
    return res.x[:d], float(res.x[d])


def contact_set(u, E, closure=None, slack: float = CONTACT_SLACK, method: str = "hull") -> ContactSet:
    """Sites x of E where some plane through (x, u(x)) lies above u on the closure.

    ``closure`` defaults to the sup-norm closure of E; pass
    ``JumpOperator.closure`` for the jump-operator version.  ``method`` is
    ``hull`` (upper convex hull, LP fallback) or ``lp`` (one LP per site).
    """
    E = unique_sites(as_sites(E))
    d = E.shape[1]
    if closure is None:
        closure = LatticeDomain(E).closure
    Z = as_sites(closure, d)
    uz = evaluate(u, Z)
    ux = evaluate(u, E)
    scale = max(1.0, float(np.abs(uz).max(initial=0.0)))
    tol, stol = slack * scale, STRICT_SLACK * scale
    Zf, Xf = Z.astype(float), E.astype(float)
    n = E.shape[0]
    witness = np.full((n, d), np.nan)

    design = np.c_[Zf, np.ones(len(Zf))]
    coef, *_ = np.linalg.lstsq(design, uz, rcond=None)
    if np.abs(design @ coef - uz).max() <= stol:
        witness[:] = coef[:d]
        gap = _verify(witness, Xf, ux, Zf, uz)
        return ContactSet(E, gap <= tol, gap <= stol, witness, "affine")

    cand = np.zeros(n, bool)
    used = method
    if method == "hull":
        try:
            centre = Zf.mean(axis=0)
            hull = ConvexHull(np.c_[Zf - centre, uz / scale])
            eq = hull.equations
            up = eq[eq[:, d] > 1e-12]
            slopes = -up[:, :d] / up[:, d:d + 1]
            icpt = -up[:, d + 1] / up[:, d]
            env_vals = np.empty(n)
            arg = np.empty(n, dtype=np.int64)
            for a in range(0, n, 1024):
                vals = (Xf[a:a + 1024] - centre) @ slopes.T + icpt
                arg[a:a + 1024] = vals.argmin(axis=1)
                env_vals[a:a + 1024] = vals.min(axis=1) * scale
            cand = ux >= env_vals - tol
            witness[cand] = slopes[arg[cand]] * scale
        except QhullError as exc:
            log.debug("qhull failed (%s); using LP", exc)
            used = "lp"
    if used == "lp":
        cand = np.ones(n, bool)
        witness[:] = np.nan
    gap = np.full(n, np.inf)
    idx = np.nonzero(cand)[0]
    if used == "hull" and idx.size:
        gap[idx] = _verify(witness[idx], Xf[idx], ux[idx], Zf, uz)
    # anything the hull could not certify is settled by LP
    redo = idx[~(gap[idx] <= tol)] if used == "hull" else idx
    for i in redo:
        s, _ = lp_witness(Xf[i], ux[i], Zf, uz)
        witness[i] = s
        gap[i] = _verify(s[None, :], Xf[i:i + 1], ux[i:i + 1], Zf, uz)[0]
    member = gap <= tol
    # a member certified only with slack may still be strict via another slope
    for i in np.nonzero(member & (gap > stol))[0]:
        s, _ = lp_witness(Xf[i], ux[i], Zf, uz)
        g = _verify(s[None, :], Xf[i:i + 1], ux[i:i + 1], Zf, uz)[0]
        if g < gap[i]:
            gap[i], witness[i] = g, s
    witness[~member] = np.nan
    return ContactSet(E, member, gap <= stol, witness, used)


# -- maximum principle checks --------------------------------------------------

@dataclass
class MPResult:
    lhs: float
    rhs_core: float
    ratio: float | None
    contact_size: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs_core": self.rhs_core, "ratio": self.ratio,
                "contact_size": self.contact_size, "violations": self.violations}


def _ratio(lhs, rhs):
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs <= 0 else float("inf")


def mp_check(env: Environment, dom: LatticeDomain, u, g) -> MPResult:
    """Evaluate both sides of the ABP-type bound for u with L_w u >= -g on contact points.

    Returns ``lhs = max_E u - max_dE u`` and
    ``rhs_core = diam(closure) * (sum_contact |g/eps|^d)^(1/d)``; the ratio
    is withheld when the hypothesis fails at a contact point.
    """
    _require_elliptic(env, dom.sites)
    E = dom.sites
    uf = u if isinstance(u, GridFunction) else GridFunction(dom.closure, evaluate(u, dom.closure))
    gv = evaluate(g, E)
    cs = contact_set(uf, E, dom.closure)
    Lu = apply_L(env, uf, E)
    scale = max(1.0, float(np.abs(uf.values).max()))
    bad = cs.member & (Lu < -gv - 1e-10 * scale)
    violations = [{"site": [int(c) for c in E[i]], "Lu": float(Lu[i]), "g": float(gv[i])}
                  for i in np.nonzero(bad)[0]]
    _, axis = env.kernels_at(E)
    eps = np.prod(axis, axis=1) ** (1.0 / env.d)
    lhs = float(uf(E).max() - uf(dom.boundary).max())
    terms = np.abs(gv[cs.strict] / eps[cs.strict]) ** env.d
    rhs = float(dom.diam_closure * terms.sum() ** (1.0 / env.d))
    ratio = None if violations else _ratio(lhs, rhs)
    return MPResult(lhs, rhs, ratio, len(cs), violations)


@dataclass
class MVIResult:
    numerator: float
    denominator: float
    ratio: float | None

    def to_dict(self) -> dict:
        return {"numerator": self.numerator, "denominator": self.denominator, "ratio": self.ratio}


def mvi_check(env: Environment, R: float, sigma: float, p: float, boundary) -> MVIResult:
    """max_{B_sigma R} u / ||u+ / eps^(d/p)||_{B_R, p} for the harmonic u with given boundary data."""
    d = env.d
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    if not 0 < p <= d:
        raise ValueError("p must lie in (0, d]")
    dom = LatticeDomain.ball(R, d)
    u = dirichlet_solve(env, dom, 0.0, boundary)
    inner = dom.sites[l2sq(dom.sites) < (sigma * R) ** 2]
    num = float(u(inner).max())
    _, axis = env.kernels_at(dom.sites)
    eps = np.prod(axis, axis=1) ** (1.0 / d)
    den = mean_norm(np.maximum(u(dom.sites), 0.0) / eps ** (d / p), p)
    return MVIResult(num, den, num / den if den > 0 else None)


@dataclass
class Calibration:
    """Two-phase constant calibration: C_hat from a reference corpus, bound = factor * C_hat."""

    c_hat: float
    factor: float = 1.5

    @classmethod
    def from_ratios(cls, ratios, factor: float = 1.5) -> "Calibration":
        r = [x for x in ratios if x is not None and np.isfinite(x)]
        if not r:
            raise ValueError("no finite ratios to calibrate on")
        return cls(float(max(r)), factor)

    @property
    def bound(self) -> float:
        return self.factor * self.c_hat

    def exceedances(self, ratios) -> list:
        return [i for i, x in enumerate(ratios) if x is not None and x > self.bound]


# -- cutoff lemma --------------------------------------------------------------

@dataclass(frozen=True)
class CutoffProfile:
    R: float
    beta: float = 2.0

    def __post_init__(self):
        if self.beta < 2:
            raise ValueError("beta must be at least 2")

    def __call__(self, sites) -> np.ndarray:
        r2 = l2sq(as_sites(sites)).astype(float) / self.R ** 2
        return np.where(r2 < 1, np.clip(1 - r2, 0, None) ** self.beta, 0.0)


def cutoff_constant(beta: float) -> float:
    """beta^2 2^(4 beta + 2) + 32: the interior and near-boundary branches together."""
    return beta ** 2 * 2 ** (4 * beta + 2) + 32


@dataclass
class CutoffResult:
    n_contact: int
    violations: list
    min_margin: float

    @property
    def ok(self) -> bool:
        return not self.violations


def cutoff_lemma_check(op: JumpOperator, u, R: float, beta: float = 2.0,
                       harmonic_tol: float = 1e-9) -> CutoffResult:
    """Check L_a v >= -C(beta) eta^(1-2/beta) R^-2 h_x^2 u+ at contact points of v = eta u+."""
    prof = CutoffProfile(R, beta)
    Lu = op.apply(u)
    uval = evaluate(u, op.closure)
    scale = max(1.0, float(np.abs(uval).max()))
    if np.abs(Lu).max() > harmonic_tol * scale:
        raise HypothesisViolation(f"u is not L_a-harmonic (residual {np.abs(Lu).max():.3g})")
    v = GridFunction(op.closure, prof(op.closure) * np.maximum(uval, 0.0))
    cs = contact_set(v, op.sites, op.closure)
    x = op.sites
    eta = prof(x)
    up = np.maximum(evaluate(u, x), 0.0)
    with np.errstate(divide="ignore"):
        w = np.where(eta > 0, eta ** (1 - 2 / beta), 0.0)
    bound = -cutoff_constant(beta) * w * op.reach ** 2 * up / R ** 2
    Lv = op.apply(v)
    margin = Lv - bound
    tol = 1e-10 * scale
    bad = cs.member & (margin < -tol)
    viol = [{"site": [int(c) for c in x[i]], "Lv": float(Lv[i]), "bound": float(bound[i])}
            for i in np.nonzero(bad)[0]]
    mm = float(margin[cs.member].min()) if cs.member.any() else float("inf")
    return CutoffResult(len(cs), viol, mm)
