"""Small-ellipticity site percolation, kappa-paths and the coarse exit kernel.

A site is open when its smallest axis weight is below ``eps0``.  Clusters
use nearest-neighbour adjacency; their boundary is the sup-norm boundary of
the vertex set.  The l1 diameter ``l(A) = sup_{x in A, y in dA} |x - y|_1``
has the closed form ``l1diam(A) + d``: for the extremal pair (x, a) in a
sign direction s, the site a + s lies in dA and adds exactly d.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import binomtest

from . import kernels, rng
from .elliptic import (JumpOperator, contact_set, exit_distribution, operator_dirichlet_solve)
from .env import Environment, EnvSpec
from .lattice import (GridFunction, LatticeDomain, SiteIndex, as_sites, box_sites, evaluate,
                      l2sq, mean_norm)

log = logging.getLogger(__name__)

STOCH_TOL = 1e-10


def sign_vectors(d: int, half: bool = False) -> np.ndarray:
    """All kappa in {-1, 1}^d (with ``half``, one of each +-pair)."""
    ks = np.array(list(itertools.product((1, -1), repeat=d)), dtype=np.int64)
    return ks[ks[:, 0] == 1] if half else ks


def sphere_size(n: int, d: int) -> int:
    """|S_n| = #{x : |x|_inf = n}."""
    return 1 if n == 0 else (2 * n + 1) ** d - (2 * n - 1) ** d


# -- cluster maps ----------------------------------------------------------------

@dataclass(eq=False)
class ClusterMap:
    """Open sites and their clusters on the box [-radius, radius]^d.

    Clusters touching the box edge are ``censored``: their diameter is only
    a lower bound.
    """

    d: int
    radius: int
    eps0: float
    open: np.ndarray
    labels: np.ndarray
    cluster_size: np.ndarray
    cluster_l: np.ndarray
    cluster_censored: np.ndarray

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_size.shape[0])

    @cached_property
    def sites(self) -> np.ndarray:
        return box_sites(self.radius, self.d)

    def _flat(self, sites) -> tuple[np.ndarray, np.ndarray]:
        s = as_sites(sites, self.d)
        inside = (np.abs(s) <= self.radius).all(axis=1)
        idx = np.full(s.shape[0], -1, dtype=np.int64)
        if inside.any():
            idx[inside] = np.ravel_multi_index(tuple((s[inside] + self.radius).T), (self.side,) * self.d)
        return idx, inside

    def labels_at(self, sites) -> np.ndarray:
        """Cluster id per site, -1 for closed sites; KeyError outside the box."""
        idx, inside = self._flat(sites)
        if not inside.all():
            bad = as_sites(sites, self.d)[~inside][0]
            raise KeyError(f"site {tuple(int(c) for c in bad)} outside cluster map box")
        return self.labels[idx]

    def is_open(self, sites) -> np.ndarray:
        return self.labels_at(sites) >= 0

    def l_at(self, sites) -> np.ndarray:
        """l_x (0 for closed sites); censored clusters give lower bounds."""
        lab = self.labels_at(sites)
        out = np.zeros(lab.shape[0], dtype=np.int64)
        out[lab >= 0] = self.cluster_l[lab[lab >= 0]]
        return out

    def censored_at(self, sites) -> np.ndarray:
        lab = self.labels_at(sites)
        out = np.zeros(lab.shape[0], dtype=bool)
        out[lab >= 0] = self.cluster_censored[lab[lab >= 0]]
        return out

    @cached_property
    def _members(self):
        order = np.argsort(self.labels, kind="stable")
        lab = self.labels[order]
        start = np.searchsorted(lab, 0)
        order, lab = order[start:], lab[start:]
        bounds = np.searchsorted(lab, np.arange(self.n_clusters + 1))
        return order, bounds

    def cluster_sites(self, k: int) -> np.ndarray:
        order, bounds = self._members
        return self.sites[order[bounds[k]:bounds[k + 1]]]

    def cluster_boundary(self, k: int) -> np.ndarray:
        return LatticeDomain(self.cluster_sites(k)).boundary

    def cluster_closure(self, k: int) -> np.ndarray:
        return LatticeDomain(self.cluster_sites(k)).closure

    def to_csv(self, path) -> None:
        """Site-label table: coordinates, open flag, cluster id, l_x, censored flag."""
        open_flat = self.labels >= 0
        l = np.zeros(self.labels.shape[0], dtype=np.int64)
        cen = np.zeros(self.labels.shape[0], dtype=bool)
        l[open_flat] = self.cluster_l[self.labels[open_flat]]
        cen[open_flat] = self.cluster_censored[self.labels[open_flat]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.d)] + ["open", "cluster", "l", "censored"])
            for s, o, c, li, ce in zip(self.sites, open_flat, self.labels, l, cen):
                w.writerow([int(v) for v in s] + [int(o), int(c), int(li), int(ce)])


def open_mask(axis: np.ndarray, eps0: float) -> np.ndarray:
    return axis.min(axis=-1) < eps0


def cluster_geometry(labels: np.ndarray, sites: np.ndarray, radius: int, n_clusters: int):
    """Per-cluster size, l = l1diam + d, and edge flag."""
    d = sites.shape[1]
    sel = labels >= 0
    lab, s = labels[sel], sites[sel]
    size = np.bincount(lab, minlength=n_clusters).astype(np.int64)
    spread = np.zeros(n_clusters, dtype=np.int64)
    for k in sign_vectors(d, half=True):
        v = s @ k
        hi = np.full(n_clusters, np.iinfo(np.int64).min)
        lo = np.full(n_clusters, np.iinfo(np.int64).max)
        np.maximum.at(hi, lab, v)
        np.minimum.at(lo, lab, v)
        spread = np.maximum(spread, hi - lo)
    edge = np.zeros(n_clusters, dtype=bool)
    np.logical_or.at(edge, lab, (np.abs(s) == radius).any(axis=1))
    return size, spread + d, edge


def build_cluster_map(env: Environment, eps0: float, radius: int | None = None) -> ClusterMap:
    """Exact cluster labeling of the open sites in the box of the given radius."""
    d = env.d
    radius = env.radius if radius is None else int(radius)
    sites = box_sites(radius, d)
    _, axis = env.kernels_at(sites)
    opened = open_mask(axis, eps0)
    side = 2 * radius + 1
    labels = kernels.label_clusters(opened, side, d)
    n = int(labels.max()) + 1 if opened.any() else 0
    size, l, edge = cluster_geometry(labels, sites, radius, n)
    return ClusterMap(d, radius, float(eps0), opened.reshape((side,) * d), labels, size, l, edge)


# -- kappa paths -------------------------------------------------------------------

@dataclass
class KappaStructure:
    """kappa-paths from x to y_kappa and their union Lambda_x."""

    x: tuple
    open: bool
    paths: dict = field(default_factory=dict)
    terminals: dict = field(default_factory=dict)
    lam: np.ndarray | None = None

    def path_lengths(self) -> dict:
        return {k: len(p) - 1 for k, p in self.paths.items()}


class KappaError(RuntimeError):
    pass


@dataclass(eq=False)
class ClusterContext:
    """Closure of one cluster with local neighbour and admissibility tables.

    ``nbr[j, 2i]`` / ``nbr[j, 2i+1]`` is the local index of ``sites[j] +- e_i``
    (-1 outside the closure); ``ok[j, i]`` is ``w(sites[j], e_i) >= xi0``.
    """

    sites: np.ndarray
    index: SiteIndex
    on_boundary: np.ndarray
    ok: np.ndarray
    nbr: np.ndarray


def cluster_context(env: Environment, cmap: ClusterMap, label: int, xi0: float) -> ClusterContext:
    dom = LatticeDomain(cmap.cluster_sites(label))
    sites = dom.closure
    index = SiteIndex(sites)
    d = env.d
    nbr = np.empty((sites.shape[0], 2 * d), dtype=np.int64)
    for i in range(d):
        e = np.zeros(d, np.int64)
        e[i] = 1
        for k, sg in enumerate((1, -1)):
            t = sites + sg * e
            nbr[:, 2 * i + k] = np.where(index.contains(t), index.lookup(np.where(
                index.contains(t)[:, None], t, sites)), -1)
    on_bd = np.zeros(sites.shape[0], dtype=bool)
    on_bd[len(dom):] = True
    _, axis = env.kernels_at(sites)
    return ClusterContext(sites, index, on_bd, axis >= xi0, nbr)


def _kappa_levels(ctx: ClusterContext, j0: int, kappa) -> np.ndarray:
    """Level of every closure site reachable from j0 by a kappa-path (-1 if not)."""
    d = len(kappa)
    cols = [2 * i + (0 if kappa[i] > 0 else 1) for i in range(d)]
    level = np.full(ctx.sites.shape[0], -1, dtype=np.int64)
    level[j0] = 0
    cur = np.array([j0])
    n = 0
    while cur.size:
        n += 1
        nxt = [ctx.nbr[cur[ctx.ok[cur, i]], cols[i]] for i in range(d)]
        nxt = np.unique(np.concatenate(nxt))
        nxt = nxt[nxt >= 0]
        level[nxt] = n
        cur = nxt
    return level


def build_kappa(env: Environment, cmap: ClusterMap, x, xi0: float | None = None,
                ctx: ClusterContext | None = None) -> KappaStructure:
    """kappa-paths, terminals y_kappa and Lambda_x for the site x.

    y_kappa maximizes |y - x|_1 over boundary sites reachable by a kappa-path
    inside the cluster closure; ties go to the lexicographically smallest
    site.  The path backtracks from y_kappa preferring the lowest axis.
    """
    d = env.d
    xi0 = 1.0 / (2 * d) if xi0 is None else xi0
    x = as_sites(x, d)[0]
    xt = tuple(int(c) for c in x)
    lab = int(cmap.labels_at(x[None, :])[0])
    if lab < 0:
        return KappaStructure(xt, False, lam=x[None, :].copy())
    if cmap.cluster_censored[lab]:
        raise KappaError(f"cluster of {xt} touches the cluster map edge")
    if ctx is None:
        ctx = cluster_context(env, cmap, lab, xi0)
    j0 = int(ctx.index.lookup(x[None, :])[0])
    ks = KappaStructure(xt, True)
    lam = [np.array([j0])]
    for kappa in sign_vectors(d):
        level = _kappa_levels(ctx, j0, kappa)
        cand = np.nonzero((level > 0) & ctx.on_boundary)[0]
        if cand.size == 0:
            raise KappaError(f"no admissible kappa-path from {xt} for kappa={tuple(kappa)}")
        top = cand[level[cand] == level[cand].max()]
        best = top[np.lexsort(ctx.sites[top].T[::-1])[0]]
        # backtrack: predecessor z = y - kappa_i e_i with w(z, e_i) >= xi0
        path = [best]
        y = best
        while y != j0:
            for i in range(d):
                z = ctx.nbr[y, 2 * i + (1 if kappa[i] > 0 else 0)]
                if z >= 0 and level[z] == level[y] - 1 and ctx.ok[z, i]:
                    y = z
                    path.append(z)
                    break
            else:
                raise KappaError("kappa-path backtracking failed")
        path = np.array(path[::-1])
        key = tuple(int(k) for k in kappa)
        ks.paths[key] = ctx.sites[path]
        ks.terminals[key] = tuple(int(c) for c in ctx.sites[best])
        lam.append(path)
    ks.lam = ctx.sites[np.unique(np.concatenate(lam))]
    return ks


def coarse_row(env: Environment, ks: KappaStructure):
    """Exit law of the walk from Lambda_x started at x: (targets, weights)."""
    d = env.d
    lam = ks.lam
    x = np.array(ks.x, dtype=np.int64)
    if lam.shape[0] == 1:
        stay, axis = env.kernels_at(x[None, :])
        w = axis[0] / (1.0 - stay[0])
        tg = np.concatenate([x + np.eye(d, dtype=np.int64), x - np.eye(d, dtype=np.int64)])
        return tg, np.concatenate([w, w])
    op = JumpOperator.from_env(env, lam)
    dist = exit_distribution(op)
    row = dist[op.index.lookup(x[None, :])[0]]
    keep = row > 0
    return op.boundary[keep], row[keep]


def build_coarse_kernel(env: Environment, ks: KappaStructure):
    """a(x, .) for one site; checks stochasticity and balance."""
    tg, w = coarse_row(env, ks)
    op = JumpOperator.from_rows(np.array([ks.x]), [(tg, w)])
    _check_coarse(op)
    return op


def _check_coarse(op: JumpOperator) -> None:
    se, be = op.stochasticity_error(), op.balance_error()
    if se > STOCH_TOL or be > STOCH_TOL:
        raise RuntimeError(f"coarse kernel defect: stochasticity {se:.3g}, balance {be:.3g}")


def coarse_operator(env: Environment, cmap: ClusterMap, sites, xi0: float | None = None) -> JumpOperator:
    """The coarse jump operator L_a on the given sites."""
    sites = as_sites(sites, env.d)
    labels = cmap.labels_at(sites)
    xi = 1.0 / (2 * env.d) if xi0 is None else xi0
    rows = []
    ctxs = {}
    stay, axis = env.kernels_at(sites)
    eye = np.eye(env.d, dtype=np.int64)
    for s, lab, st, ax in zip(sites, labels, stay, axis):
        if lab < 0:
            w = ax / (1.0 - st)
            rows.append((np.concatenate([s + eye, s - eye]), np.concatenate([w, w])))
            continue
        if lab not in ctxs:
            ctxs[lab] = cluster_context(env, cmap, lab, xi)
        rows.append(coarse_row(env, build_kappa(env, cmap, s, xi, ctxs[lab])))
    op = JumpOperator.from_rows(sites, rows)
    _check_coarse(op)
    return op


# -- connectivity -------------------------------------------------------------------

@dataclass
class ConnectivityStats:
    d: int
    eps0: float
    n_grid: list
    M: int
    q_hat: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    hits: np.ndarray
    p_open: float
    phi_hat: float | None
    phi_se: float | None
    log_prefactor: float | None
    l_tail: dict
    n_censored: int
    sub1: list
    sub2: list

    @property
    def phi_ci(self):
        if self.phi_hat is None:
            return None
        return (self.phi_hat - 1.96 * self.phi_se, self.phi_hat + 1.96 * self.phi_se)

    @property
    def sub1_ok(self) -> bool:
        return all(r["ok"] for r in self.sub1)

    @property
    def sub2_ok(self) -> bool:
        return all(r["ok"] for r in self.sub2)

    def rows(self) -> list:
        return [{"n": int(n), "q_hat": float(q), "ci_low": float(lo), "ci_high": float(hi),
                 "hits": int(h), "samples": self.M}
                for n, q, lo, hi, h in zip(self.n_grid, self.q_hat, self.ci_low, self.ci_high, self.hits)]

    def summary(self) -> dict:
        return {"d": self.d, "eps0": self.eps0, "M": self.M, "p_open": self.p_open,
                "phi_hat": self.phi_hat, "phi_se": self.phi_se, "phi_ci": self.phi_ci,
                "log_prefactor": self.log_prefactor, "n_censored": self.n_censored,
                "l_tail": self.l_tail, "sub1_ok": self.sub1_ok, "sub2_ok": self.sub2_ok,
                "sub1": self.sub1, "sub2": self.sub2}


def origin_cluster_samples(spec: EnvSpec, eps0: float, keys: np.ndarray, radius: int,
                           batch: int = 2048):
    """Origin-cluster statistics for one environment per key on a box of ``radius``.

    Returns (open, max sup-norm, l1 spread, edge) arrays.
    """
    d = spec.d
    box = box_sites(radius, d)
    side = 2 * radius + 1
    out = [np.empty(len(keys), dtype=t) for t in (bool, np.int64, np.int64, bool)]
    for a in range(0, len(keys), batch):
        kb = keys[a:a + batch]
        sites = np.tile(box, (len(kb), 1))
        _, axis = spec.sample(np.repeat(kb, box.shape[0]), sites)
        opened = open_mask(axis, eps0).reshape(len(kb), -1)
        size, rad, spread, edge = kernels.origin_clusters(opened, side, d)
        out[0][a:a + batch] = size > 0
        out[1][a:a + batch] = rad
        out[2][a:a + batch] = spread
        out[3][a:a + batch] = edge
    return tuple(out)


def wilson(k: int, n: int) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _log_se(q, M):
    return np.sqrt((1 - q) / (M * q)) if q > 0 else np.inf


def connectivity_stats(spec: EnvSpec, eps0: float, n_grid, M: int, seed: int = 0,
                       radius: int | None = None, max_radius: int = 64) -> ConnectivityStats:
    """Monte Carlo estimates of q_n = P(o -> S_n) and the cluster-diameter tail.

    o -> S_n means the closure of the origin cluster meets S_n; for n >= 1 this
    is ``o open and max_{A_o}|x|_inf + 1 >= n``, and q_0 = P(o open).
    """
    d = spec.d
    n_grid = sorted(int(n) for n in n_grid)
    radius = max(n_grid) + 1 if radius is None else int(radius)
    keys = rng.stream_keys(seed, "perc-env", M)
    opened, rad, spread, edge = origin_cluster_samples(spec, eps0, keys, radius)
    # the l-tail needs uncensored clusters: regrow the box for those that touch it
    cur = radius
    todo = np.nonzero(opened & edge)[0]
    while todo.size and cur < max_radius:
        cur = min(2 * cur, max_radius)
        o2, r2, s2, e2 = origin_cluster_samples(spec, eps0, keys[todo], cur)
        rad[todo], spread[todo], edge[todo] = r2, s2, e2
        todo = todo[e2]
    censored = opened & edge
    reach = np.where(opened, rad + 1, -1)
    hits = np.array([int(opened.sum()) if n == 0 else int((reach >= n).sum()) for n in n_grid])
    q = hits / M
    ci = [wilson(h, M) for h in hits]
    qd = dict(zip(n_grid, q))
    # regression of -log q_n + (d-1) log n on n, weighted by the delta-method variance
    pts = [(n, qn) for n, qn in zip(n_grid, q) if n >= 1 and qn > 0]
    phi_hat = phi_se = logc = None
    if len(pts) >= 2:
        ns = np.array([p[0] for p in pts], float)
        qs = np.array([p[1] for p in pts])
        y = -np.log(qs) + (d - 1) * np.log(ns)
        w = 1.0 / np.array([_log_se(v, M) ** 2 for v in qs])
        nbar = np.sum(w * ns) / w.sum()
        ybar = np.sum(w * y) / w.sum()
        sxx = np.sum(w * (ns - nbar) ** 2)
        phi_hat = float(np.sum(w * (ns - nbar) * (y - ybar)) / sxx)
        phi_se = float(np.sqrt(1.0 / sxx))
        logc = float(-(ybar - phi_hat * nbar))
    sub1, sub2 = [], []
    for m, n in itertools.combinations_with_replacement(n_grid, 2):
        if m < 1 or m + n not in qd:
            continue
        qm, qn, qmn = qd[m], qd[n], qd[m + n]
        if qmn == 0:
            prod = sphere_size(m, d) * qm * qn
            sub1.append({"m": m, "n": n, "lhs": float("-inf"),
                         "rhs": float(np.log(prod)) if prod > 0 else float("-inf"), "ok": True})
        else:
            se = np.sqrt(_log_se(qmn, M) ** 2 + _log_se(qm, M) ** 2 + _log_se(qn, M) ** 2)
            lhs = np.log(qmn)
            rhs = np.log(sphere_size(m, d) * qm * qn)
            sub1.append({"m": m, "n": n, "lhs": float(lhs), "rhs": float(rhs), "se": float(se),
                         "ok": bool(lhs <= rhs + 3 * se)})
        if qm > 0 and qn > 0:
            low = qm * qn / (2 * d * sphere_size(min(m, n), d))
            if qmn == 0:
                ok = low * M < 3  # an empty count is consistent with a tiny lower bound
                sub2.append({"m": m, "n": n, "lhs": float("-inf"), "rhs": float(np.log(low)), "ok": bool(ok)})
            else:
                se = np.sqrt(_log_se(qmn, M) ** 2 + _log_se(qm, M) ** 2 + _log_se(qn, M) ** 2)
                sub2.append({"m": m, "n": n, "lhs": float(np.log(qmn)), "rhs": float(np.log(low)),
                             "se": float(se), "ok": bool(np.log(qmn) >= np.log(low) - 3 * se)})
    # tail P(l_o >= n) against n^(d-1) exp(-n phi / 2d), up to a constant
    l_o = np.where(opened & ~censored, spread + d, 0)
    valid = M - int(censored.sum())
    tail = {}
    for n in n_grid:
        if n < 1:
            continue
        pt = float((l_o >= n).sum() / valid) if valid else float("nan")
        ref = n ** (d - 1) * np.exp(-n * phi_hat / (2 * d)) if phi_hat is not None else None
        tail[int(n)] = {"p_hat": pt, "reference": ref,
                        "ratio": (pt / ref) if ref else None}
    return ConnectivityStats(d, float(eps0), n_grid, M, q, np.array([c[0] for c in ci]),
                             np.array([c[1] for c in ci]), hits, float(opened.mean()),
                             phi_hat, phi_se, logc, tail, int(censored.sum()), sub1, sub2)


def write_connectivity_csv(stats: ConnectivityStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["n", "q_hat", "ci_low", "ci_high", "hits", "samples"])
        w.writeheader()
        for r in stats.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- explicit-constant checks ---------------------------------------------------------

@dataclass
class MP2Result:
    lhs: float
    rhs: float
    max_boundary: float
    diam: int
    contact_size: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def passed(self) -> bool:
        return self.ok and self.lhs <= self.rhs + 1e-9 * max(1.0, abs(self.rhs))

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "max_boundary": self.max_boundary,
                "diam": self.diam, "contact_size": self.contact_size,
                "violations": self.violations, "pass": self.passed}


def mp2_check(op: JumpOperator, cmap: ClusterMap, u, g) -> MP2Result:
    """max_E u <= (d diam E~ / eps0) (sum_contact |g (2d)^l_x|^d)^(1/d) + max_{E^b} u.

    ``op`` is the coarse operator on E; ``u`` lives on E~ = E u E^b.  The
    hypothesis L_a u >= -g is checked on the slack contact set and the sum runs
    over the strict contact set, so floating-point ties never help the bound.
    """
    d = op.d
    E = op.sites
    uv = evaluate(u, op.closure)
    uf = GridFunction(op.closure, uv)
    gv = evaluate(g, E)
    cs = contact_set(uf, E, op.closure)
    Lu = op.apply(uf)
    scale = max(1.0, float(np.abs(uv).max()))
    bad = cs.member & (Lu < -gv - 1e-10 * scale)
    viol = [{"site": [int(c) for c in E[i]], "Lu": float(Lu[i]), "g": float(gv[i])}
            for i in np.nonzero(bad)[0]]
    l = cmap.l_at(E)
    terms = np.abs(gv[cs.strict] * (2.0 * d) ** l[cs.strict]) ** d
    diam = op.diam_closure
    maxb = float(uf(op.boundary).max())
    rhs = d * diam / cmap.eps0 * float(terms.sum()) ** (1.0 / d) + maxb
    return MP2Result(float(uf(E).max()), float(rhs), maxb, diam, len(cs), viol)


def mvi2_weight(l: np.ndarray, d: int) -> np.ndarray:
    """max(l_x, 1)^2 (2d)^l_x; the floor keeps closed sites (l_x = 0) in the norm."""
    l = np.asarray(l, dtype=float)
    return np.maximum(l, 1.0) ** 2 * (2.0 * d) ** l


@dataclass
class MVI2Result:
    numerator: float
    denominator: float
    ratio: float | None

    def to_dict(self) -> dict:
        return {"numerator": self.numerator, "denominator": self.denominator, "ratio": self.ratio}


def mvi2_check(env: Environment, cmap: ClusterMap, R: float, sigma: float, boundary,
               p: float = 1.0, xi0: float | None = None, op: JumpOperator | None = None) -> MVI2Result:
    """Ratio of max_{B_sigma R} u to the weighted norm for the L_a-harmonic u on B_R.

    ``op`` may pass a coarse operator already built on the ball.
    """
    d = env.d
    dom = LatticeDomain.ball(R, d)
    if op is None:
        op = coarse_operator(env, cmap, dom.sites, xi0)
    u = operator_dirichlet_solve(op, 0.0, boundary)
    inner = dom.sites[l2sq(dom.sites) < (sigma * R) ** 2]
    num = float(u(inner).max())
    w = mvi2_weight(cmap.l_at(dom.sites), d) ** (d / p)
    pref = (op.diam_closure / (cmap.eps0 * R)) ** (d / p)
    den = pref * mean_norm(w * np.maximum(u(dom.sites), 0.0), p)
    return MVI2Result(num, float(den), num / den if den > 0 else None)


# -- transience -------------------------------------------------------------------------

def omega_indicator(cmap: ClusterMap, K: int, i: int) -> tuple[bool | None, int]:
    """1{l_x <= K^(i-1) for all x in B^(i+2)} and the number of censored sites met.

    Returns None when the ball is not covered by the cluster map or a
    censored cluster meets it (the indicator cannot be decided).
    """
    r = K ** (i + 2)
    if r > cmap.radius:
        return None, 0
    ball = LatticeDomain.ball(r, cmap.d).sites
    lab = cmap.labels_at(ball)
    opened = lab >= 0
    cen = cmap.cluster_censored[lab[opened]]
    l = cmap.cluster_l[lab[opened]]
    n_cen = int(cen.sum())
    if np.any(l[~cen] > K ** (i - 1)):
        return False, n_cen
    if n_cen:
        return None, n_cen
    return True, 0


@dataclass
class TransienceReport:
    K: float
    i_max: int
    eps0: float
    n_env: int
    visit_prob: np.ndarray
    visit_prob_se: np.ndarray
    mean_visits: np.ndarray
    cumulative: np.ndarray
    omega_freq: list
    omega_decided: list
    n_flagged: int
    n_censored: int

    @property
    def tail_sums(self) -> np.ndarray:
        """sum_{j >= i} P(visit o in [tau_j, tau_{j+1})) up to i_max."""
        return np.cumsum(self.visit_prob[::-1])[::-1]

    def rows(self) -> list:
        return [{"i": i, "visit_prob": float(self.visit_prob[i]),
                 "visit_prob_se": float(self.visit_prob_se[i]),
                 "mean_visits": float(self.mean_visits[i]), "cumulative": float(self.cumulative[i]),
                 "omega_freq": self.omega_freq[i], "omega_decided": self.omega_decided[i]}
                for i in range(self.i_max + 1)]

    def summary(self) -> dict:
        return {"K": self.K, "i_max": self.i_max, "eps0": self.eps0, "n_env": self.n_env,
                "tail_sums": self.tail_sums.tolist(), "flagged": self.n_flagged,
                "censored_sites": self.n_censored}


def transience_iid_experiment(spec: EnvSpec, eps0: float, K: float, i_max: int, M: int,
                              seed: int = 0, n_env: int = 1, cap: int | None = None,
                              workers: int = 1) -> TransienceReport:
    """Per-annulus visit probabilities at o and Omega_i frequencies over environments.

    Each environment gets M walks.  Omega_i needs the cluster map on the ball
    of radius K^(i+2); it is reported as undecided beyond the box cap or when
    a censored cluster meets that ball.
    """
    from . import walk
    from .env import generate

    d = spec.d
    if K < 4 and spec.variant != "uniform-srw":
        raise ValueError("K must be at least 4 for the i.i.d. experiment")
    cap = walk.STEP_CAP if cap is None else cap
    counts, flagged, censored = [], 0, 0
    omega = [[] for _ in range(i_max + 1)]
    for j in range(n_env):
        env_seed = rng.derive_key(seed, "transience-env", j)
        env = generate(spec, env_seed, 1)
        rep = walk.annulus_visits(env, K, i_max, M, seed, cap=cap, workers=workers,
                                  label=f"transience-{j}")
        counts.append(rep.counts[rep.complete])
        flagged += rep.n_flagged
        if env.homogeneous:
            closed = bool(open_mask(env.axis.reshape(-1, d)[:1], eps0)[0]) is False
            for i in range(i_max + 1):
                omega[i].append(closed)
            continue
        rc = min(int(K ** (i_max + 2)) + 1, walk._max_radius(d))
        cmap = build_cluster_map(env, eps0, rc)
        for i in range(i_max + 1):
            ind, nc = omega_indicator(cmap, int(K), i)
            censored += nc
            omega[i].append(ind)
    c = np.concatenate(counts)
    vis = (c > 0).mean(axis=0)
    freq = [float(np.mean([v for v in o if v is not None])) if any(v is not None for v in o) else None
            for o in omega]
    decided = [int(sum(v is not None for v in o)) for o in omega]
    return TransienceReport(float(K), int(i_max), float(eps0), int(n_env), vis,
                            np.sqrt(vis * (1 - vis) / c.shape[0]), c.mean(axis=0),
                            np.cumsum(c, axis=1).mean(axis=0), freq, decided, flagged, censored)
