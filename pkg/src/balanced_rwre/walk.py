"""Quenched walk simulation: paths, exit times, visit counts, CLT statistics.

Every sample owns a counter-based stream keyed by (master seed, label,
sample index), so results do not depend on chunking or worker count.
Walks that leave a generated environment's box are rerun on a larger box;
the rerun reproduces the same path because kernels are hashed per site.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels, rng
from .elliptic import JumpOperator, operator_dirichlet_solve
from .env import Environment
from .lattice import GridFunction, LatticeDomain, as_sites

log = logging.getLogger(__name__)

STEP_CAP = 10**8
MAX_SITES = 8_000_000
CHUNK = 256


class HoldingError(ValueError):
    pass


def _max_radius(d: int) -> int:
    return int((MAX_SITES ** (1.0 / d) - 1) // 2)


def ensure_radius(env, radius: int):
    """``env`` extended to at least ``radius`` when it can be (generated, not homogeneous)."""
    if not isinstance(env, Environment) or env.homogeneous or env.radius >= radius:
        return env
    if env.spec is None or not env.spec.generatable:
        return env
    return env.extend(min(int(radius), _max_radius(env.d)))


def _chunks(n: int, workers: int):
    size = max(1, min(CHUNK * 16, math.ceil(n / max(1, workers))))
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def run_keyed(env, fn, keys: np.ndarray, workers: int = 1, status_of=lambda r: r[-1]):
    """Run ``fn(table, keys) -> tuple of per-sample arrays`` over ``keys``.

    Samples that escape the table are rerun on doubled boxes until they stay
    inside or the box cap is reached; they remain flagged as escaped then.
    """
    keys = np.asarray(keys, dtype=np.uint64)

    def run_all(e, ks):
        table = e.walk_table()
        parts = _chunks(len(ks), workers)
        if workers > 1 and len(parts) > 1:
            with ThreadPoolExecutor(workers) as pool:
                outs = list(pool.map(lambda ab: fn(table, ks[ab[0]:ab[1]]), parts))
        else:
            outs = [fn(table, ks[a:b]) for a, b in parts]
        if not outs:
            return fn(table, ks)
        return tuple(np.concatenate([o[j] for o in outs]) for j in range(len(outs[0])))

    res = list(run_all(env, keys))
    todo = np.nonzero(status_of(res) == kernels.ESCAPED)[0]
    while todo.size:
        bigger = ensure_radius(env, 2 * env.radius)
        if bigger is env:
            log.warning("%d samples escaped a box of radius %d", todo.size, env.radius)
            break
        env = bigger
        log.info("rerunning %d escaped samples at radius %d", todo.size, env.radius)
        sub = run_all(env, keys[todo])
        for j, arr in enumerate(sub):
            res[j][todo] = arr
        todo = todo[status_of(sub) == kernels.ESCAPED]
    return tuple(res), env


def _origin(d, x0=None):
    return np.zeros(d, np.int64) if x0 is None else as_sites(x0, d)[0]


def _require_no_holding(env) -> None:
    if isinstance(env, Environment):
        if np.any(env.stay >= 1.0):
            bad = np.argwhere(env.stay >= 1.0)[0] - env.radius
            raise HoldingError(f"absorbing site {tuple(int(c) for c in bad)}")
        if np.any(env.stay > 0) or (env.spec is not None and _spec_holds(env.spec)):
            raise HoldingError("environment has holding mass; apply remove_laziness first")
    elif np.any(env.stay > 0):
        raise HoldingError("environment has holding mass; apply remove_laziness first")


def _spec_holds(spec) -> bool:
    p = spec.params
    return (spec.variant == "iid-elliptic" and p["stay_max"] > 0) or \
        (spec.variant == "trap" and p["lazy"])


# -- paths ------------------------------------------------------------------------

@dataclass
class WalkPath:
    start: tuple
    sites: np.ndarray

    @property
    def n(self) -> int:
        return self.sites.shape[0] - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.sites, axis=0)


def sample_path(env, x0, n: int, key: int) -> WalkPath:
    """Path of ``n`` steps from ``x0`` under the quenched law, driven by ``key``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    x0 = _origin(env.d, x0)
    env = ensure_radius(env, int(np.abs(x0).max()) + 1)
    while True:
        path, ok = kernels.sample_path(env.walk_table(), x0, key, n)
        if ok:
            return WalkPath(tuple(int(c) for c in x0), path)
        bigger = ensure_radius(env, 2 * env.radius)
        if bigger is env:
            raise RuntimeError(f"path left the environment box after {path.shape[0] - 1} steps")
        env = bigger


def endpoints(env, x0, n: int, M: int, seed: int, label: str = "endpoints",
              workers: int = 1) -> np.ndarray:
    """X_n for M independent walks; raises if any leaves a non-extendable box."""
    d = env.d
    x0 = _origin(d, x0)
    env = ensure_radius(env, int(np.abs(x0).max()) + 2 * int(math.isqrt(max(n, 1))) + 2)
    keys = rng.stream_keys(seed, label, M)
    (pos, _, status), _ = run_keyed(
        env, lambda t, k: kernels.run_stopped(t, x0, k, n), keys, workers)
    if np.any(status == kernels.ESCAPED):
        raise RuntimeError(f"{int((status == kernels.ESCAPED).sum())} walks left the environment box")
    return pos


# -- exit times -------------------------------------------------------------------

@dataclass
class ExitTimes:
    r: float
    norm: str
    tau: np.ndarray
    status: np.ndarray

    @property
    def M(self) -> int:
        return self.tau.shape[0]

    @property
    def n_capped(self) -> int:
        return int((self.status == kernels.CAPPED).sum())

    @property
    def mean(self) -> float:
        return float(math.fsum(self.tau) / self.M)

    @property
    def se(self) -> float:
        return float(np.std(self.tau, ddof=1) / math.sqrt(self.M)) if self.M > 1 else float("nan")

    def to_dict(self) -> dict:
        return {"r": self.r, "norm": self.norm, "M": self.M, "mean": self.mean, "se": self.se,
                "capped": self.n_capped, "bound": (self.r + 1) ** 2}


def exit_time_samples(env, x0, r: float, M: int, seed: int, norm: str = "l2",
                      cap: int = STEP_CAP, workers: int = 1) -> ExitTimes:
    """Samples of tau(r) = inf{n : |X_n - x0| > r}; needs a walk without holding."""
    _require_no_holding(env)
    d = env.d
    x0 = _origin(d, x0)
    code = {"l2": kernels.NORM_L2, "linf": kernels.NORM_LINF}[norm]
    env = ensure_radius(env, int(np.abs(x0).max() + math.floor(r)) + 2)
    keys = rng.stream_keys(seed, f"exit-{norm}-{r}", M)
    (_, steps, status), _ = run_keyed(
        env, lambda t, k: kernels.run_stopped(t, x0, k, cap, code, float(r)), keys, workers)
    if np.any(status == kernels.ESCAPED):
        raise RuntimeError("walk left a non-extendable environment before exiting")
    if np.any(status == kernels.CAPPED):
        log.warning("%d exit-time samples hit the step cap", int((status == kernels.CAPPED).sum()))
    return ExitTimes(float(r), norm, steps, status)


def exact_expected_exit_time(env, domain) -> GridFunction:
    """E^x[exit time of the domain] for x in the domain, by a sparse direct solve."""
    dom = domain if isinstance(domain, LatticeDomain) else LatticeDomain(as_sites(domain, env.d))
    op = JumpOperator.from_env(env, dom.sites)
    f = operator_dirichlet_solve(op, 1.0, 0.0)
    return f.restrict(dom.sites)


# -- Lemma E ----------------------------------------------------------------------

@dataclass
class LemmaEResult:
    N: int
    d: int
    c: float
    factor: float
    M: int
    estimate: float
    se: float
    n_capped: int

    @property
    def bound(self) -> float:
        return math.exp(-1) + 0.5

    @property
    def excluded(self) -> bool:
        """c > N^2: the factor is clamped at 0 and the case is outside the lemma's range."""
        return self.c > self.N ** 2

    @property
    def ok(self) -> bool:
        return self.estimate <= self.bound + 3 * self.se

    def to_dict(self) -> dict:
        return {"N": self.N, "d": self.d, "c": self.c, "factor": self.factor, "M": self.M,
                "estimate": self.estimate, "se": self.se, "bound": self.bound,
                "excluded": self.excluded, "ok": self.ok, "capped": self.n_capped}


def lemma_E_check(tenv, N: int, M: int, seed: int, x0=None, cap: int = STEP_CAP,
                  workers: int = 1) -> LemmaEResult:
    """Monte Carlo estimate of E(1 - c/N^2)^tau with c = 16 d^2 on the torus.

    tau is the first time the sup-norm displacement from x0 exceeds N.
    """
    d = tenv.d
    c = 16.0 * d * d
    factor = max(0.0, 1.0 - c / N ** 2)
    x0 = _origin(d, x0)
    keys = rng.stream_keys(seed, f"lemmaE-{N}", M)
    (_, steps, status), _ = run_keyed(
        tenv, lambda t, k: kernels.run_stopped(t, x0, k, cap, kernels.NORM_LINF, float(N)),
        keys, workers)
    with np.errstate(under="ignore"):
        vals = np.where(status == kernels.CAPPED, 0.0, factor ** steps.astype(float))
    est = math.fsum(vals) / M
    se = float(np.std(vals, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
    return LemmaEResult(int(N), d, c, factor, int(M), est, se, int((status == kernels.CAPPED).sum()))


# -- visit counts -----------------------------------------------------------------

@dataclass
class VisitReport:
    """Visits to the target in [tau_i, tau_{i+1}), i = 0..i_max, with tau_0 = 0.

    Index 0 holds the visits before tau_1 (time 0 included).  Capped samples
    are kept, flagged, and excluded from the means.
    """

    K: float
    radii: np.ndarray
    counts: np.ndarray
    status: np.ndarray
    steps: np.ndarray

    @property
    def M(self) -> int:
        return self.counts.shape[0]

    @property
    def complete(self) -> np.ndarray:
        return self.status == kernels.EXITED

    @property
    def n_flagged(self) -> int:
        return int((~self.complete).sum())

    @property
    def _c(self) -> np.ndarray:
        return self.counts[self.complete]

    @property
    def mean(self) -> np.ndarray:
        return self._c.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        c = self._c
        return c.std(axis=0, ddof=1) / math.sqrt(c.shape[0])

    @property
    def visit_prob(self) -> np.ndarray:
        return (self._c > 0).mean(axis=0)

    @property
    def visit_prob_se(self) -> np.ndarray:
        p = self.visit_prob
        return np.sqrt(p * (1 - p) / self._c.shape[0])

    @property
    def cumulative(self) -> np.ndarray:
        """Mean visits up to tau_{i+1}."""
        return np.cumsum(self._c, axis=1).mean(axis=0)

    @property
    def total(self) -> np.ndarray:
        return self._c.sum(axis=1)

    @property
    def total_mean(self) -> float:
        return float(self.total.mean())

    @property
    def total_se(self) -> float:
        t = self.total
        return float(t.std(ddof=1) / math.sqrt(t.shape[0]))

    def rows(self) -> list:
        cum, m, se, p, pse = self.cumulative, self.mean, self.se, self.visit_prob, self.visit_prob_se
        return [{"i": i, "radius_hi": float(self.radii[i]), "mean_visits": float(m[i]),
                 "se": float(se[i]), "visit_prob": float(p[i]), "visit_prob_se": float(pse[i]),
                 "cumulative": float(cum[i]), "samples": int(self.complete.sum()),
                 "flagged": self.n_flagged}
                for i in range(len(self.radii))]


def annulus_visits(env, K: float, i_max: int, M: int, seed: int, x0=None, target=None,
                   cap: int = STEP_CAP, workers: int = 1, label: str = "annulus") -> VisitReport:
    """Visit counts per annulus window, tau_i = inf{n : |X_n| > K^i} (Euclidean norm)."""
    if K < 3:
        raise ValueError("K must be at least 3")
    if i_max < 0:
        raise ValueError("i_max must be nonnegative")
    _require_no_holding(env)
    d = env.d
    x0 = _origin(d, x0)
    target = _origin(d, target)
    radii = np.array([float(K) ** (i + 1) for i in range(i_max + 1)])
    env = ensure_radius(env, int(radii[-1]) + 2)
    keys = rng.stream_keys(seed, label, M)
    (counts, steps, status), _ = run_keyed(
        env, lambda t, k: kernels.annulus_visits(t, x0, target, k, radii, cap), keys, workers)
    return VisitReport(float(K), radii, counts, status, steps)


@dataclass
class TimeVisitReport:
    horizons: np.ndarray
    counts: np.ndarray
    status: np.ndarray

    @property
    def M(self) -> int:
        return self.counts.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.status != kernels.ESCAPED

    @property
    def mean(self) -> np.ndarray:
        return self.counts[self.ok].mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        c = self.counts[self.ok]
        return c.std(axis=0, ddof=1) / math.sqrt(c.shape[0])

    def increment(self, a: int, b: int) -> tuple[float, float]:
        """Mean and SE of the visits in (horizons[a], horizons[b]]."""
        diff = (self.counts[self.ok, b] - self.counts[self.ok, a]).astype(float)
        return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.shape[0]))


def time_visits(env, horizons, M: int, seed: int, x0=None, target=None, workers: int = 1,
                label: str = "time-visits") -> TimeVisitReport:
    """Visits to the target at times 0..h for each horizon h."""
    d = env.d
    x0 = _origin(d, x0)
    target = _origin(d, target)
    horizons = np.sort(np.asarray(horizons, dtype=np.int64))
    keys = rng.stream_keys(seed, label, M)
    (counts, status), _ = run_keyed(
        env, lambda t, k: kernels.time_visits(t, x0, target, k, horizons), keys, workers)
    return TimeVisitReport(horizons, counts, status)


def srw_return_partial_sums(horizons) -> np.ndarray:
    """Exact E[visits to o at times 0..n] for the simple walk on Z^2.

    p_{2k}(o, o) = (C(2k, k) / 4^k)^2, accumulated by the ratio recursion.
    """
    horizons = np.asarray(horizons, dtype=np.int64)
    kmax = int(horizons.max()) // 2
    k = np.arange(1, kmax + 1, dtype=float)
    a = np.concatenate([[1.0], np.cumprod((2 * k - 1) / (2 * k))])
    cum = np.cumsum(a * a)
    return cum[horizons // 2]


# -- CLT ------------------------------------------------------------------------------

@dataclass
class CltReport:
    n: int
    M: int
    cov: np.ndarray
    cov_se: np.ndarray
    mean: np.ndarray
    mean_se: np.ndarray
    ks_stat: np.ndarray
    ks_pvalue: np.ndarray

    @property
    def half_widths(self) -> np.ndarray:
        """95% half-widths of the diagonal entries."""
        return 1.96 * np.diag(self.cov_se)

    def to_dict(self) -> dict:
        return {"n": self.n, "M": self.M, "cov": self.cov.tolist(), "cov_se": self.cov_se.tolist(),
                "mean": self.mean.tolist(), "mean_se": self.mean_se.tolist(),
                "half_widths": self.half_widths.tolist(), "ks_stat": self.ks_stat.tolist(),
                "ks_pvalue": self.ks_pvalue.tolist()}


def clt_covariance(env, n: int, M: int, seed: int, x0=None, workers: int = 1,
                   label: str = "clt") -> CltReport:
    """Covariance of (X_n - x0)/sqrt(n) over M quenched samples, with KS statistics."""
    d = env.d
    x0 = _origin(d, x0)
    pos = endpoints(env, x0, n, M, seed, f"{label}-{n}", workers)
    y = (pos - x0) / math.sqrt(n)
    mean = y.mean(axis=0)
    yc = y - mean
    cov = yc.T @ yc / (M - 1)
    prod = yc[:, :, None] * yc[:, None, :]
    cov_se = prod.std(axis=0, ddof=1) / math.sqrt(M)
    # a uniform jitter of one lattice cell removes the atoms before the KS test
    jkeys = rng.stream_keys(seed, f"{label}-{n}-jitter", M)
    jit = np.stack([rng.uniforms(jkeys, i) for i in range(d)], axis=1) - 0.5
    yj = (pos - x0 + jit) / math.sqrt(n)
    ks, pv = [], []
    for i in range(d):
        sd = math.sqrt(cov[i, i] + 1.0 / (12 * n)) if cov[i, i] > 0 else 1.0
        r = stats.kstest(yj[:, i], "norm", args=(0.0, sd))
        ks.append(r.statistic)
        pv.append(r.pvalue)
    return CltReport(int(n), int(M), cov, cov_se, mean, y.std(axis=0, ddof=1) / math.sqrt(M),
                     np.array(ks), np.array(pv))


def covariances_agree(a: CltReport, b: CltReport, k: float = 3.0) -> bool:
    """Diagonals agree within k joint standard errors."""
    da, db = np.diag(a.cov), np.diag(b.cov)
    sa, sb = np.diag(a.cov_se), np.diag(b.cov_se)
    return bool(np.all(np.abs(da - db) <= k * np.sqrt(sa ** 2 + sb ** 2)))
