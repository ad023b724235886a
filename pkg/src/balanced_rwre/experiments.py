"""Experiment configs, runners, manifests and replay.

A config is a nested mapping (YAML on disk) with a ``kind`` key.  Missing
keys take the defaults below; unknown keys are rejected with their path.
``workers`` only affects scheduling and is kept out of every output file,
so a run replayed with another worker count must reproduce every digest.
"""
from __future__ import annotations

import contextlib
import copy
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import __version__
from . import instances as inst
from . import percolation, rng, stationary, walk
from .elliptic import Calibration
from .env import EnvSpec, generate, load_env, save_env, validate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXECUTION_KEYS = ("workers",)


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending field path."""


class ReplayError(RuntimeError):
    pass


def _env(variant="uniform-srw", d=2, params=None, **extra):
    return {"variant": variant, "d": d, "params": params or {}, **extra}


DEFAULTS = {
    "gen-env": {"env": _env(seed=0, radius=8), "format": "csv"},
    "stationary": {"env": _env(seed=0, radius=4), "env_file": None, "N": 4, "p": 6.0, "tol": 1e-10},
    "phi": {"env": _env("iid-elliptic", params={"tail": 4.0}), "env_seeds": list(range(10)),
            "N": [4, 8, 16], "p": 6.0, "eps0": None, "alpha": 0.05},
    "mp": {"env": _env("iid-elliptic"), "instances": 200, "max_radius": 12, "c_hat": None,
           "factor": 1.5},
    "mvi": {"env": _env("iid-elliptic"), "instances": 100, "R": 16.0, "sigma": 0.5, "p": 2.0,
            "c_hat": None, "factor": 1.5},
    "cutoff": {"corpora": [
        {"kind": "nn", "env": _env(), "eps0": None, "instances": 50, "R": 12.0, "beta": 4.0},
        {"kind": "coarse", "env": _env("iid-max-jump", params={"p_bad": 0.1}), "eps0": 0.1,
         "instances": 20, "R": 12.0, "beta": 4.0},
    ]},
    "perc": {"env": _env("iid-max-jump", params={"p_bad": 0.1}), "eps0": 0.1,
             "n_grid": [0, 1, 2, 4, 6, 8, 10, 12, 14, 16], "M": 100000, "export_radius": None},
    "mp2": {"corpora": [
        {"env": _env("iid-max-jump", 2, {"p_bad": 0.1}), "eps0": 0.1, "instances": 100,
         "max_radius": 12},
        {"env": _env("iid-max-jump", 3, {"p_bad": 0.1}), "eps0": 0.08, "instances": 100,
         "max_radius": 12},
    ]},
    "mvi2": {"env": _env("iid-max-jump", 3, {"p_bad": 0.1}), "eps0": 0.08, "instances": 50,
             "R": 16.0, "sigma": 0.5, "p": 1.0, "c_hat": None, "factor": 1.5},
    "clt": {"env": _env(), "env_seeds": [0], "horizons": [10000], "M": 10000},
    "transience": {"env": _env(d=3), "eps0": 0.1, "K": 4.0, "i_max": 3, "M": 10000, "n_env": 1,
                   "cap": walk.STEP_CAP},
    "recurrence": {"env": _env(), "horizons": [10000, 1000000], "M": 2000, "rtol": 0.15},
    "exit": {"env": _env("iid-elliptic"), "env_seeds": [0], "radii": [1, 2, 4, 8], "M": 10000},
    "lemma-e": {"env": _env(), "env_seeds": list(range(10)), "N": [8, 16], "M": 10000},
}
COMMON = {"kind": None, "seed": 0, "workers": 1}


# -- config handling -----------------------------------------------------------------

def parse_value(text: str):
    """``--set`` values are YAML scalars or flow collections."""
    return yaml.safe_load(text)


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
            continue
        if k not in node or node[k] is None:
            node[k] = {}
        node = node[k]
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _merge(default, given, path):
    if given is None:
        return copy.deepcopy(default)
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: expected a mapping")
        if path.endswith("params"):
            return {**default, **given}
        if path.endswith("env") and given.get("variant", default.get("variant")) != default.get("variant"):
            default = {**default, "params": {}}  # parameters belong to the default variant
        unknown = set(given) - set(default)
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
        return {k: _merge(v, given.get(k), f"{path}.{k}") for k, v in default.items()}
    if isinstance(default, list) and default and isinstance(default[0], dict):
        if not isinstance(given, list):
            raise ConfigError(f"{path}: expected a list")
        return [_merge(default[min(i, len(default) - 1)], g, f"{path}.{i}") for i, g in enumerate(given)]
    return given


def resolve_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys and check the obvious types."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a mapping")
    kind = raw.get("kind")
    if kind not in DEFAULTS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r} (one of {', '.join(DEFAULTS)})")
    default = {**COMMON, **DEFAULTS[kind], "kind": kind}
    unknown = set(raw) - set(default)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key for kind {kind}")
    cfg = {k: _merge(v, raw.get(k), k) for k, v in default.items()}
    for k in ("seed", "workers"):
        if not isinstance(cfg[k], int) or cfg[k] < (1 if k == "workers" else 0):
            raise ConfigError(f"{k}: expected a {'positive' if k == 'workers' else 'nonnegative'} integer")
    for path, env in _env_blocks(cfg):
        try:
            spec_of(env)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return cfg


def _env_blocks(cfg):
    if "env" in cfg:
        yield "env", cfg["env"]
    for i, c in enumerate(cfg.get("corpora", [])):
        yield f"corpora.{i}.env", c["env"]


def spec_of(env_cfg: dict) -> EnvSpec:
    return EnvSpec(env_cfg["variant"], int(env_cfg["d"]), dict(env_cfg.get("params") or {}))


def load_config(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def echo_config(cfg: dict) -> dict:
    """The config as it appears in outputs (execution-only keys dropped)."""
    return {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS}


# -- output helpers -----------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else ("nan" if math.isnan(f) else ("inf" if f > 0 else "-inf"))
    return obj


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return str(v.item() if not isinstance(v, np.bool_) else int(v))
    if isinstance(v, bool):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_hash() -> str:
    """Digest of the package sources (identifies the build in manifests)."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class RunContext:
    def __init__(self, out_dir, cfg):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.outputs: list[str] = []
        self.timings: dict = {}
        self.checks: dict = {}
        self.inputs: dict = {}

    @property
    def workers(self) -> int:
        return self.cfg["workers"]

    @contextlib.contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t, 6)

    def path(self, name) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def write_csv(self, name, rows, fields=None):
        rows = list(rows)
        fields = fields or (list(rows[0]) if rows else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f)) for f in fields])
        self.path(name).write_text(buf.getvalue())

    def write_json(self, name, obj):
        body = {"schema_version": SCHEMA_VERSION, **_clean(obj)}
        self.path(name).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def summary(self, results: dict):
        self.write_json("summary.json", {"config": echo_config(self.cfg), "checks": self.checks,
                                         "results": results})


def pmap(fn, items, workers: int):
    """Ordered map; threads when workers > 1."""
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _env_from(cfg, ctx=None, seed=None, radius=None):
    if cfg.get("env_file"):
        p = Path(cfg["env_file"])
        if ctx is not None:
            ctx.inputs[str(p)] = sha256_file(p)
        return load_env(p)
    e = cfg["env"]
    return generate(spec_of(e), e.get("seed", 0) if seed is None else seed,
                    e.get("radius", 1) if radius is None else radius)


# -- runners -------------------------------------------------------------------------------

def run_gen_env(cfg, ctx):
    env = _env_from(cfg)
    rep = validate(env)
    fmt = cfg["format"]
    if fmt not in ("csv", "bin"):
        raise ConfigError("format: expected csv or bin")
    name = f"env.{fmt}"
    save_env(env, ctx.path(name))
    ctx.checks["valid"] = rep.ok
    ctx.summary({"n_sites": rep.n_sites, "violations": len(rep.violations),
                 "min_epsilon": rep.min_epsilon, "xi_hat": rep.xi_hat, "file": name})


def run_stationary(cfg, ctx):
    env = _env_from(cfg, ctx, radius=max(cfg["env"].get("radius", 1), cfg["N"]))
    tenv = stationary.periodize(env, cfg["N"])
    with ctx.stage("solve"):
        phi = stationary.solve_phi(tenv, cfg["tol"])
    phi.to_csv(ctx.path("phi.csv"))
    diag = stationary.phi_bound_diagnostics(tenv, phi, cfg["p"]).to_dict()
    ctx.checks["residual"] = phi.residual <= cfg["tol"]
    ctx.checks["nonnegative"] = bool(phi.values.min() >= 0)
    ctx.write_json("diagnostics.json", diag)
    ctx.summary({**diag, "method": phi.method, "iterations": phi.iterations,
                 "mean": float(phi.values.mean())})


def run_phi(cfg, ctx):
    spec = spec_of(cfg["env"])
    Ns = sorted(cfg["N"])

    def one(job):
        s, N = job
        env = generate(spec, s, 2 * N + 1 if cfg["eps0"] is not None else N)
        tenv = stationary.periodize(env, N)
        phi = stationary.solve_phi(tenv)
        d = stationary.phi_bound_diagnostics(tenv, phi, cfg["p"])
        row = {"env_seed": s, "N": N, "phi_eps_beta": d.phi_eps_beta, "phi_alpha": d.phi_alpha,
               "inv_eps_p": d.inv_eps_p, "residual": d.residual, "phicontrol_violations": None,
               "phicontrol_checked": None}
        if cfg["eps0"] is not None:
            cm = percolation.build_cluster_map(env, cfg["eps0"], 2 * N + 1)
            r = stationary.phicontrol_check(tenv, phi, cm)
            row["phicontrol_violations"] = len(r.violations)
            row["phicontrol_checked"] = r.checked
        return row

    with ctx.stage("solve"):
        rows = pmap(one, [(s, N) for s in cfg["env_seeds"] for N in Ns], ctx.workers)
    ctx.write_csv("norms.csv", rows)
    x = [r["N"] for r in rows]
    y = [r["phi_eps_beta"] for r in rows]
    res = {}
    if len(set(x)) > 1:
        rho, pv = stats.spearmanr(x, y)
        res.update(spearman_rho=float(rho), spearman_p=float(pv))
        ctx.checks["no_increasing_trend"] = not (rho > 0 and pv < cfg["alpha"])
    base = max(r["phi_eps_beta"] for r in rows if r["N"] == Ns[0])
    res.update(baseline_max=base, max=max(y))
    ctx.checks["bounded"] = max(y) <= 2 * base
    if cfg["eps0"] is not None:
        res["phicontrol_violations"] = sum(r["phicontrol_violations"] for r in rows)
        ctx.checks["phicontrol"] = res["phicontrol_violations"] == 0
    ctx.summary(res)


def _calibrated(ctx, ratios, c_hat, factor):
    finite = [r for r in ratios if r is not None]
    res = {"max_ratio": max(finite) if finite else None, "n_ratios": len(finite)}
    if c_hat is not None:
        cal = Calibration(float(c_hat), factor)
        exc = cal.exceedances(ratios)
        res.update(c_hat=cal.c_hat, bound=cal.bound, exceedances=exc)
        ctx.checks["calibrated_bound"] = not exc
    elif finite:
        res["c_hat"] = Calibration.from_ratios(finite, factor).c_hat
    return res


def run_mp(cfg, ctx):
    spec = spec_of(cfg["env"])
    with ctx.stage("instances"):
        recs = pmap(lambda i: {"instance": i, **inst.mp_instance(spec, ctx.cfg["seed"], i, cfg["max_radius"])},
                    range(cfg["instances"]), ctx.workers)
    _write_records(ctx, recs, ["instance", "radius", "lhs", "rhs_core", "ratio", "contact_size"])
    nv = sum(len(r["violations"]) for r in recs)
    ctx.checks["hypothesis"] = nv == 0
    ctx.summary({"violations": nv, **_calibrated(ctx, [r["ratio"] for r in recs], cfg["c_hat"], cfg["factor"])})


def run_mvi(cfg, ctx):
    spec = spec_of(cfg["env"])
    with ctx.stage("instances"):
        recs = pmap(lambda i: {"instance": i, **inst.mvi_instance(spec, ctx.cfg["seed"], i, cfg["R"],
                                                                   cfg["sigma"], cfg["p"])},
                    range(cfg["instances"]), ctx.workers)
    _write_records(ctx, recs, ["instance", "R", "sigma", "p", "numerator", "denominator", "ratio"])
    ctx.summary(_calibrated(ctx, [r["ratio"] for r in recs], cfg["c_hat"], cfg["factor"]))


def _write_records(ctx, recs, fields):
    rows = [{**{f: r.get(f) for f in fields}, "violations": len(r.get("violations", []))} for r in recs]
    ctx.write_csv("instances.csv", rows, fields + ["violations"])
    ctx.write_json("records.json", {"records": recs})


def run_cutoff(cfg, ctx):
    recs = []
    for ci, c in enumerate(cfg["corpora"]):
        spec = spec_of(c["env"])
        with ctx.stage(f"corpus{ci}"):
            recs += pmap(lambda i: {"corpus": ci, "instance": i,
                                    **inst.cutoff_instance(c["kind"], spec, ctx.cfg["seed"], i, c["R"],
                                                           c["beta"], c["eps0"])},
                         range(c["instances"]), ctx.workers)
    _write_records(ctx, recs, ["corpus", "instance", "kind", "R", "beta", "max_reach",
                               "contact_size", "min_margin"])
    nv = sum(len(r["violations"]) for r in recs)
    ctx.checks["zero_violations"] = nv == 0
    ctx.summary({"instances": len(recs), "violations": nv,
                 "min_margin": min(r["min_margin"] for r in recs) if recs else None})


def run_perc(cfg, ctx):
    spec = spec_of(cfg["env"])
    with ctx.stage("connectivity"):
        st = percolation.connectivity_stats(spec, cfg["eps0"], cfg["n_grid"], cfg["M"], ctx.cfg["seed"])
    percolation.write_connectivity_csv(st, ctx.path("connectivity.csv"))
    if st.phi_hat is not None:
        ctx.checks["phi_positive"] = st.phi_ci[0] > 0
    ctx.checks["sub1"] = st.sub1_ok
    if cfg["export_radius"]:
        env = generate(spec, rng.derive_key(ctx.cfg["seed"], "perc-export"), cfg["export_radius"])
        percolation.build_cluster_map(env, cfg["eps0"]).to_csv(ctx.path("clusters.csv"))
    ctx.summary(st.summary())


def run_mp2(cfg, ctx):
    recs = []
    for ci, c in enumerate(cfg["corpora"]):
        spec = spec_of(c["env"])
        with ctx.stage(f"corpus{ci}"):
            recs += pmap(lambda i: {"corpus": ci, "instance": i,
                                    **inst.mp2_instance(spec, c["eps0"], ctx.cfg["seed"] + 1000 * ci, i,
                                                        c["max_radius"])},
                         range(c["instances"]), ctx.workers)
    _write_records(ctx, recs, ["corpus", "instance", "d", "radius", "n_open", "max_l", "lhs", "rhs",
                               "max_boundary", "diam", "contact_size", "pass"])
    fails = [(r["corpus"], r["instance"]) for r in recs if not r["violations"] and not r["pass"]]
    excluded = sum(1 for r in recs if r["violations"])
    ctx.checks["zero_failures"] = not fails
    ctx.summary({"instances": len(recs), "failures": fails, "excluded": excluded})


def run_mvi2(cfg, ctx):
    spec = spec_of(cfg["env"])
    with ctx.stage("instances"):
        recs = pmap(lambda i: {"instance": i, **inst.mvi2_instance(spec, cfg["eps0"], ctx.cfg["seed"], i,
                                                                    cfg["R"], cfg["sigma"], cfg["p"])},
                    range(cfg["instances"]), ctx.workers)
    _write_records(ctx, recs, ["instance", "R", "sigma", "p", "numerator", "denominator", "ratio"])
    ctx.summary(_calibrated(ctx, [r["ratio"] for r in recs], cfg["c_hat"], cfg["factor"]))


def run_clt(cfg, ctx):
    rows, reps = [], {}
    for s in cfg["env_seeds"]:
        env = _env_from(cfg, seed=s, radius=cfg["env"].get("radius", 8))
        for n in sorted(cfg["horizons"]):
            with ctx.stage(f"seed{s}-n{n}"):
                rep = walk.clt_covariance(env, n, cfg["M"], ctx.cfg["seed"], workers=ctx.workers)
            reps[(s, n)] = rep
            d = env.d
            for i in range(d):
                for j in range(i, d):
                    rows.append({"env_seed": s, "n": n, "i": i + 1, "j": j + 1, "cov": rep.cov[i, j],
                                 "se": rep.cov_se[i, j],
                                 "ks_stat": rep.ks_stat[i] if i == j else None,
                                 "ks_pvalue": rep.ks_pvalue[i] if i == j else None})
    ctx.write_csv("clt.csv", rows)
    res = {"reports": [{"env_seed": s, **r.to_dict()} for (s, _), r in reps.items()]}
    if len(cfg["env_seeds"]) > 1:
        agree = all(walk.covariances_agree(reps[(cfg["env_seeds"][0], n)], reps[(s, n)])
                    for s in cfg["env_seeds"][1:] for n in cfg["horizons"])
        ctx.checks["seeds_agree"] = agree
    ctx.summary(res)


def run_transience(cfg, ctx):
    spec = spec_of(cfg["env"])
    with ctx.stage("walks"):
        rep = percolation.transience_iid_experiment(spec, cfg["eps0"], cfg["K"], cfg["i_max"], cfg["M"],
                                                    ctx.cfg["seed"], cfg["n_env"], cfg["cap"], ctx.workers)
    ctx.write_csv("annuli.csv", rep.rows())
    ctx.checks["no_truncation"] = rep.n_flagged == 0
    if spec.d >= 3 and rep.i_max >= 2:
        p = rep.visit_prob[1:]
        ctx.checks["decreasing"] = bool(np.all(np.diff(p) < 0))
    ctx.summary({**rep.summary(), "visit_prob": rep.visit_prob, "cumulative": rep.cumulative})


def run_recurrence(cfg, ctx):
    env = _env_from(cfg, seed=cfg["env"].get("seed", 0), radius=cfg["env"].get("radius", 8))
    hz = sorted(cfg["horizons"])
    with ctx.stage("walks"):
        rep = walk.time_visits(env, hz, cfg["M"], ctx.cfg["seed"], workers=ctx.workers)
    exact = walk.srw_return_partial_sums(hz) if env.homogeneous and env.d == 2 and \
        cfg["env"]["variant"] == "uniform-srw" else None
    rows = [{"horizon": h, "mean_visits": rep.mean[k], "se": rep.se[k],
             "exact": exact[k] if exact is not None else None} for k, h in enumerate(hz)]
    ctx.write_csv("visits.csv", rows)
    res = {"increments": []}
    for a in range(len(hz) - 1):
        m, se = rep.increment(a, a + 1)
        item = {"from": hz[a], "to": hz[a + 1], "mean": m, "se": se,
                "log_growth": math.log(hz[a + 1] / hz[a]) / math.pi}
        if exact is not None:
            item["exact"] = float(exact[a + 1] - exact[a])
            item["rel_err"] = abs(m - item["exact"]) / item["exact"]
        res["increments"].append(item)
    if exact is not None:
        ctx.checks["matches_exact"] = all(i["rel_err"] <= cfg["rtol"] for i in res["increments"])
    ctx.summary(res)


def run_exit(cfg, ctx):
    rows = []
    for s in cfg["env_seeds"]:
        env = _env_from(cfg, seed=s, radius=int(max(cfg["radii"])) + 2)
        for r in cfg["radii"]:
            et = walk.exit_time_samples(env, None, r, cfg["M"], ctx.cfg["seed"], workers=ctx.workers)
            rows.append({"env_seed": s, **et.to_dict(),
                         "ok": et.mean <= (r + 1) ** 2 + 3 * et.se})
    ctx.write_csv("exit.csv", rows, ["env_seed", "r", "norm", "M", "mean", "se", "bound", "capped", "ok"])
    ctx.checks["lemma_tau"] = all(r["ok"] for r in rows)
    ctx.summary({"rows": len(rows)})


def run_lemma_e(cfg, ctx):
    rows = []
    for s in cfg["env_seeds"]:
        for N in cfg["N"]:
            env = _env_from(cfg, seed=s, radius=N)
            res = walk.lemma_E_check(stationary.periodize(env, N), N, cfg["M"], ctx.cfg["seed"],
                                     workers=ctx.workers)
            rows.append({"env_seed": s, **res.to_dict()})
    ctx.write_csv("lemma_e.csv", rows, ["env_seed", "N", "d", "c", "factor", "M", "estimate", "se",
                                        "bound", "excluded", "ok", "capped"])
    ctx.checks["lemma_e"] = all(r["ok"] for r in rows if not r["excluded"])
    ctx.summary({"rows": len(rows), "excluded": sum(r["excluded"] for r in rows)})


RUNNERS = {
    "gen-env": run_gen_env, "stationary": run_stationary, "phi": run_phi, "mp": run_mp,
    "mvi": run_mvi, "cutoff": run_cutoff, "perc": run_perc, "mp2": run_mp2, "mvi2": run_mvi2,
    "clt": run_clt, "transience": run_transience, "recurrence": run_recurrence,
    "exit": run_exit, "lemma-e": run_lemma_e,
}


# -- run / replay -------------------------------------------------------------------------

def run(config: dict, out_dir) -> dict:
    """Resolve, execute and write outputs plus ``manifest.json``; returns the manifest."""
    cfg = resolve_config(config)
    ctx = RunContext(out_dir, cfg)
    started = dt.datetime.now(dt.timezone.utc)
    t0 = time.perf_counter()
    with ctx.stage("total"):
        RUNNERS[cfg["kind"]](cfg, ctx)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package": "balanced_rwre",
        "version": __version__,
        "build": build_hash(),
        "config": cfg,
        "inputs": ctx.inputs,
        "started": started.isoformat(),
        "wall_seconds": round(time.perf_counter() - t0, 6),
        "timings": ctx.timings,
        "checks": _clean(ctx.checks),
        "status": "pass" if all(ctx.checks.values()) else "fail",
        "outputs": [{"path": name, "sha256": sha256_file(ctx.out / name),
                     "bytes": (ctx.out / name).stat().st_size} for name in ctx.outputs],
    }
    (ctx.out / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text())


def replay(manifest_path, out_dir, overrides: dict | None = None) -> dict:
    """Re-execute a recorded run and compare output digests.

    Returns ``{"identical", "divergences", "config_changes", "build_changed", "manifest"}``;
    each divergence names the file with expected and actual digests.
    """
    old = read_manifest(manifest_path)
    if old.get("schema_version") != SCHEMA_VERSION or old.get("version") != __version__:
        raise ReplayError(f"manifest from schema {old.get('schema_version')} / version "
                          f"{old.get('version')}; this build is schema {SCHEMA_VERSION} / {__version__}")
    cfg = copy.deepcopy(old["config"])
    for k, v in (overrides or {}).items():
        apply_override(cfg, k, v)
    new = run(cfg, out_dir)
    changes = _diff_config(old["config"], new["config"])
    before = {o["path"]: o["sha256"] for o in old["outputs"]}
    after = {o["path"]: o["sha256"] for o in new["outputs"]}
    div = []
    for p in sorted(set(before) | set(after)):
        if before.get(p) != after.get(p):
            div.append({"path": p, "expected": before.get(p), "actual": after.get(p)})
    return {"identical": not div, "divergences": div, "config_changes": changes,
            "build_changed": old.get("build") != new["build"], "manifest": new}


def _diff_config(a, b, path=""):
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            out += _diff_config(a.get(k), b.get(k), f"{path}.{k}" if path else k)
    elif a != b:
        out.append({"field": path, "old": a, "new": b})
    return out
