"""Randomized instance builders for the checker corpora.

Each builder is a pure function of its arguments: the environment seed and
the instance randomness both derive from ``(seed, label, index)``.
"""
from __future__ import annotations

import numpy as np

from . import rng
from .elliptic import (JumpOperator, cutoff_lemma_check, dirichlet_solve, mp_check, mvi_check,
                       operator_dirichlet_solve)
from .env import EnvSpec, generate
from .lattice import GridFunction, LatticeDomain, l2sq
from .percolation import (KappaError, build_cluster_map, coarse_operator, mp2_check, mvi2_check)

MARGIN = 6


def instance_rng(seed: int, label: str, index: int) -> np.random.Generator:
    return np.random.default_rng(rng.derive_key(seed, label, index))


def env_seed(seed: int, label: str, index: int) -> int:
    return rng.derive_key(seed, label, "env", index)


def random_boundary(gen: np.random.Generator, sites: np.ndarray, kind: str | None = None):
    """Boundary data of a few shapes: noise, affine, quadratic, a spike."""
    kind = kind or gen.choice(["noise", "affine", "quadratic", "spike"])
    d = sites.shape[1]
    if kind == "noise":
        return gen.normal(size=sites.shape[0])
    if kind == "affine":
        return sites @ gen.normal(size=d) + gen.normal()
    if kind == "quadratic":
        A = gen.normal(size=(d, d))
        return np.einsum("ni,ij,nj->n", sites, A + A.T, sites) / (1 + l2sq(sites).max())
    v = np.zeros(sites.shape[0])
    v[gen.integers(sites.shape[0])] = 1.0 + gen.exponential()
    return v


def sparse_forcing(gen, n: int, density: float = 0.2) -> np.ndarray:
    h = gen.exponential(size=n)
    return np.where(gen.random(n) < density, h, 0.0)


def _perturb(gen, values: np.ndarray, scale: float) -> np.ndarray:
    mask = gen.random(values.shape[0]) < 0.3
    return values + np.where(mask, gen.normal(scale=scale, size=values.shape[0]), 0.0)


def mp_instance(spec: EnvSpec, seed: int, index: int, max_radius: int = 12):
    """Forced Dirichlet solution on a random box; L u = -h so g = h."""
    gen = instance_rng(seed, "mp", index)
    r = int(gen.integers(1, max_radius + 1))
    env = generate(spec, env_seed(seed, "mp", index), r + 1)
    dom = LatticeDomain.box(r, spec.d)
    h = sparse_forcing(gen, len(dom))
    g = random_boundary(gen, dom.boundary)
    u = dirichlet_solve(env, dom, h, GridFunction(dom.boundary, g))
    res = mp_check(env, dom, u, h)
    return {"radius": r, **res.to_dict()}


def mvi_instance(spec: EnvSpec, seed: int, index: int, R: float = 16, sigma: float = 0.5,
                 p: float = 2.0):
    gen = instance_rng(seed, "mvi", index)
    env = generate(spec, env_seed(seed, "mvi", index), int(np.ceil(R)) + 2)
    dom = LatticeDomain.ball(R, spec.d)
    g = random_boundary(gen, dom.boundary)
    res = mvi_check(env, R, sigma, p, GridFunction(dom.boundary, g))
    return {"R": R, "sigma": sigma, "p": p, **res.to_dict()}


def coarse_setup(spec: EnvSpec, eps0: float, seed: int, label: str, index: int, sites):
    """Environment, cluster map and coarse operator on ``sites``.

    The cluster map box grows until no censored cluster meets the domain.
    """
    radius = int(np.abs(sites).max()) + MARGIN
    es = env_seed(seed, label, index)
    for _ in range(6):
        env = generate(spec, es, radius)
        cmap = build_cluster_map(env, eps0, radius)
        try:
            return env, cmap, coarse_operator(env, cmap, sites)
        except (KappaError, KeyError):
            radius *= 2
    raise RuntimeError("could not fit the clusters meeting the domain into the box")


def mp2_instance(spec: EnvSpec, eps0: float, seed: int, index: int, max_radius: int = 12):
    """Coarse Dirichlet solution plus perturbation; g = max(0, -L_a u)."""
    gen = instance_rng(seed, "mp2", index)
    r = int(gen.integers(1, max_radius + 1))
    dom = LatticeDomain.box(r, spec.d)
    env, cmap, op = coarse_setup(spec, eps0, seed, "mp2", index, dom.sites)
    h = sparse_forcing(gen, len(op))
    gb = random_boundary(gen, op.boundary)
    u = operator_dirichlet_solve(op, h, gb)
    n_e = len(op)
    vals = u.values.copy()
    vals[:n_e] = _perturb(gen, vals[:n_e], 0.1 * (1 + np.abs(vals).max()))
    u = GridFunction(op.closure, vals)
    g = np.maximum(0.0, -op.apply(u))
    res = mp2_check(op, cmap, u, g)
    return {"radius": r, "d": spec.d, "n_open": int(cmap.is_open(dom.sites).sum()),
            "max_l": int(cmap.l_at(dom.sites).max()), **res.to_dict()}


def mvi2_instance(spec: EnvSpec, eps0: float, seed: int, index: int, R: float = 16,
                  sigma: float = 0.5, p: float = 1.0):
    gen = instance_rng(seed, "mvi2", index)
    dom = LatticeDomain.ball(R, spec.d)
    env, cmap, op = coarse_setup(spec, eps0, seed, "mvi2", index, dom.sites)
    g = random_boundary(gen, op.boundary)
    res = mvi2_check(env, cmap, R, sigma, GridFunction(op.boundary, g), p, op=op)
    return {"R": R, "sigma": sigma, "p": p, **res.to_dict()}


def cutoff_instance(kind: str, spec: EnvSpec, seed: int, index: int, R: float = 12,
                    beta: float = 4.0, eps0: float | None = None):
    """Harmonic u with random boundary data; nearest-neighbour or coarse kernel."""
    gen = instance_rng(seed, f"cutoff-{kind}", index)
    dom = LatticeDomain.ball(R, spec.d)
    if kind == "nn":
        env = generate(spec, env_seed(seed, "cutoff-nn", index), int(np.ceil(R)) + 2)
        op = JumpOperator.from_env(env, dom.sites)
    else:
        _, _, op = coarse_setup(spec, eps0, seed, "cutoff-coarse", index, dom.sites)
    g = random_boundary(gen, op.boundary)
    if gen.random() < 0.5:
        g = np.abs(g) + gen.random()
    u = operator_dirichlet_solve(op, 0.0, g)
    res = cutoff_lemma_check(op, u, R, beta)
    return {"kind": kind, "R": R, "beta": beta, "max_reach": float(op.reach.max()),
            "contact_size": res.n_contact, "min_margin": res.min_margin,
            "violations": res.violations}
