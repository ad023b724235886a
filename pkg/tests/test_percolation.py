import itertools

import numpy as np
import pytest

from balanced_rwre import percolation as pc
from balanced_rwre import rng
from balanced_rwre.elliptic import JumpOperator, operator_dirichlet_solve
from balanced_rwre.env import EnvSpec, Environment, generate
from balanced_rwre.instances import mp2_instance
from balanced_rwre.lattice import GridFunction, LatticeDomain, box_sites

from .oracles import bfs_components, kappa_paths_brute, same_partition


def single_open_env(radius=4, d=2, weights=(0.45, 0.05)):
    side = 2 * radius + 1
    axis = np.full((side,) * d + (d,), 1.0 / (2 * d))
    axis[(radius,) * d] = weights
    return Environment.from_arrays(np.zeros((side,) * d), axis)


def brute_l(sites, d):
    dom = LatticeDomain(sites)
    return max(int(np.abs(x - y).sum()) for x in dom.sites for y in dom.boundary)


def test_no_open_sites():
    cm = pc.build_cluster_map(generate(EnvSpec.uniform(2), 0, 5), 0.1)
    assert cm.n_clusters == 0
    assert np.all(cm.l_at(cm.sites) == 0)


def test_single_open_site():
    env = single_open_env()
    cm = pc.build_cluster_map(env, 0.1)
    assert cm.n_clusters == 1
    k = int(cm.labels_at(np.zeros((1, 2), np.int64))[0])
    assert cm.cluster_sites(k).tolist() == [[0, 0]]
    assert len(cm.cluster_boundary(k)) == 8
    assert cm.cluster_l[k] == 2 and not cm.cluster_censored[k]
    with pytest.raises(KeyError):
        cm.labels_at(np.array([[9, 0]]))


@pytest.mark.parametrize("d,radius,p", [(2, 12, 0.4), (3, 5, 0.25)])
def test_labels_geometry_against_brute_force(d, radius, p):
    spec = EnvSpec.iid_max_jump(d, p_bad=p)
    for s in range(3):
        env = generate(spec, s, radius)
        cm = pc.build_cluster_map(env, 0.1)
        ref = bfs_components(cm.open.reshape(-1), cm.sites)
        assert same_partition(cm.labels, ref)
        for k in range(cm.n_clusters):
            sites = cm.cluster_sites(k)
            assert cm.cluster_size[k] == len(sites)
            touches = bool((np.abs(sites) == radius).any())
            assert cm.cluster_censored[k] == touches
            if len(sites) <= 30:
                assert cm.cluster_l[k] == brute_l(sites, d)
            # nearest neighbours outside the cluster are closed (diagonal ones need not be)
            own = {tuple(s) for s in sites.tolist()}
            nbrs = {tuple(s + e) for s in sites for e in np.vstack([np.eye(d, dtype=int),
                                                                   -np.eye(d, dtype=int)])}
            nb = np.array([z for z in nbrs - own if max(map(abs, z)) <= radius]).reshape(-1, d)
            assert not cm.is_open(nb).any()
            bd = {tuple(b) for b in cm.cluster_boundary(k).tolist()}
            assert {z for z in nbrs - own} <= bd


def test_cluster_csv(tmp_path):
    env = generate(EnvSpec.iid_max_jump(2, p_bad=0.3), 1, 4)
    cm = pc.build_cluster_map(env, 0.1)
    cm.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,open,cluster,l,censored"
    assert len(lines) == 82


# -- kappa paths ---------------------------------------------------------------------

def check_kappa(env, cm, x, xi0):
    ks = pc.build_kappa(env, cm, x, xi0)
    k = int(cm.labels_at(np.array([x]))[0])
    closure = cm.cluster_closure(k)
    bd = {tuple(b) for b in cm.cluster_boundary(k).tolist()}
    cl = {tuple(c) for c in closure.tolist()}
    l = int(cm.cluster_l[k])

    def admissible(z, i):
        return env.kernel(z).axis[i] >= xi0

    for kappa in pc.sign_vectors(env.d):
        kt = tuple(int(c) for c in kappa)
        path = ks.paths[kt]
        steps = np.diff(path, axis=0)
        assert np.all(np.abs(steps).sum(axis=1) == 1)
        assert np.all(steps @ kappa == 1)
        for z, st in zip(path[:-1], steps):
            i = int(np.nonzero(st)[0][0])
            assert admissible(tuple(z), i)
        assert len(path) - 1 <= l
        assert ks.terminals[kt] in bd
        assert all(tuple(z) in cl for z in path.tolist())
        reach = kappa_paths_brute(admissible, cl, bd, x, kt)
        far = max(reach.values())
        assert len(path) - 1 == far
        assert ks.terminals[kt] == min(y for y, n in reach.items() if n == far)
    assert {tuple(z) for z in ks.lam.tolist()} <= cl
    return ks


def test_kappa_closed_and_singleton():
    env = single_open_env()
    cm = pc.build_cluster_map(env, 0.1)
    ks = pc.build_kappa(env, cm, (1, 1))
    assert not ks.open and ks.lam.tolist() == [[1, 1]]
    ks = check_kappa(env, cm, (0, 0), 0.25)
    nbhd = {(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)}
    assert {tuple(z) for z in ks.lam.tolist()} <= nbhd
    assert all(1 <= n <= 2 for n in ks.path_lengths().values())


@pytest.mark.parametrize("d", [2, 3])
def test_kappa_against_enumeration(d):
    spec = EnvSpec.iid_max_jump(d, p_bad=0.35 if d == 2 else 0.2)
    xi0 = 1 / (2 * d)
    done = 0
    for s in range(40):
        env = generate(spec, s, 8)
        cm = pc.build_cluster_map(env, 0.1)
        for k in range(cm.n_clusters):
            if cm.cluster_censored[k] or not 2 <= cm.cluster_size[k] <= 20:
                continue
            for x in cm.cluster_sites(k)[:3]:
                check_kappa(env, cm, tuple(int(c) for c in x), xi0)
            done += 1
            break
        if done >= 8:
            break
    assert done >= 8


# -- coarse kernel -------------------------------------------------------------------

def test_coarse_closed_site_is_one_step():
    env = generate(EnvSpec.iid_max_jump(2, p_bad=0.2), 3, 8)
    cm = pc.build_cluster_map(env, 0.1)
    x = next(tuple(s) for s in cm.sites if not cm.is_open(s[None])[0])
    op = pc.build_coarse_kernel(env, pc.build_kappa(env, cm, x))
    k = env.kernel(x)
    got = dict(zip(map(tuple, (op.targets - np.array(x)).tolist()), op.weights))
    for i in range(2):
        e = tuple(int(j == i) for j in range(2))
        assert got[e] == pytest.approx(k.axis[i]) and got[tuple(-c for c in e)] == pytest.approx(k.axis[i])


def test_coarse_singleton_against_dense_solve():
    env = single_open_env()
    cm = pc.build_cluster_map(env, 0.1)
    ks = pc.build_kappa(env, cm, (0, 0))
    op = pc.build_coarse_kernel(env, ks)
    assert op.balance_error() < 1e-12 and op.stochasticity_error() < 1e-12
    # dense absorbing-chain oracle on Lambda_x
    lam = [tuple(z) for z in ks.lam.tolist()]
    idx = {z: i for i, z in enumerate(lam)}
    n = len(lam)
    Q = np.zeros((n, n))
    exits = {}
    for z in lam:
        kz = env.kernel(z)
        for i in range(2):
            for sg in (1, -1):
                y = list(z)
                y[i] += sg
                y = tuple(y)
                if y in idx:
                    Q[idx[z], idx[y]] += kz.axis[i]
                else:
                    exits.setdefault(y, np.zeros(n))[idx[z]] += kz.axis[i]
    G = np.linalg.inv(np.eye(n) - Q)
    want = {y: float(G[idx[(0, 0)]] @ v) for y, v in exits.items()}
    got = dict(zip(map(tuple, op.targets.tolist()), op.weights))
    assert set(got) == {y for y, w in want.items() if w > 0}
    for y in got:
        assert got[y] == pytest.approx(want[y], abs=1e-12)


def test_coarse_operator_balanced_and_reach():
    spec = EnvSpec.iid_max_jump(3, p_bad=0.1)
    env = generate(spec, 2, 14)
    cm = pc.build_cluster_map(env, 0.08)
    op = pc.coarse_operator(env, cm, LatticeDomain.ball(4, 3).sites)
    assert op.balance_error() < 1e-10 and op.stochasticity_error() < 1e-10
    l = cm.l_at(op.sites)
    assert np.all(op.reach[l == 0] == 1)
    assert np.all(op.reach <= l + 2)


# -- connectivity ----------------------------------------------------------------------

def test_connectivity_no_open_sites():
    st = pc.connectivity_stats(EnvSpec.iid_max_jump(2, p_bad=0.0), 0.1, [0, 1, 2, 4], 2000)
    assert np.all(st.q_hat == 0) and st.phi_hat is None


def test_connectivity_q0_and_monotone():
    spec = EnvSpec.iid_max_jump(2, p_bad=0.3)
    st = pc.connectivity_stats(spec, 0.1, [0, 1, 2, 3, 4, 6], 20000, seed=2)
    assert st.q_hat[0] == pytest.approx(st.p_open)
    assert abs(st.p_open - 0.3) < 5 * np.sqrt(0.21 / 20000)
    assert np.all(np.diff(st.q_hat) <= 0)
    # o -> S_1 needs o open only
    assert st.q_hat[1] == st.q_hat[0]
    assert all(lo <= q <= hi for q, lo, hi in zip(st.q_hat, st.ci_low, st.ci_high))
    assert st.phi_hat > 0 and st.sub1_ok


def test_origin_cluster_samples_against_bfs():
    spec = EnvSpec.iid_max_jump(2, p_bad=0.45)
    keys = rng.stream_keys(0, "t", 30)
    R = 6
    opened, rad, spread, edge = pc.origin_cluster_samples(spec, 0.1, keys, R)
    box = box_sites(R, 2)
    origin = int(np.nonzero((box == 0).all(axis=1))[0][0])
    for j, k in enumerate(keys):
        _, axis = spec.sample(int(k), box)
        o = pc.open_mask(axis, 0.1)
        lab = bfs_components(o, box)
        assert opened[j] == o[origin]
        if not o[origin]:
            continue
        mem = box[lab == lab[origin]]
        assert rad[j] == np.abs(mem).max()
        assert edge[j] == (np.abs(mem).max() == R)
        l1 = max(int(np.abs(a - b).sum()) for a, b in itertools.product(mem, mem))
        assert spread[j] == l1


def test_connectivity_csv(tmp_path):
    st = pc.connectivity_stats(EnvSpec.iid_max_jump(2, p_bad=0.1), 0.1, [0, 1, 2], 500)
    pc.write_connectivity_csv(st, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "n,q_hat,ci_low,ci_high,hits,samples"


# -- explicit-constant checks ------------------------------------------------------------

def test_mp2_trivial_when_max_on_boundary():
    env = generate(EnvSpec.iid_max_jump(2, p_bad=0.2), 0, 12)
    cm = pc.build_cluster_map(env, 0.1)
    op = pc.coarse_operator(env, cm, LatticeDomain.box(3, 2).sites)
    u = operator_dirichlet_solve(op, 0.0, lambda s: (s ** 2).sum(axis=1).astype(float))
    res = pc.mp2_check(op, cm, u, 0.0)
    assert res.lhs <= res.max_boundary + 1e-12 and res.passed


def test_mp2_closed_only_corpus():
    spec = EnvSpec.iid_max_jump(2, p_bad=0.0)
    recs = [mp2_instance(spec, 0.1, 5, i, 8) for i in range(100)]
    assert all(r["max_l"] == 0 and r["n_open"] == 0 for r in recs)
    assert all(r["pass"] and not r["violations"] for r in recs)


def test_mvi2_weight_and_constant_u():
    np.testing.assert_allclose(pc.mvi2_weight(np.array([0, 1, 3]), 2), [1, 4, 9 * 64])
    env = generate(EnvSpec.iid_max_jump(2, p_bad=0.15), 4, 16)
    cm = pc.build_cluster_map(env, 0.1)
    R, p = 6.0, 1.5
    dom = LatticeDomain.ball(R, 2)
    op = pc.coarse_operator(env, cm, dom.sites)
    res = pc.mvi2_check(env, cm, R, 0.5, GridFunction.constant(op.boundary, 1.0), p, op=op)
    w = pc.mvi2_weight(cm.l_at(dom.sites), 2) ** (2 / p)
    den = (op.diam_closure / (0.1 * R)) ** (2 / p) * np.mean(w ** p) ** (1 / p)
    assert res.numerator == pytest.approx(1.0)
    assert res.denominator == pytest.approx(den)


def test_omega_and_transience_without_open_sites():
    spec = EnvSpec.iid_max_jump(3, p_bad=0.0)
    env = generate(spec, 0, 17)
    cm = pc.build_cluster_map(env, 0.1)
    assert pc.omega_indicator(cm, 4, 0) == (True, 0)
    assert pc.omega_indicator(cm, 4, 1) == (None, 0)  # ball of radius 64 not covered
    rep = pc.transience_iid_experiment(spec, 0.1, 4, 1, 300, n_env=2)
    assert rep.omega_freq[0] == 1.0
    assert rep.visit_prob[0] == 1.0
    assert len(rep.rows()) == 2


def test_sign_vectors_and_sphere():
    assert len(pc.sign_vectors(3)) == 8
    assert len(pc.sign_vectors(3, half=True)) == 4
    assert pc.sphere_size(0, 2) == 1
    assert pc.sphere_size(3, 2) == 7 ** 2 - 5 ** 2
