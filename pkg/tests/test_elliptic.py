import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from balanced_rwre import elliptic as el
from balanced_rwre.env import EnvSpec, Environment, generate
from balanced_rwre.lattice import GridFunction, LatticeDomain, box_sites, l2sq


@pytest.fixture(scope="module")
def srw():
    return generate(EnvSpec.uniform(2), 0, 6)


@pytest.fixture(scope="module")
def rough():
    return generate(EnvSpec.iid_elliptic(2, tail=1.0, stay_max=0.3), 2, 8)


def test_apply_L_examples(srw, rough):
    x = box_sites(3, 2)
    lin = lambda s: s @ np.array([0.7, -2.0]) + 3.0
    assert np.abs(el.apply_L(rough, lin, x)).max() < 1e-12
    assert np.allclose(el.apply_L(srw, lambda s: l2sq(s).astype(float), x), 1.0)
    delta = lambda s: (np.abs(s).sum(axis=1) == 0).astype(float)
    assert el.apply_L(srw, delta, np.array([0, 0])) == pytest.approx(-1.0)


def test_jump_operator_from_env(rough):
    op = el.JumpOperator.from_env(rough, box_sites(3, 2))
    assert op.stochasticity_error() < 1e-12 and op.balance_error() < 1e-12
    assert np.all(op.reach == 1)
    assert len(op.boundary) == 4 * 7  # nearest-neighbour targets outside a 7x7 box
    f = np.random.default_rng(0).normal(size=len(op.closure))
    gf = GridFunction(op.closure, f)
    np.testing.assert_allclose(op.apply(gf), el.apply_L(rough, gf, op.sites), atol=1e-12)


def test_dirichlet_affine_and_single_site(rough, srw):
    dom = LatticeDomain.box(4, 2)
    aff = lambda s: s @ np.array([1.5, -0.5]) + 2.0
    f = el.dirichlet_solve(rough, dom, 0.0, aff)
    np.testing.assert_allclose(f.values, aff(f.sites), atol=1e-10)
    one = LatticeDomain(np.zeros((1, 2), np.int64))
    assert el.dirichlet_solve(srw, one, 1.0, 0.0).at((0, 0)) == pytest.approx(1.0)
    f = el.dirichlet_solve(srw, LatticeDomain.closed_ball(1, 2), 1.0, 0.0)
    assert f.at((0, 0)) == pytest.approx(8 / 3, abs=1e-12)


def test_dense_oracle_for_exit_time():
    # 5-site domain {|x| <= 1}: f(o) = 1 + f(e)(1), f(e) = 1 + f(o)/4
    A = np.array([[1.0, -1.0], [-0.25, 1.0]])
    fo, fe = np.linalg.solve(A, [1.0, 1.0])
    assert fo == pytest.approx(8 / 3)


def test_krylov_path_matches_lu():
    env = generate(EnvSpec.iid_elliptic(2, tail=1.0), 5, 30)
    dom = LatticeDomain.box(28, 2)
    assert len(dom) > el.KRYLOV_MIN
    op = el.JumpOperator.from_env(env, dom.sites)
    A_ee, A_eb = op.matrices()
    rhs = np.random.default_rng(1).random(len(op)) + A_eb @ np.random.default_rng(2).random(
        len(op.boundary))
    x = el._solve(A_ee, rhs)
    M = (sp.identity(len(op)) - A_ee).tocsc()
    ref = spla.splu(M).solve(rhs)
    np.testing.assert_allclose(x, ref, rtol=1e-9, atol=1e-9)


def test_exit_distribution_rows():
    env = generate(EnvSpec.iid_elliptic(3), 1, 4)
    op = el.JumpOperator.from_env(env, LatticeDomain.ball(2.5, 3).sites)
    H = el.exit_distribution(op)
    np.testing.assert_allclose(H.sum(axis=1), 1.0, atol=1e-12)
    # exit position has mean x (optional stopping)
    np.testing.assert_allclose(H @ op.boundary, op.sites, atol=1e-10)


def test_not_elliptic():
    env = Environment.constant(2, 3, 0.0, [0.5, 0.0])
    with pytest.raises(el.NotEllipticError):
        el.dirichlet_solve(env, LatticeDomain.box(1, 2), 0.0, 1.0)


# -- contact sets ------------------------------------------------------------------

def test_contact_concave_and_affine():
    E = box_sites(3, 2)
    cs = el.contact_set(lambda s: -l2sq(s).astype(float), E)
    assert cs.member.all() and cs.strict.all()
    cs = el.contact_set(lambda s: s @ np.array([2.0, -1.0]) + 1, E)
    assert cs.member.all() and cs.method == "affine"
    np.testing.assert_allclose(cs.witness, np.tile([2.0, -1.0], (len(E), 1)), atol=1e-12)


def test_contact_spike_is_single_point():
    E = box_sites(3, 2)
    x0 = np.array([1, -1])
    u = lambda s: np.all(s == x0, axis=1).astype(float)
    cs = el.contact_set(u, E)
    assert cs.members.tolist() == [[1, -1]]
    # LP feasibility oracle at every site
    Z = LatticeDomain(E).closure
    uz, ue = u(Z), u(E)
    for i, x in enumerate(E):
        _, t = el.lp_witness(x.astype(float), ue[i], Z.astype(float), uz)
        assert (t <= 1e-9) == cs.member[i]


@pytest.mark.parametrize("seed", range(4))
def test_contact_hull_matches_lp(seed):
    g = np.random.default_rng(seed)
    d = 2 + seed % 2
    E = box_sites(3 if d == 2 else 2, d)
    Z = LatticeDomain(E).closure
    vals = -0.3 * l2sq(Z) + g.normal(size=len(Z))
    u = GridFunction(Z, vals)
    a = el.contact_set(u, E, method="hull")
    b = el.contact_set(u, E, method="lp")
    np.testing.assert_array_equal(a.member, b.member)
    np.testing.assert_array_equal(a.strict, b.strict)
    # witnesses certify membership: the plane lies above u on the closure
    for i in np.nonzero(a.member)[0]:
        s = a.witness[i]
        lhs = vals[:len(E)][i] - s @ E[i]
        assert np.all(lhs >= vals - Z @ s - 1e-9)


# -- maximum principle -----------------------------------------------------------

def test_mp_single_site(srw):
    dom = LatticeDomain(np.zeros((1, 2), np.int64))
    u = GridFunction(dom.closure, np.r_[1.0, np.zeros(8)])
    res = el.mp_check(srw, dom, u, 1.0)
    assert res.lhs == 1 and dom.diam_closure == 2
    assert res.rhs_core == pytest.approx(2 * 1 * 4)
    assert res.ratio == pytest.approx(1 / 8)
    res = el.mp_check(srw, dom, u, 0.5)  # L u(o) = -1 < -g: hypothesis fails at the contact point
    assert res.violations and res.ratio is None


def test_mp_trivial_when_max_on_boundary(rough):
    dom = LatticeDomain.box(3, 2)
    u = el.dirichlet_solve(rough, dom, 0.0, lambda s: l2sq(s).astype(float))
    res = el.mp_check(rough, dom, u, 0.0)
    assert res.lhs <= 1e-12 and res.ok


def test_mvi_constant(srw):
    dom = LatticeDomain.ball(6, 2)
    res = el.mvi_check(srw, 6, 0.5, 2.0, GridFunction.constant(dom.boundary, 1.0))
    assert res.numerator == pytest.approx(1.0)
    assert res.denominator == pytest.approx(4.0)
    assert res.ratio == pytest.approx(0.25)
    with pytest.raises(ValueError):
        el.mvi_check(srw, 6, 1.5, 2.0, 1.0)


def test_calibration():
    cal = el.Calibration.from_ratios([0.1, None, 0.4, 0.2])
    assert cal.c_hat == 0.4 and cal.bound == pytest.approx(0.6)
    assert cal.exceedances([0.5, 0.7, None]) == [1]


# -- cutoff lemma -------------------------------------------------------------------

def test_cutoff_constant_and_profile():
    assert el.cutoff_constant(2) == 4 * 2 ** 10 + 32
    assert el.cutoff_constant(4) == 16 * 2 ** 18 + 32
    prof = el.CutoffProfile(4.0, 2.0)
    np.testing.assert_allclose(prof(np.array([[0, 0], [2, 0], [4, 0], [5, 5]])), [1, 0.5625, 0, 0])
    with pytest.raises(ValueError):
        el.CutoffProfile(4.0, 1.5)


def test_cutoff_constant_u(rough):
    dom = LatticeDomain.ball(8, 2)
    op = el.JumpOperator.from_env(rough, dom.sites)
    u = GridFunction(op.closure, np.full(len(op.closure), 2.0))
    res = el.cutoff_lemma_check(op, u, 8.0, 4.0)
    assert res.ok and res.n_contact > 0 and res.min_margin > 0


def test_cutoff_rejects_non_harmonic(rough):
    op = el.JumpOperator.from_env(rough, LatticeDomain.ball(5, 2).sites)
    u = GridFunction(op.closure, l2sq(op.closure).astype(float))
    with pytest.raises(el.HypothesisViolation):
        el.cutoff_lemma_check(op, u, 5.0)
