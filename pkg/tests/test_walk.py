import math

import numpy as np
import pytest
from scipy.special import comb

from balanced_rwre import kernels, walk
from balanced_rwre.env import EnvSpec, Environment, generate, remove_laziness
from balanced_rwre.lattice import LatticeDomain
from balanced_rwre.stationary import periodize


def test_path_basics():
    env = generate(EnvSpec.iid_elliptic(2), 0, 3)
    p = walk.sample_path(env, (1, 0), 0, 5)
    assert p.n == 0 and p.sites.tolist() == [[1, 0]]
    p = walk.sample_path(env, (0, 0), 400, 5)  # longer than the box: extends itself
    assert p.n == 400
    assert np.all(np.abs(p.steps).sum(axis=1) == 1)
    q = walk.sample_path(generate(EnvSpec.iid_elliptic(2), 0, 40), (0, 0), 400, 5)
    np.testing.assert_array_equal(p.sites, q.sites)


def test_path_support_restriction():
    env = Environment.constant(2, 30, 0.0, [0.5, 0.0])
    p = walk.sample_path(env, (0, 3), 200, 1)
    assert np.all(p.sites[:, 1] == 3)


def test_srw_step_variance():
    env = generate(EnvSpec.uniform(2), 0, 1)
    p = walk.sample_path(env, (0, 0), 10**5, 3)
    s = p.steps[:, 0].astype(float)
    # per-step coordinate variance 1/2, fourth moment 1/2
    se = math.sqrt((0.5 - 0.25) / len(s))
    assert abs(s.var() - 0.5) < 3 * se


def test_exit_time_examples():
    env = generate(EnvSpec.iid_elliptic(2), 3, 4)
    et = walk.exit_time_samples(env, None, 0, 500, 1)
    assert np.all(et.tau == 1)
    srw = generate(EnvSpec.uniform(2), 0, 3)
    et = walk.exit_time_samples(srw, None, 1, 20000, 2)
    assert abs(et.mean - 8 / 3) < 4 * et.se
    exact = walk.exact_expected_exit_time(srw, LatticeDomain.closed_ball(1, 2))
    assert exact.at((0, 0)) == pytest.approx(8 / 3, abs=1e-12)


def test_exact_exit_time_single_site_and_mc_cross_check():
    srw = generate(EnvSpec.uniform(2), 0, 3)
    f = walk.exact_expected_exit_time(srw, np.zeros((1, 2), np.int64))
    assert f.at((0, 0)) == pytest.approx(1.0)
    env = generate(EnvSpec.iid_elliptic(2), 8, 8)
    r = 3.0
    exact = walk.exact_expected_exit_time(env, LatticeDomain.closed_ball(r, 2)).at((0, 0))
    et = walk.exit_time_samples(env, None, r, 20000, 4)
    assert abs(et.mean - exact) < 4 * et.se


def test_holding_rejected():
    env = generate(EnvSpec.iid_elliptic(2, stay_max=0.5), 0, 4)
    with pytest.raises(walk.HoldingError):
        walk.exit_time_samples(env, None, 2, 10, 0)
    et = walk.exit_time_samples(remove_laziness(env), None, 2, 10, 0)
    assert et.M == 10


def test_results_independent_of_box_and_workers():
    spec = EnvSpec.iid_elliptic(2)
    a = walk.exit_time_samples(generate(spec, 5, 2), None, 6, 3000, 9)
    b = walk.exit_time_samples(generate(spec, 5, 20), None, 6, 3000, 9, workers=3)
    assert a.tau.tobytes() == b.tau.tobytes()


def test_lemma_e():
    t = periodize(generate(EnvSpec.uniform(2), 0, 8), 8)
    r = walk.lemma_E_check(t, 8, 2000, 0)
    assert r.factor == 0 and not r.excluded and r.estimate == 0
    t = periodize(generate(EnvSpec.iid_elliptic(3), 0, 8), 8)
    r = walk.lemma_E_check(t, 8, 200, 0)
    assert r.excluded and r.c == 144
    t = periodize(generate(EnvSpec.iid_elliptic(2), 0, 16), 16)
    r = walk.lemma_E_check(t, 16, 2000, 0)
    assert 0 < r.estimate <= 1 and r.ok
    t = periodize(generate(EnvSpec.uniform(2), 0, 1), 1)
    r = walk.lemma_E_check(t, 1, 100, 0)
    assert r.estimate <= 1


def test_annulus_visits_i_max_zero():
    srw = generate(EnvSpec.uniform(3), 0, 2)
    rep = walk.annulus_visits(srw, 4, 0, 2000, 0)
    assert rep.counts.shape == (2000, 1)
    assert rep.visit_prob[0] == 1.0  # time 0 counts
    assert rep.rows()[0]["radius_hi"] == 4.0


def test_annulus_visits_recurrent_contrast():
    # in d = 2 the per-annulus visit counts do not decay
    srw = generate(EnvSpec.uniform(2), 0, 2)
    rep = walk.annulus_visits(srw, 4, 2, 1500, 0)
    assert np.all(np.diff(rep.cumulative) > 0.5)


def test_time_visits_against_exact_sums():
    srw = generate(EnvSpec.uniform(2), 0, 2)
    hz = [10, 100, 1000]
    rep = walk.time_visits(srw, hz, 20000, 0)
    exact = walk.srw_return_partial_sums(hz)
    assert np.all(np.abs(rep.mean - exact) < 4 * rep.se)


@pytest.mark.parametrize("n", [0, 1, 2, 7, 40])
def test_return_sums_against_binomials(n):
    want = sum(comb(2 * k, k, exact=True) ** 2 / 16 ** k for k in range(n // 2 + 1))
    assert walk.srw_return_partial_sums([n])[0] == pytest.approx(want, rel=1e-13)


def test_clt_layered_quarter_is_srw():
    env = generate(EnvSpec.layered(2, value=0.25), 0, 4)
    rep = walk.clt_covariance(env, 400, 4000, 1)
    assert np.all(np.abs(np.diag(rep.cov) - 0.5) < 4 * np.diag(rep.cov_se))
    srw = walk.clt_covariance(generate(EnvSpec.uniform(2), 0, 4), 400, 4000, 1)
    np.testing.assert_array_equal(rep.cov, srw.cov)


def test_clt_ks_on_srw():
    rep = walk.clt_covariance(generate(EnvSpec.uniform(2), 0, 4), 1000, 5000, 3)
    assert np.all(rep.ks_pvalue > 1e-3)


def test_escape_status_flags():
    env = Environment.constant(2, 3, 0.0, [0.25, 0.25])  # table env: cannot extend
    keys = np.arange(50, dtype=np.uint64)
    (pos, steps, status), _ = walk.run_keyed(
        env, lambda t, k: kernels.run_stopped(t, np.zeros(2, np.int64), k, 500), keys)
    assert np.any(status == kernels.ESCAPED)
