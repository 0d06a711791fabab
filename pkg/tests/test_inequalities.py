import math

import numpy as np
import pytest

from flocksim.inequalities import (ConfigSample, abs_lhs, abs_unit_rhs, calibrate, certify_calibrated,
                                   certify_constant_free, check_abs_inequality, check_cancellation,
                                   check_drift_inequality, check_exp_inequality, check_young, drift_lhs,
                                   drift_unit_rhs, random_config, young_margin)
from flocksim.kernels import PsiKernel, SigmaKernel

ONE = PsiKernel.constant(1.0)
UNIT_SIGMA = SigmaKernel.constant(1.0)


def sample(v, u0=(1.0,), r=None, psi=ONE, sigma=UNIT_SIGMA, **kw):
    v = np.asarray(v, dtype=float)
    r = np.zeros_like(v) if r is None else np.asarray(r, dtype=float)
    return ConfigSample(r, v, psi, sigma, np.asarray(u0, dtype=float), **kw)


def test_drift_exact_two_particle_case():
    cs = sample([[0.0], [0.0]], p=2.0)
    assert drift_lhs(cs) == pytest.approx(1.0)
    assert cs.lam_2p == 1.0
    assert drift_unit_rhs(cs) == pytest.approx(64.0)
    assert check_drift_inequality(cs).holds


def test_drift_zero_noise_equal_velocities():
    cs = sample([[1.0, 2.0]] * 3, u0=(0.0, 0.0), p=3.0)
    res = check_drift_inequality(cs, C=0.5)
    assert res.lhs == 0.0 and res.holds


def test_drift_requires_p_two():
    with pytest.raises(ValueError):
        check_drift_inequality(sample([[0.0]], p=1.5))


def test_abs_examples():
    cs = sample([[0.0]], p=1.0)
    assert abs_lhs(cs) == pytest.approx(1.0)
    assert abs_unit_rhs(cs) == pytest.approx(4.0 * 1.0)
    zero = sample([[0.0], [0.0]], u0=(0.0,), p=0.5)
    assert check_abs_inequality(zero).lhs == 0.0
    with pytest.raises(ValueError):
        check_abs_inequality(sample([[0.0]], p=0.25))


def test_exp_examples():
    silent = sample([[1.0], [-2.0]], sigma=SigmaKernel.constant(0.0), delta=0.5, kappa=1.0)
    assert check_exp_inequality(silent).lhs == 0.0
    delta, kappa = 0.7, 0.5
    cs = sample([[0.0], [0.0]], delta=delta, kappa=kappa)
    res = check_exp_inequality(cs)
    jumped = math.exp(delta * math.sqrt(2.0) ** kappa)
    assert res.lhs == pytest.approx(jumped - math.exp(delta))
    assert res.rhs == pytest.approx((1 + math.exp(delta) * math.exp(delta)) * math.exp(delta))
    assert res.holds
    with pytest.raises(ValueError):
        check_exp_inequality(sample([[0.0]], sigma=SigmaKernel.bracket_power(1.0, 1.0)))


def test_cancellation_examples():
    residual, _, holds = check_cancellation(sample([[3.0]]))
    assert residual == 0.0 and holds
    cs = sample([[1.0], [-2.5]], r=[[0.0], [1.0]], psi=PsiKernel.rational(1.0, 1.0),
                sigma=SigmaKernel.bracket_power(1.0, 1.5))
    residual, scale, holds = check_cancellation(cs)
    assert abs(residual) <= 1e-12 * scale and holds


def test_young_examples():
    equal = sample([[1.0, 1.0]] * 2, sigma=SigmaKernel.bracket_power(1.0, 1.3))
    assert check_young(equal) and abs(young_margin(equal)) < 1e-10
    tiny = sample([[0.0], [4.0]], sigma=SigmaKernel.bracket_power(1.0, 1e-9))
    assert check_young(tiny)


def test_random_config_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cs = random_config(rng, p=2.0, gamma=1.0)
        assert 1 <= cs.N <= 8 and cs.velocities.shape[1] <= 3
        assert np.all(np.linalg.norm(cs.velocities, axis=1) <= 5.0)
        assert 0.5 <= np.linalg.norm(cs.u0) <= 2.0 and cs.gamma == 1.0


def test_calibrate_takes_safety_times_max_ratio():
    batch = [sample([[0.0]], p=1.0), sample([[0.0], [0.0]], p=1.0)]
    assert calibrate(abs_lhs, abs_unit_rhs, batch, safety=10.0) == pytest.approx(10 * 0.25)


def test_constant_free_certification_small_batch():
    reports = certify_constant_free(np.random.default_rng(1), 300)
    assert [r.lemma for r in reports] == ["exponential_moment", "cancellation", "young"]
    assert all(r.violations == 0 for r in reports)
    assert reports[0].max_margin < 0 and reports[1].max_margin <= 0 and reports[2].max_margin <= 1e-12


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_calibrated_certification_small_batch(gamma):
    reports = certify_calibrated(np.random.default_rng(2), 300, p=2.0, gamma=gamma)
    assert all(r.violations == 0 and r.calibrated_C > 0 for r in reports)
    assert reports[0].as_record()["lemma"] == "drift"
