import numpy as np
import pytest
from scipy import stats

from mvdiff.rng import RngStream
from mvdiff.schedule import make_linear_schedule, q_sample, sample_shared_noise
from mvdiff.tensor import DimensionError


def test_two_step_schedule_by_hand():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_hat, [0.9, 0.72], atol=1e-12)


def test_default_schedule_terminal_value():
    # independent oracle: exp(sum(log(1 - beta))) in f64
    s = make_linear_schedule(1000, 1e-4, 2e-2)
    betas = np.linspace(1e-4, 2e-2, 1000, dtype=np.float64)
    oracle = np.exp(np.log1p(-betas).sum())
    assert s.alpha_hat[-1] == pytest.approx(oracle, rel=1e-10)
    assert s.alpha_hat[-1] == pytest.approx(4.04e-5, rel=5e-3)


def test_schedule_monotone_and_bounds():
    s = make_linear_schedule(50, 1e-3, 0.1)
    assert np.all(np.diff(s.alpha_hat) < 0)
    assert 0.99 < s.alpha_hat[0] < 1.0
    s_long = make_linear_schedule(1000, 1e-4, 2e-2)
    assert s_long.alpha_hat[-1] < 0.05


def test_schedule_rejects_bad_params():
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_linear_schedule(1, 0.1, 0.2)


def test_single_cell_composite_is_standard_normal():
    rng = RngStream(11).fork("noise")
    n = sample_shared_noise(1, 1, 1, 317, 317, rng, dtype=np.float64)
    assert n.composite.mean() == pytest.approx(0.0, abs=0.02)
    assert n.composite.var() == pytest.approx(1.0, abs=0.02)


def _corr(a, b):
    return np.corrcoef(a.ravel(), b.ravel())[0, 1]


def test_correlation_table():
    # ~1e5 pixel pairs per cell of the table
    rng = RngStream(12).fork("noise")
    n = sample_shared_noise(2, 2, 1, 317, 317, rng, dtype=np.float64)
    c = n.composite
    assert _corr(c[0, 0], c[0, 1]) == pytest.approx(1 / 3, abs=0.02)  # same view, diff frame
    assert _corr(c[0, 0], c[1, 0]) == pytest.approx(1 / 3, abs=0.02)  # diff view, same frame
    assert _corr(c[0, 0], c[1, 1]) == pytest.approx(0.0, abs=0.02)    # both differ
    assert c.var() == pytest.approx(1.0, abs=0.02)
    assert c.mean() == pytest.approx(0.0, abs=0.02)


def test_disabled_sharing_reduces_to_residual():
    rng = RngStream(13).fork("noise")
    n = sample_shared_noise(2, 2, 1, 200, 200, rng, enabled=False, dtype=np.float64)
    assert np.array_equal(n.composite, n.r)
    c = n.composite
    assert _corr(c[0, 0], c[0, 1]) == pytest.approx(0.0, abs=0.02)
    assert _corr(c[0, 0], c[1, 0]) == pytest.approx(0.0, abs=0.02)


def test_component_fields_and_normalization():
    rng = RngStream(14).fork("noise")
    n = sample_shared_noise(3, 4, 2, 8, 8, rng)
    assert n.r.shape == (3, 4, 2, 8, 8)
    assert n.m.shape == (3, 1, 2, 8, 8)
    assert n.p.shape == (1, 4, 2, 8, 8)
    np.testing.assert_allclose(n.composite, (n.r + n.m + n.p) / np.sqrt(3), atol=1e-6)


def test_unnormalized_literal_form():
    rng = RngStream(15).fork("noise")
    n = sample_shared_noise(1, 1, 1, 300, 300, rng, normalize=False, dtype=np.float64)
    assert n.composite.var() == pytest.approx(3.0, abs=0.1)


def test_custom_weights_renormalize():
    rng = RngStream(16).fork("noise")
    n = sample_shared_noise(1, 1, 1, 300, 300, rng, weights=(1.0, 2.0, 0.5), dtype=np.float64)
    assert n.composite.var() == pytest.approx(1.0, abs=0.02)


def test_q_sample_noiseless_limit():
    sched = make_linear_schedule(10, 0.1, 0.2)
    x = np.full((1, 1, 1, 2, 2), 2.0, dtype=np.float32)
    z = q_sample(x, 3, np.zeros_like(x), sched)
    np.testing.assert_allclose(z, np.sqrt(sched.alpha_hat[3]) * x, rtol=1e-6)


def test_q_sample_terminal_variance():
    sched = make_linear_schedule(1000, 1e-4, 2e-2)
    rng = RngStream(17).fork("noise")
    n = sample_shared_noise(1, 1, 1, 100, 100, rng, dtype=np.float64)
    z = q_sample(np.zeros_like(n.composite), 999, n.composite, sched)
    assert z.var() == pytest.approx(1.0 - sched.alpha_hat[999], abs=0.02)


def test_q_sample_scalar_arithmetic():
    # alpha_hat[1] = 0.9 * 0.8 = 0.72; z = sqrt(.72) + sqrt(.28)
    sched = make_linear_schedule(2, 0.1, 0.2)
    x = np.ones((1, 1, 1, 1, 1), dtype=np.float64)
    z = q_sample(x, 1, np.ones_like(x), sched)
    assert z.item() == pytest.approx(np.sqrt(0.72) + np.sqrt(0.28), abs=1e-12)
    assert z.item() == pytest.approx(1.3778, abs=5e-4)


def test_q_sample_shape_mismatch():
    sched = make_linear_schedule(10, 0.1, 0.2)
    with pytest.raises(DimensionError):
        q_sample(np.zeros((1, 2, 3)), 0, np.zeros((1, 2, 4)), sched)


def test_marginal_matches_independent_noise():
    # sharing changes joint structure only; per-element marginals agree (KS)
    sched = make_linear_schedule(100, 1e-3, 0.05)
    rng = RngStream(18)
    x = rng.fork("x").normal((2, 2, 1, 50, 50), dtype=np.float64) * 0.5
    shared = sample_shared_noise(2, 2, 1, 50, 50, rng.fork("s"), dtype=np.float64)
    indep = sample_shared_noise(2, 2, 1, 50, 50, rng.fork("i"), enabled=False, dtype=np.float64)
    z_shared = q_sample(x, 40, shared.composite, sched).ravel()
    z_indep = q_sample(x, 40, indep.composite, sched).ravel()
    ks = stats.ks_2samp(z_shared, z_indep).statistic
    assert ks < 0.02
