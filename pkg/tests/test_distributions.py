import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from tiebreak import _kernels
from tiebreak.distributions import Beta, CdfFamily, LinearTilt, Mixture, Power, Uniform, check_cdf, from_dict

DISTS = [Uniform(), Power(2.0), Power(0.5), LinearTilt(0.6), LinearTilt(-0.9), Beta(2.0, 5.0),
         Mixture((Beta(2.0, 2.0), Power(3.0)), (0.3, 0.7))]


@pytest.mark.parametrize("d", DISTS, ids=lambda d: type(d).__name__)
def test_cdf_is_a_distribution_and_ppf_inverts(d):
    check_cdf(d)
    u = np.linspace(0.01, 0.99, 99)
    assert np.allclose(d.cdf(d.ppf(u)), u, atol=1e-9)


@pytest.mark.parametrize("d", DISTS, ids=lambda d: type(d).__name__)
def test_sampler_matches_cdf(d):
    x = d.sample(np.random.default_rng(42), 20_000)
    assert np.all((x > 0) & (x <= 1))
    ks = stats.kstest(x, lambda v: d.cdf(v))
    assert ks.statistic < 1.63 / np.sqrt(len(x))     # 1% critical value


@pytest.mark.parametrize("d", DISTS, ids=lambda d: type(d).__name__)
def test_dict_round_trip(d):
    e = from_dict(d.to_dict())
    grid = np.linspace(0, 1, 11)
    assert np.array_equal(e.cdf(grid), d.cdf(grid))


def test_check_cdf_rejects():
    with pytest.raises(ValueError):
        check_cdf(lambda x: 0.5 * x)
    with pytest.raises(ValueError):
        check_cdf(lambda x: 1.0 - x if 0 < x < 1 else x)
    with pytest.raises(ValueError):
        check_cdf(lambda x: float("nan"))
    with pytest.raises(ValueError):
        from_dict({"kind": "cauchy"})


def test_family_rules():
    fam = CdfFamily(1, 3, {2: Beta(2, 2)})
    assert isinstance(fam.dist(1), Uniform) and isinstance(fam.dist(3), Uniform)
    fam.validate()
    with pytest.raises(ValueError):
        CdfFamily(2, 3, {2: Beta(2, 2)}).validate()
    with pytest.raises(ValueError):
        CdfFamily(1, 2, {2: LinearTilt(np.zeros(4))}).validate(5)
    back = CdfFamily.from_dict(fam.to_dict())
    assert back.to_dict() == fam.to_dict()


def test_type_cdf_averages_applicants():
    kappa = np.array([0.5, -0.5, 0.2])
    fam = CdfFamily(1, 2, {2: LinearTilt(kappa)})
    F = fam.type_cdf(2, [0, 1])
    x = 0.3
    assert F(x) == pytest.approx(x, abs=1e-15)      # the two tilts cancel
    assert fam.type_cdf(1)(0.3) == pytest.approx(0.3)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 60), st.integers(1, 4))
def test_compiled_tilt_draw_equals_reference(seed, n, V):
    rng = np.random.default_rng(seed)
    kappa = {v: rng.uniform(-0.9, 0.9, n) if v % 2 else 0.0 for v in range(2, V + 1)}
    fam = CdfFamily(1, V, {v: LinearTilt(k) for v, k in kappa.items()})
    K = fam.tilt_matrix(n)
    R = np.empty((n, V))
    _kernels.draw_tilted(np.random.default_rng([seed, 3]), K, R)
    assert np.array_equal(R, fam.draw(np.random.default_rng([seed, 3]), n))
    assert CdfFamily(1, 2, {2: Beta(2, 2)}).tilt_matrix(n) is None


def test_tilted_draws_follow_per_applicant_cdf():
    n = 40_000
    kappa = np.full(n, 0.8)
    fam = CdfFamily(1, 2, {2: LinearTilt(kappa)})
    R = fam.draw(np.random.default_rng(0), n)
    assert stats.kstest(R[:, 1], lambda v: LinearTilt(0.8).cdf(v)).statistic < 1.63 / np.sqrt(n)
    assert stats.kstest(R[:, 0], "uniform").statistic < 1.63 / np.sqrt(n)
