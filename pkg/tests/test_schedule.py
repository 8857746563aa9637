import numpy as np
import pytest

from dynscore.schedule import build_vp_schedule, inverse_sigma, weight
from oracles import vp_sigma_mp


@pytest.fixture(scope="module")
def s():
    return build_vp_schedule(1000, 1e-4, 0.02)


def test_boundary_at_zero(s):
    assert s.alphas[0] == 1.0
    assert s.sigmas[0] == 0.0


def test_variance_preserving_everywhere(s):
    np.testing.assert_allclose(s.alphas**2 + s.sigmas**2, 1.0, rtol=0, atol=1e-12)


def test_monotone(s):
    assert np.all(np.diff(s.sigmas) > 0)
    assert np.all(np.diff(s.alphas) < 0)


@pytest.mark.parametrize("t", [1, 7, 500, 1000])
def test_matches_extended_precision_product(s, t):
    sigma, alpha = vp_sigma_mp(1000, 1e-4, 0.02, t)
    assert s.sigmas[t] == pytest.approx(sigma, rel=1e-12)
    assert s.alphas[t] == pytest.approx(alpha, rel=1e-12)


def test_tables_are_read_only(s):
    with pytest.raises(ValueError):
        s.sigmas[3] = 0.0


def test_inverse_sigma_boundaries(s):
    assert inverse_sigma(s, 0.0) == 0
    assert inverse_sigma(s, -1.0) == 0
    assert inverse_sigma(s, 2.0) == 1000
    assert inverse_sigma(s, s.sigmas[-1]) == 1000


def test_inverse_sigma_round_trip_every_index(s):
    assert all(inverse_sigma(s, s.sigmas[t]) == t for t in range(s.T + 1))


def test_inverse_sigma_between_entries(s):
    mid = 0.5 * (s.sigmas[499] + s.sigmas[500])
    assert inverse_sigma(s, mid) == 500


def test_weight_kinds():
    const = build_vp_schedule(weight_kind="constant")
    sq = build_vp_schedule(weight_kind="sigma_sq")
    snr = build_vp_schedule(weight_kind="snr")
    assert weight(const, 0) == 1.0 and weight(const, 731) == 1.0
    assert weight(sq, 0) == 0.0
    assert weight(sq, 1000) == sq.sigmas[1000] ** 2
    assert weight(snr, 10) == pytest.approx(snr.alphas[10] / snr.sigmas[10])
    with pytest.raises(ValueError):
        weight(snr, 0)
    with pytest.raises(ValueError):
        weight(const, 1001)


@pytest.mark.parametrize(
    "kwargs",
    [dict(T=1), dict(T=10.5), dict(beta_min=0.0), dict(beta_min=0.03, beta_max=0.02), dict(beta_max=1.0),
     dict(weight_kind="cosine")],
)
def test_invalid_arguments(kwargs):
    with pytest.raises(ValueError):
        build_vp_schedule(**kwargs)
