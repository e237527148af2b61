import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from csiunfold.transform import (
    CsiMatrix, DegenerateInputError, Domain, DomainError, ad_to_sf, devectorize, dft_matrix,
    sf_to_ad, spherical_combine, spherical_split, truncate_delay, vectorize,
)

SF, AD, TR = Domain.SPATIAL_FREQUENCY, Domain.ANGULAR_DELAY, Domain.ANGULAR_DELAY_TRUNCATED


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_dft_matrix_unitary():
    F = dft_matrix(8)
    np.testing.assert_allclose(F.conj().T @ F, np.eye(8), atol=1e-13)


def test_zero_maps_to_zero():
    z = np.zeros((8, 4), complex)
    assert not sf_to_ad(CsiMatrix(z, SF)).data.any()
    assert not ad_to_sf(CsiMatrix(z, AD)).data.any()


def test_matches_naive_dft(rng):
    H = crandn(rng, 8, 4)
    assert oracles.rel_err(sf_to_ad(CsiMatrix(H, SF)).data, oracles.dft_sf_to_ad(H)) < 1e-10
    assert oracles.rel_err(ad_to_sf(CsiMatrix(H, AD)).data, oracles.dft_ad_to_sf(H)) < 1e-10


def test_matches_matrix_form(rng):
    H = crandn(rng, 16, 8)
    expected = dft_matrix(16).conj().T @ H @ dft_matrix(8)
    np.testing.assert_allclose(sf_to_ad(CsiMatrix(H, SF)).data, expected, atol=1e-12)


def test_roundtrip_and_energy(rng):
    H = crandn(rng, 32, 16)
    ad = sf_to_ad(CsiMatrix(H, SF))
    assert abs(ad.norm() - np.linalg.norm(H)) <= 1e-10 * np.linalg.norm(H)
    np.testing.assert_allclose(ad_to_sf(ad).data, H, atol=1e-10)


def test_domain_tags_enforced(rng):
    H = CsiMatrix(crandn(rng, 4, 4), SF)
    with pytest.raises(DomainError):
        ad_to_sf(H)
    with pytest.raises(DomainError):
        truncate_delay(H, 2)
    with pytest.raises(DomainError):
        sf_to_ad(sf_to_ad(H))


def test_truncate(rng):
    ad = sf_to_ad(CsiMatrix(crandn(rng, 16, 4), SF))
    full = truncate_delay(ad, 16)
    np.testing.assert_array_equal(full.data, ad.data)
    assert full.domain == TR
    part = truncate_delay(ad, 5)
    assert part.shape == (5, 4)
    assert part.norm() <= ad.norm()
    with pytest.raises(ValueError):
        truncate_delay(ad, 17)
    with pytest.raises(ValueError):
        truncate_delay(ad, 0)


def test_truncate_single_zero_delay_path():
    # one path, zero delay, broadside: constant over subcarriers and antennas
    H = CsiMatrix(np.ones((64, 8), complex), SF)
    ad = sf_to_ad(H)
    tr = truncate_delay(ad, 4)
    assert tr.norm() ** 2 >= 0.99 * ad.norm() ** 2


def test_spherical_examples(rng):
    H = crandn(rng, 4, 4)
    H2 = CsiMatrix(2 * H / np.linalg.norm(H), TR)
    s = spherical_split(H2)
    assert abs(s.power - 2.0) < 1e-12
    assert abs(np.linalg.norm(s.direction) - 1.0) < 1e-12
    unit = CsiMatrix(H / np.linalg.norm(H), TR)
    s1 = spherical_split(unit)
    assert abs(s1.power - 1.0) < 1e-12
    np.testing.assert_allclose(s1.direction, unit.data, atol=1e-12)


def test_spherical_homogeneity(rng):
    H = crandn(rng, 6, 5)
    a, b = spherical_split(CsiMatrix(H, TR)), spherical_split(CsiMatrix(1e3 * H, TR))
    np.testing.assert_allclose(b.direction, a.direction, atol=1e-12)
    assert abs(b.power / a.power - 1e3) < 1e-9


def test_spherical_combine(rng):
    H = CsiMatrix(crandn(rng, 6, 5), TR)
    np.testing.assert_allclose(spherical_combine(spherical_split(H)).data, H.data, atol=1e-12)
    H7 = CsiMatrix(7 * H.data, TR)
    np.testing.assert_allclose(spherical_combine(spherical_split(H7)).data, 7 * H.data, atol=1e-12)


def test_spherical_zero_rejected():
    with pytest.raises(DegenerateInputError):
        spherical_split(CsiMatrix(np.zeros((3, 3)), TR))


def test_vectorize(rng):
    H = CsiMatrix(crandn(rng, 3, 4), TR)
    v = vectorize(H)
    assert v.shape == (24,)
    np.testing.assert_array_equal(v[:12], H.data.real.ravel())
    np.testing.assert_array_equal(devectorize(v, 3, 4).data, H.data)
    assert abs(np.linalg.norm(v) - H.norm()) < 1e-12
    imag = CsiMatrix(1j * rng.standard_normal((3, 4)), TR)
    assert not vectorize(imag)[:12].any()
    with pytest.raises(ValueError):
        devectorize(v[:-1], 3, 4)


complex_mats = st.integers(1, 6).flatmap(
    lambda r: st.integers(1, 6).flatmap(
        lambda c: st.integers(0, 2**32 - 1).map(
            lambda seed: crandn(np.random.default_rng(seed), r, c))))


@settings(max_examples=60, deadline=None)
@given(complex_mats, st.floats(1e-6, 1e6))
def test_property_roundtrips(H, scale):
    H = H * scale
    sf = CsiMatrix(H, SF)
    ad = sf_to_ad(sf)
    assert abs(ad.norm() - sf.norm()) <= 1e-10 * sf.norm()
    np.testing.assert_allclose(ad_to_sf(ad).data, H, atol=1e-10 * np.abs(H).max())
    tr = CsiMatrix(H, TR)
    assert np.array_equal(devectorize(vectorize(tr), *H.shape).data, H)
    s = spherical_split(tr)
    assert abs(np.linalg.norm(s.direction) - 1) < 1e-12
    np.testing.assert_allclose(spherical_combine(s).data, H, rtol=1e-12, atol=1e-12 * np.abs(H).max())
    c = 3.7
    np.testing.assert_allclose(spherical_split(CsiMatrix(c * H, TR)).direction, s.direction, atol=1e-12)
