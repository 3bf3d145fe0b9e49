import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfp.channel import ArrayGeometry, RadioConfig, build_environment, synthesize_snapshots
from mmfp.harness import grid_positions
from mmfp.transform import (
    dft_matrix,
    energy_support_fraction,
    forward_transform,
    identity_passthrough,
    inverse_transform,
    pack,
    to_snapshot,
    unpack,
)

from conftest import small_config


def random_snapshot(rng, m=8, n=6):
    return rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))


def test_matches_explicit_matrix_product(rng):
    y = random_snapshot(rng, 8, 6)
    f_m, f_n = dft_matrix(8), dft_matrix(6)
    expected = f_m @ y @ f_n.conj().T
    assert np.allclose(unpack(forward_transform(y)), expected, atol=1e-13)


def test_dft_matrix_is_unitary():
    f = dft_matrix(7)
    assert np.allclose(f @ f.conj().T, np.eye(7), atol=1e-14)


def test_zero_in_zero_out():
    z = np.zeros((4, 5), complex)
    assert not np.any(forward_transform(z))
    assert not np.any(inverse_transform(pack(z)))
    assert not np.any(identity_passthrough(z))


def test_grid_aligned_rank_one_maps_to_single_entry():
    m, n, m0, k0 = 8, 6, 3, 2
    fh_m = dft_matrix(m).conj().T
    fh_n = dft_matrix(n).conj().T
    y = 2.5 * np.outer(fh_m[:, m0], fh_n[:, k0].conj())
    s = unpack(forward_transform(y))
    expected = np.zeros((m, n), complex)
    expected[m0, k0] = 2.5
    assert np.allclose(s, expected, atol=1e-14)


def test_unit_entry_inverts_to_unit_norm_rank_one():
    fp = np.zeros((8, 6, 2))
    fp[3, 2, 0] = 1.0
    y = inverse_transform(fp)
    assert np.isclose(np.linalg.norm(y), 1.0, atol=1e-14)
    assert np.linalg.matrix_rank(y, tol=1e-10) == 1


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_round_trip_and_isometry(m, n, seed):
    y = random_snapshot(np.random.default_rng(seed), m, n)
    fp = forward_transform(y)
    assert fp.shape == (m, n, 2)
    back = inverse_transform(fp)
    assert np.linalg.norm(back - y) <= 1e-10 * np.linalg.norm(y)
    assert abs(np.linalg.norm(fp) - np.linalg.norm(y)) <= 1e-12 * np.linalg.norm(y)


def test_passthrough_packs_real_and_imag():
    y = np.zeros((2, 3), complex)
    y[0, 0] = 3 + 4j
    t = identity_passthrough(y)
    assert t[0, 0, 0] == 3 and t[0, 0, 1] == 4
    assert np.isclose(np.linalg.norm(t), np.linalg.norm(y))
    assert np.array_equal(to_snapshot(t, "raw"), y)


def test_unknown_representation():
    with pytest.raises(ValueError):
        to_snapshot(np.zeros((2, 2, 2)), "polar")


def test_transform_concentrates_energy():
    cfg = small_config(radio=RadioConfig(300e6, 20e6, 16), array=ArrayGeometry.linear(16, (-10.0, -10.0)))
    env = build_environment(3, cfg)
    y = synthesize_snapshots(env, grid_positions(env.area, 1.0))
    after = np.mean([energy_support_fraction(unpack(forward_transform(s))) for s in y])
    before = np.mean([energy_support_fraction(s) for s in y])
    assert after < before


def test_energy_support_fraction_simple_cases():
    assert energy_support_fraction(np.eye(1)) == 1.0
    z = np.zeros(100)
    z[3] = 1.0
    assert energy_support_fraction(z) == 0.01
    assert energy_support_fraction(np.ones(10)) == 1.0
