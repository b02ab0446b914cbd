import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smile_fusion.errors import DegenerateError, ShapeError
from smile_fusion.linalg import svd
from smile_fusion.subspace import (
    Zone,
    partition_of,
    project_delta,
    project_zone,
    projection_coefficients,
    zone_energies,
    zone_partition,
)


def test_r_half_cumulative_sum():
    assert zone_partition([4.0, 3.0, 2.0, 1.0], 4).r_half == 2
    assert zone_partition([1.0], 1).r_half == 1
    assert zone_partition([5.0, 5.0], 2).r_half == 1


def test_partition_ranges():
    part = zone_partition([4.0, 3.0, 2.0, 1.0, 0.0], 4, shape=(6, 5))
    assert part.row_range(Zone.I) == (0, 2)
    assert part.row_range(Zone.II) == (2, 4)
    assert part.row_range(Zone.II_AND_III) == (2, 6)
    assert part.col_range(Zone.II_AND_III) == (2, 5)


def test_degenerate_spectrum():
    with pytest.raises(DegenerateError):
        zone_partition([0.0, 0.0], 0)
    with pytest.raises(ShapeError):
        zone_partition([1.0], 2)


def test_coefficients_of_aligned_delta(rng):
    f = svd(rng.standard_normal((5, 4)), "full")
    dW = 2.5 * np.outer(f.U[:, 0], f.V[:, 0])
    d = projection_coefficients(dW, f).delta
    expected = np.zeros((5, 4))
    expected[0, 0] = 2.5
    assert np.max(np.abs(d - expected)) < 1e-12
    assert np.array_equal(projection_coefficients(np.zeros((5, 4)), f).delta, np.zeros((5, 4)))


def test_coefficients_need_full_factors(rng):
    a = rng.standard_normal((5, 3))
    with pytest.raises(ShapeError):
        projection_coefficients(a, svd(a))


def test_coefficients_preserve_norm_and_reconstruct(rng):
    f = svd(rng.standard_normal((7, 5)), "full")
    dW = rng.standard_normal((7, 5))
    c = projection_coefficients(dW, f)
    assert abs(np.linalg.norm(c.delta) - np.linalg.norm(dW)) < 1e-9
    assert np.max(np.abs(c.reconstruct(f) - dW)) < 1e-12


def test_zone_one_delta(rng):
    W = rng.standard_normal((6, 6))
    f = svd(W, "full")
    dW = np.outer(f.U[:, 0], f.V[:, 0])
    assert np.allclose(project_zone(W, dW, f, Zone.I).weight, W + dW, atol=1e-12)
    assert np.allclose(project_zone(W, dW, f, Zone.II_AND_III).weight, W, atol=1e-12)


def test_zero_delta_every_zone(rng):
    W = rng.standard_normal((4, 5))
    f = svd(W, "full")
    for zone in Zone:
        assert np.array_equal(project_zone(W, np.zeros_like(W), f, zone).weight, W)


def test_empty_zone_two():
    W = np.diag([1.0, 0.0, 0.0])
    f = svd(W, "full")
    res = project_zone(W, np.ones((3, 3)), f, Zone.II)
    assert res.empty_zone and np.array_equal(res.weight, W)


def test_block_diagonal_zones_are_complementary(rng):
    W = rng.standard_normal((6, 5))
    f = svd(W, "full")
    part = partition_of(f)
    coeffs = np.zeros((6, 5))
    h = part.r_half
    coeffs[:h, :h] = rng.standard_normal((h, h))
    coeffs[h:, h:] = rng.standard_normal((6 - h, 5 - h))
    dW = f.U @ coeffs @ f.V.T
    w1 = project_zone(W, dW, f, Zone.I).weight
    w23 = project_zone(W, dW, f, Zone.II_AND_III).weight
    assert np.max(np.abs(w1 + w23 - W - (W + dW))) < 1e-12
    e = zone_energies(dW, f)
    assert abs(e["I"] + e["II_AND_III"] - e["total"]) < 1e-9


@given(st.integers(0, 100_000), st.sampled_from(list(Zone)))
def test_projection_idempotent(seed, zone):
    r = np.random.default_rng(seed)
    W = r.standard_normal((6, 4))
    f = svd(W, "full")
    once = project_delta(r.standard_normal((6, 4)), f, zone)
    assert np.max(np.abs(project_delta(once, f, zone) - once)) < 1e-10


@given(st.integers(0, 100_000))
def test_zone_one_orthogonal_to_rest(seed):
    r = np.random.default_rng(seed)
    f = svd(r.standard_normal((5, 5)), "full")
    dW = r.standard_normal((5, 5))
    p1 = project_delta(dW, f, Zone.I)
    p23 = project_delta(dW, f, Zone.II_AND_III)
    assert abs(np.sum(p1 * p23)) < 1e-9 * np.sum(dW * dW)
    e = zone_energies(dW, f)
    assert e["total"] >= e["I"] + e["II_AND_III"] - 1e-9
