import numpy as np
import pytest

from helpers import train_gaussian_pair
from latflow.flow import (Conditioning, ConstantField, VelocityField, c_in, cfm_loss, energy_distance, flow_apply,
                          generate_one_step, integrate_ode, time_embedding)
from latflow.geometry import GeometryConditioner
from latflow.numerics import Tensor

M = np.array([1.5, -0.5, 0.25])


@pytest.fixture(scope="module")
def pair_field():
    return train_gaussian_pair(M)


def small_field(seed=0, dim=6, cond_dim=3, geometry=True):
    rng = np.random.default_rng(seed)
    geo = GeometryConditioner([16, 16], rng, local_width=8, center_dim=8) if geometry else None
    return VelocityField(dim, cond_dim, rng, hidden=(16, 16), time_dim=8, geometry=geo)


def small_cond(B=4, seed=1):
    rng = np.random.default_rng(seed)
    return Conditioning(rng.standard_normal((B, 3)), rng.standard_normal((B, 5, 4, 3)), rng.standard_normal((B, 5, 3)))


# ---------------------------------------------------------------------- c_in


def test_c_in_values():
    assert c_in(0.0) == 1.0
    assert c_in(1.0) == 1.0
    assert c_in(0.5) == pytest.approx(np.sqrt(2.0), abs=1e-12)
    t = np.linspace(0.0, 1.0, 101)
    assert np.all((c_in(t) >= 1.0) & (c_in(t) <= np.sqrt(2.0) + 1e-15))


@pytest.mark.parametrize("t", [-0.01, 1.01])
def test_c_in_domain(t):
    with pytest.raises(ValueError):
        c_in(t)


def test_time_embedding_shape():
    assert time_embedding(np.array([0.0, 0.5]), 32).shape == (2, 32)


# ---------------------------------------------------------------- flow_apply


@pytest.mark.parametrize("seed", range(5))
def test_endpoint_identity(seed):
    field = small_field(seed)
    z = np.random.default_rng(seed + 10).standard_normal((4, 6))
    np.testing.assert_array_equal(flow_apply(field, 1.0, z, small_cond()).data, z)


def test_constant_field_at_zero():
    field = ConstantField(3)
    field.bias.data = np.array([0.1, 0.2, -0.3])
    z = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(flow_apply(field, 0.0, z).data, z + field.bias.data, rtol=0, atol=1e-15)


def test_midpoint_matches_reevaluation():
    field, cond = small_field(), small_cond()
    z = np.random.default_rng(2).standard_normal((4, 6))
    expected = z + 0.5 * field.velocity(np.full(4, 0.5), np.sqrt(2.0) * z, cond).data
    np.testing.assert_allclose(flow_apply(field, 0.5, z, cond).data, expected, rtol=0, atol=1e-12)


def test_film_identity_at_init_is_bit_identical():
    field, cond = small_field(), small_cond()
    x = np.random.default_rng(3).standard_normal((4, 6))
    with_scene = field.velocity(np.full(4, 0.3), x, cond).data
    without = field.velocity(np.full(4, 0.3), x, cond, use_scene=False).data
    np.testing.assert_array_equal(with_scene, without)


def test_shared_scene_index_matches_per_sample_scenes():
    field = small_field()
    for gen in (field.geometry.film_l, field.geometry.film_c):
        gen.head.weight.data = 0.1 * np.random.default_rng(4).standard_normal(gen.head.weight.shape)
    cond = small_cond(B=2)
    idx = np.array([0, 1, 1, 0])
    shared = Conditioning(cond.obs[idx], cond.offsets, cond.centers, idx)
    full = Conditioning(cond.obs[idx], cond.offsets[idx], cond.centers[idx])
    x = np.random.default_rng(5).standard_normal((4, 6))
    np.testing.assert_allclose(field.velocity(0.2, x, shared).data, field.velocity(0.2, x, full).data, atol=1e-14)


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        flow_apply(small_field(), 0.0, np.zeros((1, 5)), small_cond(1))


# ------------------------------------------------------------------ training


class TargetField:
    """Returns exactly z - z0 for a known pair, whatever the inputs."""

    def __init__(self, z, z0):
        self.dim, self.n_evals, self.target = z.shape[1], 0, z - z0

    def velocity(self, t, x, cond=None, use_scene=True):
        self.n_evals += 1
        return Tensor(self.target)


def test_loss_is_zero_at_target():
    rng = np.random.default_rng(0)
    z, z0 = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    loss, parts = cfm_loss(TargetField(z, z0), z, None, rng, noise=z0)
    assert parts["fm"] == 0.0
    assert parts["cons"] < 1e-28
    assert loss.data < 1e-28


def test_mixture_loss_stays_positive_at_optimum_shape():
    # the best constant velocity still leaves path-crossing variance on bimodal data
    rng = np.random.default_rng(1)
    z = np.where(rng.random((4000, 1)) < 0.5, -2.0, 2.0) * np.ones((1, 2))
    field = ConstantField(2)
    _, parts = cfm_loss(field, z, None, rng, consistency_weight=0.0)
    assert parts["fm"] > 1.0


def test_gaussian_pair_recovers_mean(pair_field):
    assert np.all(np.abs(pair_field.bias.data - M) < 0.05)


def test_gaussian_pair_one_step_samples(pair_field):
    s = generate_one_step(pair_field, None, np.random.default_rng(1), n=10_000)
    assert np.all(np.abs(s.mean(axis=0) - M) < 0.05)
    assert np.all(np.abs(s.var(axis=0) - 1.0) < 0.1)


# ---------------------------------------------------------------- generation


def test_one_step_counts_one_evaluation():
    field, cond = small_field(), small_cond()
    before = field.n_evals
    out = generate_one_step(field, cond, np.random.default_rng(0))
    assert field.n_evals - before == 1
    assert out.shape == (4, 6)


def test_one_step_is_deterministic_given_seed():
    field, cond = small_field(), small_cond()
    a = generate_one_step(field, cond, np.random.default_rng(9))
    b = generate_one_step(field, cond, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("n", [1, 3, 16])
def test_ode_exact_for_constant_field(n):
    field = ConstantField(3)
    field.bias.data = np.array([0.5, -1.0, 2.0])
    noise = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(integrate_ode(field, None, n, noise), noise + field.bias.data, atol=1e-12)


def test_single_ode_step_equals_one_step_generation():
    field, cond = small_field(), small_cond()
    noise = np.random.default_rng(1).standard_normal((4, 6))
    np.testing.assert_allclose(integrate_ode(field, cond, 1, noise), generate_one_step(field, cond, noise=noise),
                               atol=1e-12)


def test_trained_pair_field_is_straight(pair_field):
    noise = np.random.default_rng(2).standard_normal((2000, 3))
    one, many = integrate_ode(pair_field, None, 1, noise), integrate_ode(pair_field, None, 32, noise)
    assert np.sqrt(np.mean((one - many) ** 2)) < 0.05


def test_ode_needs_a_step():
    with pytest.raises(ValueError):
        integrate_ode(ConstantField(2), None, 0, np.zeros((1, 2)))


def test_energy_distance_zero_for_identical_sets():
    x = np.random.default_rng(0).standard_normal((50, 2))
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    assert energy_distance(x, x + 3.0) > 1.0
