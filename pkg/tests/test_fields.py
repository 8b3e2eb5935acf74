import jax.numpy as jnp
import numpy as np
import pytest

from implicit_deform.fields import (
    DegenerateGradientError,
    ImplicitField,
    VelocityField,
    curvature,
    curvature_of,
    eikonal_residual,
    normal,
    sdf,
    sdf_spatial_grad,
    sdf_time_deriv,
    stretch_rate,
    velocity,
    velocity_divergence,
    velocity_jacobian,
    velocity_laplacian,
)
from implicit_deform.trainer import TrainConfig, sphere_init

from helpers import (
    ROTATION,
    constant_velocity,
    fd_jacobian,
    fd_laplacian,
    fit_implicit,
    ld_velocity,
    linear_sdf,
    linear_velocity,
    random_implicit,
    random_velocity,
    rel_err,
)


def unit_vectors(n, seed=0):
    u = np.random.default_rng(seed).standard_normal((n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def sphere_field():
    cfg = TrainConfig(implicit_width=128, implicit_layers=4)
    return ImplicitField(sphere_init(cfg, 0.5), cfg.m)


# -- implicit field ------------------------------------------------------------------------

def test_sphere_init_value_at_origin(sphere_field):
    assert abs(float(sdf(sphere_field, np.zeros(3), 0.0)) + 0.5) < 5e-2


def test_sphere_init_zero_on_shell(sphere_field):
    X = 0.5 * unit_vectors(100)
    for t in (0.0, 0.5, 1.0):
        assert np.max(np.abs(np.asarray(sdf(sphere_field, X, t)))) <= 1e-2


def test_sphere_init_gradient_is_radial(sphere_field):
    u = unit_vectors(100, 1)
    X = u * np.random.default_rng(2).uniform(0.4, 0.6, (100, 1))
    g = np.asarray(sdf_spatial_grad(sphere_field, X, 0.0))
    cos = np.sum(g * u, axis=1) / np.linalg.norm(g, axis=1)
    assert cos.min() >= 0.99


def test_sphere_init_normal_on_axis():
    cfg = TrainConfig(implicit_width=128, implicit_layers=4)
    n = np.asarray(normal(ImplicitField(sphere_init(cfg, 0.4), cfg.m), np.array([0.5, 0.0, 0.0]), 0.0))
    assert n[0] >= 0.99


def test_plane_field_derivatives():
    F = linear_sdf([1.0, 0.0, 0.0])
    x = np.array([0.2, -0.3, 0.7])
    np.testing.assert_allclose(sdf(F, x, 0.4), 0.2, rtol=1e-15)
    np.testing.assert_array_equal(sdf_spatial_grad(F, x, 0.4), [1.0, 0.0, 0.0])
    assert float(sdf_time_deriv(F, x, 0.4)) == 0.0
    np.testing.assert_array_equal(normal(F, x, 0.4), [1.0, 0.0, 0.0])
    assert float(curvature(F, x, 0.4)) == 0.0
    assert float(eikonal_residual(F, x, 0.4)) == 0.0


def test_time_derivative_of_linear_field():
    F = linear_sdf([0.0, 0.0, 2.0], c=0.1, dt=-0.75)
    np.testing.assert_allclose(sdf_time_deriv(F, np.zeros((4, 3)), 0.3), np.full(4, -0.75), rtol=1e-15)


def test_exact_sphere_curvature():
    for r in (0.25, 0.5, 0.8):
        fn = lambda x: jnp.linalg.norm(x) - r
        for u in unit_vectors(5, 3):
            np.testing.assert_allclose(curvature_of(fn, jnp.asarray(r * u)), 2.0 / r, rtol=1e-12)


def test_fitted_quadratic_curvature():
    a = 0.3
    fn = lambda X: X[:, 0] + a * (X[:, 1] ** 2 + X[:, 2] ** 2)
    grad = lambda X: np.stack([np.ones(len(X)), 2 * a * X[:, 1], 2 * a * X[:, 2]], axis=1)

    def symbolic(X):
        g = np.linalg.norm(grad(X), axis=1)
        return 4 * a / g - 8 * a ** 3 * (X[:, 1] ** 2 + X[:, 2] ** 2) / g ** 3

    rng = np.random.default_rng(0)
    F = fit_implicit(fn, grad, rng.uniform(-0.6, 0.6, (3000, 3)))
    Y = rng.uniform(-0.4, 0.4, (50, 3))
    assert np.max(np.abs(np.asarray(curvature(F, Y, 0.0)) - symbolic(Y))) <= 1e-2


def test_normal_is_unit():
    F = random_implicit(0, beta=10.0)
    X = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    n = np.asarray(normal(F, X, 0.3))
    assert np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) <= 1e-9


def test_degenerate_gradient_raises():
    F = linear_sdf([0.0, 0.0, 0.0], c=0.3)
    with pytest.raises(DegenerateGradientError):
        normal(F, np.zeros(3), 0.0)
    with pytest.raises(DegenerateGradientError):
        curvature(F, np.zeros((2, 3)), 0.0)


def test_field_shape_checks():
    with pytest.raises(ValueError, match="implicit net"):
        ImplicitField(random_implicit(0, m=2).params, m=3)
    with pytest.raises(ValueError, match="velocity net"):
        VelocityField(random_velocity(0, m=1).params, m=2)
    with pytest.raises(ValueError, match="3 coordinates"):
        sdf(random_implicit(0), np.zeros(2), 0.0)


def test_batch_and_single_point_agree():
    F = random_implicit(4, beta=10.0)
    X = np.random.default_rng(1).uniform(-1, 1, (6, 3))
    t = np.linspace(0, 1, 6)
    batch = np.asarray(sdf(F, X, t))
    for i in range(6):
        np.testing.assert_allclose(batch[i], sdf(F, X[i], t[i]), rtol=1e-14)


# -- velocity field ---------------------------------------------------------------------------

def test_constant_velocity_net():
    c = np.array([0.3, -0.2, 0.5])
    Vf = constant_velocity(c)
    X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    np.testing.assert_array_equal(velocity(Vf, X), np.tile(c, (20, 1)))
    np.testing.assert_array_equal(velocity_jacobian(Vf, X), np.zeros((20, 3, 3)))


def test_linear_velocity_operators():
    A = np.array([[0.5, 1.0, 0.0], [-0.2, 0.3, 0.4], [0.1, 0.0, 1.2]])
    Vf = linear_velocity(A)
    X = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    np.testing.assert_allclose(velocity(Vf, X), X @ A.T, rtol=1e-14)
    np.testing.assert_allclose(velocity_jacobian(Vf, X), np.tile(A, (10, 1, 1)), rtol=1e-15)
    np.testing.assert_allclose(velocity_divergence(Vf, X), np.full(10, np.trace(A)), rtol=1e-15)
    np.testing.assert_array_equal(velocity_laplacian(Vf, X), np.zeros((10, 3)))


def test_rotation_is_divergence_free():
    Vf = linear_velocity(ROTATION)
    X = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    np.testing.assert_array_equal(velocity_divergence(Vf, X), np.zeros(10))


def test_divergence_equals_jacobian_trace():
    Vf = random_velocity(3, beta=10.0)
    X = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    J = np.asarray(velocity_jacobian(Vf, X))
    np.testing.assert_array_equal(velocity_divergence(Vf, X), np.trace(J, axis1=1, axis2=2))


def test_velocity_derivatives_match_fd():
    for seed in range(6):
        Vf = random_velocity(seed, beta=[1.0, 10.0, 100.0][seed % 3])
        x = np.random.default_rng(seed).uniform(-1, 1, 3)
        assert rel_err(velocity_jacobian(Vf, x), fd_jacobian(ld_velocity(Vf), x)) <= 1e-6
        assert rel_err(velocity_laplacian(Vf, x), fd_laplacian(ld_velocity(Vf), x)) <= 1e-3


# -- stretch rate ------------------------------------------------------------------------------

def test_stretch_rate_constant_velocity_is_zero():
    F = random_implicit(1, beta=10.0)
    Vf = constant_velocity([0.4, 0.1, -0.3], m=3)
    X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    np.testing.assert_array_equal(stretch_rate(F, Vf, X, 0.5), np.zeros(20))


def test_stretch_rate_rotation_is_zero():
    F = random_implicit(2, beta=10.0)
    X = np.random.default_rng(1).uniform(-1, 1, (20, 3))
    np.testing.assert_allclose(stretch_rate(F, linear_velocity(ROTATION), X, 0.2), np.zeros(20), atol=1e-15)


def test_stretch_rate_axis_stretch():
    F = linear_sdf([1.0, 0.0, 0.0])
    Vf = linear_velocity(np.diag([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(stretch_rate(F, Vf, np.array([0.1, 0.2, 0.3]), 0.0), -1.0, rtol=1e-15)
