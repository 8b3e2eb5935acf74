"""Differential geometry of the two networks.

``ImplicitField`` is the time-varying SDF f(x, t); spatial coordinates are
positionally encoded and time enters raw as the last input.
``VelocityField`` is the stationary velocity V(x).

Public operators take a single point ``x`` of shape ``(3,)`` (and scalar
``t``) or a batch ``(n, 3)`` (and ``(n,)`` or scalar ``t``).
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import MlpParams, encode_jet, encoded_dim, forward, forward_jet, jacobian_of, positional_encode

GRAD_EPS = 1e-6


class DegenerateGradientError(ValueError):
    """|grad f| fell below the threshold, so the normal is undefined."""


def _concrete(params) -> bool:
    # JAX rebuilds pytrees with placeholder leaves while tracing
    return isinstance(params, MlpParams) and all(hasattr(W, "shape") for W, _ in params.layers)


@dataclass(frozen=True)
class ImplicitField:
    params: MlpParams
    m: int = 3

    def __post_init__(self):
        if not _concrete(self.params):
            return
        if self.params.in_dim != encoded_dim(3, self.m) + 1 or self.params.out_dim != 1:
            raise ValueError(
                f"implicit net must map {encoded_dim(3, self.m) + 1} -> 1, got "
                f"{self.params.in_dim} -> {self.params.out_dim}"
            )


@dataclass(frozen=True)
class VelocityField:
    params: MlpParams
    m: int = 3

    def __post_init__(self):
        if not _concrete(self.params):
            return
        if self.params.in_dim != encoded_dim(3, self.m) or self.params.out_dim != 3:
            raise ValueError(
                f"velocity net must map {encoded_dim(3, self.m)} -> 3, got "
                f"{self.params.in_dim} -> {self.params.out_dim}"
            )


jax.tree_util.register_dataclass(ImplicitField, data_fields=["params"], meta_fields=["m"])
jax.tree_util.register_dataclass(VelocityField, data_fields=["params"], meta_fields=["m"])


# -- single-point kernels (composed and vmapped by losses / flow) --------------

def sdf_point(F: ImplicitField, x, t):
    h = jnp.concatenate([positional_encode(x, F.m), jnp.reshape(t, (1,)).astype(x.dtype)])
    return forward(F.params, h)[0]


def sdf_derivs_point(F: ImplicitField, x, t):
    """(f, grad_x f, df/dt) at one space-time point."""
    f, (gx, gt) = jax.value_and_grad(sdf_point, argnums=(1, 2))(F, x, t)
    return f, gx, gt


def velocity_point(Vf: VelocityField, x):
    return forward(Vf.params, positional_encode(x, Vf.m))


def velocity_and_jacobian_point(Vf: VelocityField, x):
    fn = lambda y: (velocity_point(Vf, y),) * 2
    J, v = jax.jacfwd(fn, has_aux=True)(x)
    return v, J


def velocity_jet_point(Vf: VelocityField, x):
    """(V, grad V, Lap V) at one point in a single forward pass."""
    return forward_jet(Vf.params, *encode_jet(x, Vf.m))


def velocity_laplacian_point(Vf: VelocityField, x):
    return velocity_jet_point(Vf, x)[2]


def safe_normal(g, eps: float = GRAD_EPS):
    """Unit normal plus a mask that is False where |g| <= eps (normal set to 0)."""
    norm = jnp.linalg.norm(g, axis=-1, keepdims=True)
    ok = norm > eps
    n = jnp.where(ok, g / jnp.where(ok, norm, 1.0), 0.0)
    return n, ok[..., 0]


def stretch_from(J, n):
    """R = -n^T J n (batched over leading axes)."""
    return -jnp.einsum("...i,...ij,...j->...", n, J, n)


def curvature_of(fn, x):
    """Divergence of grad(fn)/|grad(fn)| from the gradient and Hessian of ``fn``."""
    g = jax.grad(fn)(x)
    H = jax.hessian(fn)(x)
    norm = jnp.linalg.norm(g)
    return jnp.trace(H) / norm - g @ H @ g / norm**3


# -- public batched API ---------------------------------------------------------

def _prep(x, t=None):
    x = jnp.asarray(x)
    if x.shape[-1] != 3:
        raise ValueError(f"points must have 3 coordinates, got shape {x.shape}")
    single = x.ndim == 1
    xb = x[None] if single else x
    if t is None:
        return xb, None, single
    tb = jnp.broadcast_to(jnp.asarray(t, dtype=xb.dtype), xb.shape[:1])
    return xb, tb, single


def _out(value, single):
    return value[0] if single else value


def sdf(F: ImplicitField, x, t):
    xb, tb, single = _prep(x, t)
    return _out(jax.vmap(sdf_point, (None, 0, 0))(F, xb, tb), single)


def sdf_spatial_grad(F: ImplicitField, x, t):
    xb, tb, single = _prep(x, t)
    g = jax.vmap(jax.grad(sdf_point, argnums=1), (None, 0, 0))(F, xb, tb)
    return _out(g, single)


def sdf_time_deriv(F: ImplicitField, x, t):
    xb, tb, single = _prep(x, t)
    g = jax.vmap(jax.grad(sdf_point, argnums=2), (None, 0, 0))(F, xb, tb)
    return _out(g, single)


def eikonal_residual(F: ImplicitField, x, t):
    """Pointwise | |grad f| - 1 |."""
    g = sdf_spatial_grad(F, x, t)
    return jnp.abs(jnp.linalg.norm(g, axis=-1) - 1.0)


def normal(F: ImplicitField, x, t, eps: float = GRAD_EPS):
    g = sdf_spatial_grad(F, x, t)
    norm = np.linalg.norm(np.asarray(g), axis=-1)
    if np.any(norm <= eps):
        raise DegenerateGradientError(f"|grad f| = {norm.min():.3e} <= {eps:g}")
    return g / jnp.asarray(norm)[..., None]


def curvature(F: ImplicitField, x, t, eps: float = GRAD_EPS):
    xb, tb, single = _prep(x, t)
    norm = np.linalg.norm(np.asarray(sdf_spatial_grad(F, xb, tb)), axis=-1)
    if np.any(norm <= eps):
        raise DegenerateGradientError(f"|grad f| = {norm.min():.3e} <= {eps:g}")
    k = jax.vmap(lambda y, s: curvature_of(lambda z: sdf_point(F, z, s), y))(xb, tb)
    return _out(k, single)


def velocity(Vf: VelocityField, x):
    xb, _, single = _prep(x)
    return _out(jax.vmap(velocity_point, (None, 0))(Vf, xb), single)


def velocity_jacobian(Vf: VelocityField, x):
    xb, _, single = _prep(x)
    J = jax.vmap(lambda y: jacobian_of(lambda z: velocity_point(Vf, z), y))(xb)
    return _out(J, single)


def velocity_divergence(Vf: VelocityField, x):
    return jnp.trace(velocity_jacobian(Vf, x), axis1=-2, axis2=-1)


def velocity_laplacian(Vf: VelocityField, x):
    xb, _, single = _prep(x)
    return _out(jax.vmap(velocity_laplacian_point, (None, 0))(Vf, xb), single)


def stretch_rate(F: ImplicitField, Vf: VelocityField, x, t, eps: float = GRAD_EPS):
    n = normal(F, x, t, eps)
    return stretch_from(velocity_jacobian(Vf, x), n)
