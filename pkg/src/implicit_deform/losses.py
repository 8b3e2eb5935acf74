"""Training residuals and the weighted total loss.

Integrals over the domain are Monte-Carlo means over the sampled batches.
Every function here is traceable, so the total loss can be jitted and
differentiated w.r.t. both networks.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import jax
import jax.numpy as jnp

from .fields import (
    ImplicitField,
    VelocityField,
    safe_normal,
    sdf_derivs_point,
    sdf_point,
    stretch_from,
    velocity_and_jacobian_point,
    velocity_jet_point,
)
from .flow import euler_endpoint
from .sampler import validate_correspondences

MLSE = "mlse"
OLSE = "olse"


@dataclass(frozen=True)
class LossWeights:
    lam_f: float = 100.0
    lam_v: float = 20.0
    lam_m: float = 200.0
    lam_l: float = 10.0
    lam_div: float = 0.0
    lam_n: float = 1.0
    alpha: float = 0.01
    gamma: float = 1.0
    eikonal_mode: str = MLSE

    def __post_init__(self):
        if self.eikonal_mode not in (MLSE, OLSE):
            raise ValueError(f"eikonal_mode must be {MLSE!r} or {OLSE!r}")
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if f.name != "eikonal_mode" and isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be nonnegative")


jax.tree_util.register_dataclass(
    LossWeights,
    data_fields=["lam_f", "lam_v", "lam_m", "lam_l", "lam_div", "lam_n", "alpha", "gamma"],
    meta_fields=["eikonal_mode"],
)


def _safe_norm(v, axis=-1):
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = jnp.sum(v * v, axis=axis)
    pos = sq > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, sq, 1.0)), 0.0)


def _cast(F, x):
    return jnp.asarray(x, dtype=F.params.layers[0][0].dtype)


# -- pointwise kernels ---------------------------------------------------------------

def _spacetime_point(F: ImplicitField, Vf: VelocityField, x, t):
    f, gx, ft = sdf_derivs_point(F, x, t)
    v, J = velocity_and_jacobian_point(Vf, x)
    n, ok = safe_normal(gx)
    R = jnp.where(ok, stretch_from(J, n), 0.0)
    lse = ft + v @ gx
    return f, gx, lse, R, ok


def spacetime_terms(F: ImplicitField, Vf: VelocityField, X, t):
    """Batched ``f, grad f, LSE residual, R, nondegenerate mask``."""
    X = _cast(F, X)
    t = jnp.broadcast_to(_cast(F, t), X.shape[:1])
    return jax.vmap(_spacetime_point, (None, None, 0, 0))(F, Vf, X, t)


def mlse_residual(F: ImplicitField, Vf: VelocityField, X, t, lam_l: float = 10.0):
    """df/dt + V . grad f + lam_l f R; R is taken as 0 where |grad f| <= eps.

    Returns ``(residual, n_degenerate)``.
    """
    f, _, lse, R, ok = spacetime_terms(F, Vf, jnp.atleast_2d(X), t)
    return lse + lam_l * f * R, jnp.sum(~ok)


def olse_residuals(F: ImplicitField, Vf: VelocityField, X, t):
    """(LSE residual, Eikonal residual | |grad f| - 1 |) per sample."""
    _, gx, lse, _, _ = spacetime_terms(F, Vf, jnp.atleast_2d(X), t)
    return lse, jnp.abs(_safe_norm(gx) - 1.0)


def implicit_loss(F, Vf, X, t, w: LossWeights):
    """L_f for the configured mode, plus its components."""
    f, gx, lse, R, ok = spacetime_terms(F, Vf, X, t)
    if w.eikonal_mode == MLSE:
        value = jnp.mean(jnp.abs(lse + w.lam_l * f * R))
        parts = {"mlse": value}
    else:
        lse_term = jnp.mean(jnp.abs(lse))
        eik_term = jnp.mean(jnp.abs(_safe_norm(gx) - 1.0))
        value = lse_term + eik_term
        parts = {"lse": lse_term, "eikonal": eik_term}
    parts["degenerate"] = jnp.sum(~ok).astype(value.dtype)
    return value, parts


def _velocity_point_terms(Vf, x, alpha, gamma):
    v, J, lap = velocity_jet_point(Vf, x)
    return _safe_norm(-alpha * lap + gamma * v), jnp.trace(J)


def velocity_loss(Vf: VelocityField, X, w: LossWeights):
    """mean ||(-alpha Lap + gamma I) V|| + lam_div mean |div V|; returns (value, parts)."""
    X = jnp.atleast_2d(_cast(Vf, X))
    if X.shape[0] == 0:
        raise ValueError("velocity batch is empty")
    smooth, div = jax.vmap(_velocity_point_terms, (None, 0, None, None))(Vf, X, w.alpha, w.gamma)
    smooth_term = jnp.mean(smooth)
    div_term = jnp.mean(jnp.abs(div))
    return smooth_term + w.lam_div * div_term, {"smooth": smooth_term, "divergence": div_term}


def _sdf_batch(F, X, t):
    X = _cast(F, X)
    return jax.vmap(sdf_point, (None, 0, None))(F, X, _cast(F, t))


def matching_loss(F: ImplicitField, Vf: VelocityField, P0, P1, src, tgt, T: int):
    """mean|f(P0,0)| + mean|f(P1,1)| + mean||phi(src,1) - tgt||; returns (value, parts).

    ``src``/``tgt`` are the paired points ``P0[i]``, ``P1[j]``; an empty pair
    set contributes 0.
    """
    fit0 = jnp.mean(jnp.abs(_sdf_batch(F, P0, 0.0)))
    fit1 = jnp.mean(jnp.abs(_sdf_batch(F, P1, 1.0)))
    if src.shape[0]:
        end = euler_endpoint(Vf, _cast(Vf, src), T)
        traj = jnp.mean(_safe_norm(end - _cast(Vf, tgt)))
    else:
        traj = jnp.zeros((), fit0.dtype)
    return fit0 + fit1 + traj, {"fit0": fit0, "fit1": fit1, "trajectory": traj}


def normal_loss(F: ImplicitField, P, N, t: float):
    """mean |1 - <grad f / |grad f|, n>| over an oriented cloud."""
    if N is None:
        raise ValueError("normal loss needs per-point normals")
    P = _cast(F, P)
    g = jax.vmap(jax.grad(sdf_point, argnums=1), (None, 0, None))(F, P, _cast(F, t))
    n, _ = safe_normal(g)
    return jnp.mean(jnp.abs(1.0 - jnp.sum(n * _cast(F, N), axis=-1)))


def matching_correspondences(P0, P1, C):
    """Paired points ``(P0[i], P1[j])`` for rows ``(i, j)`` of ``C``; indices are checked."""
    C = validate_correspondences(C, len(P0), len(P1))
    return jnp.asarray(P0)[C[:, 0]], jnp.asarray(P1)[C[:, 1]]


def total_loss(F: ImplicitField, Vf: VelocityField, batch: dict, w: LossWeights, T: int):
    """lam_f L_f + lam_v L_v + lam_m L_m with a per-term breakdown.

    ``batch`` keys: ``x``/``t`` (space-time samples), ``xv`` (velocity
    samples), ``p0``/``p1`` (cloud samples), ``src``/``tgt`` (paired points),
    optional ``n0``/``n1`` normals for ``p0``/``p1``. With normals, the normal
    loss at t=0 and t=1 (weighted by ``lam_n``) joins L_m.
    """
    L_f, f_parts = implicit_loss(F, Vf, batch["x"], batch["t"], w)
    L_v, v_parts = velocity_loss(Vf, batch["xv"], w)
    L_m, m_parts = matching_loss(F, Vf, batch["p0"], batch["p1"], batch["src"], batch["tgt"], T)
    if batch.get("n0") is not None and batch.get("n1") is not None:
        nrm = normal_loss(F, batch["p0"], batch["n0"], 0.0) + normal_loss(F, batch["p1"], batch["n1"], 1.0)
        m_parts["normal"] = nrm
        L_m = L_m + w.lam_n * nrm
    total = w.lam_f * L_f + w.lam_v * L_v + w.lam_m * L_m
    breakdown = {"total": total, "L_f": L_f, "L_v": L_v, "L_m": L_m, **f_parts, **v_parts, **m_parts}
    return total, breakdown
