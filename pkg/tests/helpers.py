"""Independent oracles and hand-built networks shared by the tests."""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np

from implicit_deform.diffnet import MlpParams, encoded_dim, init_mlp
from implicit_deform.fields import ImplicitField, VelocityField


def random_mlp(seed, dims, beta=100.0, bias_scale=0.3):
    """He-init MLP with nonzero biases, so every layer has curvature to test."""
    p = init_mlp(jax.random.PRNGKey(seed), dims, beta)
    rng = np.random.default_rng(seed)
    layers = tuple((W, jnp.asarray(bias_scale * rng.standard_normal(b.shape))) for W, b in p.layers)
    return MlpParams(layers, beta)


def linear_net(W, b=None, beta=100.0):
    W = jnp.asarray(W, dtype=jnp.float64)
    b = jnp.zeros(W.shape[0]) if b is None else jnp.asarray(b, dtype=jnp.float64)
    return MlpParams(((W, b),), beta)


def linear_sdf(w, c=0.0, dt=0.0):
    """f(x, t) = w . x + dt * t + c, with m = 0."""
    return ImplicitField(linear_net([list(w) + [dt]], [c]), m=0)


def linear_velocity(A, c=(0.0, 0.0, 0.0)):
    """V(x) = A x + c, with m = 0."""
    return VelocityField(linear_net(A, c), m=0)


def constant_velocity(c, m=3, width=8, seed=0):
    """Nonlinear net whose output layer is zeroed: V = c everywhere."""
    p = random_mlp(seed, [encoded_dim(3, m), width, 3])
    (W0, b0), (W1, _) = p.layers
    return VelocityField(MlpParams(((W0, b0), (jnp.zeros_like(W1), jnp.asarray(c, float))), p.beta), m)


def random_implicit(seed, m=2, width=8, layers=3, beta=100.0):
    return ImplicitField(random_mlp(seed, [encoded_dim(3, m) + 1] + [width] * (layers - 1) + [1], beta), m)


def random_velocity(seed, m=2, width=8, layers=3, beta=100.0, scale=1.0):
    p = random_mlp(seed, [encoded_dim(3, m)] + [width] * (layers - 1) + [3], beta)
    if scale != 1.0:
        W, b = p.layers[-1]
        p = MlpParams(p.layers[:-1] + ((W * scale, b * scale),), p.beta)
    return VelocityField(p, m)


ROTATION = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


# -- extended-precision reference evaluator ------------------------------------------

LD = np.longdouble


def ld_softplus(z, beta):
    bz = beta * z
    with np.errstate(over="ignore"):
        return np.where(bz > 30, z, np.log1p(np.exp(np.minimum(bz, 30))) / beta)


def ld_encode(x, m):
    x = np.asarray(x, dtype=LD)
    if m == 0:
        return x
    parts = []
    for xi in x:
        parts.append(xi)
        for k in range(m):
            w = LD(2) ** k * LD(np.pi)
            parts += [np.cos(w * xi) / w, np.sin(w * xi) / w]
    return np.array(parts, dtype=LD) / np.sqrt(LD(2 * m + 1))


def ld_forward(p: MlpParams):
    """Plain numpy ``longdouble`` re-implementation of the MLP (no JAX)."""
    layers = [(np.asarray(W).astype(LD), np.asarray(b).astype(LD)) for W, b in p.layers]
    beta = LD(p.beta)

    def fn(x):
        h = np.asarray(x, dtype=LD)
        for W, b in layers[:-1]:
            h = ld_softplus(W @ h + b, beta)
        W, b = layers[-1]
        return W @ h + b

    return fn


def ld_sdf(F: ImplicitField):
    net = ld_forward(F.params)
    return lambda x, t: net(np.concatenate([ld_encode(x, F.m), [LD(t)]]))[0]


def ld_velocity(Vf: VelocityField):
    net = ld_forward(Vf.params)
    return lambda x: net(ld_encode(x, Vf.m))


# -- finite differences --------------------------------------------------------------

def fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=LD)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_laplacian(fn, x, h=3e-4):
    """Richardson-extrapolated central second differences, summed over axes."""
    x = np.asarray(x, dtype=LD)
    f0 = np.asarray(fn(x))

    def second(step):
        total = 0.0
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = step
            total = total + (np.asarray(fn(x + e)) - 2 * f0 + np.asarray(fn(x - e))) / step ** 2
        return total

    return (4 * second(h / 2) - second(h)) / 3


def fd_param_grad(loss, params, n_coords=32, h=1e-6, seed=0):
    """Central differences of ``loss(params)`` over a random subset of flat coordinates.

    Returns ``(indices, fd_values)`` in the order of ``jax.flatten_util``'s vector.
    """
    from jax.flatten_util import ravel_pytree

    flat, unravel = ravel_pytree(params)
    flat = np.asarray(flat, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    out = []
    for i in idx:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out.append((float(loss(unravel(jnp.asarray(up)))) - float(loss(unravel(jnp.asarray(dn))))) / (2 * h))
    return idx, np.array(out)


def flat_grad(g):
    from jax.flatten_util import ravel_pytree

    return np.asarray(ravel_pytree(g)[0])


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def fit_implicit(fn, grad_fn, X, width=128, beta=1.0, m=0, seed=0, ridge=1e-10, drift=None):
    """Two-layer implicit net fitted to values and gradients of ``fn`` at ``X``.

    The hidden layer is random and frozen; the output layer solves a ridge
    least-squares problem, so the fit is deterministic and fast. Time is
    ignored unless ``drift`` = c is given (needs m = 0): the time column is
    then set so the net computes g(x - c t) exactly.
    """
    from implicit_deform.diffnet import positional_encode, softplus

    din = encoded_dim(3, m) + 1
    rng = np.random.default_rng(seed)
    W0 = rng.standard_normal((width, din)) * 2.0
    W0[:, -1] = 0.0
    b0 = rng.uniform(-1.5, 1.5, width)
    Wx, b = jnp.asarray(W0[:, :-1]), jnp.asarray(b0)
    if drift is not None:
        assert m == 0
        W0[:, -1] = -W0[:, :3] @ np.asarray(drift, dtype=np.float64)
    feats = lambda x: softplus(Wx @ positional_encode(x, m) + b, beta)

    Xj = jnp.asarray(X)
    H = np.asarray(jax.vmap(feats)(Xj))
    G = np.asarray(jax.vmap(jax.jacfwd(feats))(Xj))  # (n, width, 3)
    A = np.vstack([np.column_stack([H, np.ones(len(H))]),
                   np.column_stack([G.transpose(0, 2, 1).reshape(-1, width), np.zeros(3 * len(H))])])
    y = np.concatenate([fn(np.asarray(X)), grad_fn(np.asarray(X)).reshape(-1)])
    coef = np.linalg.solve(A.T @ A + ridge * np.eye(width + 1), A.T @ y)
    out = (jnp.asarray(coef[None, :width]), jnp.asarray(coef[width:]))
    return ImplicitField(MlpParams(((jnp.asarray(W0), jnp.asarray(b0)), out), beta), m)


# -- acceptance reporting ----------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def verdict(number, name, ok, detail):
    """Record one PASS/FAIL line for the summary and echo it."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
