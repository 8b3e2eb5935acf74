"""Softplus MLP core: evaluation, input derivatives and parameter gradients.

Differentiation is delegated to JAX, so every quantity here is exact up to
floating point (no finite differences). Nested derivatives compose: a loss
built from :func:`input_jacobian` or :func:`input_laplacian` can itself be
differentiated w.r.t. the parameters with :func:`param_gradient`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

DEFAULT_BETA = 100.0
DEFAULT_FREQUENCIES = 3
CHECKPOINT_FORMAT = "implicit-deform-checkpoint"
CHECKPOINT_VERSION = 1

# Softplus switches to its asymptotes beyond this |beta * z|.
_SOFTPLUS_CUTOFF = 30.0


class NonFiniteError(FloatingPointError):
    """A loss term or gradient evaluated to NaN/inf."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


@dataclass(frozen=True)
class MlpParams:
    """Weights of a Softplus MLP; identity activation on the output layer.

    ``layers`` is a tuple of ``(W, b)`` with ``W`` shaped ``(out, in)``.
    Registered as a JAX pytree with ``beta`` as static metadata.
    """

    layers: tuple
    beta: float = DEFAULT_BETA

    @property
    def dims(self) -> list[int]:
        dims = [int(self.layers[0][0].shape[1])]
        dims.extend(int(W.shape[0]) for W, _ in self.layers)
        return dims

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def validate(self) -> "MlpParams":
        if not self.layers:
            raise ValueError("MlpParams needs at least one layer")
        prev = None
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer {k}: in_dim {W.shape[1]} != previous out_dim {prev}")
            if not (np.all(np.isfinite(np.asarray(W))) and np.all(np.isfinite(np.asarray(b)))):
                raise ValueError(f"layer {k}: non-finite entries")
            prev = W.shape[0]
        return self

    def astype(self, dtype) -> "MlpParams":
        layers = tuple((jnp.asarray(W, dtype), jnp.asarray(b, dtype)) for W, b in self.layers)
        return MlpParams(layers, self.beta)

    def num_parameters(self) -> int:
        return sum(int(W.size + b.size) for W, b in self.layers)


jax.tree_util.register_dataclass(MlpParams, data_fields=["layers"], meta_fields=["beta"])


def init_mlp(key, dims: Sequence[int], beta: float = DEFAULT_BETA, dtype=jnp.float64,
             last_scale: float = 1.0) -> MlpParams:
    """He-normal hidden layers, zero biases; ``last_scale`` shrinks the output layer."""
    layers = []
    keys = jax.random.split(key, len(dims) - 1)
    for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = math.sqrt(2.0 / n_in)
        if k == len(dims) - 2:
            std *= last_scale
        W = std * jax.random.normal(keys[k], (n_out, n_in), dtype=dtype)
        layers.append((W, jnp.zeros((n_out,), dtype=dtype)))
    return MlpParams(tuple(layers), float(beta))


def softplus(z, beta: float = DEFAULT_BETA):
    """ln(1 + exp(beta z)) / beta, with linear / exponential tails past |beta z| > 30."""
    bz = beta * z
    mid = jnp.log1p(jnp.exp(jnp.clip(bz, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF))) / beta
    low = jnp.exp(jnp.minimum(bz, -_SOFTPLUS_CUTOFF)) / beta
    return jnp.where(bz > _SOFTPLUS_CUTOFF, z, jnp.where(bz < -_SOFTPLUS_CUTOFF, low, mid))


def positional_encode(x, m: int = DEFAULT_FREQUENCIES):
    """Lipschitz positional encoding, applied per coordinate on the last axis.

    Each coordinate expands to ``(x, cos(2^k pi x)/(2^k pi), sin(2^k pi x)/(2^k pi))``
    for ``k < m``, the block scaled by ``1/sqrt(2m+1)``. ``m = 0`` is the identity.
    """
    x = jnp.asarray(x)
    if m == 0:
        return x
    freqs = (2.0 ** jnp.arange(m, dtype=x.dtype)) * jnp.pi
    arg = x[..., :, None] * freqs
    cos = jnp.cos(arg) / freqs
    sin = jnp.sin(arg) / freqs
    trig = jnp.stack([cos, sin], axis=-1).reshape(*x.shape, 2 * m)
    block = jnp.concatenate([x[..., :, None], trig], axis=-1)
    return block.reshape(*x.shape[:-1], x.shape[-1] * (2 * m + 1)) / math.sqrt(2 * m + 1)


def encoded_dim(dim: int, m: int) -> int:
    return dim * (2 * m + 1)


def forward(p: MlpParams, x):
    """Evaluate the MLP on a vector or a batch (last axis = features)."""
    x = jnp.asarray(x)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != network in_dim {p.in_dim}")
    h = x
    for W, b in p.layers[:-1]:
        h = softplus(h @ W.T + b, p.beta)
    W, b = p.layers[-1]
    return h @ W.T + b


def softplus_derivs(z, beta: float = DEFAULT_BETA):
    """First and second derivatives of :func:`softplus`."""
    s = jax.nn.sigmoid(beta * z)
    return s, beta * s * (1.0 - s)


def encode_jet(x, m: int = DEFAULT_FREQUENCIES):
    """Encoding of a single point with its Jacobian ``(E, d)`` and unmixed Laplacian ``(E,)``."""
    x = jnp.asarray(x)
    d = x.shape[-1]
    if m == 0:
        return x, jnp.eye(d, dtype=x.dtype), jnp.zeros(d, x.dtype)
    scale = 1.0 / math.sqrt(2 * m + 1)
    freqs = (2.0 ** jnp.arange(m, dtype=x.dtype)) * jnp.pi
    arg = x[:, None] * freqs
    c, s = jnp.cos(arg), jnp.sin(arg)
    value = jnp.concatenate([x[:, None], jnp.stack([c / freqs, s / freqs], -1).reshape(d, 2 * m)], -1)
    slope = jnp.concatenate([jnp.ones((d, 1), x.dtype), jnp.stack([-s, c], -1).reshape(d, 2 * m)], -1)
    curve = jnp.concatenate([jnp.zeros((d, 1), x.dtype),
                             jnp.stack([-freqs * c, -freqs * s], -1).reshape(d, 2 * m)], -1)
    E = d * (2 * m + 1)
    # each encoded feature depends on a single coordinate
    J = (slope[:, :, None] * jnp.eye(d, dtype=x.dtype)[:, None, :]).reshape(E, d)
    return value.reshape(E) * scale, J * scale, curve.reshape(E) * scale


def forward_jet(p: MlpParams, h, J, L):
    """Push value, Jacobian and Laplacian of the input features through the MLP.

    ``h``: ``(in,)``, ``J``: ``(in, d)``, ``L``: ``(in,)`` for one point. Uses
    Lap(sigma(z)) = sigma'(z) Lap(z) + sigma''(z) |grad z|^2 per unit.
    """
    for W, b in p.layers[:-1]:
        z, Jz, Lz = W @ h + b, W @ J, W @ L
        d1, d2 = softplus_derivs(z, p.beta)
        h = softplus(z, p.beta)
        J = d1[:, None] * Jz
        L = d1 * Lz + d2 * jnp.sum(Jz * Jz, axis=1)
    W, b = p.layers[-1]
    return W @ h + b, W @ J, W @ L


def jacobian_of(fn: Callable, x):
    """Forward-mode Jacobian of a vector function at a single point."""
    return jax.jacfwd(fn)(x)


def laplacian_of(fn: Callable, x):
    """Sum of unmixed second derivatives of each output, via nested JVPs."""
    x = jnp.asarray(x)
    eye = jnp.eye(x.shape[-1], dtype=x.dtype)

    def second(e):
        inner = lambda y: jax.jvp(fn, (y,), (e,))[1]
        return jax.jvp(inner, (x,), (e,))[1]

    return jnp.sum(jax.vmap(second)(eye), axis=0)


def input_jacobian(p: MlpParams, x):
    """Exact ``(out_dim, in_dim)`` Jacobian of :func:`forward` at ``x``."""
    return jacobian_of(lambda y: forward(p, y), jnp.asarray(x))


def input_laplacian(p: MlpParams, x):
    """Component-wise Laplacian of the network output at ``x`` (forward jet)."""
    x = jnp.asarray(x)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != network in_dim {p.in_dim}")
    return forward_jet(p, x, jnp.eye(x.shape[-1], dtype=x.dtype), jnp.zeros_like(x))[2]


def param_gradient(loss: Callable, *params, has_aux: bool = False):
    """Gradient of a scalar ``loss(*params)`` w.r.t. every params pytree.

    With ``has_aux=True`` the loss returns ``(value, breakdown)`` where
    ``breakdown`` maps term names to scalars; a non-finite value is then
    reported with the offending term's name. Returns one gradient per
    params argument (a bare gradient when a single argument is given).
    """
    argnums = tuple(range(len(params)))
    if has_aux:
        (value, aux), grads = jax.value_and_grad(loss, argnums=argnums, has_aux=True)(*params)
    else:
        value, grads = jax.value_and_grad(loss, argnums=argnums)(*params)
        aux = {}
    if not np.isfinite(float(value)):
        bad = [k for k, v in aux.items() if not np.all(np.isfinite(np.asarray(v)))]
        term = bad[0] if bad else "loss"
        raise NonFiniteError(f"non-finite loss value (term: {term})", term)
    for i, g in enumerate(grads):
        for path, leaf in jax.tree_util.tree_leaves_with_path(g):
            if not np.all(np.isfinite(np.asarray(leaf))):
                where = f"argument {i}{jax.tree_util.keystr(path)}"
                raise NonFiniteError(f"non-finite gradient at {where}", where)
    return grads[0] if len(grads) == 1 else grads


# -- checkpoints --------------------------------------------------------------

def params_to_arrays(prefix: str, p: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for k, (W, b) in enumerate(p.layers):
        out[f"{prefix}/W{k}"] = np.asarray(W)
        out[f"{prefix}/b{k}"] = np.asarray(b)
    return out


def params_from_arrays(prefix: str, arrays, n_layers: int, beta: float) -> MlpParams:
    layers = tuple(
        (jnp.asarray(arrays[f"{prefix}/W{k}"]), jnp.asarray(arrays[f"{prefix}/b{k}"]))
        for k in range(n_layers)
    )
    return MlpParams(layers, float(beta)).validate()


def save_checkpoint(path, nets: dict[str, MlpParams], encoding: dict[str, int],
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """Write networks (+ optional arrays and JSON metadata) to an ``.npz`` file.

    Layout: ``__header__`` holds a JSON document with ``format``, ``version``
    and, per network, ``dims``, ``beta`` and encoding frequency ``m``. Weights
    live under ``net/<name>/W<k>`` and ``net/<name>/b<k>``.
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "nets": {
            name: {"dims": p.dims, "beta": p.beta, "m": int(encoding[name])}
            for name, p in nets.items()
        },
        "meta": meta or {},
    }
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for name, p in nets.items():
        arrays.update(params_to_arrays(f"net/{name}", p))
    for key, value in (extra_arrays or {}).items():
        arrays[f"extra/{key}"] = np.asarray(value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(nets, encoding, extra_arrays, meta)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(str(arrays["__header__"]))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    nets, encoding = {}, {}
    for name, info in header["nets"].items():
        nets[name] = params_from_arrays(f"net/{name}", arrays, len(info["dims"]) - 1, info["beta"])
        encoding[name] = int(info["m"])
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return nets, encoding, extra, header["meta"]
