"""Joint optimisation of the velocity and implicit networks."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import (
    MlpParams,
    encoded_dim,
    init_mlp,
    load_checkpoint,
    positional_encode,
    save_checkpoint,
    softplus,
)
from .fields import ImplicitField, VelocityField
from .losses import MLSE, OLSE, LossWeights, total_loss
from .sampler import NormalizationTransform, sample_space, sample_time

logger = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8
NAN_PATIENCE = 10

METRIC_TERMS = (
    "total", "L_f", "L_v", "L_m", "mlse", "lse", "eikonal", "smooth", "divergence",
    "fit0", "fit1", "trajectory", "normal", "degenerate",
)
METRIC_COLUMNS = ("epoch", "lr", "lam_f", "lam_v", "lam_m", "lam_l", "lam_div") + METRIC_TERMS + ("skipped",)


class TrainingDiverged(FloatingPointError):
    """Loss stayed non-finite too long; ``state`` is the last finite state."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    epochs: int = 10000
    batch_size: int = 4000
    velocity_batch: int | None = None
    cloud_batch: int | None = None
    pair_batch: int | None = None
    lr: float = 0.005
    lr_decay: float = 0.5
    lr_decay_interval: int = 2000
    warmup_epochs: int = 2000
    ramp_end: int = 5000
    velocity_freeze_epoch: int = 8000
    lam_f: float = 100.0
    lam_v: float = 20.0
    lam_m: float = 200.0
    lam_m_warmup: float = 100.0
    lam_l: float = 10.0
    lam_div: float = 0.0
    lam_n: float = 1.0
    alpha: float = 0.01
    gamma: float = 1.0
    eikonal_mode: str = MLSE
    T: int = 25
    m: int = 3
    beta: float = 100.0
    implicit_width: int = 512
    implicit_layers: int = 8
    velocity_width: int = 256
    velocity_layers: int = 8
    sphere_radius: float = 0.5
    sigma_near: float = 0.05
    rho_near: float = 0.5
    time_jitter: float = 1.0
    grad_clip: float = 10.0
    strict_freeze: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        if not self.warmup_epochs < self.ramp_end <= self.epochs:
            raise ValueError("need warmup_epochs < ramp_end <= epochs")
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay_interval <= 0 or self.batch_size <= 0:
            raise ValueError("rates, intervals and batch sizes must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.sphere_radius < 1:
            raise ValueError("sphere_radius must lie in (0, 1)")
        if self.eikonal_mode not in (MLSE, OLSE):
            raise ValueError(f"eikonal_mode must be {MLSE!r} or {OLSE!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.lam_f, self.lam_v, self.lam_m, self.lam_l, self.lam_div, self.lam_n,
                           self.alpha, self.gamma, self.eikonal_mode)

    def scaled(self, epochs: int, **overrides) -> "TrainConfig":
        """Copy with every epoch-denominated setting rescaled to ``epochs``."""
        s = epochs / self.epochs
        return dataclasses.replace(
            self,
            epochs=epochs,
            warmup_epochs=max(1, int(round(self.warmup_epochs * s))),
            ramp_end=max(2, int(round(self.ramp_end * s))),
            velocity_freeze_epoch=int(round(self.velocity_freeze_epoch * s)),
            lr_decay_interval=max(1, int(round(self.lr_decay_interval * s))),
            **overrides,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def jnp_dtype(self):
        return jnp.float32 if self.dtype == "float32" else jnp.float64


# -- schedules -------------------------------------------------------------------

def lambda_schedule(k: int, cfg: TrainConfig) -> tuple[float, float, float]:
    """Resolved (lam_f, lam_v, lam_m) at epoch ``k``."""
    if k < cfg.warmup_epochs:
        lam_f = 0.0
    elif k < cfg.ramp_end:
        lam_f = (k - cfg.warmup_epochs) / (cfg.ramp_end - cfg.warmup_epochs) * cfg.lam_f
    else:
        lam_f = cfg.lam_f
    lam_v = 0.0 if k > cfg.velocity_freeze_epoch else cfg.lam_v
    lam_m = cfg.lam_m_warmup if k < cfg.warmup_epochs else cfg.lam_m
    return float(lam_f), float(lam_v), float(lam_m)


def learning_rate(k: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** (k // cfg.lr_decay_interval)


# -- Adam ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: object
    v: object
    count: object


jax.tree_util.register_dataclass(AdamState, data_fields=["m", "v", "count"], meta_fields=[])


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, zeros, jnp.zeros((), jnp.int64))


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update; returns ``(params, state)``."""
    count = state.count + 1
    m = jax.tree_util.tree_map(lambda a, g: ADAM_B1 * a + (1 - ADAM_B1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda a, g: ADAM_B2 * a + (1 - ADAM_B2) * g * g, state.v, grads)
    c1 = 1 - ADAM_B1 ** count
    c2 = 1 - ADAM_B2 ** count
    new = jax.tree_util.tree_map(
        lambda p, a, b: p - (lr * (a / c1) / (jnp.sqrt(b / c2) + ADAM_EPS)).astype(p.dtype), params, m, v
    )
    return new, AdamState(m, v, count)


def _all_finite(tree):
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.all(jnp.stack([jnp.all(jnp.isfinite(x)) for x in leaves]))


def _global_norm(tree):
    return jnp.sqrt(sum(jnp.sum(x.astype(jnp.float64) ** 2) for x in jax.tree_util.tree_leaves(tree)))


def _select(flag, a, b):
    return jax.tree_util.tree_map(lambda x, y: jnp.where(flag, x, y), a, b)


# -- initialisation ------------------------------------------------------------------

def implicit_dims(cfg: TrainConfig) -> list[int]:
    return [encoded_dim(3, cfg.m) + 1] + [cfg.implicit_width] * cfg.implicit_layers + [1]


def velocity_dims(cfg: TrainConfig) -> list[int]:
    return [encoded_dim(3, cfg.m)] + [cfg.velocity_width] * cfg.velocity_layers + [3]


def sphere_init(cfg: TrainConfig, r: float | None = None, key=None) -> MlpParams:
    """Geometric initialisation: f(x, t) ~ |x| - r, independent of t.

    Only the raw-coordinate inputs of the first layer get weights (scaled to
    undo the encoding's 1/sqrt(2m+1)); harmonic and time inputs start at 0.
    """
    r = cfg.sphere_radius if r is None else r
    if not 0 < r < 1:
        raise ValueError("sphere radius must lie in (0, 1)")
    key = jax.random.PRNGKey(cfg.seed) if key is None else key
    dims = implicit_dims(cfg)
    keys = jax.random.split(key, len(dims))
    dtype = cfg.jnp_dtype
    block = 2 * cfg.m + 1
    layers = []
    for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        if k == len(dims) - 2:
            W = math.sqrt(math.pi) / math.sqrt(n_in) + 1e-4 * jax.random.normal(keys[k], (n_out, n_in), dtype)
            b = jnp.full((n_out,), -r, dtype)
        elif k == 0:
            W = jnp.zeros((n_out, n_in), dtype)
            raw = jax.random.normal(keys[k], (n_out, 3), dtype) * math.sqrt(2.0 / n_out) * math.sqrt(block)
            W = W.at[:, jnp.arange(3) * block].set(raw)
            b = jnp.zeros((n_out,), dtype)
        else:
            W = jax.random.normal(keys[k], (n_out, n_in), dtype) * math.sqrt(2.0 / n_out)
            b = jnp.zeros((n_out,), dtype)
        layers.append((W, b))
    return calibrate_sphere(MlpParams(tuple(layers), cfg.beta), cfg.m, r, seed=cfg.seed)


def calibrate_sphere(p: MlpParams, m: int, r: float, n: int = 4000, ridge: float = 1e-3,
                     seed: int = 0) -> MlpParams:
    """Refit the output layer so f and grad f match |x| - r and x/|x| in the least-squares sense.

    Both targets are linear in the output weights, so this is one ridge
    solve (pulled toward the geometric weights). It tightens the sphere at
    narrow widths where the random features alone are too noisy.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = u * rng.uniform(0.05, 1.2, (n, 1))
    body = p.layers[:-1]

    def hidden(y):
        h = jnp.concatenate([positional_encode(y, m), jnp.zeros(1, y.dtype)])
        for W, b in body:
            h = softplus(h @ W.T + b, p.beta)
        return h

    xj = jnp.asarray(x, dtype=p.layers[0][0].dtype)
    H = np.asarray(jax.vmap(hidden)(xj), dtype=np.float64)
    JH = np.asarray(jax.vmap(jax.jacfwd(hidden))(xj), dtype=np.float64)
    radius = np.linalg.norm(x, axis=1)
    A = np.concatenate([
        np.concatenate([H, np.ones((n, 1))], axis=1),
        np.concatenate([JH.transpose(0, 2, 1).reshape(3 * n, -1), np.zeros((3 * n, 1))], axis=1),
    ])
    y = np.concatenate([radius - r, (x / radius[:, None]).reshape(-1)])
    W, b = p.layers[-1]
    w0 = np.concatenate([np.asarray(W, dtype=np.float64)[0], np.asarray(b, dtype=np.float64)])
    sol = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ y + ridge * w0)
    dtype = W.dtype
    last = (jnp.asarray(sol[None, :-1], dtype), jnp.asarray(sol[-1:], dtype))
    return MlpParams(tuple(body) + (last,), p.beta)


def velocity_init(cfg: TrainConfig, key=None) -> MlpParams:
    """Small random velocity net (output layer shrunk so V starts near 0)."""
    key = jax.random.PRNGKey(cfg.seed + 1) if key is None else key
    return init_mlp(key, velocity_dims(cfg), cfg.beta, cfg.jnp_dtype, last_scale=0.1)


# -- state & checkpoints ----------------------------------------------------------------

@dataclass
class TrainState:
    F: ImplicitField
    Vf: VelocityField
    opt_f: AdamState
    opt_v: AdamState
    epoch: int
    config: TrainConfig
    transform: NormalizationTransform = field(default_factory=NormalizationTransform.identity)


def initial_state(cfg: TrainConfig, transform: NormalizationTransform | None = None) -> TrainState:
    F = ImplicitField(sphere_init(cfg), cfg.m)
    Vf = VelocityField(velocity_init(cfg), cfg.m)
    return TrainState(F, Vf, adam_init(F.params), adam_init(Vf.params), 0, cfg,
                      transform or NormalizationTransform.identity())


def _moment_arrays(prefix: str, opt: AdamState) -> dict:
    out = {f"{prefix}/count": np.asarray(opt.count)}
    for name, tree in (("m", opt.m), ("v", opt.v)):
        for i, leaf in enumerate(jax.tree_util.tree_leaves(tree)):
            out[f"{prefix}/{name}{i}"] = np.asarray(leaf)
    return out


def _moments_from(prefix: str, arrays: dict, like) -> AdamState:
    treedef = jax.tree_util.tree_structure(like)
    n = treedef.num_leaves
    m = jax.tree_util.tree_unflatten(treedef, [jnp.asarray(arrays[f"{prefix}/m{i}"]) for i in range(n)])
    v = jax.tree_util.tree_unflatten(treedef, [jnp.asarray(arrays[f"{prefix}/v{i}"]) for i in range(n)])
    return AdamState(m, v, jnp.asarray(arrays[f"{prefix}/count"]))


def save_state(path, state: TrainState) -> Path:
    extra = {
        **_moment_arrays("opt_f", state.opt_f),
        **_moment_arrays("opt_v", state.opt_v),
        "center": state.transform.center,
    }
    meta = {
        "epoch": state.epoch,
        "config": state.config.to_dict(),
        "scale": state.transform.scale,
        "seed": state.config.seed,
    }
    return save_checkpoint(path, {"implicit": state.F.params, "velocity": state.Vf.params},
                           {"implicit": state.F.m, "velocity": state.Vf.m}, extra, meta)


def load_state(path) -> TrainState:
    nets, enc, extra, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    F = ImplicitField(nets["implicit"], enc["implicit"])
    Vf = VelocityField(nets["velocity"], enc["velocity"])
    tf = NormalizationTransform(np.asarray(extra["center"], dtype=np.float64), float(meta["scale"]))
    return TrainState(F, Vf, _moments_from("opt_f", extra, F.params), _moments_from("opt_v", extra, Vf.params),
                      int(meta["epoch"]), cfg, tf)


# -- batches -------------------------------------------------------------------------------

def _subsample(rng, X, n):
    if n is None or n >= len(X):
        return np.arange(len(X))
    return rng.choice(len(X), size=n, replace=False)


def make_batch(epoch: int, cfg: TrainConfig, P0, P1, C, N0=None, N1=None) -> dict:
    """Deterministic batch for ``epoch`` (its generator is seeded by ``(seed, epoch)``)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    n = cfg.batch_size
    x = sample_space(rng, n, P0, P1, cfg.sigma_near, cfg.rho_near)
    t = rng.permutation(sample_time(rng, n, cfg.T, cfg.time_jitter))
    xv = sample_space(rng, cfg.velocity_batch or n, P0, P1, cfg.sigma_near, cfg.rho_near)
    i0 = _subsample(rng, P0, cfg.cloud_batch)
    i1 = _subsample(rng, P1, cfg.cloud_batch)
    ic = _subsample(rng, C, cfg.pair_batch)
    dt = np.float32 if cfg.dtype == "float32" else np.float64
    batch = {
        "x": x.astype(dt), "t": t.astype(dt), "xv": xv.astype(dt),
        "p0": P0[i0].astype(dt), "p1": P1[i1].astype(dt),
        "src": P0[C[ic, 0]].astype(dt), "tgt": P1[C[ic, 1]].astype(dt),
    }
    if N0 is not None and N1 is not None:
        batch["n0"] = N0[i0].astype(dt)
        batch["n1"] = N1[i1].astype(dt)
    return batch


# -- the step --------------------------------------------------------------------------------

def _make_step(T: int, grad_clip: float):
    def loss_fn(Fp, Vp, F, Vf, batch, w):
        return total_loss(ImplicitField(Fp, F.m), VelocityField(Vp, Vf.m), batch, w, T)

    grad_fn = jax.value_and_grad(loss_fn, argnums=(0, 1), has_aux=True)

    @jax.jit
    def step(F, Vf, opt_f, opt_v, batch, w, lr, update_f, update_v):
        (_, parts), (gF, gV) = grad_fn(F.params, Vf.params, F, Vf, batch, w)
        finite = _all_finite((gF, gV)) & jnp.isfinite(parts["total"])
        norm = _global_norm((gF, gV))
        scale = jnp.where(norm > grad_clip, grad_clip / jnp.maximum(norm, 1e-30), 1.0)
        gF = jax.tree_util.tree_map(lambda g: g * scale.astype(g.dtype), gF)
        gV = jax.tree_util.tree_map(lambda g: g * scale.astype(g.dtype), gV)
        pF, oF = adam_step(F.params, gF, opt_f, lr)
        pV, oV = adam_step(Vf.params, gV, opt_v, lr)
        do_f = finite & update_f
        do_v = finite & update_v
        pF, oF = _select(do_f, (pF, oF), (F.params, opt_f))
        pV, oV = _select(do_v, (pV, oV), (Vf.params, opt_v))
        return ImplicitField(pF, F.m), VelocityField(pV, Vf.m), oF, oV, parts, finite

    return step


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    timings: list[float]


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def train(P0, P1, C, cfg: TrainConfig, N0=None, N1=None, state: TrainState | None = None,
          transform: NormalizationTransform | None = None, until: int | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the schedule from ``state.epoch`` (or a fresh init) up to ``until`` / ``cfg.epochs``.

    ``P0``, ``P1`` are normalised clouds, ``C`` an ``(k, 2)`` index array.
    Raises :class:`TrainingDiverged` after ``NAN_PATIENCE`` consecutive
    non-finite epochs.
    """
    P0 = np.asarray(P0, dtype=np.float64)
    P1 = np.asarray(P1, dtype=np.float64)
    C = np.asarray(C, dtype=np.int64).reshape(-1, 2)
    if state is None:
        state = initial_state(cfg, transform)
    step = _make_step(cfg.T, cfg.grad_clip)
    base_w = cfg.weights()
    rows, timings = [], []
    last_finite = state
    bad_streak = 0
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    F, Vf, oF, oV = state.F, state.Vf, state.opt_f, state.opt_v
    for k in range(state.epoch, stop):
        t0 = time.perf_counter()
        lam_f, lam_v, lam_m = lambda_schedule(k, cfg)
        w = dataclasses.replace(base_w, lam_f=lam_f, lam_v=lam_v, lam_m=lam_m)
        lr = learning_rate(k, cfg)
        batch = make_batch(k, cfg, P0, P1, C, N0, N1)
        update_f = not (cfg.strict_freeze and k < cfg.warmup_epochs)
        update_v = k <= cfg.velocity_freeze_epoch
        F, Vf, oF, oV, parts, finite = step(F, Vf, oF, oV, batch, w, lr, update_f, update_v)
        parts = {key: float(v) for key, v in parts.items()}
        row = {"epoch": k, "lr": lr, "lam_f": lam_f, "lam_v": lam_v, "lam_m": lam_m,
               "lam_l": cfg.lam_l, "lam_div": cfg.lam_div, "skipped": 0.0 if bool(finite) else 1.0}
        row.update({term: parts.get(term, 0.0) for term in METRIC_TERMS})
        rows.append(row)
        timings.append(time.perf_counter() - t0)
        if callback is not None:
            callback(row)
        current = TrainState(F, Vf, oF, oV, k + 1, cfg, state.transform)
        if bool(finite):
            bad_streak = 0
            last_finite = current
        else:
            bad_streak += 1
            logger.warning("epoch %d: non-finite loss or gradient, step skipped", k)
            if bad_streak >= NAN_PATIENCE:
                raise TrainingDiverged(f"loss non-finite for {NAN_PATIENCE} consecutive epochs (epoch {k})",
                                       last_finite)
    final = TrainState(F, Vf, oF, oV, max(stop, state.epoch), cfg, state.transform)
    return TrainResult(final, rows, timings)


def write_manifest(path, cfg: TrainConfig, inputs: dict[str, str] | None = None, extra: dict | None = None) -> Path:
    import hashlib

    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "seed": cfg.seed,
        "inputs": {},
        **(extra or {}),
    }
    for name, p in (inputs or {}).items():
        if p is None:
            continue
        manifest["inputs"][name] = {"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
