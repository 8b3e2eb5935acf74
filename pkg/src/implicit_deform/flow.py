"""Forward-Euler particle transport through a stationary velocity field."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .fields import VelocityField, velocity_point

DEFAULT_STEPS = 25


class IntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Positions at t_k = k / T, k = 0..T (``points`` has shape ``(T+1, 3)``)."""

    points: np.ndarray
    T: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]


def euler_paths(Vf: VelocityField, X0, T: int, sign: float = 1.0):
    """Differentiable batched Euler integration; returns ``(T+1, n, 3)``."""
    dt = 1.0 / T
    v = jax.vmap(velocity_point, (None, 0))

    def step(X, _):
        Xn = X + sign * dt * v(Vf, X)
        return Xn, Xn

    _, path = jax.lax.scan(step, X0, None, length=T)
    return jnp.concatenate([X0[None], path], axis=0)


def euler_endpoint(Vf: VelocityField, X0, T: int, sign: float = 1.0):
    """phi(X0, 1) without materialising the whole path."""
    dt = 1.0 / T
    v = jax.vmap(velocity_point, (None, 0))
    return jax.lax.fori_loop(0, T, lambda _, X: X + sign * dt * v(Vf, X), X0)


def _check_path(path: np.ndarray):
    finite = np.all(np.isfinite(path), axis=tuple(range(1, path.ndim)))
    if not np.all(finite):
        k = int(np.argmin(finite))
        raise IntegrationError(f"non-finite position after Euler step {k}")


def integrate_trajectory(Vf: VelocityField, x0, T: int = DEFAULT_STEPS) -> Trajectory:
    if T < 1:
        raise ValueError("T must be >= 1")
    x0 = jnp.asarray(x0).reshape(1, 3)
    path = np.asarray(euler_paths(Vf, x0, T))[:, 0, :]
    _check_path(path)
    return Trajectory(path, int(T))


def integrate_points(Vf: VelocityField, X0, T: int = DEFAULT_STEPS, t: float = 1.0) -> np.ndarray:
    """Advect a batch of points to time ``t`` (rounded down to the Euler grid)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    X0 = jnp.atleast_2d(jnp.asarray(X0))
    steps = int(np.floor(t * T + 1e-9))
    if steps == 0:
        return np.asarray(X0)
    path = np.asarray(euler_paths(Vf, X0, T))[: steps + 1]
    _check_path(path)
    return path[steps]


def inverse_consistency(Vf: VelocityField, x0, T: int = DEFAULT_STEPS) -> float:
    """|| backward(forward(x0)) - x0 || with the backward pass integrating -V."""
    if T < 1:
        raise ValueError("T must be >= 1")
    x0 = jnp.asarray(x0).reshape(1, 3)
    fwd = euler_paths(Vf, x0, T)
    back = euler_paths(Vf, fwd[-1], T, sign=-1.0)
    _check_path(np.asarray(fwd))
    _check_path(np.asarray(back))
    return float(jnp.linalg.norm(back[-1, 0] - x0[0]))


def write_trajectories(path, paths: np.ndarray) -> Path:
    """CSV dump with columns ``seed, k, x, y, z``; ``paths`` is ``(T+1, n, 3)``."""
    path = Path(path)
    paths = np.asarray(paths)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "k", "x", "y", "z"])
        for i in range(paths.shape[1]):
            for k in range(paths.shape[0]):
                w.writerow([i, k, *(repr(float(c)) for c in paths[k, i])])
    return path
