"""Normalisation, Monte-Carlo batches and correspondence protocols.

All randomness flows through ``numpy.random.Generator`` objects, so a fixed
seed gives bit-identical batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NORMALIZED_RADIUS = 0.9


@dataclass(frozen=True)
class NormalizationTransform:
    """x_normalized = (x - center) * scale."""

    center: np.ndarray
    scale: float

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.center) * self.scale

    def invert(self, X):
        return np.asarray(X, dtype=np.float64) / self.scale + self.center

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(np.zeros(3), 1.0)


def normalize_pair(P0, P1, radius: float = NORMALIZED_RADIUS):
    """Centre both clouds on their joint bounding box; scale the union to ``radius``."""
    P0 = np.asarray(P0, dtype=np.float64)
    P1 = np.asarray(P1, dtype=np.float64)
    if len(P0) == 0 or len(P1) == 0:
        raise ValueError("point clouds must be nonempty")
    both = np.concatenate([P0, P1])
    center = 0.5 * (both.min(axis=0) + both.max(axis=0))
    extent = np.linalg.norm(both - center, axis=1).max()
    if extent <= 1e-12:
        raise ValueError("degenerate point clouds: all points coincide")
    tf = NormalizationTransform(center, float(radius / extent))
    return tf.apply(P0), tf.apply(P1), tf


def sample_space(rng: np.random.Generator, n: int, P0, P1, sigma_near: float = 0.05,
                 rho_near: float = 0.5) -> np.ndarray:
    """``round(rho_near * n)`` jittered cloud points, the rest uniform in [-1, 1]^3."""
    if n < 1:
        raise ValueError("n must be >= 1")
    clouds = np.concatenate([np.asarray(P0), np.asarray(P1)])
    n_near = int(round(rho_near * n))
    near = clouds[rng.integers(0, len(clouds), n_near)]
    if sigma_near > 0:
        near = near + sigma_near * rng.standard_normal(near.shape)
    far = rng.uniform(-1.0, 1.0, size=(n - n_near, 3))
    return np.concatenate([near, far])


def sample_time(rng: np.random.Generator, n: int, T: int, jitter: float = 1.0) -> np.ndarray:
    """Cycle through the Euler knots k/T and jitter each by up to ``jitter/2`` knot widths."""
    if n < 1 or T < 1:
        raise ValueError("n and T must be >= 1")
    knots = (np.arange(n) % (T + 1)) / T
    if jitter > 0:
        knots = knots + jitter * rng.uniform(-0.5, 0.5, n) / T
    return np.clip(knots, 0.0, 1.0)


def validate_correspondences(C, n0: int, n1: int) -> np.ndarray:
    C = np.asarray(C, dtype=np.int64).reshape(-1, 2)
    if len(C) and (C[:, 0].min() < 0 or C[:, 0].max() >= n0 or C[:, 1].min() < 0 or C[:, 1].max() >= n1):
        raise IndexError(f"correspondence index out of range (clouds of {n0} and {n1} points)")
    if len(np.unique(C[:, 0])) != len(C):
        raise ValueError("duplicate source index in correspondences")
    return C


def select_correspondences(C_full, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset without replacement of size ``round(fraction * len(C_full))``."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    C_full = np.asarray(C_full, dtype=np.int64).reshape(-1, 2)
    k = int(round(fraction * len(C_full)))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(C_full)} pairs selects nothing")
    if k == len(C_full):
        return C_full.copy()
    idx = np.sort(rng.choice(len(C_full), size=k, replace=False))
    return C_full[idx]


def perturb_correspondences(C, P1, mode: str, fraction: float, rng: np.random.Generator,
                            k: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``round(fraction * len(C))`` pairs; returns ``(C_noisy, selected_rows)``.

    ``local_k_swap`` gives each selected pair the target of the pair whose
    target is its k-th nearest neighbour among all correspondence targets.
    ``global_swap`` permutes the selected targets uniformly at random.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    C = np.asarray(C, dtype=np.int64).reshape(-1, 2)
    n_sel = int(round(fraction * len(C)))
    rows = np.sort(rng.choice(len(C), size=n_sel, replace=False)) if n_sel else np.zeros(0, np.int64)
    out = C.copy()
    if mode == "local_k_swap":
        if k >= len(C):
            raise ValueError(f"k={k} needs more than {len(C)} correspondences")
        targets = np.asarray(P1)[C[:, 1]]
        # neighbour 0 is the pair itself
        _, nn = cKDTree(targets).query(targets[rows], k=k + 1)
        out[rows, 1] = C[nn[:, k], 1] if n_sel else out[rows, 1]
    elif mode == "global_swap":
        out[rows, 1] = C[rng.permutation(rows), 1]
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    return out, rows
