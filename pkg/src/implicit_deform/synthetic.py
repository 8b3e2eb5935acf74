"""Deterministic synthetic shape pairs with known motion.

Every generator samples a source surface, pushes the samples through an
exact motion, and keeps the ground truth around: full correspondences and
the reference surface at any fraction ``s`` of the motion.

Kinds
    ``translated_sphere``  sphere of radius ``radius`` moved by ``offset``.
    ``rotating_bump``      sphere with a Gaussian bump, rotated by ``angle``
                           degrees about ``axis``; a rigid, divergence-free motion.
    ``sphere_to_ellipsoid`` sphere stretched to semi-axes ``radius * axes``;
                           volume is not preserved.
    ``holed_pair``         translated sphere where each cloud lost a cap
                           (``cap_fraction`` of the area) on opposite sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from .surface import TriMesh, icosphere, sample_mesh_surface

KINDS = ("translated_sphere", "rotating_bump", "sphere_to_ellipsoid", "holed_pair")

DEFAULTS = {
    "translated_sphere": {"n": 2000, "radius": 0.5, "offset": (0.3, 0.0, 0.0)},
    "rotating_bump": {"n": 2000, "radius": 0.5, "height": 0.2, "width": 0.35,
                      "bump_dir": (1.0, 0.0, 0.0), "axis": (0.0, 0.0, 1.0), "angle": 90.0},
    "sphere_to_ellipsoid": {"n": 2000, "radius": 0.5, "axes": (1.5, 1.2, 1.0)},
    "holed_pair": {"n": 2000, "radius": 0.5, "offset": (0.3, 0.0, 0.0), "cap_fraction": 0.1,
                   "hole0": (0.0, 0.0, 1.0), "hole1": (0.0, 0.0, -1.0)},
}

TEMPLATE_SUBDIVISIONS = 5


@dataclass
class SyntheticPair:
    kind: str
    params: dict
    P0: np.ndarray
    P1: np.ndarray
    C: np.ndarray
    N0: np.ndarray
    N1: np.ndarray
    _reference: Callable[[float], TriMesh] = field(repr=False)
    _volume: Callable[[float], float] = field(repr=False)

    def reference(self, s: float) -> TriMesh:
        """Ground-truth closed surface at fraction ``s`` in [0, 1] of the motion."""
        if not 0.0 <= s <= 1.0:
            raise ValueError("s must lie in [0, 1]")
        return self._reference(float(s))

    def volume(self, s: float) -> float:
        """Exact enclosed volume at ``s`` (of the full, hole-free surface)."""
        return self._volume(float(s))

    def __iter__(self):
        yield from (self.P0, self.P1, self.C, self.reference)


def _params(kind, params):
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    out = dict(DEFAULTS[kind])
    unknown = set(params or {}) - set(out)
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
    out.update(params or {})
    if int(out["n"]) < 4:
        raise ValueError("n must be at least 4")
    if float(out["radius"]) <= 0:
        raise ValueError("radius must be positive")
    out["n"] = int(out["n"])
    return out


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if v.shape != (3,) or norm == 0:
        raise ValueError(f"{name} must be a nonzero 3-vector")
    return v / norm


def _shuffle(P1, N1, rng):
    """Permute the target so that correspondences are not the identity."""
    perm = rng.permutation(len(P1))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return P1[perm], N1[perm], inv


def _sphere_volume(r):
    return 4.0 / 3.0 * np.pi * r ** 3


def _translated(p, rng):
    r, d = float(p["radius"]), np.asarray(p["offset"], dtype=np.float64)
    if d.shape != (3,):
        raise ValueError("offset must be a 3-vector")
    S = icosphere(TEMPLATE_SUBDIVISIONS, r)
    P0, N0 = sample_mesh_surface(S, p["n"], rng)
    P1, N1, idx = _shuffle(P0 + d, N0.copy(), rng)
    C = np.stack([np.arange(len(P0)), idx], axis=1)
    ref = lambda s: S.transformed(lambda v: v + s * d)
    return P0, P1, C, N0, N1, ref, lambda s: _sphere_volume(r)


def _bump_mesh(p) -> TriMesh:
    r, h, w = float(p["radius"]), float(p["height"]), float(p["width"])
    if w <= 0 or h < 0:
        raise ValueError("bump width must be positive and height nonnegative")
    b = _unit(p["bump_dir"], "bump_dir")
    S = icosphere(TEMPLATE_SUBDIVISIONS, 1.0)
    u = S.vertices
    rad = r + h * np.exp(-np.sum((u - b) ** 2, axis=1) / (2 * w * w))
    return TriMesh(u * rad[:, None], S.triangles)


def _rotating(p, rng):
    axis = _unit(p["axis"], "axis")
    theta = np.deg2rad(float(p["angle"]))
    rot = lambda s: Rotation.from_rotvec(s * theta * axis).as_matrix()
    B = _bump_mesh(p)
    P0, N0 = sample_mesh_surface(B, p["n"], rng)
    R1 = rot(1.0)
    P1, N1, idx = _shuffle(P0 @ R1.T, N0 @ R1.T, rng)
    C = np.stack([np.arange(len(P0)), idx], axis=1)
    v0 = _mesh_volume(B)
    return P0, P1, C, N0, N1, lambda s: B.transformed(lambda v: v @ rot(s).T), lambda s: v0


def _mesh_volume(mesh):
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def _ellipsoid(p, rng):
    r = float(p["radius"])
    axes = np.asarray(p["axes"], dtype=np.float64)
    if axes.shape != (3,) or np.any(axes <= 0):
        raise ValueError("axes must be three positive factors")
    scale = lambda s: 1.0 + s * (axes - 1.0)
    S = icosphere(TEMPLATE_SUBDIVISIONS, r)
    P0, N0 = sample_mesh_surface(S, p["n"], rng)
    N1 = N0 / axes
    N1 /= np.linalg.norm(N1, axis=1, keepdims=True)
    P1, N1, idx = _shuffle(P0 * axes, N1, rng)
    C = np.stack([np.arange(len(P0)), idx], axis=1)
    ref = lambda s: S.transformed(lambda v: v * scale(s))
    return P0, P1, C, N0, N1, ref, lambda s: _sphere_volume(r) * float(np.prod(scale(s)))


def _holed(p, rng):
    frac = float(p["cap_fraction"])
    if not 0 < frac < 0.5:
        raise ValueError("cap_fraction must lie in (0, 0.5)")
    r, d = float(p["radius"]), np.asarray(p["offset"], dtype=np.float64)
    h0, h1 = _unit(p["hole0"], "hole0"), _unit(p["hole1"], "hole1")
    # a cap {u . h > c} covers (1 - c) / 2 of the sphere
    c = 1.0 - 2.0 * frac
    if np.arccos(np.clip(h0 @ h1, -1, 1)) <= 2 * np.arccos(c):
        raise ValueError("holes overlap; move hole0 and hole1 further apart")
    S = icosphere(TEMPLATE_SUBDIVISIONS, r)
    Q, NQ = sample_mesh_surface(S, p["n"], rng)
    u = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    keep0 = np.flatnonzero(u @ h0 <= c)
    keep1 = np.flatnonzero(u @ h1 <= c)
    P0, N0 = Q[keep0], NQ[keep0]
    P1, N1, idx = _shuffle(Q[keep1] + d, NQ[keep1], rng)
    # sample q sits at row a of P0 and row idx[b] of P1
    both, a, b = np.intersect1d(keep0, keep1, return_indices=True)
    C = np.stack([a, idx[b]], axis=1)
    ref = lambda s: S.transformed(lambda v: v + s * d)
    return P0, P1, C, N0, N1, ref, lambda s: _sphere_volume(r)


_BUILDERS = {
    "translated_sphere": _translated,
    "rotating_bump": _rotating,
    "sphere_to_ellipsoid": _ellipsoid,
    "holed_pair": _holed,
}


def make_synthetic(kind: str, params: dict | None = None, seed: int = 0) -> SyntheticPair:
    """Build a ground-truth pair; identical ``(kind, params, seed)`` give identical output."""
    p = _params(kind, params)
    rng = np.random.default_rng(seed)
    P0, P1, C, N0, N1, ref, vol = _BUILDERS[kind](p, rng)
    return SyntheticPair(kind, p, P0, P1, C.astype(np.int64), N0, N1, ref, vol)


def cap_area_fraction(points: np.ndarray, center, direction, cos_limit: float) -> float:
    """Fraction of the points whose direction from ``center`` falls in a cap."""
    u = np.asarray(points) - np.asarray(center)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return float(np.mean(u @ _unit(direction, "direction") > cos_limit))
