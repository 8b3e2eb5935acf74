"""Zero-level-set extraction, mesh measurements and point-set metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .fields import ImplicitField, sdf_point

DEFAULT_RESOLUTION = 128


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise IndexError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles[:, ::-1])

    def transformed(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TriMesh":
        return TriMesh(fn(self.vertices), self.triangles)


@dataclass(frozen=True)
class MetricReport:
    cd: float
    hd: float

    @property
    def cd_scaled(self) -> float:
        return self.cd * 1e3

    @property
    def hd_scaled(self) -> float:
        return self.hd * 1e2

    def as_dict(self) -> dict:
        return {"cd": self.cd, "hd": self.hd, "cd_scaled": self.cd_scaled, "hd_scaled": self.hd_scaled}


def grid_axis(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, resolution)


def evaluate_grid(fn: Callable[[np.ndarray], np.ndarray], resolution: int, lo=-1.0, hi=1.0,
                  chunk: int = 65536) -> np.ndarray:
    ax = grid_axis(resolution, lo, hi)
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        out[s:s + chunk] = np.asarray(fn(X[s:s + chunk]))
    return out.reshape(resolution, resolution, resolution)


def field_function(F: ImplicitField, t: float) -> Callable[[np.ndarray], np.ndarray]:
    """Batched numpy callable x -> f(x, t) (jitted once per field)."""
    dtype = F.params.layers[0][0].dtype
    fn = jax.jit(jax.vmap(sdf_point, (None, 0, None)))
    return lambda X: fn(F, jnp.asarray(X, dtype), jnp.asarray(t, dtype))


def extract_mesh(F, t: float = 0.0, resolution: int = DEFAULT_RESOLUTION, transform=None,
                 lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Marching cubes on f(., t) sampled over ``[lo, hi]^3``.

    ``F`` is an :class:`ImplicitField` or any callable ``(n, 3) -> (n,)``.
    Faces are oriented so normals point toward increasing f (outward for an
    SDF that is negative inside). An all-one-sign grid gives an empty mesh.
    ``transform`` (a :class:`NormalizationTransform`) maps vertices back to
    input coordinates.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    fn = field_function(F, t) if isinstance(F, ImplicitField) else F
    vol = evaluate_grid(fn, resolution, lo, hi)
    if not np.all(np.isfinite(vol)):
        raise FloatingPointError("field is non-finite on the extraction grid")
    if vol.min() >= 0 or vol.max() <= 0:
        return TriMesh.empty()
    h = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=0.0, spacing=(h, h, h), gradient_direction="descent", allow_degenerate=False
    )
    mesh = TriMesh(verts.astype(np.float64) + lo, faces)
    mesh = _drop_degenerate(mesh)
    if transform is not None:
        mesh = mesh.transformed(transform.invert)
    return mesh


def _drop_degenerate(mesh: TriMesh, tol: float = 1e-12) -> TriMesh:
    keep = mesh.face_areas() > tol
    return mesh if keep.all() else TriMesh(mesh.vertices, mesh.triangles[keep])


def boundary_edge_count(mesh: TriMesh) -> int:
    """Number of undirected edges not shared by exactly two triangles."""
    f = mesh.triangles
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def mesh_volume(mesh: TriMesh) -> float:
    """Signed volume (sum of origin tetrahedra); positive for outward-facing triangles."""
    if mesh.is_empty:
        raise ValueError("empty mesh has no volume")
    n_open = boundary_edge_count(mesh)
    if n_open:
        raise ValueError(f"mesh is not closed: {n_open} edges not shared by exactly two triangles")
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def _nn_distances(A, B):
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("point sets must be nonempty")
    d_ab, _ = cKDTree(B).query(A, k=1)
    d_ba, _ = cKDTree(A).query(B, k=1)
    return d_ab, d_ba


def chamfer(A, B) -> float:
    """0.5 * (mean_a min_b |a - b| + mean_b min_a |b - a|), non-squared distances."""
    d_ab, d_ba = _nn_distances(A, B)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def hausdorff(A, B) -> float:
    d_ab, d_ba = _nn_distances(A, B)
    return float(max(d_ab.max(), d_ba.max()))


def compare(A, B) -> MetricReport:
    d_ab, d_ba = _nn_distances(A, B)
    return MetricReport(float(0.5 * (d_ab.mean() + d_ba.mean())), float(max(d_ab.max(), d_ba.max())))


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int | np.random.Generator = 0):
    """Area-weighted uniform samples; returns ``(points, face_normals_of_samples)``."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[face, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, mesh.face_normals()[face]


def near_surface_samples(mesh: TriMesh, n: int, sigma: float = 0.02, seed=0) -> np.ndarray:
    """Surface samples displaced by isotropic Gaussian noise of scale ``sigma``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts, _ = sample_mesh_surface(mesh, n, rng)
    return pts + sigma * rng.standard_normal(pts.shape)


# -- reference meshes -------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron projected to the sphere, outward-oriented."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    verts = lo + corners * (hi - lo)
    # vertex index = 4x + 2y + z
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriMesh(verts, np.array(tris))
