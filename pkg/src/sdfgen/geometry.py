"""Analytic signed distance functions, truncated voxel grids, and mesh extraction.

The shape domain is the cube [-1, 1]^3 in normalized shape units with voxel
centers at -1 + (i + 0.5) * (2 / D). Signs follow the usual convention:
negative inside, positive outside, clamped to +-tau.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mc_tables import CORNER_OFFSETS, CORNER_PAIRS, EDGE_TABLE, TRIANGLE_TABLE

DEFAULT_TRUNCATION = 0.2  # shape units; ~3 voxels of signed band at D=16


# ---------------------------------------------------------------------------
# Analytic SDF trees
# ---------------------------------------------------------------------------

class SdfNode:
    """Base of the CSG expression tree; evaluation is vectorized over points."""

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Empty(SdfNode):
    def evaluate(self, points):
        return np.full(points.shape[0], np.inf)


@dataclass(frozen=True)
class Sphere(SdfNode):
    radius: float

    def evaluate(self, points):
        return np.linalg.norm(points, axis=1) - self.radius


@dataclass(frozen=True)
class Box(SdfNode):
    half_extents: tuple[float, float, float]

    def evaluate(self, points):
        q = np.abs(points) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Cylinder(SdfNode):
    """Capped cylinder along the z axis."""

    radius: float
    half_height: float

    def evaluate(self, points):
        dr = np.hypot(points[:, 0], points[:, 1]) - self.radius
        dz = np.abs(points[:, 2]) - self.half_height
        d = np.stack([dr, dz], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Capsule(SdfNode):
    """Capsule along the z axis from -half_length to +half_length."""

    radius: float
    half_length: float

    def evaluate(self, points):
        q = points.copy()
        q[:, 2] -= np.clip(q[:, 2], -self.half_length, self.half_length)
        return np.linalg.norm(q, axis=1) - self.radius


@dataclass(frozen=True)
class Union(SdfNode):
    children: tuple[SdfNode, ...]

    def evaluate(self, points):
        return np.minimum.reduce([c.evaluate(points) for c in self.children])


@dataclass(frozen=True)
class Intersection(SdfNode):
    children: tuple[SdfNode, ...]

    def evaluate(self, points):
        return np.maximum.reduce([c.evaluate(points) for c in self.children])


@dataclass(frozen=True)
class Subtraction(SdfNode):
    base: SdfNode
    cut: SdfNode

    def evaluate(self, points):
        return np.maximum(self.base.evaluate(points), -self.cut.evaluate(points))


@dataclass(frozen=True)
class Transformed(SdfNode):
    """Rigid transform plus uniform scale of a child shape."""

    child: SdfNode
    rotation: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def evaluate(self, points):
        r = np.asarray(self.rotation, dtype=np.float64)
        local = (points - np.asarray(self.translation)) @ r / self.scale
        return self.scale * self.child.evaluate(local)


def union(*children: SdfNode) -> SdfNode:
    return Union(tuple(children))


def intersection(*children: SdfNode) -> SdfNode:
    return Intersection(tuple(children))


def translate(node: SdfNode, offset: Sequence[float]) -> SdfNode:
    return Transformed(node, translation=tuple(float(v) for v in offset))


def rotation_about_axis(axis: Sequence[float], angle: float) -> tuple:
    """Rodrigues rotation matrix as a nested tuple (row-vector convention)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    kx, ky, kz = a
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    r = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    return tuple(tuple(row) for row in r)


def evaluate_sdf(tree: SdfNode, point: Sequence[float]) -> float:
    """Signed distance of a single point (exact for primitives, min/max bound for CSG)."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    return float(tree.evaluate(p)[0])


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass
class TsdfGrid:
    """Truncated signed distances on a D^3 grid over [-1, 1]^3."""

    resolution: int
    truncation: float
    values: np.ndarray  # (D, D, D), indexed [ix, iy, iz]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.resolution,) * 3:
            raise ValueError(
                f"values shape {self.values.shape} != resolution {self.resolution}"
            )
        if np.any(np.abs(self.values) > self.truncation + 1e-12):
            raise ValueError("values exceed the truncation band")

    @property
    def voxel_size(self) -> float:
        return 2.0 / self.resolution

    def copy(self) -> "TsdfGrid":
        return TsdfGrid(self.resolution, self.truncation, self.values.copy())


def voxel_centers(resolution: int) -> np.ndarray:
    """1D coordinates of voxel centers along one axis."""
    return -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)


def rasterize_tsdf(tree: SdfNode, resolution: int, truncation: float = DEFAULT_TRUNCATION) -> TsdfGrid:
    """Evaluate the tree at every voxel center and clamp to the truncation band."""
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if truncation <= 2.0 / resolution:
        raise ValueError("truncation must exceed the voxel size")
    c = voxel_centers(resolution)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = np.clip(tree.evaluate(pts), -truncation, truncation)
    return TsdfGrid(resolution, truncation, vals.reshape(resolution, resolution, resolution))


@dataclass
class DensityGrid:
    """Nonnegative volume densities (inverse shape units) on the same lattice."""

    resolution: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("densities must be nonnegative")


def tsdf_to_density(grid: TsdfGrid, alpha: float, beta: float) -> DensityGrid:
    """VolSDF-style conversion: sigma = alpha * LaplaceCDF_beta(-sdf)."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    s = -grid.values
    cdf = np.where(s <= 0, 0.5 * np.exp(s / beta), 1.0 - 0.5 * np.exp(-s / beta))
    return DensityGrid(grid.resolution, alpha * cdf)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) shape units
    faces: np.ndarray     # (F, 3) int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def euler_characteristic(self) -> int:
        """V - E + F with E counted over unique undirected triangle edges."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        n_edges = len(np.unique(e, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)


def marching_cubes(grid: TsdfGrid, iso: float = 0.0) -> Mesh:
    """Extract the iso-surface with the standard 256-case tables and linear interpolation.

    Vertices are welded on shared cell edges so closed surfaces come out
    watertight; zero-area triangles are dropped.
    """
    if not (-grid.truncation < iso < grid.truncation):
        raise ValueError("iso level must lie strictly inside the truncation band")
    d = grid.resolution
    v = grid.values
    n = d - 1
    corner_vals = np.empty((8,) + (n,) * 3)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner_vals[c] = v[ox:ox + n, oy:oy + n, oz:oz + n]
    case = np.zeros((n,) * 3, dtype=np.int64)
    for c in range(8):
        case |= (corner_vals[c] < iso).astype(np.int64) << c
    active = np.argwhere(EDGE_TABLE[case] != 0)
    centers = voxel_centers(d)
    h = grid.voxel_size

    vert_ids: dict[tuple, int] = {}
    verts: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []

    for ix, iy, iz in active:
        cell = np.array([ix, iy, iz])
        cvals = corner_vals[:, ix, iy, iz]
        tri_row = TRIANGLE_TABLE[case[ix, iy, iz]]
        edge_vertex: dict[int, int] = {}
        for e in range(12):
            if not (EDGE_TABLE[case[ix, iy, iz]] >> e) & 1:
                continue
            a, b = CORNER_PAIRS[e]
            ca = cell + CORNER_OFFSETS[a]
            cb = cell + CORNER_OFFSETS[b]
            key = (min(tuple(ca), tuple(cb)), max(tuple(ca), tuple(cb)))
            vid = vert_ids.get(key)
            if vid is None:
                va, vb = cvals[a], cvals[b]
                if va == vb:
                    t = 0.5  # both endpoints on the level set
                else:
                    t = (iso - va) / (vb - va)
                pa = centers[ca[0]], centers[ca[1]], centers[ca[2]]
                pos = np.asarray(pa) + t * (cb - ca) * h
                vid = len(verts)
                verts.append(pos)
                vert_ids[key] = vid
            edge_vertex[e] = vid
        for j in range(0, 15, 3):
            if tri_row[j] < 0:
                break
            i0, i1, i2 = (edge_vertex[tri_row[j + k]] for k in range(3))
            if i0 == i1 or i1 == i2 or i2 == i0:
                continue
            faces.append((i0, i1, i2))

    if not faces:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))
    areas = mesh.triangle_areas()
    if np.any(areas == 0.0):
        mesh = Mesh(mesh.vertices, mesh.faces[areas > 0.0])
    return mesh


def sample_surface_points(mesh: Mesh, n: int, seed: int) -> np.ndarray:
    """Draw n points area-proportionally over triangles, uniform within each."""
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    cum = np.cumsum(areas)
    cum /= cum[-1]
    tri = np.searchsorted(cum, rng.random(n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    return a + r1[:, None] * (b - a) + r2[:, None] * (c - a)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

TSDF_MAGIC = b"SDFGRID1"


def save_tsdf(grid: TsdfGrid, path) -> None:
    """Binary grid container: magic, u32 resolution, f64 truncation, f32 values x-fastest."""
    with open(path, "wb") as f:
        f.write(TSDF_MAGIC)
        f.write(struct.pack("<I", grid.resolution))
        f.write(struct.pack("<d", grid.truncation))
        f.write(grid.values.astype("<f4").ravel(order="F").tobytes())


def load_tsdf(path) -> TsdfGrid:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TSDF_MAGIC:
            raise ValueError(f"bad TSDF magic {magic!r} in {path}")
        (d,) = struct.unpack("<I", f.read(4))
        (tau,) = struct.unpack("<d", f.read(8))
        vals = np.frombuffer(f.read(4 * d ** 3), dtype="<f4").astype(np.float64)
        # f32 quantization may overshoot the band by one ulp; clip is stable
        # under re-save because f32(clip(x)) == f32(x) there.
        vals = np.clip(vals, -tau, tau)
        return TsdfGrid(d, tau, vals.reshape((d, d, d), order="F"))


def mesh_to_obj(mesh: Mesh, vertex_colors: Optional[np.ndarray] = None) -> str:
    """ASCII OBJ with v/f records; colors ride on the vertex line when given."""
    lines = []
    if vertex_colors is None:
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    else:
        vc = np.asarray(vertex_colors)
        if vc.shape != mesh.vertices.shape:
            raise ValueError("vertex_colors must be (V, 3)")
        for (x, y, z), (r, g, b) in zip(mesh.vertices, vc):
            lines.append(f"v {x:.9g} {y:.9g} {z:.9g} {r:.6g} {g:.6g} {b:.6g}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    return "\n".join(lines) + "\n"


def save_obj(mesh: Mesh, path, vertex_colors: Optional[np.ndarray] = None) -> None:
    with open(path, "w") as f:
        f.write(mesh_to_obj(mesh, vertex_colors))
