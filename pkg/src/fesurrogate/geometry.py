"""Synthetic multi-region phantoms, structured tetrahedral meshing and probe loads.

Phantoms are axis-aligned boxes containing an ellipsoidal gland (WG) with an
inner ellipsoidal central zone (CZ), a fixed bony half-space (BONE) and a
spherical probe contact patch on the domain boundary.  Everything is defined
by implicit functions so region membership is exactly computable.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np


class Region(IntEnum):
    BACKGROUND = 0
    WG = 1
    CZ = 2
    BONE = 3


class GeometryError(ValueError):
    """Raised for infeasible phantom specifications or sampling failures."""


def _vec3(value, name: str) -> tuple[float, float, float]:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise GeometryError(f"{name} must have 3 components, got {arr.size}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class PhantomSpec:
    """Implicit description of one phantom anatomy (all lengths in metres)."""

    grid_resolution: tuple[int, int, int] = (8, 8, 8)
    domain_size: tuple[float, float, float] = (0.1, 0.1, 0.1)
    gland_center: tuple[float, float, float] = (0.05, 0.05, 0.05)
    gland_radii: tuple[float, float, float] = (0.03, 0.027, 0.025)
    cz_radii: tuple[float, float, float] = (0.016, 0.014, 0.013)
    # nodes with dot(normal, x) >= offset are bone
    bone_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    bone_offset: float = 0.085
    probe_center: tuple[float, float, float] = (0.05, 0.05, 0.0)
    probe_radius: float = 0.02
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        res = np.asarray(self.grid_resolution, dtype=int).reshape(-1)
        if res.size == 1:
            res = np.repeat(res, 3)
        object.__setattr__(self, "grid_resolution", tuple(int(r) for r in res))
        for name in ("domain_size", "gland_center", "gland_radii", "cz_radii",
                     "bone_normal", "probe_center"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        object.__setattr__(self, "bone_offset", float(self.bone_offset))
        object.__setattr__(self, "probe_radius", float(self.probe_radius))
        object.__setattr__(self, "jitter", float(self.jitter))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise GeometryError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    def validate(self) -> None:
        if len(self.grid_resolution) != 3 or min(self.grid_resolution) < 4:
            raise GeometryError(
                f"grid_resolution must be >= 4 per axis, got {self.grid_resolution}")
        size = np.array(self.domain_size)
        if np.any(size <= 0):
            raise GeometryError(f"domain_size must be positive, got {self.domain_size}")
        c = np.array(self.gland_center)
        r = np.array(self.gland_radii)
        cz = np.array(self.cz_radii)
        if np.any(r <= 0) or np.any(cz <= 0):
            raise GeometryError("ellipsoid radii must be positive")
        if np.any(c - r < 0) or np.any(c + r > size):
            raise GeometryError(
                f"gland ellipsoid (center {self.gland_center}, radii {self.gland_radii}) "
                f"lies outside the domain {self.domain_size}")
        if not np.all(cz < r):
            raise GeometryError(
                f"cz_radii {self.cz_radii} must be strictly smaller than "
                f"gland_radii {self.gland_radii} component-wise")
        n = np.array(self.bone_normal)
        if np.linalg.norm(n) == 0:
            raise GeometryError("bone_normal must be non-zero")
        p = np.array(self.probe_center)
        if self.probe_radius <= 0:
            raise GeometryError("probe_radius must be positive")
        gap = np.min(np.concatenate([p, size - p]))
        if gap > self.probe_radius:
            raise GeometryError(
                f"probe sphere (center {self.probe_center}, radius {self.probe_radius}) "
                "does not intersect the domain boundary")
        if n @ p + self.probe_radius * np.linalg.norm(n) >= self.bone_offset:
            raise GeometryError("probe sphere intersects the BONE half-space")
        # gland must stay clear of bone so that regions partition cleanly
        extent = np.sqrt(np.sum((n * r) ** 2))
        if n @ c + extent >= self.bone_offset:
            raise GeometryError("gland ellipsoid intersects the BONE half-space")

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.domain_size) / np.asarray(self.grid_resolution)

    def classify(self, points: np.ndarray) -> np.ndarray:
        """Region label of each point (CZ tested before WG, then BONE)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c = np.asarray(self.gland_center)
        labels = np.full(len(pts), Region.BACKGROUND, dtype=np.uint8)
        bone = pts @ np.asarray(self.bone_normal) >= self.bone_offset
        wg = np.sum(((pts - c) / np.asarray(self.gland_radii)) ** 2, axis=1) <= 1.0
        cz = np.sum(((pts - c) / np.asarray(self.cz_radii)) ** 2, axis=1) <= 1.0
        labels[bone] = Region.BONE
        labels[wg] = Region.WG
        labels[cz] = Region.CZ
        return labels

    def contains(self, points: np.ndarray, region: int) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        size = np.asarray(self.domain_size)
        inside = np.all((pts >= 0) & (pts <= size), axis=1)
        return inside & (self.classify(pts) == region)


@dataclass
class TetMesh:
    """Linear tetrahedral mesh with node labels and Dirichlet node sets."""

    nodes: np.ndarray
    tets: np.ndarray
    labels: np.ndarray
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loaded_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    spec: Optional[PhantomSpec] = None

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.fixed_nodes = np.unique(np.asarray(self.fixed_nodes, dtype=np.int64))
        self.loaded_nodes = np.unique(np.asarray(self.loaded_nodes, dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volumes(self) -> np.ndarray:
        x = self.nodes[self.tets]
        return np.linalg.det(x[:, 1:] - x[:, :1]) / 6.0

    def bc_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_nodes, dtype=np.uint8)
        flags[self.fixed_nodes] |= 1
        flags[self.loaded_nodes] |= 2
        return flags

    def validate(self) -> None:
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= self.n_nodes):
            raise GeometryError("tet index out of range")
        vol = self.volumes()
        if np.any(vol <= 0):
            raise GeometryError(f"non-positive tet volume at element {int(np.argmin(vol))}")
        if np.intersect1d(self.fixed_nodes, self.loaded_nodes).size:
            raise GeometryError("fixed_nodes and loaded_nodes overlap")
        if len(self.labels) != self.n_nodes:
            raise GeometryError("labels must have one entry per node")


# Kuhn subdivision of the unit cube: every tet contains the 0-6 diagonal, so
# neighbouring hexes triangulate their shared faces identically.
_CUBE_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                          [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
_KUHN = np.array([[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
                  [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]])


def _structured_grid(resolution, size, jitter: float, rng) -> tuple[np.ndarray, np.ndarray]:
    nx, ny, nz = resolution
    size = np.asarray(size, dtype=float)
    axes = [np.linspace(0.0, size[d], resolution[d] + 1) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corner_ids = np.stack([nid(i + c[0], j + c[1], k + c[2]) for c in _CUBE_CORNERS], axis=1)
    tets = corner_ids[:, _KUHN].reshape(-1, 4)

    if jitter > 0:
        h = size / np.asarray(resolution)
        interior = np.all((nodes > 1e-12 * size) & (nodes < size * (1 - 1e-12)), axis=1)
        offsets = rng.uniform(-jitter, jitter, size=(int(interior.sum()), 3)) * h
        nodes[interior] += offsets

    x = nodes[tets]
    vol = np.linalg.det(x[:, 1:] - x[:, :1])
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return nodes, tets


def box_mesh(resolution=2, size=1.0, jitter: float = 0.0, seed: int = 0) -> TetMesh:
    """Plain box mesh without regions or boundary sets (used for verification)."""
    res = _vec3(resolution, "resolution")
    res = tuple(int(r) for r in res)
    rng = np.random.default_rng(seed)
    nodes, tets = _structured_grid(res, _vec3(size, "size"), jitter, rng)
    mesh = TetMesh(nodes, tets, np.zeros(len(nodes), dtype=np.uint8))
    mesh.validate()
    return mesh


def generate_phantom(spec: PhantomSpec) -> TetMesh:
    """Mesh a phantom on a structured grid (6 tets per hex) and label it.

    Interior nodes are jittered by up to ``spec.jitter`` grid spacings using
    ``spec.seed``, so identical specs give bit-identical meshes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nodes, tets = _structured_grid(spec.grid_resolution, spec.domain_size, spec.jitter, rng)
    labels = spec.classify(nodes)
    for region in (Region.WG, Region.CZ, Region.BONE):
        if not np.any(labels == region):
            raise GeometryError(
                f"region {region.name} is empty at grid resolution {spec.grid_resolution}")
    fixed = np.flatnonzero(labels == Region.BONE)
    dist = np.linalg.norm(nodes - np.asarray(spec.probe_center), axis=1)
    loaded = np.flatnonzero(dist <= spec.probe_radius)
    if loaded.size == 0:
        raise GeometryError("probe sphere contains no mesh nodes")
    mesh = TetMesh(nodes, tets, labels, fixed, loaded, spec)
    mesh.validate()
    return mesh


def random_phantom_spec(seed: int, base: Optional[PhantomSpec] = None,
                        variation: float = 0.15) -> PhantomSpec:
    """Draw a patient-like variant of ``base`` by perturbing gland pose and size."""
    base = base or PhantomSpec()
    rng = np.random.default_rng(seed)
    size = np.asarray(base.domain_size)
    radii = np.asarray(base.gland_radii) * (1 + variation * rng.uniform(-1, 1, 3))
    cz_ratio = (np.asarray(base.cz_radii) / np.asarray(base.gland_radii)
                * (1 + 0.5 * variation * rng.uniform(-1, 1, 3)))
    cz_ratio = np.clip(cz_ratio, 0.2, 0.9)
    center = np.asarray(base.gland_center) + variation * rng.uniform(-1, 1, 3) * radii * 0.5
    center = np.clip(center, radii, size - radii)
    probe = np.array(base.probe_center, dtype=float)
    probe[:2] += variation * rng.uniform(-1, 1, 2) * base.probe_radius * 0.5
    return dataclasses.replace(
        base, gland_center=tuple(center), gland_radii=tuple(radii),
        cz_radii=tuple(radii * cz_ratio), probe_center=tuple(probe), seed=int(seed))


def _inward_normal(mesh: TetMesh) -> np.ndarray:
    """Inward normal of the domain face nearest to the probe contact patch."""
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    centre = mesh.nodes[mesh.loaded_nodes].mean(axis=0)
    gaps = np.concatenate([centre - lo, hi - centre])
    face = int(np.argmin(gaps))
    normal = np.zeros(3)
    normal[face % 3] = 1.0 if face < 3 else -1.0
    return normal


def sample_probe_load(mesh: TetMesh, displacement_scale: float, seed: int) -> np.ndarray:
    """Rigid probe translation applied to every loaded node.

    Returns an array of shape ``(len(mesh.loaded_nodes), 3)`` aligned with
    ``mesh.loaded_nodes``.  The direction is uniform on the hemisphere facing
    into the domain and the magnitude uniform in ``(0, displacement_scale]``.
    """
    if mesh.loaded_nodes.size == 0:
        raise GeometryError("mesh has no loaded nodes")
    if not displacement_scale > 0:
        raise GeometryError(f"displacement_scale must be > 0, got {displacement_scale}")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    if direction @ _inward_normal(mesh) < 0:
        direction = -direction
    magnitude = displacement_scale * (1.0 - rng.uniform())
    return np.tile(direction * magnitude, (mesh.loaded_nodes.size, 1))


@dataclass
class Tessellation:
    region_id: int
    cuboids: np.ndarray  # (c, 2, 3): min and max corners
    points_per_cuboid: int = 1

    def __post_init__(self):
        self.cuboids = np.asarray(self.cuboids, dtype=float).reshape(-1, 2, 3)
        if self.points_per_cuboid < 1:
            raise GeometryError("points_per_cuboid must be >= 1")

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean (n_points, n_cuboids) membership matrix."""
        pts = np.atleast_2d(points)[:, None, :]
        return np.all((pts >= self.cuboids[None, :, 0]) & (pts <= self.cuboids[None, :, 1]), axis=2)


def tessellate_region(mesh: TetMesh, region_id: int, c: int,
                      points_per_cuboid: int = 1) -> Tessellation:
    """Cover a region's nodes with at most ``c`` axis-aligned cuboids.

    The region bounding box is cut into ``c`` equal slabs along its longest
    axis; each slab shrinks to the bounding box of the nodes it holds and
    empty slabs are dropped.
    """
    if c < 1:
        raise GeometryError(f"c must be >= 1, got {c}")
    pts = mesh.nodes[mesh.labels == region_id]
    if len(pts) == 0:
        raise GeometryError(f"region {region_id} has no nodes")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    axis = int(np.argmax(hi - lo))
    width = (hi[axis] - lo[axis]) / c
    if width > 0:
        slab = np.minimum(((pts[:, axis] - lo[axis]) / width).astype(np.int64), c - 1)
    else:
        slab = np.zeros(len(pts), dtype=np.int64)
    boxes = []
    for s in range(c):
        members = pts[slab == s]
        if len(members):
            boxes.append([members.min(axis=0), members.max(axis=0)])
    return Tessellation(int(region_id), np.array(boxes), points_per_cuboid)


def sample_tessellation_points(tess: Tessellation, mesh: TetMesh, f: Optional[int] = None,
                               seed: int = 0, max_attempts: int = 1000
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample ``f`` points per cuboid inside the region's implicit shape.

    Returns ``(points, labels)``.
    """
    f = tess.points_per_cuboid if f is None else f
    if f < 1:
        raise GeometryError(f"f must be >= 1, got {f}")
    if mesh.spec is None:
        raise GeometryError("mesh carries no implicit phantom description")
    rng = np.random.default_rng(seed)
    out = []
    for ci, (lo, hi) in enumerate(tess.cuboids):
        accepted = np.zeros((0, 3))
        drawn = 0
        while len(accepted) < f:
            if drawn >= max_attempts * f:
                raise GeometryError(
                    f"rejection sampling failed for cuboid {ci} of region {tess.region_id} "
                    f"(bounds {lo.tolist()} - {hi.tolist()}): {len(accepted)}/{f} accepted "
                    f"after {drawn} attempts")
            cand = lo + (hi - lo) * rng.uniform(size=(f, 3))
            drawn += f
            ok = mesh.spec.contains(cand, tess.region_id)
            accepted = np.concatenate([accepted, cand[ok]])
        out.append(accepted[:f])
    points = np.concatenate(out) if out else np.zeros((0, 3))
    return points, np.full(len(points), tess.region_id, dtype=np.uint8)


def tessellate_and_sample(mesh: TetMesh, c: int, f: int, seed: int,
                          regions: Sequence[int] = tuple(Region)
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Resample every listed region: ``a`` regions give at most ``a*c*f`` points."""
    pts, labs = [], []
    for i, region in enumerate(regions):
        if not np.any(mesh.labels == region):
            continue
        tess = tessellate_region(mesh, region, c, f)
        p, lab = sample_tessellation_points(tess, mesh, f, seed=seed * 7919 + i)
        pts.append(p)
        labs.append(lab)
    return np.concatenate(pts), np.concatenate(labs)
