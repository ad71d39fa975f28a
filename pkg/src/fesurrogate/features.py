"""Per-point input feature vectors ``x = [p(3), b(4), k(2)]``.

``b`` holds a switch followed by the assigned displacement; ``k`` holds the
shear and bulk moduli.  Feature sets are un-ordered: row order carries no
meaning beyond keeping parallel arrays aligned.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .fesolver import MaterialField
from .geometry import TetMesh, tessellate_and_sample

P_SLICE = slice(0, 3)
B_SLICE = slice(3, 7)
K_SLICE = slice(7, 9)


class FeatureError(ValueError):
    pass


@dataclass
class FeatureVectorSet:
    features: np.ndarray
    labels: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.features.ndim != 2 or self.features.shape[1] not in (7, 9):
            raise FeatureError(f"features must be (N, 7) or (N, 9), got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise FeatureError("labels must be parallel to features")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
            if len(self.targets) != len(self.features):
                raise FeatureError("targets must be parallel to features")

    @property
    def mode(self) -> str:
        return "pbk" if self.features.shape[1] == 9 else "pb"

    @property
    def positions(self) -> np.ndarray:
        return self.features[:, P_SLICE]

    @property
    def bc(self) -> np.ndarray:
        return self.features[:, B_SLICE]

    def __len__(self) -> int:
        return len(self.features)

    def permuted(self, perm: np.ndarray) -> "FeatureVectorSet":
        return FeatureVectorSet(self.features[perm], self.labels[perm],
                                None if self.targets is None else self.targets[perm])


def assemble_features(mesh: TetMesh, materials: MaterialField, prescribed: np.ndarray,
                      bone_encoding: str = "assigned") -> FeatureVectorSet:
    """Build ``[p, b, k]`` for every mesh node.

    Loaded nodes get ``b = [1, u]``.  Fixed nodes get ``[1, 0, 0, 0]`` with
    ``bone_encoding="assigned"`` or ``[0, 0, 0, 0]`` with ``"free"``.
    """
    prescribed = np.asarray(prescribed, dtype=np.float64).reshape(mesh.n_nodes, 3)
    constrained = np.zeros(mesh.n_nodes, dtype=bool)
    constrained[mesh.fixed_nodes] = True
    constrained[mesh.loaded_nodes] = True
    stray = np.flatnonzero(np.any(prescribed != 0, axis=1) & ~constrained)
    if stray.size:
        raise FeatureError(f"displacement given for non-boundary nodes {stray[:5].tolist()}")
    if bone_encoding not in ("assigned", "free"):
        raise FeatureError(f"unknown bone_encoding {bone_encoding!r}")
    b = np.zeros((mesh.n_nodes, 4))
    if bone_encoding == "assigned":
        b[mesh.fixed_nodes, 0] = 1.0
    b[mesh.loaded_nodes, 0] = 1.0
    b[mesh.loaded_nodes, 1:] = prescribed[mesh.loaded_nodes]
    k = np.stack([materials.shear, materials.bulk], axis=1)
    return FeatureVectorSet(np.hstack([mesh.nodes, b, k]), mesh.labels.copy())


def strip_materials(fset: FeatureVectorSet) -> FeatureVectorSet:
    """Drop ``k`` for the material ablation: 9-component entries become ``[p, b]``."""
    if fset.features.shape[1] != 9:
        raise FeatureError("feature set is already stripped of material parameters")
    return replace(fset, features=fset.features[:, :7].copy())


def idw_weights(query: np.ndarray, nodes: np.ndarray, knn: int = 5,
                tree: Optional[cKDTree] = None, exact_tol: float = 1e-12
                ) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices and inverse-distance weights, both ``(Q, knn)``.

    A query within ``exact_tol`` of a node gets weight 1 on that node.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    if len(nodes) < knn:
        raise FeatureError(f"need at least {knn} nodes for interpolation, got {len(nodes)}")
    tree = tree or cKDTree(nodes)
    dist, idx = tree.query(np.atleast_2d(query), k=knn)
    dist = dist.reshape(-1, knn)
    idx = idx.reshape(-1, knn)
    hit = dist[:, 0] <= exact_tol
    inv = 1.0 / np.where(hit[:, None], 1.0, dist)
    w = inv / inv.sum(axis=1, keepdims=True)
    w[hit] = 0.0
    w[hit, 0] = 1.0
    return idx, w


def idw_interpolate(query, nodes, values, knn: int = 5, tree=None) -> np.ndarray:
    idx, w = idw_weights(query, nodes, knn, tree)
    values = np.asarray(values, dtype=np.float64)
    return np.einsum("qk,qkc->qc", w, values[idx])


def interpolate_bc(query, nodes, b, knn: int = 5, threshold: float = 0.5,
                   tree=None) -> np.ndarray:
    """Interpolate ``b`` vectors at query points and re-binarise the switch."""
    out = idw_interpolate(query, nodes, np.asarray(b).reshape(-1, 4), knn, tree)
    on = out[:, 0] >= threshold
    out[:, 0] = on.astype(np.float64)
    out[~on, 1:] = 0.0
    return out


@dataclass(frozen=True)
class TessellationConfig:
    cuboids: int = 4           # c
    points_per_cuboid: int = 64  # f
    knn: int = 5
    switch_threshold: float = 0.5


def resample_features(mesh: TetMesh, materials: MaterialField, prescribed: np.ndarray,
                      config: TessellationConfig = TessellationConfig(), seed: int = 0,
                      displacements: Optional[np.ndarray] = None,
                      bone_encoding: str = "assigned") -> FeatureVectorSet:
    """Feature vectors at tessellation-sampled points instead of mesh nodes.

    ``k`` comes from the sampled point's region draw, ``b`` (and the optional
    ground truth ``displacements``) from 5-NN inverse-distance interpolation
    over the mesh nodes.
    """
    points, labels = tessellate_and_sample(mesh, config.cuboids, config.points_per_cuboid, seed)
    nodal = assemble_features(mesh, materials, prescribed, bone_encoding)
    tree = cKDTree(mesh.nodes)
    b = interpolate_bc(points, mesh.nodes, nodal.bc, config.knn, config.switch_threshold, tree)
    if materials.region_values:
        k = np.array([materials.region_values[int(r)] for r in labels], dtype=np.float64)
    else:
        # per-node fields without region draws: take the value of any node in the region
        k = np.empty((len(labels), 2))
        for r in np.unique(labels):
            node = np.flatnonzero(mesh.labels == r)[0]
            k[labels == r] = (materials.shear[node], materials.bulk[node])
    targets = None
    if displacements is not None:
        targets = idw_interpolate(points, mesh.nodes, displacements, config.knn, tree)
    return FeatureVectorSet(np.hstack([points, b, k]), labels, targets)
