"""Total-Lagrangian static solver for compressible neo-Hookean linear tets.

Strain energy density::

    W = G/2 (J^(-2/3) I1 - 3) + K/2 (J - 1)^2

with ``F = I + grad u``, ``I1 = tr(F^T F)`` and ``J = det F``.  Materials are
stored per node and averaged onto elements.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kernels
from .geometry import Region, TetMesh, sample_probe_load

log = logging.getLogger(__name__)


class FESolverError(RuntimeError):
    pass


class InversionError(FESolverError):
    def __init__(self, element: int, message: Optional[str] = None):
        self.element = int(element)
        super().__init__(message or f"element {element} inverted (J <= 0)")


class ConvergenceError(FESolverError):
    def __init__(self, residual: float, step: int, iterations: int):
        self.residual = float(residual)
        super().__init__(f"Newton did not converge in load step {step} after "
                         f"{iterations} iterations; last residual {residual:.3e}")


class DatasetGenerationError(FESolverError):
    pass


@dataclass
class MaterialField:
    """Per-node shear (G) and bulk (K) moduli in Pa."""

    shear: np.ndarray
    bulk: np.ndarray
    region_values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shear = np.asarray(self.shear, dtype=np.float64)
        self.bulk = np.asarray(self.bulk, dtype=np.float64)
        if self.shear.shape != self.bulk.shape:
            raise ValueError("shear and bulk must have the same shape")
        if np.any(self.shear <= 0) or np.any(self.bulk <= 0):
            raise ValueError("moduli must be positive")

    @classmethod
    def uniform(cls, n_nodes: int, shear: float, bulk: float) -> "MaterialField":
        return cls(np.full(n_nodes, float(shear)), np.full(n_nodes, float(bulk)))

    @classmethod
    def from_regions(cls, labels: np.ndarray, values: dict) -> "MaterialField":
        labels = np.asarray(labels)
        shear = np.empty(len(labels))
        bulk = np.empty(len(labels))
        for region in np.unique(labels):
            g, k = values[int(region)]
            shear[labels == region] = g
            bulk[labels == region] = k
        return cls(shear, bulk, {int(r): (float(g), float(k)) for r, (g, k) in values.items()})

    def element_values(self, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.shear[tets].mean(axis=1), self.bulk[tets].mean(axis=1)


@dataclass(frozen=True)
class MaterialRanges:
    """Uniform sampling ranges for region-wise (G, K) draws, in Pa."""

    shear: tuple[float, float] = (1.0e3, 1.0e4)
    bulk: tuple[float, float] = (1.0e4, 1.0e5)
    heterogeneous: bool = True

    def __post_init__(self):
        for name in ("shear", "bulk"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        object.__setattr__(self, "shear", tuple(float(v) for v in self.shear))
        object.__setattr__(self, "bulk", tuple(float(v) for v in self.bulk))

    def draw(self, rng: np.random.Generator) -> dict:
        values = {}
        shared = None
        for region in Region:
            if shared is None or self.heterogeneous:
                shared = (rng.uniform(*self.shear), rng.uniform(*self.bulk))
            values[int(region)] = shared
        return values

    def to_dict(self) -> dict:
        return {"shear": list(self.shear), "bulk": list(self.bulk),
                "heterogeneous": self.heterogeneous}


def shape_gradients(nodes: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference shape-function gradients ``(ne, 4, 3)`` and volumes ``(ne,)``."""
    X = nodes[tets]
    D = np.transpose(X[:, 1:] - X[:, :1], (0, 2, 1))
    vol = np.linalg.det(D) / 6.0
    if np.any(vol <= 0):
        raise InversionError(int(np.argmin(vol)), "reference tet with non-positive volume")
    Dinv = np.linalg.inv(D)
    dN = np.empty((len(tets), 4, 3))
    dN[:, 1:] = Dinv
    dN[:, 0] = -Dinv.sum(axis=1)
    return dN, vol


def element_energy(tet_nodes, displacements, shear: float, bulk: float) -> float:
    """Strain energy (J) of a single linear tet."""
    dN, vol = shape_gradients(np.asarray(tet_nodes, dtype=float), np.arange(4)[None])
    energy, _, _, bad = kernels.element_response(
        dN, vol, np.asarray(displacements, dtype=float)[None], [shear], [bulk], order=0)
    if bad >= 0:
        raise InversionError(0)
    return float(energy[0])


class Assembler:
    """Precomputed geometry and sparsity for one mesh."""

    def __init__(self, mesh: TetMesh, backend: Optional[str] = None):
        self.mesh = mesh
        self.backend = backend
        self.dN, self.vol = shape_gradients(mesh.nodes, mesh.tets)
        n = mesh.n_nodes
        self.ndof = 3 * n
        edofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self.edofs = edofs
        rows = np.repeat(edofs, 12, axis=1).ravel()
        cols = np.tile(edofs, (1, 12)).ravel()
        key = rows * self.ndof + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        self._scatter = inverse
        self._pattern_rows = uniq // self.ndof
        self._pattern_cols = uniq % self.ndof
        self._nnz = len(uniq)
        # csr from sorted unique keys: row-major order already
        counts = np.bincount(self._pattern_rows, minlength=self.ndof)
        self._indptr = np.concatenate([[0], np.cumsum(counts)])

    def _response(self, u: np.ndarray, materials: MaterialField, order: int):
        G, K = materials.element_values(self.mesh.tets)
        ue = np.asarray(u, dtype=float).reshape(-1, 3)[self.mesh.tets]
        out = kernels.element_response(self.dN, self.vol, ue, G, K, order, self.backend)
        if out[3] >= 0:
            raise InversionError(out[3])
        return out

    def energy(self, u, materials) -> float:
        return float(np.sum(self._response(u, materials, 0)[0]))

    def forces(self, u, materials) -> np.ndarray:
        fe = self._response(u, materials, 1)[1]
        f = np.bincount(self.edofs.ravel(), weights=fe.reshape(-1), minlength=self.ndof)
        return f.reshape(-1, 3)

    def forces_and_tangent(self, u, materials) -> tuple[np.ndarray, sp.csr_matrix]:
        _, fe, ke, _ = self._response(u, materials, 2)
        f = np.bincount(self.edofs.ravel(), weights=fe.reshape(-1), minlength=self.ndof)
        data = np.bincount(self._scatter, weights=ke.reshape(-1), minlength=self._nnz)
        K = sp.csr_matrix((data, self._pattern_cols, self._indptr), shape=(self.ndof, self.ndof))
        return f.reshape(-1, 3), K


def total_energy(mesh: TetMesh, displacements, materials: MaterialField) -> float:
    return Assembler(mesh).energy(displacements, materials)


def assemble_internal_forces(mesh: TetMesh, displacements, materials: MaterialField,
                             backend: Optional[str] = None) -> np.ndarray:
    """Nodal internal forces ``(N, 3)``: the gradient of total strain energy."""
    return Assembler(mesh, backend).forces(displacements, materials)


def assemble_tangent(mesh: TetMesh, displacements, materials: MaterialField,
                     backend: Optional[str] = None) -> sp.csr_matrix:
    """Symmetric tangent stiffness ``(3N, 3N)`` in CSR form."""
    return Assembler(mesh, backend).forces_and_tangent(displacements, materials)[1]


@dataclass
class FESolution:
    displacement: np.ndarray
    newton_iterations: int
    residual_norm: float
    residual_history: list = field(default_factory=list)
    cg_iterations: int = 0


def dirichlet_field(mesh: TetMesh, probe_load: Optional[np.ndarray] = None) -> np.ndarray:
    """Full ``(N, 3)`` prescribed field: zero on fixed nodes, probe load on loaded nodes."""
    u = np.zeros((mesh.n_nodes, 3))
    if probe_load is not None:
        u[mesh.loaded_nodes] = probe_load
    return u


def solve_static(mesh: TetMesh, materials: MaterialField, prescribed: np.ndarray,
                 constrained: Optional[np.ndarray] = None, load_steps: int = 4,
                 max_iterations: int = 30, cg_rtol: float = 1e-10,
                 backend: Optional[str] = None, assembler: Optional[Assembler] = None
                 ) -> FESolution:
    """Newton-Raphson with incremental Dirichlet loading.

    ``prescribed`` is an ``(N, 3)`` field whose entries are imposed on the
    constrained DOFs.  ``constrained`` is an ``(N, 3)`` boolean mask that
    defaults to all components of ``fixed_nodes`` and ``loaded_nodes``.
    Constrained DOFs are eliminated; the reduced systems are solved by
    Jacobi-preconditioned CG.
    """
    asm = assembler or Assembler(mesh, backend)
    prescribed = np.asarray(prescribed, dtype=np.float64).reshape(-1, 3)
    if constrained is None:
        constrained = np.zeros((mesh.n_nodes, 3), dtype=bool)
        constrained[mesh.fixed_nodes] = True
        constrained[mesh.loaded_nodes] = True
    cmask = np.asarray(constrained, dtype=bool).ravel()
    free = np.flatnonzero(~cmask)
    cons = np.flatnonzero(cmask)
    target = prescribed.ravel()[cons]

    g_max = float(materials.shear.max())
    tol = 1e-9 * g_max * float(asm.vol.sum()) ** (1.0 / 3.0)
    steps = load_steps if np.any(target != 0) else 1

    u = np.zeros(asm.ndof)
    history = []
    total_iters = 0
    cg_total = 0
    res = 0.0
    f, K = asm.forces_and_tangent(u, materials)
    f = f.ravel()

    def solve(Kmat, rhs):
        nonlocal cg_total
        x, its, _ = kernels.pcg(Kmat, rhs, cg_rtol, backend=backend)
        cg_total += its
        return x

    for step in range(1, steps + 1):
        step_target = target if step == steps else target * (step / steps)
        delta_c = step_target - u[cons]
        if np.any(delta_c != 0):
            rhs = -f[free] - K[free][:, cons] @ delta_c
            du = solve(K[free][:, free], rhs)
            u[free] += du
            u[cons] = step_target
        step_hist = []
        for it in range(max_iterations):
            try:
                f, K = asm.forces_and_tangent(u, materials)
            except InversionError as exc:
                raise InversionError(
                    exc.element,
                    f"element {exc.element} inverted in load step {step}; "
                    f"retry with more load steps (currently {steps})") from None
            f = f.ravel()
            total_iters += 1
            res = float(np.max(np.abs(f[free]))) if free.size else 0.0
            step_hist.append(res)
            if res < tol:
                break
            u[free] += solve(K[free][:, free], -f[free])
        else:
            raise ConvergenceError(res, step, max_iterations)
        history.append(step_hist)

    u[cons] = target
    return FESolution(u.reshape(-1, 3), total_iters, res, history, cg_total)


@dataclass
class SimulationSample:
    """One FE solve packaged for learning."""

    features: np.ndarray
    displacements: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    @property
    def feature_mode(self) -> str:
        return "pbk" if self.features.shape[1] == 9 else "pb"


def _worker_count() -> int:
    env = os.environ.get("BMS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _simulate_one(args):
    from .features import assemble_features

    mesh, ranges, scale, seed, index, load_steps = args
    rng = np.random.default_rng([seed, index])
    region_values = ranges.draw(rng)
    materials = MaterialField.from_regions(mesh.labels, region_values)
    if scale > 0:
        load = sample_probe_load(mesh, scale, int(rng.integers(2**31)))
    else:
        load = np.zeros((mesh.loaded_nodes.size, 3))
    prescribed = dirichlet_field(mesh, load)
    meta = {"index": index, "materials": {str(k): list(v) for k, v in region_values.items()},
            "probe_displacement": load[0].tolist()}
    try:
        sol = solve_static(mesh, materials, prescribed, load_steps=load_steps)
    except FESolverError as exc:
        return None, f"simulation {index}: {exc}"
    fv = assemble_features(mesh, materials, prescribed)
    meta["newton_iterations"] = sol.newton_iterations
    return SimulationSample(fv.features, sol.displacement, mesh.labels.copy(), meta), None


def generate_dataset(mesh: TetMesh, n_sims: int, material_ranges: MaterialRanges = MaterialRanges(),
                     displacement_scale: float = 0.005, seed: int = 0, load_steps: int = 4,
                     workers: Optional[int] = None) -> tuple[list, dict]:
    """Run ``n_sims`` randomised simulations on one mesh.

    Returns ``(samples, stats)``.  Failed solves are skipped and counted; more
    than half failing raises :class:`DatasetGenerationError`.
    """
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    jobs = [(mesh, material_ranges, displacement_scale, seed, i, load_steps) for i in range(n_sims)]
    workers = _worker_count() if workers is None else workers
    if workers > 1 and n_sims > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(job) for job in jobs]
    samples = [s for s, _ in results if s is not None]
    errors = [e for _, e in results if e is not None]
    if len(errors) * 2 > n_sims:
        raise DatasetGenerationError(
            f"{len(errors)} of {n_sims} simulations failed; first errors: {errors[:3]}")
    for e in errors:
        log.warning(e)
    mags = (np.concatenate([np.linalg.norm(s.displacements, axis=1) for s in samples])
            if samples else np.zeros(1))
    stats = {"n_requested": n_sims, "n_samples": len(samples), "n_failed": len(errors),
             "mean_displacement": float(mags.mean()), "max_displacement": float(mags.max()),
             "failures": errors}
    return samples, stats
