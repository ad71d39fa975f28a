"""Standalone FE solver checks against analytic and finite-difference oracles.

The uniaxial oracle minimises the homogeneous energy density over the free
lateral stretch ``mu`` (``F = diag(lam, mu, mu)``) with a scalar root-find;
it shares no code with the element kernels.
"""
from __future__ import annotations

import time
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import fesolver as fe
from .geometry import TetMesh, box_mesh


def neo_hookean_density(F: np.ndarray, G: float, K: float) -> float:
    J = np.linalg.det(F)
    return 0.5 * G * (J ** (-2.0 / 3.0) * np.sum(F * F) - 3.0) + 0.5 * K * (J - 1.0) ** 2


def uniaxial_lateral_stretch(lam: float, G: float, K: float) -> float:
    """Lateral stretch that makes the lateral stress vanish under axial stretch ``lam``."""
    def dW(mu):
        J = lam * mu * mu
        I1 = lam * lam + 2.0 * mu * mu
        dJ = 2.0 * lam * mu
        return (0.5 * G * (-2.0 / 3.0 * J ** (-5.0 / 3.0) * dJ * I1 + J ** (-2.0 / 3.0) * 4.0 * mu)
                + K * (J - 1.0) * dJ)
    return brentq(dW, 0.2, 5.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def uniaxial_energy_density(lam: float, G: float, K: float) -> float:
    mu = uniaxial_lateral_stretch(lam, G, K)
    return neo_hookean_density(np.diag([lam, mu, mu]), G, K)


def two_tet_mesh() -> TetMesh:
    nodes = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                      [0.0, 0.0, 1.0], [0.8, 0.9, 0.7]])
    tets = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
    mesh = TetMesh(nodes, tets, np.zeros(5, dtype=np.uint8))
    # orient second tet positively
    if mesh.volumes()[1] < 0:
        mesh.tets[1] = mesh.tets[1][[0, 2, 1, 3]]
    return mesh


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def force_fd_check(seed: int = 0, h: float = 1e-6, backend: Optional[str] = None) -> float:
    """Relative error between assembled forces and central differences of energy."""
    mesh = two_tet_mesh()
    rng = np.random.default_rng(seed)
    mat = fe.MaterialField(rng.uniform(500, 2000, 5), rng.uniform(5e3, 2e4, 5))
    u = 0.05 * rng.standard_normal((5, 3))
    asm = fe.Assembler(mesh, backend)
    f = asm.forces(u, mat).ravel()
    fd = np.empty_like(f)
    flat = u.ravel()
    for i in range(flat.size):
        up, um = flat.copy(), flat.copy()
        up[i] += h
        um[i] -= h
        fd[i] = (asm.energy(up, mat) - asm.energy(um, mat)) / (2 * h)
    return _rel(f, fd)


def tangent_fd_check(seed: int = 0, h: float = 1e-6, backend: Optional[str] = None) -> float:
    """Relative error between the tangent and central differences of forces."""
    mesh = two_tet_mesh()
    rng = np.random.default_rng(seed)
    mat = fe.MaterialField(rng.uniform(500, 2000, 5), rng.uniform(5e3, 2e4, 5))
    u = 0.05 * rng.standard_normal((5, 3))
    asm = fe.Assembler(mesh, backend)
    K = asm.forces_and_tangent(u, mat)[1].toarray()
    flat = u.ravel()
    fd = np.empty_like(K)
    for i in range(flat.size):
        up, um = flat.copy(), flat.copy()
        up[i] += h
        um[i] -= h
        fd[:, i] = (asm.forces(up, mat).ravel() - asm.forces(um, mat).ravel()) / (2 * h)
    return _rel(K, fd)


def patch_test(seed: int = 0, backend: Optional[str] = None) -> float:
    """Max interior error (m) when a linear field is imposed on a 2x2x2 cube's boundary."""
    mesh = box_mesh(2, 1.0, jitter=0.2, seed=seed)
    rng = np.random.default_rng(seed)
    A = 0.05 * rng.standard_normal((3, 3))
    c = 0.01 * rng.standard_normal(3)
    exact = mesh.nodes @ A.T + c
    boundary = np.any((mesh.nodes <= 1e-12) | (mesh.nodes >= 1 - 1e-12), axis=1)
    constrained = np.repeat(boundary[:, None], 3, axis=1)
    mat = fe.MaterialField.uniform(mesh.n_nodes, 1000.0, 10000.0)
    sol = fe.solve_static(mesh, mat, np.where(constrained, exact, 0.0), constrained,
                          backend=backend)
    return float(np.max(np.abs(sol.displacement[~boundary] - exact[~boundary])))


def uniaxial_problem(lam: float, resolution: int = 3, jitter: float = 0.15):
    """Unit cube stretched to ``lam`` along x with symmetry planes at x=0, y=0, z=0.

    Returns ``(mesh, prescribed, constrained)``; the y=1 and z=1 faces are traction free.
    """
    mesh = box_mesh(resolution, 1.0, jitter=jitter, seed=1)
    X = mesh.nodes
    tol = 1e-12
    constrained = np.zeros((mesh.n_nodes, 3), dtype=bool)
    prescribed = np.zeros((mesh.n_nodes, 3))
    constrained[X[:, 0] <= tol, 0] = True
    right = X[:, 0] >= 1 - tol
    constrained[right, 0] = True
    prescribed[right, 0] = lam - 1.0
    constrained[X[:, 1] <= tol, 1] = True
    constrained[X[:, 2] <= tol, 2] = True
    return mesh, prescribed, constrained


def uniaxial_test(lam: float, G: float = 1000.0, K: float = 10000.0, resolution: int = 3,
                  backend: Optional[str] = None) -> float:
    """Relative error of the FE lateral displacement against the analytic oracle."""
    mesh, prescribed, constrained = uniaxial_problem(lam, resolution)
    mat = fe.MaterialField.uniform(mesh.n_nodes, G, K)
    sol = fe.solve_static(mesh, mat, prescribed, constrained, backend=backend)
    expected = uniaxial_lateral_stretch(lam, G, K) - 1.0
    X = mesh.nodes
    top_y = X[:, 1] >= 1 - 1e-12
    top_z = X[:, 2] >= 1 - 1e-12
    got = np.concatenate([sol.displacement[top_y, 1], sol.displacement[top_z, 2]])
    return float(np.max(np.abs(got - expected)) / abs(expected))


CHECKS = {
    "patch test (max interior error, m)": (patch_test, 1e-9),
    "uniaxial lambda=0.90": (lambda backend=None: uniaxial_test(0.90, backend=backend), 1e-6),
    "uniaxial lambda=0.95": (lambda backend=None: uniaxial_test(0.95, backend=backend), 1e-6),
    "uniaxial lambda=1.05": (lambda backend=None: uniaxial_test(1.05, backend=backend), 1e-6),
    "uniaxial lambda=1.10": (lambda backend=None: uniaxial_test(1.10, backend=backend), 1e-6),
    "internal force vs FD energy": (force_fd_check, 1e-6),
    "tangent vs FD forces": (tangent_fd_check, 1e-5),
}


def run_all(backend: Optional[str] = None) -> list:
    """Run every check; returns ``[(name, value, tolerance, passed, seconds)]``."""
    results = []
    for name, (fn, tol) in CHECKS.items():
        t0 = time.perf_counter()
        try:
            value = fn(backend=backend)
            passed = bool(value < tol)
        except Exception as exc:  # a crashing check is a failing check
            value, passed = float("nan"), False
            name = f"{name} [{type(exc).__name__}: {exc}]"
        results.append((name, value, tol, passed, time.perf_counter() - t0))
    return results
