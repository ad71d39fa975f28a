"""Pure-numpy implementations of the hot kernels (fallback for ``_kernels.pyx``).

Both backends expose the same two functions:

``element_response(dNdX, vol, ue, G, K, order)``
    Compressible neo-Hookean response of linear tets.  ``order`` 0 returns
    energies only, 1 adds nodal forces, 2 adds 12x12 element tangents.
    Returns ``(energy, forces, tangent, bad)`` where ``bad`` is the index of
    the first element with ``J <= 0`` (or -1).

``pcg(indptr, indices, data, b, rtol, maxiter)``
    Jacobi-preconditioned conjugate gradient on a CSR matrix.
    Returns ``(x, iterations, relative_residual)``.
"""
import numpy as np

BACKEND = "python"


def element_response(dNdX, vol, ue, G, K, order=2):
    ne = len(vol)
    F = np.einsum("eai,eaj->eij", ue, dNdX)
    F[:, 0, 0] += 1.0
    F[:, 1, 1] += 1.0
    F[:, 2, 2] += 1.0
    J = np.linalg.det(F)
    bad_mask = J <= 0
    if np.any(bad_mask):
        bad = int(np.argmax(bad_mask))
        return None, None, None, bad
    I1 = np.einsum("eij,eij->e", F, F)
    a = J ** (-2.0 / 3.0)
    energy = vol * (0.5 * G * (a * I1 - 3.0) + 0.5 * K * (J - 1.0) ** 2)
    if order == 0:
        return energy, None, None, -1

    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    P = ((G * a)[:, None, None] * (F - (I1 / 3.0)[:, None, None] * FinvT)
         + (K * (J - 1.0) * J)[:, None, None] * FinvT)
    forces = vol[:, None, None] * np.einsum("eij,eaj->eai", P, dNdX)
    if order == 1:
        return energy, forces, None, -1

    eye = np.eye(3)
    Ga = (G * a)[:, None, None, None, None]
    dev = F - (I1 / 3.0)[:, None, None] * FinvT
    inv_prod = np.einsum("ejk,eli->eijkl", Finv, Finv)
    A = Ga * (
        (-2.0 / 3.0) * np.einsum("ekl,eij->eijkl", FinvT, dev)
        + np.einsum("ik,jl->ijkl", eye, eye)[None]
        - (2.0 / 3.0) * np.einsum("ekl,eij->eijkl", F, FinvT)
        + (I1 / 3.0)[:, None, None, None, None] * inv_prod
    )
    A += K[:, None, None, None, None] * (
        ((2.0 * J - 1.0) * J)[:, None, None, None, None]
        * np.einsum("ekl,eij->eijkl", FinvT, FinvT)
        - ((J - 1.0) * J)[:, None, None, None, None] * inv_prod
    )
    Ke = np.einsum("eijkl,eaj,ebl->eaibk", A, dNdX, dNdX) * vol[:, None, None, None, None]
    return energy, forces, Ke.reshape(ne, 12, 12), -1


def pcg(indptr, indices, data, b, rtol=1e-10, maxiter=10000):
    import scipy.sparse as sp

    n = len(b)
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    diag = A.diagonal()
    minv = 1.0 / diag
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0, 0.0
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    it = 0
    rel = 1.0
    while it < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = np.linalg.norm(r) / bnorm
        if rel < rtol:
            break
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, rel
