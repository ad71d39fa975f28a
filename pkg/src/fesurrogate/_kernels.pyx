# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: per-tet neo-Hookean response and CSR Jacobi-PCG.

Signatures match ``_kernels_py``; see that module for the contract.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow, sqrt

BACKEND = "cython"


cdef inline double _det3(double[3][3] F) nogil:
    return (F[0][0] * (F[1][1] * F[2][2] - F[1][2] * F[2][1])
            - F[0][1] * (F[1][0] * F[2][2] - F[1][2] * F[2][0])
            + F[0][2] * (F[1][0] * F[2][1] - F[1][1] * F[2][0]))


cdef inline void _inv3(double[3][3] F, double J, double[3][3] out) nogil:
    cdef double s = 1.0 / J
    out[0][0] = (F[1][1] * F[2][2] - F[1][2] * F[2][1]) * s
    out[0][1] = (F[0][2] * F[2][1] - F[0][1] * F[2][2]) * s
    out[0][2] = (F[0][1] * F[1][2] - F[0][2] * F[1][1]) * s
    out[1][0] = (F[1][2] * F[2][0] - F[1][0] * F[2][2]) * s
    out[1][1] = (F[0][0] * F[2][2] - F[0][2] * F[2][0]) * s
    out[1][2] = (F[0][2] * F[1][0] - F[0][0] * F[1][2]) * s
    out[2][0] = (F[1][0] * F[2][1] - F[1][1] * F[2][0]) * s
    out[2][1] = (F[0][1] * F[2][0] - F[0][0] * F[2][1]) * s
    out[2][2] = (F[0][0] * F[1][1] - F[0][1] * F[1][0]) * s


def element_response(const double[:, :, ::1] dNdX, const double[::1] vol,
                     const double[:, :, ::1] ue, const double[::1] G,
                     const double[::1] K, int order=2):
    cdef Py_ssize_t ne = vol.shape[0]
    cdef Py_ssize_t e, a, b, i, j, k, l
    cdef double[3][3] F
    cdef double[3][3] Fi
    cdef double[3][3] P
    cdef double[3][3] dev
    cdef double[3][3][3][3] A
    cdef double J, I1, pa, g, kk, v, s, ga, t1, t2
    cdef Py_ssize_t bad = -1

    energy_arr = np.empty(ne)
    cdef double[::1] energy = energy_arr
    forces_arr = np.empty((ne, 4, 3)) if order >= 1 else None
    tangent_arr = np.empty((ne, 12, 12)) if order >= 2 else None
    cdef double[:, :, ::1] forces
    cdef double[:, :, ::1] tangent
    if order >= 1:
        forces = forces_arr
    if order >= 2:
        tangent = tangent_arr

    with nogil:
        for e in range(ne):
            for i in range(3):
                for j in range(3):
                    s = 1.0 if i == j else 0.0
                    for a in range(4):
                        s = s + ue[e, a, i] * dNdX[e, a, j]
                    F[i][j] = s
            J = _det3(F)
            if J <= 0:
                bad = e
                break
            I1 = 0.0
            for i in range(3):
                for j in range(3):
                    I1 = I1 + F[i][j] * F[i][j]
            pa = pow(J, -2.0 / 3.0)
            g = G[e]
            kk = K[e]
            v = vol[e]
            energy[e] = v * (0.5 * g * (pa * I1 - 3.0) + 0.5 * kk * (J - 1.0) * (J - 1.0))
            if order < 1:
                continue
            _inv3(F, J, Fi)
            ga = g * pa
            for i in range(3):
                for j in range(3):
                    # Fi[j][i] is F^{-T}_ij
                    dev[i][j] = F[i][j] - (I1 / 3.0) * Fi[j][i]
                    P[i][j] = ga * dev[i][j] + kk * (J - 1.0) * J * Fi[j][i]
            for a in range(4):
                for i in range(3):
                    s = 0.0
                    for j in range(3):
                        s = s + P[i][j] * dNdX[e, a, j]
                    forces[e, a, i] = v * s
            if order < 2:
                continue
            t1 = kk * (2.0 * J - 1.0) * J
            t2 = kk * (J - 1.0) * J
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        for l in range(3):
                            s = ((-2.0 / 3.0) * Fi[l][k] * dev[i][j]
                                 - (2.0 / 3.0) * F[k][l] * Fi[j][i]
                                 + (I1 / 3.0) * Fi[j][k] * Fi[l][i])
                            if i == k and j == l:
                                s = s + 1.0
                            A[i][j][k][l] = (ga * s + t1 * Fi[l][k] * Fi[j][i]
                                             - t2 * Fi[j][k] * Fi[l][i])
            for a in range(4):
                for i in range(3):
                    for b in range(4):
                        for k in range(3):
                            s = 0.0
                            for j in range(3):
                                for l in range(3):
                                    s = s + A[i][j][k][l] * dNdX[e, a, j] * dNdX[e, b, l]
                            tangent[e, 3 * a + i, 3 * b + k] = v * s
    if bad >= 0:
        return None, None, None, bad
    return energy_arr, forces_arr, tangent_arr, -1


def pcg(const long long[::1] indptr, const int[::1] indices, const double[::1] data,
        const double[::1] b, double rtol=1e-10, long maxiter=10000):
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i, jj
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double[::1] r = np.array(b, dtype=np.float64)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] p = np.empty(n)
    cdef double[::1] Ap = np.empty(n)
    cdef double[::1] minv = np.empty(n)
    cdef double bnorm = 0.0, rz = 0.0, rz_new, pAp, alpha, beta, rr, s, rel = 1.0
    cdef long it = 0

    with nogil:
        for i in range(n):
            bnorm = bnorm + b[i] * b[i]
            s = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                if indices[jj] == i:
                    s = s + data[jj]
            minv[i] = 1.0 / s
        bnorm = sqrt(bnorm)
    if bnorm == 0.0:
        return x_arr, 0, 0.0
    with nogil:
        for i in range(n):
            z[i] = minv[i] * r[i]
            p[i] = z[i]
            rz = rz + r[i] * z[i]
        while it < maxiter:
            pAp = 0.0
            for i in range(n):
                s = 0.0
                for jj in range(indptr[i], indptr[i + 1]):
                    s = s + data[jj] * p[indices[jj]]
                Ap[i] = s
                pAp = pAp + p[i] * s
            alpha = rz / pAp
            rr = 0.0
            for i in range(n):
                x[i] = x[i] + alpha * p[i]
                r[i] = r[i] - alpha * Ap[i]
                rr = rr + r[i] * r[i]
            it += 1
            rel = sqrt(rr) / bnorm
            if rel < rtol:
                break
            rz_new = 0.0
            for i in range(n):
                z[i] = minv[i] * r[i]
                rz_new = rz_new + r[i] * z[i]
            beta = rz_new / rz
            rz = rz_new
            for i in range(n):
                p[i] = z[i] + beta * p[i]
    return x_arr, it, rel
