# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels. Must mirror the semantics of ``_ref.py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh, sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


cdef inline double _sig(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


def gru_forward(double[:, ::1] xa, double[:, ::1] u):
    cdef Py_ssize_t L = xa.shape[0]
    cdef Py_ssize_t H3 = xa.shape[1]
    cdef Py_ssize_t H = H3 // 3
    hs_arr = np.empty((L, H))
    gates_arr = np.empty((L, H3))
    cdef double[:, ::1] hs = hs_arr
    cdef double[:, ::1] gates = gates_arr
    h_arr = np.zeros(H)
    rh_arr = np.empty(H)
    cdef double[::1] h = h_arr
    cdef double[::1] rh = rh_arr
    cdef Py_ssize_t t, i, j
    cdef double az, ar, ac, z, r, c
    with nogil:
        for t in range(L):
            for i in range(H):
                az = xa[t, i]
                ar = xa[t, H + i]
                for j in range(H):
                    az += h[j] * u[j, i]
                    ar += h[j] * u[j, H + i]
                z = _sig(az)
                r = _sig(ar)
                gates[t, i] = z
                gates[t, H + i] = r
            for i in range(H):
                rh[i] = gates[t, H + i] * h[i]
            for i in range(H):
                ac = xa[t, 2 * H + i]
                for j in range(H):
                    ac += rh[j] * u[j, 2 * H + i]
                c = tanh(ac)
                gates[t, 2 * H + i] = c
            for i in range(H):
                z = gates[t, i]
                h[i] = (1.0 - z) * h[i] + z * gates[t, 2 * H + i]
                hs[t, i] = h[i]
    return hs_arr, gates_arr


def gru_backward(double[:, ::1] d_hs, double[:, ::1] hs, double[:, ::1] gates,
                 double[:, ::1] u):
    cdef Py_ssize_t L = hs.shape[0]
    cdef Py_ssize_t H = hs.shape[1]
    d_xa_arr = np.empty((L, 3 * H))
    d_u_arr = np.zeros((H, 3 * H))
    cdef double[:, ::1] d_xa = d_xa_arr
    cdef double[:, ::1] d_u = d_u_arr
    dh_arr = np.zeros(H)
    drh_arr = np.empty(H)
    cdef double[::1] dh = dh_arr
    cdef double[::1] drh = drh_arr
    cdef Py_ssize_t t, i, j
    cdef double z, r, c, dht, dz, dc, dhp, dac, daz, dar, hp, acc
    with nogil:
        for t in range(L - 1, -1, -1):
            # d(candidate pre-activation), needed before the reset-gate grads
            for i in range(H):
                z = gates[t, i]
                c = gates[t, 2 * H + i]
                hp = hs[t - 1, i] if t > 0 else 0.0
                dht = d_hs[t, i] + dh[i]
                dac = dht * z * (1.0 - c * c)
                d_xa[t, 2 * H + i] = dac
            for j in range(H):
                acc = 0.0
                for i in range(H):
                    acc += d_xa[t, 2 * H + i] * u[j, 2 * H + i]
                drh[j] = acc
            for i in range(H):
                z = gates[t, i]
                r = gates[t, H + i]
                c = gates[t, 2 * H + i]
                hp = hs[t - 1, i] if t > 0 else 0.0
                dht = d_hs[t, i] + dh[i]
                dz = dht * (c - hp)
                dhp = dht * (1.0 - z) + drh[i] * r
                daz = dz * z * (1.0 - z)
                dar = drh[i] * hp * r * (1.0 - r)
                d_xa[t, i] = daz
                d_xa[t, H + i] = dar
                dh[i] = dhp
            for j in range(H):
                hp = hs[t - 1, j] if t > 0 else 0.0
                r = gates[t, H + j]
                acc = 0.0
                for i in range(H):
                    d_u[j, i] += hp * d_xa[t, i]
                    d_u[j, H + i] += hp * d_xa[t, H + i]
                    d_u[j, 2 * H + i] += r * hp * d_xa[t, 2 * H + i]
                    acc += d_xa[t, i] * u[j, i] + d_xa[t, H + i] * u[j, H + i]
                dh[j] += acc
    return d_xa_arr, d_u_arr


def cosine_distance_matrix(double[:, ::1] emb, double eps):
    cdef Py_ssize_t L = emb.shape[0]
    cdef Py_ssize_t D = emb.shape[1]
    unit_arr = np.empty((L, D))
    dist_arr = np.empty((L, L))
    cdef double[:, ::1] unit = unit_arr
    cdef double[:, ::1] dist = dist_arr
    cdef Py_ssize_t i, j, m
    cdef double s, d
    with nogil:
        for i in range(L):
            s = 0.0
            for m in range(D):
                s += emb[i, m] * emb[i, m]
            s = sqrt(s)
            if s < eps:
                s = eps
            for m in range(D):
                unit[i, m] = emb[i, m] / s
        for i in range(L):
            dist[i, i] = 0.0
            for j in range(i + 1, L):
                s = 0.0
                for m in range(D):
                    s += unit[i, m] * unit[j, m]
                d = 1.0 - s
                if d < 0.0:
                    d = 0.0
                elif d > 2.0:
                    d = 2.0
                if d < eps:
                    d = 0.0
                elif d > 2.0 - eps:
                    d = 2.0
                dist[i, j] = d
                dist[j, i] = d
    return dist_arr


def lof_scores_from_dist(double[:, ::1] dist, Py_ssize_t k, double eps):
    cdef Py_ssize_t L = dist.shape[0]
    d_k_arr = np.empty(L)
    lrd_arr = np.empty(L)
    out_arr = np.empty(L)
    counts_arr = np.zeros(L, dtype=np.intp)
    cdef double[::1] d_k = d_k_arr
    cdef double[::1] lrd = lrd_arr
    cdef double[::1] out = out_arr
    cdef Py_ssize_t[::1] counts = counts_arr
    row_arr = np.empty(L)
    cdef double[::1] row = row_arr
    cdef Py_ssize_t i, j, n
    cdef double reach, mean, acc
    for i in range(L):
        n = 0
        for j in range(L):
            if j != i:
                row[n] = dist[i, j]
                n += 1
        row_arr[:n].sort()
        d_k[i] = row[k - 1]
    with nogil:
        for i in range(L):
            n = 0
            mean = 0.0
            for j in range(L):
                if j != i and dist[i, j] <= d_k[i]:
                    reach = d_k[j]
                    if dist[i, j] > reach:
                        reach = dist[i, j]
                    mean += reach
                    n += 1
            counts[i] = n
            mean /= n
            if mean < eps:
                mean = eps
            lrd[i] = 1.0 / mean
        for i in range(L):
            acc = 0.0
            for j in range(L):
                if j != i and dist[i, j] <= d_k[i]:
                    acc += lrd[j]
            out[i] = acc / counts[i] / lrd[i]
    return out_arr


def lof_scores(double[:, ::1] emb, Py_ssize_t k, double eps):
    return lof_scores_from_dist(cosine_distance_matrix(emb, eps), k, eps)
