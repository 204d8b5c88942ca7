# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: voxel traversal, fused RTE march and its adjoint,
and cross-section mixing. ``_kernels_py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, INFINITY

cnp.import_array()


cdef int _traverse_one(const double[::1] o, const double[::1] d, double t_near, double t_far,
                       const double[::1] bmin, const double[::1] sp, const long[::1] dims,
                       double nudge, list cells, list lengths, list mids):
    cdef int cell[3]
    cdef int step[3]
    cdef double t_max[3]
    cdef double t_start, p, t_cur, t_exit
    cdef int a, c
    cdef long nx = dims[0], ny = dims[1]
    cdef int n = 0
    if not (t_far - t_near > nudge):
        return 0
    t_start = t_near + nudge
    for a in range(3):
        p = o[a] + d[a] * t_start
        c = <int>floor((p - bmin[a]) / sp[a])
        if c < 0:
            c = 0
        if c > dims[a] - 1:
            c = <int>(dims[a] - 1)
        cell[a] = c
    for a in range(3):
        if d[a] > 0.0:
            step[a] = 1
            t_max[a] = (bmin[a] + (cell[a] + 1) * sp[a] - o[a]) / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            t_max[a] = (bmin[a] + cell[a] * sp[a] - o[a]) / d[a]
        else:
            step[a] = 0
            t_max[a] = INFINITY
    t_cur = t_near
    while True:
        a = 0
        if t_max[1] < t_max[a]:
            a = 1
        if t_max[2] < t_max[a]:
            a = 2
        t_exit = t_max[a] if t_max[a] < t_far else t_far
        if t_exit > t_cur:
            cells.append(cell[0] + nx * (cell[1] + ny * cell[2]))
            lengths.append(t_exit - t_cur)
            mids.append(0.5 * (t_cur + t_exit))
            t_cur = t_exit
            n += 1
        if t_max[a] >= t_far:
            break
        cell[a] += step[a]
        if cell[a] < 0 or cell[a] >= dims[a]:
            break
        if step[a] > 0:
            t_max[a] = (bmin[a] + (cell[a] + 1) * sp[a] - o[a]) / d[a]
        else:
            t_max[a] = (bmin[a] + cell[a] * sp[a] - o[a]) / d[a]
    return n


def traverse_ray(origin, direction, double t_near, double t_far, box_min, spacing, dims, double nudge):
    cdef list cells = [], lengths = [], mids = []
    _traverse_one(np.ascontiguousarray(origin, dtype=np.float64),
                  np.ascontiguousarray(direction, dtype=np.float64),
                  t_near, t_far,
                  np.ascontiguousarray(box_min, dtype=np.float64),
                  np.ascontiguousarray(spacing, dtype=np.float64),
                  np.ascontiguousarray(dims, dtype=np.int_), nudge, cells, lengths, mids)
    return cells, lengths, mids


def traverse_batch(origins, directions, t_near, t_far, hit, box_min, spacing, dims, double nudge):
    cdef const double[:, ::1] O = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] D = np.ascontiguousarray(directions, dtype=np.float64)
    cdef const double[::1] tn = np.ascontiguousarray(t_near, dtype=np.float64)
    cdef const double[::1] tf = np.ascontiguousarray(t_far, dtype=np.float64)
    cdef const unsigned char[::1] h = np.ascontiguousarray(hit, dtype=np.uint8)
    cdef const double[::1] bmin = np.ascontiguousarray(box_min, dtype=np.float64)
    cdef const double[::1] sp = np.ascontiguousarray(spacing, dtype=np.float64)
    cdef const long[::1] dm = np.ascontiguousarray(dims, dtype=np.int_)
    cdef Py_ssize_t r, n_rays = O.shape[0]
    cdef list cells = [], lengths = [], mids = []
    ptr = np.zeros(n_rays + 1, dtype=np.int64)
    cdef long long[::1] P = ptr
    cdef long long total = 0
    for r in range(n_rays):
        if h[r]:
            total += _traverse_one(O[r], D[r], tn[r], tf[r], bmin, sp, dm, nudge, cells, lengths, mids)
        P[r + 1] = total
    return (ptr, np.array(cells, dtype=np.int64), np.array(lengths, dtype=np.float64),
            np.array(mids, dtype=np.float64))


def rte_forward(kappa, ib, ptr, cells, lengths):
    cdef const double[:, ::1] K = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(ib, dtype=np.float64)
    cdef const long long[::1] P = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef const long long[::1] C = np.ascontiguousarray(cells, dtype=np.int64)
    cdef const double[::1] L = np.ascontiguousarray(lengths, dtype=np.float64)
    cdef Py_ssize_t n_rays = P.shape[0] - 1, nw = K.shape[1]
    out = np.zeros((n_rays, nw), dtype=np.float64)
    cdef double[:, ::1] I = out
    cdef Py_ssize_t r, k, n
    cdef long long c
    cdef double ds, a
    with nogil:
        for r in range(n_rays):
            k = P[r + 1] - 1
            while k >= P[r]:
                c = C[k]
                ds = L[k]
                for n in range(nw):
                    a = exp(-K[c, n] * ds)
                    I[r, n] = I[r, n] * a + B[c, n] * (1.0 - a)
                k -= 1
    return out


def rte_backward(grad_out, kappa, ib, ptr, cells, lengths):
    cdef const double[:, ::1] G = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef const double[:, ::1] K = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(ib, dtype=np.float64)
    cdef const long long[::1] P = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef const long long[::1] C = np.ascontiguousarray(cells, dtype=np.int64)
    cdef const double[::1] L = np.ascontiguousarray(lengths, dtype=np.float64)
    cdef Py_ssize_t n_rays = P.shape[0] - 1, nw = K.shape[1]
    gk_arr = np.zeros((K.shape[0], nw), dtype=np.float64)
    gb_arr = np.zeros((K.shape[0], nw), dtype=np.float64)
    cdef double[:, ::1] GK = gk_arr
    cdef double[:, ::1] GB = gb_arr
    cdef Py_ssize_t smax = 0, r, k, n, j
    for r in range(n_rays):
        if P[r + 1] - P[r] > smax:
            smax = P[r + 1] - P[r]
    cdef double[:, ::1] incoming = np.zeros((max(smax, 1), nw), dtype=np.float64)
    # per-ray attenuation factors, reused by the adjoint sweep
    cdef double[:, ::1] atten = np.zeros((max(smax, 1), nw), dtype=np.float64)
    cdef double[::1] cur = np.zeros(nw, dtype=np.float64)
    cdef double[::1] lam = np.zeros(nw, dtype=np.float64)
    cdef long long c
    cdef double ds, a
    with nogil:
        for r in range(n_rays):
            for n in range(nw):
                cur[n] = 0.0
            k = P[r + 1] - 1
            while k >= P[r]:
                j = k - P[r]
                c = C[k]
                ds = L[k]
                for n in range(nw):
                    incoming[j, n] = cur[n]
                    a = exp(-K[c, n] * ds)
                    atten[j, n] = a
                    cur[n] = cur[n] * a + B[c, n] * (1.0 - a)
                k -= 1
            for n in range(nw):
                lam[n] = G[r, n]
            for k in range(P[r], P[r + 1]):
                j = k - P[r]
                c = C[k]
                ds = L[k]
                for n in range(nw):
                    a = atten[j, n]
                    GB[c, n] += lam[n] * (1.0 - a)
                    GK[c, n] += lam[n] * (incoming[j, n] - B[c, n]) * (-ds * a)
                    lam[n] = lam[n] * a
    return gk_arr, gb_arr


cdef inline void _hermite_basis(double u, double* w) noexcept nogil:
    cdef double u2 = u * u, u3 = u * u * u
    w[0] = 2 * u3 - 3 * u2 + 1
    w[1] = u3 - 2 * u2 + u
    w[2] = -2 * u3 + 3 * u2
    w[3] = u3 - u2
    w[4] = 6 * u2 - 6 * u
    w[5] = 3 * u2 - 4 * u + 1
    w[6] = -6 * u2 + 6 * u
    w[7] = 3 * u2 - 2 * u


cdef inline void _locate(double T, double t_min, double t_step, Py_ssize_t n_nodes,
                         Py_ssize_t* k, double* u, int* inside) noexcept nogil:
    cdef double t_hi = t_min + (n_nodes - 1) * t_step
    cdef double pos
    inside[0] = 1
    if T < t_min:
        T = t_min
        inside[0] = 0
    elif T > t_hi:
        T = t_hi
        inside[0] = 0
    pos = (T - t_min) / t_step
    k[0] = <Py_ssize_t>floor(pos)
    if k[0] > n_nodes - 2:
        k[0] = n_nodes - 2
    u[0] = pos - k[0]


def mix_forward(T, X, values, derivs, double t_min, double t_step):
    cdef const double[::1] TT = np.ascontiguousarray(T, dtype=np.float64)
    cdef const double[:, ::1] XX = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, :, ::1] V = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[:, :, ::1] DV = np.ascontiguousarray(derivs, dtype=np.float64)
    cdef Py_ssize_t M = TT.shape[0], S = V.shape[0], NT = V.shape[1], nw = V.shape[2]
    out = np.zeros((M, nw), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t m, s, n, k
    cdef double u, x, h = t_step
    cdef double w[8]
    cdef int inside
    with nogil:
        for m in range(M):
            _locate(TT[m], t_min, t_step, NT, &k, &u, &inside)
            _hermite_basis(u, w)
            for s in range(S):
                x = XX[m, s]
                if x == 0.0:
                    continue
                for n in range(nw):
                    O[m, n] += x * (w[0] * V[s, k, n] + w[1] * h * DV[s, k, n]
                                    + w[2] * V[s, k + 1, n] + w[3] * h * DV[s, k + 1, n])
    return out


def mix_backward(grad_kappa, T, X, values, derivs, double t_min, double t_step):
    cdef const double[:, ::1] G = np.ascontiguousarray(grad_kappa, dtype=np.float64)
    cdef const double[::1] TT = np.ascontiguousarray(T, dtype=np.float64)
    cdef const double[:, ::1] XX = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, :, ::1] V = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[:, :, ::1] DV = np.ascontiguousarray(derivs, dtype=np.float64)
    cdef Py_ssize_t M = TT.shape[0], S = V.shape[0], NT = V.shape[1], nw = V.shape[2]
    gT_arr = np.zeros(M, dtype=np.float64)
    gX_arr = np.zeros((M, S), dtype=np.float64)
    cdef double[::1] GT = gT_arr
    cdef double[:, ::1] GX = gX_arr
    cdef Py_ssize_t m, s, n, k
    cdef double u, h = t_step, val, der, accx, acct, g
    cdef double w[8]
    cdef int inside
    with nogil:
        for m in range(M):
            _locate(TT[m], t_min, t_step, NT, &k, &u, &inside)
            _hermite_basis(u, w)
            acct = 0.0
            for s in range(S):
                accx = 0.0
                for n in range(nw):
                    g = G[m, n]
                    val = (w[0] * V[s, k, n] + w[1] * h * DV[s, k, n]
                           + w[2] * V[s, k + 1, n] + w[3] * h * DV[s, k + 1, n])
                    der = (w[4] * V[s, k, n] + w[5] * h * DV[s, k, n]
                           + w[6] * V[s, k + 1, n] + w[7] * h * DV[s, k + 1, n]) / h
                    accx += g * val
                    acct += XX[m, s] * g * der
                GX[m, s] = accx
            GT[m] = acct if inside else 0.0
    return gT_arr, gX_arr
