# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures as ``mgpa._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, tanh

cnp.import_array()

cdef double K1 = 0.63576
cdef double K2 = 1.87320
cdef double K3 = 1.48695
cdef double MU2_FLOOR = 1e-30


cdef void _band(const double[:, ::1] f, Py_ssize_t[::1] lo, Py_ssize_t[::1] hi) noexcept nogil:
    # nonzero column range of each factor row
    cdef Py_ssize_t n = f.shape[0], i, j
    for i in range(n):
        lo[i] = n
        hi[i] = 0
        for j in range(n):
            if f[i, j] != 0.0:
                if j < lo[i]:
                    lo[i] = j
                hi[i] = j + 1
        if hi[i] < lo[i]:
            lo[i] = 0
            hi[i] = 0


def separable_conv3d(x, fz, fy, fx):
    cdef const double[:, :, ::1] src = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] az = np.ascontiguousarray(fz, dtype=np.float64)
    cdef const double[:, ::1] ay = np.ascontiguousarray(fy, dtype=np.float64)
    # transposed x factor so the axpy below reads a contiguous row
    cdef const double[:, ::1] ax = np.ascontiguousarray(np.asarray(fx, dtype=np.float64).T)
    cdef Py_ssize_t dz = src.shape[0], dy = src.shape[1], dx = src.shape[2]
    cdef Py_ssize_t z, y, i, j, k
    cdef double w

    buf1_arr = np.zeros((dz, dy, dx), dtype=np.float64)
    buf2_arr = np.zeros((dz, dy, dx), dtype=np.float64)
    out_arr = np.zeros((dz, dy, dx), dtype=np.float64)
    cdef double[:, :, ::1] buf1 = buf1_arr
    cdef double[:, :, ::1] buf2 = buf2_arr
    cdef double[:, :, ::1] out = out_arr

    lox_a = np.empty(dx, dtype=np.intp); hix_a = np.empty(dx, dtype=np.intp)
    loy_a = np.empty(dy, dtype=np.intp); hiy_a = np.empty(dy, dtype=np.intp)
    loz_a = np.empty(dz, dtype=np.intp); hiz_a = np.empty(dz, dtype=np.intp)
    cdef Py_ssize_t[::1] lox = lox_a, hix = hix_a, loy = loy_a, hiy = hiy_a, loz = loz_a, hiz = hiz_a

    with nogil:
        _band(ax, lox, hix)
        _band(ay, loy, hiy)
        _band(az, loz, hiz)
        # x axis as axpy over rows of fx^T; zero code entries are skipped
        for z in range(dz):
            for y in range(dy):
                for j in range(dx):
                    w = src[z, y, j]
                    if w == 0.0:
                        continue
                    for i in range(lox[j], hix[j]):
                        buf1[z, y, i] = buf1[z, y, i] + ax[j, i] * w
        # y axis
        for z in range(dz):
            for i in range(dy):
                for j in range(loy[i], hiy[i]):
                    w = ay[i, j]
                    for k in range(dx):
                        buf2[z, i, k] = buf2[z, i, k] + w * buf1[z, j, k]
        # z axis
        for i in range(dz):
            for j in range(loz[i], hiz[i]):
                w = az[i, j]
                for y in range(dy):
                    for k in range(dx):
                        out[i, y, k] = out[i, y, k] + w * buf2[j, y, k]
    return out_arr


def kl_codes_grad(mu, log_rho2):
    cdef const double[::1] m = np.ascontiguousarray(mu, dtype=np.float64).ravel()
    cdef const double[::1] lr = np.ascontiguousarray(log_rho2, dtype=np.float64).ravel()
    cdef Py_ssize_t n = m.shape[0], i
    dmu_arr = np.empty(n, dtype=np.float64)
    dlr_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] dmu = dmu_arr
    cdef double[::1] dlr = dlr_arr
    cdef double total = 0.0, mu2, la, h, neg, dneg, sp
    with nogil:
        for i in range(n):
            mu2 = m[i] * m[i] + MU2_FLOOR
            la = lr[i] - log(mu2)
            h = 0.5 * (1.0 + tanh(0.5 * (K2 + K3 * la)))
            if la > 0:
                sp = log(1.0 + exp(-la))
            else:
                sp = -la + log(1.0 + exp(la))
            neg = K1 * h - 0.5 * sp - K1
            dneg = K1 * K3 * h * (1.0 - h) + 0.25 * (1.0 - tanh(0.5 * la))
            total = total - neg
            dmu[i] = dneg * 2.0 * m[i] / mu2
            dlr[i] = -dneg
    shape = np.shape(mu)
    return total, dmu_arr.reshape(shape), dlr_arr.reshape(shape)


def residual_moments(y, s, a, z):
    """One pass over ``r = y - s @ a - z`` returning ``(sum r^2, r @ a.T, s.T @ r, r.sum(0))``."""
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[:, ::1] S = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t P = Y.shape[0], F = Y.shape[1], N = S.shape[1], p, f, n
    gs_arr = np.zeros((P, N), dtype=np.float64)
    ga_arr = np.zeros((N, F), dtype=np.float64)
    gz_arr = np.zeros(F, dtype=np.float64)
    rrow_arr = np.empty(F, dtype=np.float64)
    cdef double[:, ::1] GS = gs_arr
    cdef double[:, ::1] GA = ga_arr
    cdef double[::1] GZ = gz_arr
    cdef double[::1] rrow = rrow_arr
    cdef double sq = 0.0, acc, sp
    with nogil:
        for p in range(P):
            for f in range(F):
                rrow[f] = Y[p, f] - Z[f]
            for n in range(N):
                sp = S[p, n]
                for f in range(F):
                    rrow[f] = rrow[f] - sp * A[n, f]
            for f in range(F):
                sq = sq + rrow[f] * rrow[f]
                GZ[f] = GZ[f] + rrow[f]
            for n in range(N):
                sp = S[p, n]
                acc = 0.0
                for f in range(F):
                    acc = acc + rrow[f] * A[n, f]
                    GA[n, f] = GA[n, f] + sp * rrow[f]
                GS[p, n] = acc
    return sq, gs_arr, ga_arr, gz_arr
