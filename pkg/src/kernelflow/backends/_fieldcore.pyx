# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled core for the causal field/sensitivity recursions.

Mirrors kernelflow.backends.fields_numpy.field_chunk: same arguments,
same return dictionary, same strict-causality conventions.  Samples are
processed one at a time with BLAS dgemm on the prefix blocks, which
keeps the working set at four (T*P) x (T*P) stacks per sample.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"

cdef int ACT_LINEAR = 0
cdef int ACT_RELU = 1
cdef int ACT_TANH = 2


cdef inline void c_gemm(int m, int n, int k,
                        double alpha,
                        double *a, int lda_row,
                        double *b, int ldb_row,
                        double beta,
                        double *c, int ldc_row) noexcept nogil:
    # C (m x n, C-order, row stride ldc_row) = alpha*A@B + beta*C for
    # C-order A (m x k, stride lda_row) and B (k x n, stride ldb_row).
    cdef char no = b'N'
    if m == 0 or n == 0:
        return
    if k == 0:
        return
    dgemm(&no, &no, &n, &m, &k, &alpha, b, &ldb_row, a, &lda_row, &beta, c, &ldc_row)


cdef inline void act_row(int kind, double *h, double *phi, double *dphi,
                         double *ddphi, int p) noexcept nogil:
    cdef int i
    cdef double th, sech2
    if kind == ACT_LINEAR:
        for i in range(p):
            phi[i] = h[i]
            dphi[i] = 1.0
            ddphi[i] = 0.0
    elif kind == ACT_RELU:
        for i in range(p):
            if h[i] > 0.0:
                phi[i] = h[i]
                dphi[i] = 1.0
            else:
                phi[i] = 0.0
                dphi[i] = 0.0
            ddphi[i] = 0.0
    else:
        for i in range(p):
            th = tanh(h[i])
            sech2 = 1.0 - th * th
            phi[i] = th
            dphi[i] = sech2
            ddphi[i] = -2.0 * th * sech2


def field_chunk(double[:, :, ::1] u, double[:, :, ::1] r,
                double[:, :, ::1] mh, double[:, :, ::1] mz,
                str act, double[::1] decay_t,
                bint want_a, bint want_b, bint want_jac):
    """See fields_numpy.field_chunk; identical contract."""
    cdef int c = u.shape[0]
    cdef int t = u.shape[1]
    cdef int p = u.shape[2]
    cdef int tp = t * p
    cdef int kind
    if act == "linear":
        kind = ACT_LINEAR
    elif act == "relu":
        kind = ACT_RELU
    elif act == "tanh":
        kind = ACT_TANH
    else:
        raise ValueError(f"unknown activation '{act}'")

    h_arr = np.empty((c, t, p))
    z_arr = np.empty((c, t, p))
    phi_arr = np.empty((c, t, p))
    g_arr = np.empty((c, t, p))
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, ::1] z = z_arr
    cdef double[:, :, ::1] phi = phi_arr
    cdef double[:, :, ::1] g = g_arr

    cdef bint need_r = want_a or want_jac
    cdef bint need_u = want_b or want_jac

    dphi_buf = np.empty(p)
    ddphi_buf = np.empty(p)
    gstack_buf = np.empty(tp)
    phistack_buf = np.empty(tp)
    cdef double[::1] dphi = dphi_buf
    cdef double[::1] ddphi = ddphi_buf
    cdef double[::1] gstack = gstack_buf
    cdef double[::1] phistack = phistack_buf

    cdef double[:, ::1] sh_r = None, sg_r = None, sh_u = None, sg_u = None
    cdef double[:, ::1] jh_buf = None, jz_buf = None, jhu_buf = None, jzu_buf = None
    cdef double[:, ::1] sa = None, sb = None
    if need_r:
        sh_r = np.zeros((tp, tp))
        sg_r = np.zeros((tp, tp))
        jh_buf = np.zeros((p, tp))
        jz_buf = np.zeros((p, tp))
    if need_u:
        sh_u = np.zeros((tp, tp))
        sg_u = np.zeros((tp, tp))
        jhu_buf = np.zeros((p, tp))
        jzu_buf = np.zeros((p, tp))
    if want_a:
        sa = np.zeros((tp, tp))
    if want_b:
        sb = np.zeros((tp, tp))

    cdef double[:, :, :, ::1] jh_r = None, jz_r = None, jh_u = None, jz_u = None
    if want_jac:
        jh_r_arr = np.zeros((c, t, p, tp)); jh_r = jh_r_arr
        jz_r_arr = np.zeros((c, t, p, tp)); jz_r = jz_r_arr
        jh_u_arr = np.zeros((c, t, p, tp)); jh_u = jh_u_arr
        jz_u_arr = np.zeros((c, t, p, tp)); jz_u = jz_u_arr

    cdef int n, k, kp, i, j, col_lim
    cdef double dk, wk, ddz
    with nogil:
        for n in range(c):
            if need_r:
                memset(&sh_r[0, 0], 0, tp * tp * sizeof(double))
                memset(&sg_r[0, 0], 0, tp * tp * sizeof(double))
            if need_u:
                memset(&sh_u[0, 0], 0, tp * tp * sizeof(double))
                memset(&sg_u[0, 0], 0, tp * tp * sizeof(double))
            for k in range(t):
                kp = k * p
                wk = decay_t[k]
                for i in range(p):
                    h[n, k, i] = wk * u[n, k, i]
                    z[n, k, i] = wk * r[n, k, i]
                if k > 0:
                    # h[k] += Mh[k,:kp] @ gstack ; z[k] += Mz[k,:kp] @ phistack
                    c_gemm(p, 1, kp, 1.0, &mh[k, 0, 0], tp, &gstack[0], 1,
                           1.0, &h[n, k, 0], 1)
                    c_gemm(p, 1, kp, 1.0, &mz[k, 0, 0], tp, &phistack[0], 1,
                           1.0, &z[n, k, 0], 1)
                act_row(kind, &h[n, k, 0], &phi[n, k, 0], &dphi[0], &ddphi[0], p)
                for i in range(p):
                    g[n, k, i] = dphi[i] * z[n, k, i]
                    gstack[kp + i] = g[n, k, i]
                    phistack[kp + i] = phi[n, k, i]

                if need_r:
                    if k > 0:
                        c_gemm(p, kp, kp, 1.0, &mh[k, 0, 0], tp,
                               &sh_r[0, 0], tp, 0.0, &jh_buf[0, 0], tp)
                        c_gemm(p, kp, kp, 1.0, &mz[k, 0, 0], tp,
                               &sg_r[0, 0], tp, 0.0, &jz_buf[0, 0], tp)
                    # rows (k,i) of the source stacks, columns s <= k
                    for i in range(p):
                        ddz = ddphi[i] * z[n, k, i]
                        for j in range(kp):
                            sh_r[kp + i, j] = ddz * jh_buf[i, j] + dphi[i] * jz_buf[i, j]
                            sg_r[kp + i, j] = dphi[i] * jh_buf[i, j]
                        sh_r[kp + i, kp + i] += wk * dphi[i]
                    if want_a:
                        for i in range(p):
                            for j in range(kp):
                                sa[kp + i, j] += sg_r[kp + i, j]
                    if want_jac:
                        for i in range(p):
                            for j in range(kp):
                                jh_r[n, k, i, j] = jh_buf[i, j]
                                jz_r[n, k, i, j] = jz_buf[i, j]
                            jz_r[n, k, i, kp + i] += wk

                if need_u:
                    if k > 0:
                        c_gemm(p, kp, kp, 1.0, &mh[k, 0, 0], tp,
                               &sh_u[0, 0], tp, 0.0, &jhu_buf[0, 0], tp)
                        c_gemm(p, kp, kp, 1.0, &mz[k, 0, 0], tp,
                               &sg_u[0, 0], tp, 0.0, &jzu_buf[0, 0], tp)
                    for i in range(p):
                        ddz = ddphi[i] * z[n, k, i]
                        for j in range(kp):
                            sh_u[kp + i, j] = ddz * jhu_buf[i, j] + dphi[i] * jzu_buf[i, j]
                            sg_u[kp + i, j] = dphi[i] * jhu_buf[i, j]
                        # direct injection d h[k]/d u[k] = wk * delta
                        sh_u[kp + i, kp + i] += wk * ddz
                        sg_u[kp + i, kp + i] += wk * dphi[i]
                    if want_b:
                        for i in range(p):
                            for j in range(kp + p):
                                sb[kp + i, j] += sh_u[kp + i, j]
                    if want_jac:
                        for i in range(p):
                            for j in range(kp):
                                jh_u[n, k, i, j] = jhu_buf[i, j]
                                jz_u[n, k, i, j] = jzu_buf[i, j]
                            jh_u[n, k, i, kp + i] += wk

    out = {"h": h_arr, "z": z_arr, "phi": phi_arr, "g": g_arr}
    if want_a:
        out["sa"] = np.asarray(sa)
    if want_b:
        out["sb"] = np.asarray(sb)
    if want_jac:
        out["jh_r"] = jh_r_arr
        out["jz_r"] = jz_r_arr
        out["jh_u"] = jh_u_arr
        out["jz_u"] = jz_u_arr
    return out
