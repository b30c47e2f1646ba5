# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-site tensor kernels."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def christoffel(const double[:, :, ::1] ginv, const double[:, :, :, ::1] dg):
    cdef Py_ssize_t P = ginv.shape[0]
    out_arr = np.empty((P, 4, 4, 4))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double t[4][4][4]
    cdef Py_ssize_t p, a, b, c, d
    cdef double s
    for p in range(P):
        for a in range(4):
            for b in range(a, 4):
                for d in range(4):
                    t[a][b][d] = dg[p, a, b, d] + dg[p, b, a, d] - dg[p, d, a, b]
        for c in range(4):
            for a in range(4):
                for b in range(a, 4):
                    s = 0.0
                    for d in range(4):
                        s += ginv[p, c, d] * t[a][b][d]
                    out[p, c, a, b] = 0.5 * s
                    out[p, c, b, a] = 0.5 * s
    return out_arr


def riemann(const double[:, :, :, ::1] G, const double[:, :, :, :, ::1] dG):
    cdef Py_ssize_t P = G.shape[0]
    out_arr = np.zeros((P, 4, 4, 4, 4))
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t p, a, b, c, d, e
    cdef double s
    for p in range(P):
        for a in range(4):
            for b in range(a + 1, 4):
                for c in range(4):
                    for d in range(4):
                        s = dG[p, a, c, b, d] - dG[p, b, c, a, d]
                        for e in range(4):
                            s += G[p, c, a, e] * G[p, e, b, d] - G[p, c, b, e] * G[p, e, a, d]
                        out[p, a, b, c, d] = s
                        out[p, b, a, c, d] = -s
    return out_arr
