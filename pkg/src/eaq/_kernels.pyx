# cython: language_level=3
"""Compiled inner loops. Semantics must match ``eaq._kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def discounted_cumsum(const double[::1] rewards, double gamma):
    cdef Py_ssize_t n = rewards.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc = 0.0
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        o[t] = acc
    return out


def batch_discounted_cumsum(const double[:, ::1] rewards, const long[::1] lengths, double gamma):
    cdef Py_ssize_t b = rewards.shape[0], T = rewards.shape[1]
    out = np.zeros((b, T), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double acc
    cdef Py_ssize_t i, t
    for i in range(b):
        acc = 0.0
        for t in range(lengths[i] - 1, -1, -1):
            acc = rewards[i, t] + gamma * acc
            o[i, t] = acc
    return out


def nearest_distances(const double[:, ::1] cand, const double[:, ::1] ref):
    cdef Py_ssize_t n = cand.shape[0], m = ref.shape[0], d = cand.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double best, acc, diff
    cdef Py_ssize_t i, j, k
    for i in range(n):
        best = INFINITY
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = cand[i, k] - ref[j, k]
                acc += diff * diff
                if acc >= best:
                    break
            if acc < best:
                best = acc
        o[i] = sqrt(best)
    return out


def focus_fire_counts(const long[:, ::1] actions, const unsigned char[:, ::1] alive,
                      long first_attack, long num_attack):
    cdef Py_ssize_t T = actions.shape[0], N = actions.shape[1]
    cdef long focused = 0, total = 0
    cdef long target, a, n_alive
    cdef bint all_attack, same
    cdef Py_ssize_t t, n
    for t in range(T):
        n_alive = 0
        all_attack = True
        same = True
        target = -1
        for n in range(N):
            if not alive[t, n]:
                continue
            n_alive += 1
            a = actions[t, n]
            if a < first_attack or a >= first_attack + num_attack:
                all_attack = False
                break
            if target < 0:
                target = a
            elif a != target:
                same = False
        if n_alive == 0 or not all_attack:
            continue
        total += 1
        if same:
            focused += 1
    return focused, total
