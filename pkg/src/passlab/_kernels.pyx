# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Must stay behaviourally identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()


cdef inline Py_ssize_t _lower_bound(const int64_t[::1] keys, Py_ssize_t lo,
                                    Py_ssize_t hi, int64_t key) noexcept nogil:
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline bint _related(const int64_t[::1] pair_ptr, const int64_t[::1] pair_q2,
                          const uint8_t[::1] alive, int64_t p1, int64_t p2) noexcept nogil:
    cdef Py_ssize_t lo, hi, k
    if p1 < 0 or p2 < 0:
        return p1 < 0 and p2 < 0
    lo = pair_ptr[p1]
    hi = pair_ptr[p1 + 1]
    k = _lower_bound(pair_q2, lo, hi, p2)
    return k < hi and pair_q2[k] == p2 and alive[k] != 0


cdef bint _forward_ok(int64_t qa, int64_t qb, bint swap,
                      const int64_t[::1] ta_ptr, const int64_t[::1] ta_lab,
                      const int64_t[::1] ta_dst,
                      const int64_t[::1] tb_ptr, const int64_t[::1] tb_lab,
                      const int64_t[::1] tb_dst, bint dense_b,
                      const int64_t[::1] nbr_ptr, const int64_t[::1] nbr_lab,
                      const int64_t[::1] pair_ptr, const int64_t[::1] pair_q2,
                      const uint8_t[::1] alive) noexcept nogil:
    # every move of qa must be answered by qb with a label within mu
    cdef Py_ssize_t ea, eb, eb_end, j
    cdef int64_t la, lb, pa, pb
    cdef bint ok, rel
    for ea in range(ta_ptr[qa], ta_ptr[qa + 1]):
        la = ta_lab[ea]
        pa = ta_dst[ea]
        ok = False
        for j in range(nbr_ptr[la], nbr_ptr[la + 1]):
            lb = nbr_lab[j]
            if dense_b:
                eb = tb_ptr[qb] + lb
                eb_end = eb + 1
            else:
                eb_end = tb_ptr[qb + 1]
                eb = _lower_bound(tb_lab, tb_ptr[qb], eb_end, lb)
            while eb < eb_end and tb_lab[eb] == lb:
                pb = tb_dst[eb]
                if swap:
                    rel = _related(pair_ptr, pair_q2, alive, pb, pa)
                else:
                    rel = _related(pair_ptr, pair_q2, alive, pa, pb)
                if rel:
                    ok = True
                    break
                eb += 1
            if ok:
                break
        if not ok:
            return False
    return True


def refine_relation(const int64_t[::1] pair_ptr, const int64_t[::1] pair_q2,
                    uint8_t[::1] alive,
                    const int64_t[::1] t1_ptr, const int64_t[::1] t1_lab,
                    const int64_t[::1] t1_dst, bint dense1,
                    const int64_t[::1] t2_ptr, const int64_t[::1] t2_lab,
                    const int64_t[::1] t2_dst, bint dense2,
                    const int64_t[::1] nbr_ptr, const int64_t[::1] nbr_lab,
                    Py_ssize_t max_sweeps=-1):
    """Remove pairs violating the transfer conditions until nothing changes.

    ``alive`` is updated in place. Returns ``(sweeps, removed)``.
    """
    cdef Py_ssize_t n1 = pair_ptr.shape[0] - 1
    cdef Py_ssize_t sweeps = 0, removed = 0, changed, q1, k
    cdef int64_t q2
    with nogil:
        while True:
            changed = 0
            for q1 in range(n1):
                for k in range(pair_ptr[q1], pair_ptr[q1 + 1]):
                    if alive[k] == 0:
                        continue
                    q2 = pair_q2[k]
                    if not _forward_ok(q1, q2, False, t1_ptr, t1_lab, t1_dst,
                                       t2_ptr, t2_lab, t2_dst, dense2,
                                       nbr_ptr, nbr_lab, pair_ptr, pair_q2, alive) \
                       or not _forward_ok(q2, q1, True, t2_ptr, t2_lab, t2_dst,
                                          t1_ptr, t1_lab, t1_dst, dense1,
                                          nbr_ptr, nbr_lab, pair_ptr, pair_q2, alive):
                        alive[k] = 0
                        changed += 1
            sweeps += 1
            removed += changed
            if changed == 0 or (max_sweeps > 0 and sweeps >= max_sweeps):
                break
    return sweeps, removed


def lti_rollout(const double[:, ::1] Ad, const double[:, ::1] Bd,
                const double[::1] x0, const double[:, ::1] U):
    """States x[0..K] of x[k+1] = Ad x[k] + Bd u[k] for K = len(U)."""
    cdef Py_ssize_t n = Ad.shape[0], m = Bd.shape[1], K = U.shape[0]
    cdef Py_ssize_t k, i, j
    cdef double acc
    out = np.empty((K + 1, n), dtype=np.float64)
    cdef double[:, ::1] X = out
    for i in range(n):
        X[0, i] = x0[i]
    with nogil:
        for k in range(K):
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc = acc + Ad[i, j] * X[k, j]
                for j in range(m):
                    acc = acc + Bd[i, j] * U[k, j]
                X[k + 1, i] = acc
    return out
