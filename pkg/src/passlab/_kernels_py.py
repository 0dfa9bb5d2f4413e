"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Same algorithms, same argument conventions. Used when the extension is not
built, and as the reference side of ``benchmarks/bench_kernels.py``.
"""
from bisect import bisect_left

import numpy as np


def _related(pair_ptr, pair_q2, alive, p1, p2):
    if p1 < 0 or p2 < 0:
        return p1 < 0 and p2 < 0
    lo, hi = pair_ptr[p1], pair_ptr[p1 + 1]
    k = bisect_left(pair_q2, p2, lo, hi)
    return k < hi and pair_q2[k] == p2 and alive[k] != 0


def _forward_ok(qa, qb, swap, ta, tb, dense_b, nbr_ptr, nbr_lab, pairs):
    ta_ptr, ta_lab, ta_dst = ta
    tb_ptr, tb_lab, tb_dst = tb
    pair_ptr, pair_q2, alive = pairs
    for ea in range(ta_ptr[qa], ta_ptr[qa + 1]):
        la, pa = ta_lab[ea], ta_dst[ea]
        ok = False
        for j in range(nbr_ptr[la], nbr_ptr[la + 1]):
            lb = nbr_lab[j]
            if dense_b:
                eb = tb_ptr[qb] + lb
                eb_end = eb + 1
            else:
                eb_end = tb_ptr[qb + 1]
                eb = bisect_left(tb_lab, lb, tb_ptr[qb], eb_end)
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


def refine_relation(pair_ptr, pair_q2, alive, t1_ptr, t1_lab, t1_dst, dense1,
                    t2_ptr, t2_lab, t2_dst, dense2, nbr_ptr, nbr_lab, max_sweeps=-1):
    """Remove pairs violating the transfer conditions until nothing changes.

    ``alive`` is updated in place. Returns ``(sweeps, removed)``.
    """
    # plain lists index several times faster than ndarrays element-wise
    pair_ptr_l = pair_ptr.tolist()
    pair_q2_l = pair_q2.tolist()
    alive_l = alive.tolist()
    t1 = (t1_ptr.tolist(), t1_lab.tolist(), t1_dst.tolist())
    t2 = (t2_ptr.tolist(), t2_lab.tolist(), t2_dst.tolist())
    nbr_ptr_l, nbr_lab_l = nbr_ptr.tolist(), nbr_lab.tolist()
    pairs = (pair_ptr_l, pair_q2_l, alive_l)

    sweeps = removed = 0
    n1 = len(pair_ptr_l) - 1
    while True:
        changed = 0
        for q1 in range(n1):
            for k in range(pair_ptr_l[q1], pair_ptr_l[q1 + 1]):
                if not alive_l[k]:
                    continue
                q2 = pair_q2_l[k]
                if not (_forward_ok(q1, q2, False, t1, t2, dense2, nbr_ptr_l, nbr_lab_l, pairs)
                        and _forward_ok(q2, q1, True, t2, t1, dense1, nbr_ptr_l, nbr_lab_l,
                                        pairs)):
                    alive_l[k] = 0
                    changed += 1
        sweeps += 1
        removed += changed
        if changed == 0 or (max_sweeps > 0 and sweeps >= max_sweeps):
            break
    alive[:] = np.asarray(alive_l, dtype=np.uint8)
    return sweeps, removed


def lti_rollout(Ad, Bd, x0, U):
    """States x[0..K] of x[k+1] = Ad x[k] + Bd u[k] for K = len(U)."""
    K = U.shape[0]
    X = np.empty((K + 1, Ad.shape[0]))
    X[0] = x0
    drive = U @ Bd.T
    for k in range(K):
        X[k + 1] = Ad @ X[k] + drive[k]
    return X
