"""Backend selection for the hot loops.

The compiled extension ``passlab._kernels`` is used when importable. Set
``PASSLAB_PURE_PYTHON=1`` to force the pure-Python implementations.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("PASSLAB_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def backends():
    """Mapping of available backend name to implementation module."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return found
    found["compiled"] = compiled
    return found


def refine_relation(pair_ptr, pair_q2, alive, t1, t2, nbr_ptr, nbr_lab, max_sweeps=-1,
                    impl=None):
    """Greatest-fixed-point pruning of a candidate pair relation.

    Parameters
    ----------
    pair_ptr, pair_q2 : ndarray of int64
        CSR layout of candidate pairs: partners of state ``q1`` of the first
        system are ``pair_q2[pair_ptr[q1]:pair_ptr[q1 + 1]]`` (sorted).
    alive : ndarray of uint8
        Membership flags, one per candidate pair; pruned in place.
    t1, t2 : tuple
        ``(ptr, label, dst, dense)`` CSR transition tables, label-sorted per
        state. ``dst == -1`` marks a transition leaving the modelled domain.
    nbr_ptr, nbr_lab : ndarray of int64
        CSR list of labels within the label tolerance of each label.
    """
    impl = impl or _impl
    return impl.refine_relation(
        pair_ptr, pair_q2, alive,
        t1[0], t1[1], t1[2], bool(t1[3]),
        t2[0], t2[1], t2[2], bool(t2[3]),
        nbr_ptr, nbr_lab, max_sweeps,
    )


def lti_rollout(Ad, Bd, x0, U, impl=None):
    """States of ``x[k+1] = Ad x[k] + Bd u[k]`` for all rows of ``U``."""
    impl = impl or _impl
    return impl.lti_rollout(
        np.ascontiguousarray(Ad, dtype=np.float64),
        np.ascontiguousarray(Bd, dtype=np.float64),
        np.ascontiguousarray(x0, dtype=np.float64),
        np.ascontiguousarray(U, dtype=np.float64).reshape(len(U), Bd.shape[1]),
    )
