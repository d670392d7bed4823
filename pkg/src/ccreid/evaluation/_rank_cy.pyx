# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-query ranking kernel."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def evaluate_ranked(const cnp.int64_t[:, :] order, const cnp.uint8_t[:, :] positive,
                    const cnp.uint8_t[:, :] junk):
    """Walk each query's ranked gallery, skipping junk entries.

    Returns ``(first_hit, ap, n_pos)`` where ``first_hit`` is the 0-based
    rank of the first positive among non-junk entries (-1 if none).
    """
    cdef Py_ssize_t nq = order.shape[0], ng = order.shape[1]
    cdef Py_ssize_t q, k, g, rank
    cdef long hits
    cdef double prec_sum
    first_hit_a = np.full(nq, -1, dtype=np.int64)
    ap_a = np.zeros(nq, dtype=np.float64)
    n_pos_a = np.zeros(nq, dtype=np.int64)
    cdef cnp.int64_t[:] first_hit = first_hit_a
    cdef double[:] ap = ap_a
    cdef cnp.int64_t[:] n_pos = n_pos_a
    with nogil:
        for q in range(nq):
            rank = 0
            hits = 0
            prec_sum = 0.0
            for k in range(ng):
                g = order[q, k]
                if junk[q, g]:
                    continue
                rank += 1
                if positive[q, g]:
                    hits += 1
                    prec_sum += <double>hits / rank
                    if hits == 1:
                        first_hit[q] = rank - 1
            n_pos[q] = hits
            if hits > 0:
                ap[q] = prec_sum / hits
    return first_hit_a, ap_a, n_pos_a
