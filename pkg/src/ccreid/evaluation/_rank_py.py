"""Pure-numpy ranking kernel, same contract as the compiled one."""
import numpy as np


def evaluate_ranked(order, positive, junk):
    nq = order.shape[0]
    first_hit = np.full(nq, -1, dtype=np.int64)
    ap = np.zeros(nq, dtype=np.float64)
    n_pos = np.zeros(nq, dtype=np.int64)
    for q in range(nq):
        o = order[q]
        keep = ~junk[q, o].astype(bool)
        hits = positive[q, o][keep].astype(bool)
        n = int(hits.sum())
        n_pos[q] = n
        if n == 0:
            continue
        ranks = np.flatnonzero(hits) + 1
        first_hit[q] = ranks[0] - 1
        ap[q] = np.mean(np.arange(1, n + 1) / ranks)
    return first_hit, ap, n_pos
