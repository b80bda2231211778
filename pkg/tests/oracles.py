"""Independent reference computations used to freeze expected values."""

import itertools
import math

import numpy as np


def brute_force_rnnt_nll(log_probs, labels, blank=0):
    """-log P(y|x) by summing every alignment explicitly.

    An alignment interleaves T blanks with the U labels (in order) and must
    end with a blank; it walks the lattice from (0, 0).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, U1, _ = lp.shape
    U = U1 - 1
    total = 0.0
    n = T + U
    for label_slots in itertools.combinations(range(n - 1), U):
        slots = set(label_slots)
        t = u = 0
        logp = 0.0
        for i in range(n):
            if i in slots:
                logp += lp[t, u, labels[u]]
                u += 1
            else:
                logp += lp[t, u, blank]
                t += 1
        assert t == T and u == U
        total += math.exp(logp)
    return -math.log(total)


def log_softmax_np(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
