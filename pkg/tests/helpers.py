"""Shared test utilities: finite-difference gradient oracle and error measures.

The numeric gradient only ever calls the forward path, so it stays
independent of the backward rules it is used to check.
"""

import numpy as np


def numeric_grad(fn, arrays, h=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(|n|, 1e-3): relative for large grads, absolute near zero."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)))


def spaced_values(rng, shape, step=1e-2):
    """Random values with pairwise gaps >= step/2: keeps max-pool argmax FD-stable."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * step + rng.uniform(0.0, step / 4.0)
    return vals.reshape(shape).astype(np.float64)


def nudged_normal(rng, shape, margin=0.05):
    """Normal samples pushed away from zero so ReLU kinks cannot bite the FD check."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x.astype(np.float64)
