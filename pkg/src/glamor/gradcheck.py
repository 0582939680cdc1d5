"""Central finite differences for verifying analytic backward passes."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """d f / d x by central differences; ``f`` is re-evaluated after perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def grad_close(analytic, numeric, rtol=1e-6, atol=1e-8):
    """True when the relative error is below ``rtol``.

    Gradients that are zero by construction (e.g. a conv bias feeding batch
    norm) carry only finite-difference noise, so an absolute difference below
    ``atol`` also passes.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return rel_error(a, n) < rtol or float(np.linalg.norm(a - n)) < atol
