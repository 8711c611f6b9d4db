"""Shared test utilities: finite-difference oracle and error measures."""

import numpy as np


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function f(ndarray) -> float."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_probe(f, x, indices, h=1e-5):
    """Central differences at selected flat indices only (cheap probes)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def eig_sqrt_oracle(a):
    """Reference matrix square roots via eigendecomposition."""
    w, v = np.linalg.eigh(np.asarray(a, dtype=np.float64))
    w = np.clip(w, 1e-300, None)
    sqrt = (v * np.sqrt(w)) @ v.T
    inv_sqrt = (v * (1.0 / np.sqrt(w))) @ v.T
    return sqrt, inv_sqrt


def random_spd(rng, dim, lam_min=1e-2, lam_max=3.0):
    """Random SPD matrix with eigenvalues drawn in [lam_min, lam_max]."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    lam = rng.uniform(lam_min, lam_max, size=dim)
    return (q * lam) @ q.T


def max_rel_err(a, b, floor=1e-6):
    """Largest elementwise relative discrepancy between two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
