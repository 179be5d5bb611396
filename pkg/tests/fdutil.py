"""Finite-difference helpers shared by the gradient tests."""

import numpy as np


def fd_grad(f, x, step=1e-3):
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.ravel()
    xf = x.ravel()
    for i in range(x.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


def fd_param_grad(loss_of_params, params, step=1e-3):
    """Central differences over every coordinate of a ModelParams object.

    ``loss_of_params`` is called with the (mutated in place) params object and
    must return a scalar. Returns a list of arrays mirroring flat_arrays().
    """
    grads = []
    for arr in params.flat_arrays():
        g = np.zeros_like(arr)
        gf, af = g.ravel(), arr.ravel()
        for i in range(arr.size):
            orig = af[i]
            af[i] = orig + step
            hi = loss_of_params(params)
            af[i] = orig - step
            lo = loss_of_params(params)
            af[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads
