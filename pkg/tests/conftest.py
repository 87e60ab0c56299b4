import numpy as np


def central_diff_gradient(fn, beta, scale=1e-6):
    """Central finite-difference gradient of a scalar function of beta."""
    beta = np.asarray(beta, dtype=float)
    out = np.empty_like(beta)
    for j in range(beta.size):
        h = scale * max(1.0, abs(beta[j]))
        up = beta.copy()
        dn = beta.copy()
        up[j] += h
        dn[j] -= h
        out[j] = (fn(up) - fn(dn)) / (2 * h)
    return out


def central_diff_jacobian(fn, beta, scale=1e-6):
    """Central finite-difference Jacobian of a vector function of beta."""
    beta = np.asarray(beta, dtype=float)
    f0 = np.asarray(fn(beta))
    jac = np.empty((f0.size, beta.size))
    for j in range(beta.size):
        h = scale * max(1.0, abs(beta[j]))
        up = beta.copy()
        dn = beta.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (np.asarray(fn(up)) - np.asarray(fn(dn))) / (2 * h)
    return jac
