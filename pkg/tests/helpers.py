"""Shared oracles for the suite: central finite differences and rel-error.

The finite-difference oracle only ever calls the forward path, so it stays
independent of the backward rules it is used to check.
"""

import numpy as np

from ecdbs.tensor import Tape


def central_difference(f, arrays, step=1e-4):
    """d f() / d arrays by central differences; mutates and restores in place."""
    grads = []
    for arr in arrays:
        grad = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(grad)
    return grads


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def max_gradient_error(build, leaves, step=1e-4):
    """Worst relative error between tape gradients of build() and central FD.

    `build` must construct the scalar output from the `leaves` tensors from
    scratch on every call (their .data arrays are perturbed in place).
    """
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        out = build()
        tape.backward(out)
    analytic = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
    numeric = central_difference(
        lambda: float(build().data), [leaf.data for leaf in leaves], step=step
    )
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
