"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

from adaprop import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = float(f())
        x[idx] = old - h
        down = float(f())
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8) -> float:
    """Norm-wise relative error with an absolute floor for all-zero gradients."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def check_values(build, values, h=1e-6) -> float:
    """Worst relative error over ``values`` of d build() / d value.

    ``build`` returns a scalar Value computed from the parameter Values.
    """
    for v in values:
        v.grad = None
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for v in values:
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad
        numeric = numeric_grad(lambda: build().data, v.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
