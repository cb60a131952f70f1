"""Central finite-difference gradient checking shared by unit and acceptance tests."""

import numpy as np

STEP = 1e-5
RTOL = 1e-4


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative error, floored at 1e-3 of the largest entry."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    den = np.maximum(np.abs(numeric), 1e-3 * scale)
    return float(np.max(np.abs(analytic - numeric) / den))
