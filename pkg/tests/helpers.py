import numpy as np


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def random_ssd(rng, n_steps, n_state, p=3, lead=(2,), dtype=np.float64):
    A = rng.uniform(0.5, 1.0, size=lead + (n_steps,)).astype(dtype)
    B = rng.normal(size=lead + (n_steps, n_state)).astype(dtype)
    C = rng.normal(size=lead + (n_steps, n_state)).astype(dtype)
    x = rng.normal(size=lead + (n_steps, p)).astype(dtype)
    return A, B, C, x
