"""Batched small Hermitian matrix helpers shared by the numpy engines."""

import numpy as np

# Absolute floor for power-derived thresholds; keeps all-silent inputs finite.
TINY = 1e-20


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def outer(x: np.ndarray) -> np.ndarray:
    """x x^H over the last axis."""
    return x[..., :, None] * np.conj(x[..., None, :])


def trace(a: np.ndarray) -> np.ndarray:
    return np.real(np.trace(a, axis1=-2, axis2=-1))


def eigvalsh(a: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of Hermitian matrices, closed form for 2x2."""
    if a.shape[-1] == 2:
        p = np.real(a[..., 0, 0])
        q = np.real(a[..., 1, 1])
        half = 0.5 * (p + q)
        rad = np.sqrt(0.25 * (p - q) ** 2 + np.abs(a[..., 0, 1]) ** 2)
        return np.stack([half - rad, half + rad], axis=-1)
    return np.linalg.eigvalsh(a)


def floor_eigenvalues(a: np.ndarray, floor) -> np.ndarray:
    """Clamp eigenvalues of Hermitian ``a`` from below at ``floor``.

    ``floor`` broadcasts against the batch shape of ``a``. Matrices already
    above the floor are returned untouched (bit-exact).
    """
    a = hermitize(a)
    floor = np.broadcast_to(np.asarray(floor, dtype=float), a.shape[:-2])
    low = eigvalsh(a)[..., 0] < floor
    if np.any(low):
        w, u = np.linalg.eigh(a[low])
        w = np.maximum(w, floor[low][:, None])
        a = a.copy()
        a[low] = (u * w[:, None, :]) @ np.conj(np.swapaxes(u, -1, -2))
    return a


def relative_floor(a: np.ndarray, rel: float) -> np.ndarray:
    """rel * trace / dim, with an absolute guard for all-zero matrices."""
    return rel * trace(a) / a.shape[-1] + TINY


def inv_loaded(a: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    """Inverse of Hermitian PSD matrices with eigenvalues floored at rel*trace/dim.

    The floor acts as diagonal loading restricted to the deficient
    eigen-directions; well-conditioned inputs are inverted exactly.
    """
    a = floor_eigenvalues(a, relative_floor(hermitize(a), rel))
    return hermitize(np.linalg.inv(a))


def logdet_h(a: np.ndarray) -> np.ndarray:
    sign, logabs = np.linalg.slogdet(a)
    return logabs
