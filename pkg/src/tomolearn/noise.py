"""Photon-count simulation under Beer's law and the post-log transform.

Counts are drawn with a counter-based (Philox) generator keyed by the
user seed, so a fixed seed reproduces the same acquisition bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .core import CountData, Sinogram

ZERO_COUNT_CLAMP = 1


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_counts(clean_sinogram: Sinogram, i0: float, seed: int) -> CountData:
    """Draw Poisson(i0 * exp(-y)) photon counts per ray."""
    y = clean_sinogram.data.astype(np.float64)
    if y.min() < 0:
        raise ValueError("clean sinogram must be nonnegative")
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    lam = i0 * np.exp(-y)
    counts = _rng(seed).poisson(lam).astype(np.uint64)
    counts = np.minimum(counts, np.uint64(int(i0 * 50)))
    return CountData(clean_sinogram.geometry, counts.astype(np.uint32), float(i0))


def expected_counts(clean_sinogram: Sinogram, i0: float) -> np.ndarray:
    """Noiseless expected counts i0 * exp(-y) (no sampling)."""
    return i0 * np.exp(-clean_sinogram.data.astype(np.float64))


def postlog(counts: CountData) -> Sinogram:
    """Line integrals y = ln(i0 / max(counts, 1)); finite everywhere."""
    c = np.maximum(counts.counts.astype(np.float64), float(ZERO_COUNT_CLAMP))
    y = np.log(counts.i0 / c)
    return Sinogram(counts.geometry, y)


def postlog_from_expected(expected: np.ndarray, geometry, i0: float) -> Sinogram:
    """Post-log of unsampled expected counts; recovers y* exactly."""
    c = np.maximum(np.asarray(expected, dtype=np.float64),
                   float(ZERO_COUNT_CLAMP))
    return Sinogram(geometry, np.log(i0 / c))


def acquire_noisy_sinogram(clean_sinogram: Sinogram, i0: float,
                           seed: int) -> Sinogram:
    """Convenience path: simulate counts, then post-log."""
    return postlog(simulate_counts(clean_sinogram, i0, seed))
