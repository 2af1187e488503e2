"""Image-domain rotation transforms and rotation-angle schedules.

Rotation is about the image center, positive angles counterclockwise.
Multiples of 90 degrees are exact pixel permutations; everything else is
bilinear interpolation with zero fill outside the support.  The transform
is linear in pixel values, so its adjoint (used when differentiating a
loss through a rotation) is the weight-transposed scatter of the same
interpolation plan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import ImageGrid

_EXACT_TOL = 1e-9


def _exact_quarter_turns(degrees: float):
    """Number of 90-degree turns if the angle is an exact multiple, else None."""
    q = degrees / 90.0
    qr = round(q)
    if abs(q - qr) < _EXACT_TOL:
        return int(qr) % 4
    return None


def _bilinear_plan(n: int, degrees: float):
    """Gather plan: per output pixel, 4 source indices and weights."""
    theta = np.deg2rad(degrees)
    c = (n - 1) / 2.0
    i, j = np.meshgrid(np.arange(n, dtype=np.float64),
                       np.arange(n, dtype=np.float64), indexing="ij")
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    j_src = c + cos_t * (j - c) + sin_t * (c - i)
    i_src = c + sin_t * (j - c) + cos_t * (i - c)
    i0 = np.floor(i_src).astype(np.int64)
    j0 = np.floor(j_src).astype(np.int64)
    fi = i_src - i0
    fj = j_src - j0
    idx = np.empty((n * n, 4), dtype=np.int64)
    wgt = np.empty((n * n, 4), dtype=np.float64)
    for t, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        ii, jj = i0 + di, j0 + dj
        w = (fi if di else 1.0 - fi) * (fj if dj else 1.0 - fj)
        valid = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
        idx[:, t] = np.where(valid, ii * n + jj, 0).ravel()
        wgt[:, t] = np.where(valid, w, 0.0).ravel()
    return idx, wgt


def rotate_array(data: np.ndarray, degrees: float) -> np.ndarray:
    q = _exact_quarter_turns(degrees)
    if q is not None:
        return np.rot90(data, q).copy()
    n = data.shape[0]
    idx, wgt = _bilinear_plan(n, degrees)
    flat = data.astype(np.float64).ravel()
    out = (flat[idx] * wgt).sum(axis=1)
    return out.reshape(n, n).astype(data.dtype)


def rotate_adjoint_array(data: np.ndarray, degrees: float) -> np.ndarray:
    """Adjoint of :func:`rotate_array` at the same angle."""
    q = _exact_quarter_turns(degrees)
    if q is not None:
        return np.rot90(data, -q).copy()
    n = data.shape[0]
    idx, wgt = _bilinear_plan(n, degrees)
    acc = np.zeros(n * n, dtype=np.float64)
    up = data.astype(np.float64).ravel()
    np.add.at(acc, idx.ravel(), (wgt * up[:, None]).ravel())
    return acc.reshape(n, n).astype(data.dtype)


def rotate_image(image: ImageGrid, degrees: float) -> ImageGrid:
    if not np.isfinite(degrees):
        raise ValueError("rotation angle must be finite")
    return ImageGrid(rotate_array(image.data, degrees), image.pixel_size)


def rotation_matrix(n: int, degrees: float) -> sp.csr_matrix:
    """Explicit sparse matrix of the rotation on flattened n x n images.

    Shares the interpolation plan (and the exact-permutation path) with
    :func:`rotate_array`, so matrix application matches it bit-for-bit in
    structure.
    """
    q = _exact_quarter_turns(degrees)
    if q is not None:
        src = np.rot90(np.arange(n * n).reshape(n, n), q).ravel()
        return sp.csr_matrix(
            (np.ones(n * n), (np.arange(n * n), src)), shape=(n * n, n * n))
    idx, wgt = _bilinear_plan(n, degrees)
    rows = np.repeat(np.arange(n * n), 4)
    return sp.csr_matrix((wgt.ravel(), (rows, idx.ravel())),
                         shape=(n * n, n * n))


@dataclass(frozen=True)
class RotationSchedule:
    """How the per-step rotation angles are chosen during training."""

    mode: str
    r: int
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise ValueError(f"unknown rotation mode {self.mode!r}")
        if self.r < 1:
            raise ValueError("number of rotations must be >= 1")

    @property
    def fixed_angles(self):
        step = 360.0 / self.r
        return tuple(step * (k + 1) for k in range(self.r))


def draw_rotations(schedule: RotationSchedule, step: int):
    """Angles for one training step; random mode is keyed by (seed, step)."""
    if schedule.mode == "fixed":
        return list(schedule.fixed_angles)
    key = np.array([schedule.seed, step], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return list(rng.uniform(1.0, 360.0, size=schedule.r))
