"""Discrete CT forward operator and its exact adjoint.

Joseph-style ray tracing: each ray picks the axis it is most aligned with,
steps through the grid one row (or column) at a time, and linearly
interpolates across the orthogonal axis.  Weights carry units of mm, so a
projection value approximates the line integral of attenuation.

Forward and backprojection share the same (pixel, detector, weight)
triplets per view, which makes the pair an exact adjoint up to summation
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageGrid, ScanGeometry, Sinogram

_FOV_SLACK = 1e-9


@dataclass(frozen=True)
class DenseOperator:
    """Dense m x d matrix of ray-pixel intersection weights (mm)."""

    rows: int
    cols: int
    entries: np.ndarray


def check_field_of_view(geometry: ScanGeometry, n: int, pixel_size: float) -> None:
    """Raise if the image extends outside the scanned field of view."""
    half_width = n * pixel_size / 2.0
    if geometry.kind == "parallel":
        half_span = geometry.n_detectors * geometry.detector_pitch / 2.0
        if half_width > half_span + _FOV_SLACK:
            raise ValueError(
                f"image half-width {half_width} mm exceeds parallel-beam "
                f"detector half-span {half_span} mm")
    else:
        d_sd = geometry.source_to_origin + geometry.origin_to_detector
        t_half = geometry.n_detectors * geometry.detector_pitch / 2.0
        fov = geometry.source_to_origin * t_half / np.hypot(d_sd, t_half)
        if half_width > fov + _FOV_SLACK:
            raise ValueError(
                f"image half-width {half_width} mm exceeds fan-beam field "
                f"of view radius {fov} mm")


def _detector_offsets(geometry: ScanGeometry) -> np.ndarray:
    k = np.arange(geometry.n_detectors, dtype=np.float64)
    return (k - (geometry.n_detectors - 1) / 2.0) * geometry.detector_pitch


def _taps(cont: np.ndarray, n: int):
    """Split continuous pixel coordinates into two interpolation taps."""
    base = np.floor(cont)
    frac = cont - base
    base = base.astype(np.int64)
    taps = []
    for idx, w in ((base, 1.0 - frac), (base + 1, frac)):
        valid = (idx >= 0) & (idx <= n - 1)
        taps.append((idx, w, valid))
    return taps


def _angle_triplets(geometry: ScanGeometry, angle_index: int, n: int,
                    pixel_size: float):
    """(pixel linear index, detector index, weight) triplets for one view."""
    phi = np.deg2rad(geometry.angles_deg[angle_index])
    p = pixel_size
    half = (n - 1) / 2.0
    t = _detector_offsets(geometry)
    n_det = geometry.n_detectors

    if geometry.kind == "parallel":
        # all rays share direction d and detector axis u
        ex = np.full(n_det, -np.sin(phi))
        ey = np.full(n_det, np.cos(phi))
        ox = t * np.cos(phi)
        oy = t * np.sin(phi)
    else:
        d_so = geometry.source_to_origin
        d_od = geometry.origin_to_detector
        sx, sy = d_so * np.sin(phi), -d_so * np.cos(phi)
        px = d_od * -np.sin(phi) + t * np.cos(phi)
        py = d_od * np.cos(phi) + t * np.sin(phi)
        dx, dy = px - sx, py - sy
        norm = np.hypot(dx, dy)
        ex, ey = dx / norm, dy / norm
        ox = np.full(n_det, sx)
        oy = np.full(n_det, sy)

    pix_idx, det_idx, weights = [], [], []
    drive_rows = np.abs(ey) >= np.abs(ex)

    for rows_mode in (True, False):
        sel = np.nonzero(drive_rows == rows_mode)[0]
        if sel.size == 0:
            continue
        exs, eys = ex[sel], ey[sel]
        oxs, oys = ox[sel], oy[sel]
        if rows_mode:
            # step through image rows; interpolate across columns
            i = np.arange(n, dtype=np.float64)
            y = (half - i) * p
            tau = (y[:, None] - oys[None, :]) / eys[None, :]
            x = oxs[None, :] + tau * exs[None, :]
            cont = x / p + half
            length = p / np.abs(eys)
            fixed_idx = np.broadcast_to(
                np.arange(n, dtype=np.int64)[:, None], cont.shape)
            for idx, w, valid in _taps(cont, n):
                lin = fixed_idx * n + np.clip(idx, 0, n - 1)
                wgt = w * length[None, :] * valid
                keep = valid.ravel()
                pix_idx.append(lin.ravel()[keep])
                det_idx.append(np.broadcast_to(
                    sel[None, :], cont.shape).ravel()[keep])
                weights.append(wgt.ravel()[keep])
        else:
            # step through image columns; interpolate across rows
            j = np.arange(n, dtype=np.float64)
            x = (j - half) * p
            tau = (x[:, None] - oxs[None, :]) / exs[None, :]
            y = oys[None, :] + tau * eys[None, :]
            cont = half - y / p
            length = p / np.abs(exs)
            fixed_idx = np.broadcast_to(
                np.arange(n, dtype=np.int64)[:, None], cont.shape)
            for idx, w, valid in _taps(cont, n):
                lin = np.clip(idx, 0, n - 1) * n + fixed_idx
                wgt = w * length[None, :] * valid
                keep = valid.ravel()
                pix_idx.append(lin.ravel()[keep])
                det_idx.append(np.broadcast_to(
                    sel[None, :], cont.shape).ravel()[keep])
                weights.append(wgt.ravel()[keep])

    if pix_idx:
        return (np.concatenate(pix_idx), np.concatenate(det_idx),
                np.concatenate(weights))
    empty = np.empty(0, dtype=np.int64)
    return empty, empty, np.empty(0, dtype=np.float64)


def forward_project(image: ImageGrid, geometry: ScanGeometry) -> Sinogram:
    """Line integrals of the image for every (view angle, detector) pair."""
    n = image.n
    check_field_of_view(geometry, n, image.pixel_size)
    flat = image.data.astype(np.float64).ravel()
    out = np.zeros((geometry.n_angles, geometry.n_detectors), dtype=np.float64)
    for a in range(geometry.n_angles):
        pix, det, w = _angle_triplets(geometry, a, n, image.pixel_size)
        out[a] = np.bincount(det, weights=flat[pix] * w,
                             minlength=geometry.n_detectors)
    return Sinogram(geometry, out.astype(image.data.dtype))


def back_project(sinogram: Sinogram, geometry: ScanGeometry, n: int,
                 pixel_size: float = 1.0) -> ImageGrid:
    """Exact adjoint of :func:`forward_project` (no angular weighting)."""
    if sinogram.geometry.kind != geometry.kind or \
            sinogram.data.shape != (geometry.n_angles, geometry.n_detectors):
        raise ValueError("sinogram does not match geometry")
    check_field_of_view(geometry, n, pixel_size)
    acc = np.zeros(n * n, dtype=np.float64)
    rows = sinogram.data.astype(np.float64)
    for a in range(geometry.n_angles):
        pix, det, w = _angle_triplets(geometry, a, n, pixel_size)
        np.add.at(acc, pix, rows[a][det] * w)
    return ImageGrid(acc.reshape(n, n).astype(sinogram.data.dtype), pixel_size)


def build_dense_operator(geometry: ScanGeometry, n: int,
                         pixel_size: float = 1.0) -> DenseOperator:
    """Materialize the forward operator column by column (oracle use only)."""
    m = geometry.n_angles * geometry.n_detectors
    if n * n * m > 10 ** 7:
        raise ValueError(f"dense operator would hold {n * n * m} entries "
                         "(limit 1e7)")
    check_field_of_view(geometry, n, pixel_size)
    entries = np.zeros((m, n * n), dtype=np.float64)
    for j in range(n * n):
        unit = np.zeros((n, n), dtype=np.float64)
        unit[j // n, j % n] = 1.0
        sino = forward_project(ImageGrid(unit, pixel_size), geometry)
        entries[:, j] = sino.data.ravel()
    return DenseOperator(m, n * n, entries)
