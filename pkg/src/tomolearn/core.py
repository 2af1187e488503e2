"""Core data types, phantom generation and raw file I/O.

Attenuation values are in mm^-1 throughout; pixel and detector sizes in mm.
All container types are immutable after construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MAGIC_IMAGE = b"TLIM"
MAGIC_SINOGRAM = b"TLSN"
MAGIC_COUNTS = b"TLCT"

_PRECISION_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FLAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class FormatError(Exception):
    """Raised when a raw file header or payload is malformed."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageGrid:
    """Square 2D attenuation image with physical pixel spacing."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"image must be square 2D, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel- or fan-beam acquisition description.

    ``angles_deg`` are view angles in degrees, strictly increasing within
    [0, 360).  Fan geometry additionally needs source_to_origin and
    origin_to_detector distances (mm); parallel ignores them.
    """

    kind: str
    angles_deg: tuple
    n_detectors: int
    detector_pitch: float
    source_to_origin: float = 0.0
    origin_to_detector: float = 0.0

    def __post_init__(self):
        if self.kind not in ("parallel", "fan"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        angles = tuple(float(a) for a in self.angles_deg)
        if len(angles) == 0:
            raise ValueError("at least one view angle required")
        if any(not (0.0 <= a < 360.0) for a in angles):
            raise ValueError("angles must lie in [0, 360)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if self.detector_pitch <= 0:
            raise ValueError("detector_pitch must be positive")
        if self.kind == "fan":
            if self.source_to_origin <= 0 or self.origin_to_detector <= 0:
                raise ValueError("fan geometry requires positive distances")
        object.__setattr__(self, "angles_deg", angles)

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    def restricted(self, indices) -> "ScanGeometry":
        """Geometry containing only the given angle indices (in order)."""
        angles = tuple(self.angles_deg[i] for i in indices)
        return ScanGeometry(self.kind, angles, self.n_detectors,
                            self.detector_pitch, self.source_to_origin,
                            self.origin_to_detector)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "angles_deg": list(self.angles_deg),
            "n_detectors": self.n_detectors,
            "detector_pitch": self.detector_pitch,
            "source_to_origin": self.source_to_origin,
            "origin_to_detector": self.origin_to_detector,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScanGeometry":
        return ScanGeometry(d["kind"], tuple(d["angles_deg"]), d["n_detectors"],
                            d["detector_pitch"], d.get("source_to_origin", 0.0),
                            d.get("origin_to_detector", 0.0))


@dataclass(frozen=True)
class Sinogram:
    """Angles x detectors array of line integrals plus its geometry."""

    geometry: ScanGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("sinogram data must be 2D")
        if data.shape != (self.geometry.n_angles, self.geometry.n_detectors):
            raise ValueError(
                f"sinogram shape {data.shape} does not match geometry "
                f"({self.geometry.n_angles}, {self.geometry.n_detectors})")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class CountData:
    """Photon counts per ray from a simulated acquisition."""

    geometry: ScanGeometry
    counts: np.ndarray
    i0: float

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (self.geometry.n_angles, self.geometry.n_detectors):
            raise ValueError("counts shape does not match geometry")
        if self.i0 <= 0:
            raise ValueError("i0 must be positive")
        if counts.min() < 0:
            raise ValueError("counts must be nonnegative")
        counts = np.minimum(counts, int(self.i0 * 50)).astype(np.uint32)
        object.__setattr__(self, "counts", _freeze(counts))


# Standard 10-ellipse head phantom: (intensity, a, b, x0, y0, phi_deg) in
# the unit square [-1, 1]^2.  The outer (skull) ellipse has intensity 2.
_SHEPP_LOGAN_ELLIPSES = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def _rasterize_ellipses(n: int, ellipses, dtype=np.float64) -> np.ndarray:
    """Additively rasterize ellipses given in unit-square coordinates."""
    coords = (np.arange(n) - (n - 1) / 2.0) * (2.0 / n)
    x = coords[None, :]
    y = -coords[:, None]  # row 0 is the top of the image
    img = np.zeros((n, n), dtype=np.float64)
    for (val, a, b, x0, y0, phi) in ellipses:
        c, s = np.cos(np.deg2rad(phi)), np.sin(np.deg2rad(phi))
        xr = (x - x0) * c + (y - y0) * s
        yr = -(x - x0) * s + (y - y0) * c
        img += val * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return img.astype(dtype)


def make_shepp_logan(n: int, pixel_size: float = 1.0,
                     contrast_scale: float = 0.2,
                     dtype=np.float32) -> ImageGrid:
    """Rasterize the standard head phantom at n x n.

    Values are scaled so the outer skull ellipse has attenuation
    ``contrast_scale``; generation is deterministic.
    """
    if n < 8:
        raise ValueError("phantom size must be at least 8")
    img = _rasterize_ellipses(n, _SHEPP_LOGAN_ELLIPSES)
    img *= contrast_scale / 2.0
    return ImageGrid(img.astype(dtype), pixel_size)


def shepp_logan_analytic_mass(contrast_scale: float = 0.2) -> float:
    """Total attenuation mass (sum of pixel values x unit pixel area)
    from the analytic ellipse areas, additive-overlap convention."""
    mass = sum(v * np.pi * a * b for (v, a, b, _, _, _) in _SHEPP_LOGAN_ELLIPSES)
    return mass * contrast_scale / 2.0


def make_random_ellipses(n: int, pixel_size: float = 1.0,
                         contrast_scale: float = 0.2, seed: int = 0,
                         n_ellipses: int = 6, dtype=np.float32) -> ImageGrid:
    """Procedural phantom: a body outline plus seeded random inner ellipses.

    Values are nonnegative and bounded by roughly ``contrast_scale``.
    """
    if n < 8:
        raise ValueError("phantom size must be at least 8")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    ellipses = [(1.0, 0.85, 0.85 * rng.uniform(0.8, 1.0), 0.0, 0.0,
                 rng.uniform(0, 180))]
    for _ in range(n_ellipses):
        a = rng.uniform(0.05, 0.35)
        b = rng.uniform(0.05, 0.35)
        r = rng.uniform(0, 0.6)
        t = rng.uniform(0, 2 * np.pi)
        val = rng.uniform(-0.4, 0.6)
        ellipses.append((val, a, b, r * np.cos(t), r * np.sin(t),
                         rng.uniform(0, 180)))
    img = _rasterize_ellipses(n, ellipses)
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak > 0:
        img *= contrast_scale / peak
    return ImageGrid(img.astype(dtype), pixel_size)


def _read_exact(f, size: int) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise FormatError("unexpected end of file")
    return buf


def _write_trailer(f, payload: dict) -> None:
    blob = json.dumps(payload).encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def _read_trailer(f) -> dict:
    (length,) = struct.unpack("<I", _read_exact(f, 4))
    blob = _read_exact(f, length)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("malformed trailing metadata block") from exc


def write_image_raw(image: ImageGrid, path) -> None:
    """Write an image: 16-byte header, little-endian raw floats, JSON trailer."""
    flag = _PRECISION_FLAGS[image.data.dtype]
    with open(path, "wb") as f:
        f.write(MAGIC_IMAGE)
        f.write(struct.pack("<III", image.width, image.height, flag))
        f.write(image.data.astype(image.data.dtype.newbyteorder("<")).tobytes())
        _write_trailer(f, {"pixel_size": image.pixel_size})


def read_image_raw(path) -> ImageGrid:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC_IMAGE:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_IMAGE!r}")
        width, height, flag = struct.unpack("<III", _read_exact(f, 12))
        if width != height:
            raise FormatError("image header width != height")
        if flag not in _FLAG_DTYPES:
            raise FormatError(f"unknown precision flag {flag}")
        dtype = _FLAG_DTYPES[flag]
        raw = _read_exact(f, width * height * dtype.itemsize)
        data = np.frombuffer(raw, dtype=dtype.newbyteorder("<"))
        data = data.astype(dtype).reshape(height, width)
        meta = _read_trailer(f)
    return ImageGrid(data, meta.get("pixel_size", 1.0))


def write_sinogram_raw(sino: Sinogram, path) -> None:
    flag = _PRECISION_FLAGS[sino.data.dtype]
    rows, cols = sino.data.shape
    with open(path, "wb") as f:
        f.write(MAGIC_SINOGRAM)
        f.write(struct.pack("<III", cols, rows, flag))
        f.write(sino.data.astype(sino.data.dtype.newbyteorder("<")).tobytes())
        _write_trailer(f, {"geometry": sino.geometry.to_dict()})


def read_sinogram_raw(path) -> Sinogram:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC_SINOGRAM:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_SINOGRAM!r}")
        cols, rows, flag = struct.unpack("<III", _read_exact(f, 12))
        if flag not in _FLAG_DTYPES:
            raise FormatError(f"unknown precision flag {flag}")
        dtype = _FLAG_DTYPES[flag]
        raw = _read_exact(f, rows * cols * dtype.itemsize)
        data = np.frombuffer(raw, dtype=dtype.newbyteorder("<"))
        data = data.astype(dtype).reshape(rows, cols)
        meta = _read_trailer(f)
    geometry = ScanGeometry.from_dict(meta["geometry"])
    return Sinogram(geometry, data)


def write_counts_raw(counts: CountData, path) -> None:
    rows, cols = counts.counts.shape
    with open(path, "wb") as f:
        f.write(MAGIC_COUNTS)
        f.write(struct.pack("<III", cols, rows, 2))
        f.write(counts.counts.astype("<u4").tobytes())
        _write_trailer(f, {"geometry": counts.geometry.to_dict(),
                           "i0": counts.i0})


def read_counts_raw(path) -> CountData:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC_COUNTS:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_COUNTS!r}")
        cols, rows, flag = struct.unpack("<III", _read_exact(f, 12))
        if flag != 2:
            raise FormatError(f"unexpected payload flag {flag} for count data")
        raw = _read_exact(f, rows * cols * 4)
        data = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
        data = data.reshape(rows, cols)
        meta = _read_trailer(f)
    geometry = ScanGeometry.from_dict(meta["geometry"])
    return CountData(geometry, data, meta["i0"])


def export_png(image: ImageGrid, path, display_min: float,
               display_max: float) -> None:
    """Export as 8-bit grayscale PNG with a linear display window.

    Values at display_min map to 0, at display_max to 255; outside values
    are clamped.  Rounding is half-up.
    """
    if display_min >= display_max:
        raise ValueError("display_min must be < display_max")
    scaled = (image.data.astype(np.float64) - display_min) \
        / (display_max - display_min) * 255.0
    gray = np.floor(np.clip(scaled, 0.0, 255.0) + 0.5)
    gray = np.minimum(gray, 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path, format="PNG")
