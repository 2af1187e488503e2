import numpy as np
import pytest

from tomolearn.core import ImageGrid, Sinogram, make_shepp_logan
from tomolearn.fbp import (fbp_reconstruct, fbp_subset, ramlak_filter,
                           ramlak_kernel, restrict_sinogram)
from tomolearn.pipeline import make_geometry
from tomolearn.projector import forward_project
from tomolearn.train import metric_psnr

# frozen on the first verified run (Shepp-Logan 64x64, 180 angles,
# 185 detectors at 0.5 mm pitch, interior = 90% of the inscribed circle)
GOLDEN_FBP_INTERIOR_PSNR_DB = 23.746581264457784
# frozen even-vs-odd subset agreement at K=360 (noiseless)
GOLDEN_SUBSET_PSNR_DB = 49.56238548046792


def _interior_mask(n, fraction=0.9):
    i, j = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    return (i - c) ** 2 + (j - c) ** 2 <= (fraction * n / 2) ** 2


def _sl_setup(k=180):
    ph = make_shepp_logan(64, 1.0, 0.2, dtype=np.float64)
    geo = make_geometry("parallel", k, 185, 0.5)
    return ph, geo, forward_project(ph, geo)


def test_filter_kills_constant_rows():
    # the ramp response to a constant row vanishes away from the row ends
    # (the ends see the rect-edge response of the ramp, which is O(1) for
    # any band-limited kernel); DC suppression is asserted on the interior
    geo = make_geometry("parallel", 4, 1024, 1.0)
    sino = Sinogram(geo, np.full((4, 1024), 3.0))
    out = ramlak_filter(sino)
    assert np.max(np.abs(out.data[:, 384:640])) < 1e-3 * 3.0


def test_filter_linearity():
    geo = make_geometry("parallel", 3, 64, 1.0)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(1)))
    y1, y2 = rng.normal(size=(3, 64)), rng.normal(size=(3, 64))
    a, b = 1.7, -0.4
    lhs = ramlak_filter(Sinogram(geo, a * y1 + b * y2)).data
    rhs = a * ramlak_filter(Sinogram(geo, y1)).data \
        + b * ramlak_filter(Sinogram(geo, y2)).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * np.max(np.abs(rhs))


def test_filter_impulse_reproduces_kernel():
    n_det, pitch = 32, 0.7
    geo = make_geometry("parallel", 2, n_det, pitch)
    row = np.zeros((2, n_det))
    p = 10
    row[:, p] = 1.0
    out = ramlak_filter(Sinogram(geo, row)).data[0]
    for d in range(n_det):
        lag = abs(d - p)
        if lag == 0:
            expected = 1.0 / (4.0 * pitch ** 2)
        elif lag % 2 == 1:
            expected = -1.0 / (np.pi ** 2 * lag ** 2 * pitch ** 2)
        else:
            expected = 0.0
        assert out[d] == pytest.approx(expected, abs=1e-12)


def test_kernel_values():
    h = ramlak_kernel(16, 1.0)
    assert h[0] == pytest.approx(0.25)
    assert h[1] == pytest.approx(-1.0 / np.pi ** 2)
    assert h[2] == 0.0
    assert h[-1] == h[1]  # mirrored negative lag


def test_zero_sinogram_reconstructs_zero():
    geo = make_geometry("parallel", 8, 23, 1.0)
    rec = fbp_reconstruct(Sinogram(geo, np.zeros((8, 23))), 16, 1.0)
    assert np.all(rec.data == 0.0)


def test_shepp_logan_interior_psnr_golden():
    ph, geo, sino = _sl_setup()
    rec = fbp_reconstruct(sino, 64, 1.0)
    mask = _interior_mask(64)
    mse = float(np.mean((rec.data[mask] - ph.data[mask]) ** 2))
    psnr = 10 * np.log10(0.2 ** 2 / mse)
    assert psnr >= GOLDEN_FBP_INTERIOR_PSNR_DB - 0.5
    assert psnr == pytest.approx(GOLDEN_FBP_INTERIOR_PSNR_DB, abs=0.05)


def test_doubling_angles_does_not_hurt():
    ph, _, sino180 = _sl_setup(180)
    _, _, sino360 = _sl_setup(360)
    mask = _interior_mask(64)

    def interior_psnr(sino):
        rec = fbp_reconstruct(sino, 64, 1.0)
        mse = float(np.mean((rec.data[mask] - ph.data[mask]) ** 2))
        return 10 * np.log10(0.2 ** 2 / mse)

    assert interior_psnr(sino360) >= interior_psnr(sino180) - 0.1


def test_disk_mean_value():
    n, r, v = 64, 20.0, 0.1
    i, j = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    disk = (((i - c) ** 2 + (j - c) ** 2) <= r ** 2) * v
    geo = make_geometry("parallel", 180, 185, 0.5)
    sino = forward_project(ImageGrid(disk.astype(np.float64), 1.0), geo)
    rec = fbp_reconstruct(sino, n, 1.0)
    inner = ((i - c) ** 2 + (j - c) ** 2) <= (0.8 * r) ** 2
    assert abs(float(rec.data[inner].mean()) - v) / v < 0.03


def test_reconstruction_is_linear():
    geo = make_geometry("parallel", 24, 47, 1.0)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(5)))
    clean = rng.uniform(0, 1, (24, 47))
    noise = rng.normal(0, 0.1, (24, 47))
    r_clean = fbp_reconstruct(Sinogram(geo, clean), 32, 1.0).data
    r_noise = fbp_reconstruct(Sinogram(geo, noise), 32, 1.0).data
    r_sum = fbp_reconstruct(Sinogram(geo, clean + noise), 32, 1.0).data
    assert np.max(np.abs(r_clean + r_noise - r_sum)) \
        < 1e-12 * np.max(np.abs(r_sum))


def test_subset_full_set_is_bit_identical():
    _, geo, sino = _sl_setup()
    full = fbp_reconstruct(sino, 64, 1.0)
    via_subset = fbp_subset(sino, range(180), 64, 1.0)
    assert np.array_equal(full.data, via_subset.data)


def test_even_odd_subsets_agree_golden():
    ph, geo, _ = _sl_setup()
    geo360 = make_geometry("parallel", 360, 185, 0.5)
    sino = forward_project(ph, geo360)
    even = fbp_subset(sino, range(0, 360, 2), 64, 1.0)
    odd = fbp_subset(sino, range(1, 360, 2), 64, 1.0)
    psnr = metric_psnr(even, odd, 0.2)
    assert psnr >= 35.0
    assert psnr == pytest.approx(GOLDEN_SUBSET_PSNR_DB, abs=0.1)


def test_subset_of_size_one_is_legal():
    _, geo, sino = _sl_setup()
    rec = fbp_subset(sino, [17], 64, 1.0)
    assert np.all(np.isfinite(rec.data))


def test_subset_errors():
    _, geo, sino = _sl_setup()
    with pytest.raises(ValueError):
        fbp_subset(sino, [], 64, 1.0)
    with pytest.raises(ValueError):
        fbp_subset(sino, [3, 3], 64, 1.0)
    with pytest.raises(ValueError):
        fbp_subset(sino, [180], 64, 1.0)
    with pytest.raises(ValueError):
        restrict_sinogram(sino, [-1])


def test_too_few_angles():
    geo = make_geometry("parallel", 1, 23, 1.0)
    with pytest.raises(ValueError):
        fbp_reconstruct(Sinogram(geo, np.zeros((1, 23))), 16, 1.0)


def test_fan_beam_reconstruction_quality():
    # a fan scan of a smooth disk reconstructs to the right values
    n, r, v = 64, 18.0, 0.1
    i, j = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    disk = (((i - c) ** 2 + (j - c) ** 2) <= r ** 2) * v
    geo = make_geometry("fan", 180, 127, 1.0, 200.0, 100.0)
    sino = forward_project(ImageGrid(disk.astype(np.float64), 1.0), geo)
    rec = fbp_reconstruct(sino, n, 1.0)
    inner = ((i - c) ** 2 + (j - c) ** 2) <= (0.8 * r) ** 2
    assert abs(float(rec.data[inner].mean()) - v) / v < 0.03
