import numpy as np
import pytest

from tomolearn.core import ImageGrid
from tomolearn.rotate import (RotationSchedule, draw_rotations, rotate_adjoint_array,
                              rotate_array, rotate_image, rotation_matrix)


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def _interior(n, fraction=0.7):
    i, j = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    return (i - c) ** 2 + (j - c) ** 2 <= (fraction * n / 2) ** 2


def test_zero_rotation_is_identity():
    x = _rng(1).normal(size=(16, 16))
    assert np.array_equal(rotate_array(x, 0.0), x)
    assert np.array_equal(rotate_array(x, 360.0), x)


def test_quarter_turns_compose_to_identity():
    x = _rng(2).normal(size=(16, 16))
    assert np.array_equal(rotate_array(rotate_array(x, 90.0), 270.0), x)
    assert np.array_equal(rotate_array(rotate_array(x, 180.0), 180.0), x)


def test_quarter_turns_preserve_norm():
    x = _rng(3).normal(size=(16, 16))
    for deg in (90.0, 180.0, 270.0):
        assert np.sum(rotate_array(x, deg) ** 2) == pytest.approx(
            np.sum(x ** 2))


def test_general_angle_round_trip_interior():
    # rotate by 37 then -37 degrees; interior pixels of a smooth image
    # come back within a small relative error (bilinear smoothing)
    n = 64
    i, j = np.mgrid[0:n, 0:n]
    smooth = np.exp(-(((i - 30) / 12.0) ** 2 + ((j - 34) / 9.0) ** 2))
    back = rotate_array(rotate_array(smooth, 37.0), -37.0)
    mask = _interior(n)
    rel = np.abs(back - smooth)[mask].max() / smooth[mask].max()
    assert rel < 0.02


def test_rotation_is_linear():
    x = _rng(4).normal(size=(16, 16))
    z = _rng(5).normal(size=(16, 16))
    a, b = 1.5, -2.25
    lhs = rotate_array(a * x + b * z, 23.0)
    rhs = a * rotate_array(x, 23.0) + b * rotate_array(z, 23.0)
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * np.max(np.abs(rhs))


def test_near_unitary_on_interior_smooth_image():
    n = 64
    i, j = np.mgrid[0:n, 0:n]
    smooth = np.exp(-(((i - 32) / 8.0) ** 2 + ((j - 32) / 8.0) ** 2))
    rot = rotate_array(smooth, 53.0)
    # energy is concentrated well inside the support, so it is conserved
    # to within the interpolation error
    ratio = np.sum(rot ** 2) / np.sum(smooth ** 2)
    assert abs(ratio - 1.0) < 0.02


def test_adjoint_identity():
    n = 16
    rng = _rng(6)
    for deg in (90.0, 37.0, 211.5):
        x = rng.normal(size=(n, n))
        y = rng.normal(size=(n, n))
        lhs = float(np.sum(rotate_array(x, deg) * y))
        rhs = float(np.sum(x * rotate_adjoint_array(y, deg)))
        assert abs(lhs - rhs) < 1e-12 * max(abs(lhs), 1.0)


def test_matrix_matches_rotate_array():
    n = 12
    x = _rng(7).normal(size=(n, n))
    for deg in (90.0, 41.0):
        mat = rotation_matrix(n, deg)
        via_matrix = (mat @ x.ravel()).reshape(n, n)
        direct = rotate_array(x, deg)
        assert np.max(np.abs(via_matrix - direct)) < 1e-13


def test_matrix_transpose_matches_adjoint():
    n = 12
    y = _rng(8).normal(size=(n, n))
    mat = rotation_matrix(n, 41.0)
    via_matrix = (mat.T @ y.ravel()).reshape(n, n)
    assert np.max(np.abs(via_matrix - rotate_adjoint_array(y, 41.0))) < 1e-13


def test_rotate_image_wrapper():
    img = ImageGrid(_rng(9).normal(size=(8, 8)), 0.5)
    out = rotate_image(img, 90.0)
    assert out.pixel_size == 0.5
    with pytest.raises(ValueError):
        rotate_image(img, float("nan"))


def test_fixed_schedule_angles():
    assert RotationSchedule("fixed", 4).fixed_angles == (90.0, 180.0, 270.0,
                                                         360.0)
    assert RotationSchedule("fixed", 2).fixed_angles == (180.0, 360.0)
    assert draw_rotations(RotationSchedule("fixed", 4), step=7) \
        == [90.0, 180.0, 270.0, 360.0]


def test_random_schedule_deterministic_and_in_range():
    sched = RotationSchedule("random", 3, seed=5)
    a = draw_rotations(sched, step=2)
    b = draw_rotations(sched, step=2)
    c = draw_rotations(sched, step=3)
    assert a == b
    assert a != c
    for angles in (a, c):
        assert len(angles) == 3
        assert all(1.0 <= v <= 360.0 for v in angles)


def test_schedule_validation():
    with pytest.raises(ValueError):
        RotationSchedule("fixed", 0)
    with pytest.raises(ValueError):
        RotationSchedule("spiral", 2)
