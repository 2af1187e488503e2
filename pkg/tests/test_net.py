import numpy as np
import pytest

from tomolearn.core import FormatError, ImageGrid
from tomolearn.net import (AdamState, DenoiserModel, adam_step,
                           backward_cached, forward, forward_cached,
                           init_adam, init_model, load_checkpoint,
                           save_checkpoint)
from tomolearn.oracle import _fd_gradcheck


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def test_parameter_counts():
    small = init_model(2, 1, True, seed=0)
    # two 1->1 3x3 kernels plus one normalization scale
    assert small.parameter_count() == 9 + 9 + 1
    big = init_model(5, 16, True, seed=0)
    # 144 + 3*2304 + 144 kernels, 4*16 scales
    assert big.parameter_count() == 7264


def test_init_is_deterministic():
    a = init_model(3, 4, True, seed=7)
    b = init_model(3, 4, True, seed=7)
    c = init_model(3, 4, True, seed=8)
    for ka, kb in zip(a.kernels, b.kernels):
        assert np.array_equal(ka, kb)
    assert not np.array_equal(a.kernels[0], c.kernels[0])


def test_init_validation():
    with pytest.raises(ValueError):
        init_model(1, 4, True, seed=0)
    with pytest.raises(ValueError):
        init_model(3, 0, True, seed=0)


def test_zero_input_maps_to_zero():
    model = init_model(3, 4, True, seed=1)
    out, _ = forward_cached(model, np.zeros((8, 8), dtype=np.float32))
    assert np.all(out == 0.0)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_positive_homogeneity(dtype, tol):
    model = init_model(4, 6, True, seed=2, dtype=dtype)
    x = _rng(3).normal(size=(16, 16)).astype(dtype)
    for a in (0.5, 3.0, 100.0):
        fa, _ = forward_cached(model, a * x)
        f1, _ = forward_cached(model, x)
        err = np.max(np.abs(fa - a * f1)) / max(np.max(np.abs(a * f1)), 1e-12)
        assert err < tol


def test_identity_kernels_give_relu():
    # two stacked identity kernels without normalization or a residual
    # connection compute conv -> ReLU -> conv = max(x, 0)
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0, 1, 1] = 1.0
    model = DenoiserModel([ident.copy(), ident.copy()], [np.ones(1)],
                          residual=False, normalize=False)
    x = _rng(4).normal(size=(8, 8))
    out, _ = forward_cached(model, x)
    assert np.array_equal(out, np.maximum(x, 0.0))


def test_residual_consistency():
    base = init_model(3, 4, True, seed=5, dtype=np.float64)
    plain = DenoiserModel([k.copy() for k in base.kernels],
                          [s.copy() for s in base.scales],
                          residual=False, normalize=True)
    x = _rng(6).normal(size=(8, 8))
    with_res, _ = forward_cached(base, x)
    without, _ = forward_cached(plain, x)
    assert np.array_equal(with_res, x - without)


def test_finite_difference_gradients_frozen_fixture():
    assert _fd_gradcheck(np.float64) < 1e-6


def test_zero_upstream_gives_zero_gradients():
    model = init_model(3, 4, True, seed=7, dtype=np.float64)
    x = _rng(8).normal(size=(8, 8))
    _, cache = forward_cached(model, x)
    grads, grad_in = backward_cached(model, cache, np.zeros((8, 8)))
    assert np.all(grad_in == 0.0)
    for g in grads["kernels"] + grads["scales"]:
        assert np.all(g == 0.0)


def test_shape_mismatch_rejected():
    model = init_model(2, 2, True, seed=9)
    img = ImageGrid(np.zeros((8, 8), dtype=np.float32), 1.0)
    up = ImageGrid(np.zeros((9, 9), dtype=np.float32), 1.0)
    from tomolearn.net import backward
    with pytest.raises(ValueError):
        backward(model, img, up)


def test_model_validation():
    good = np.zeros((1, 1, 3, 3))
    with pytest.raises(ValueError):
        DenoiserModel([], [], True, True)
    with pytest.raises(ValueError):
        DenoiserModel([np.zeros((2, 1, 3, 3)), np.zeros((2, 2, 3, 3))],
                      [np.ones(2)], True, True)  # last layer must emit 1
    with pytest.raises(ValueError):
        DenoiserModel([np.zeros((1, 1, 5, 5))], [], True, True)
    with pytest.raises(ValueError):
        DenoiserModel([good.copy(), good.copy()], [np.zeros(1)], True, True)


def test_adam_zero_gradient_is_noop():
    model = init_model(2, 2, True, seed=10, dtype=np.float64)
    state = init_adam(model, lr=1e-2)
    grads = {"kernels": [np.zeros_like(k) for k in model.kernels],
             "scales": [np.zeros_like(s) for s in model.scales]}
    new_model, new_state = adam_step(model, state, grads)
    for a, b in zip(model.kernels, new_model.kernels):
        assert np.array_equal(a, b)
    assert new_state.step == 1


def test_adam_matches_hand_computation():
    # single step on a 1-parameter toy: p' = p - lr * g/(|g| + eps)
    model = init_model(2, 1, True, seed=11, dtype=np.float64)
    state = init_adam(model, lr=0.1)
    g0 = np.full_like(model.kernels[0], 2.0)
    grads = {"kernels": [g0, np.zeros_like(model.kernels[1])],
             "scales": [np.zeros_like(model.scales[0])]}
    new_model, _ = adam_step(model, state, grads)
    expected = model.kernels[0] - 0.1 * 2.0 / (2.0 + state.eps)
    assert np.max(np.abs(new_model.kernels[0] - expected)) < 1e-12


def test_adam_is_deterministic_over_ten_steps():
    def run():
        model = init_model(2, 2, True, seed=12, dtype=np.float64)
        state = init_adam(model, lr=1e-3)
        x = _rng(13).normal(size=(8, 8))
        for _ in range(10):
            out, cache = forward_cached(model, x)
            grads, _ = backward_cached(model, cache, 2 * out / out.size)
            model, state = adam_step(model, state, grads)
        return model
    a, b = run(), run()
    for ka, kb in zip(a.kernels, b.kernels):
        assert np.array_equal(ka, kb)
    for sa, sb in zip(a.scales, b.scales):
        assert np.array_equal(sa, sb)


def test_adam_scale_floor():
    model = init_model(2, 2, True, seed=14, dtype=np.float64)
    state = init_adam(model, lr=10.0)  # huge step drives scales negative
    grads = {"kernels": [np.zeros_like(k) for k in model.kernels],
             "scales": [np.ones_like(model.scales[0])]}
    new_model, _ = adam_step(model, state, grads)
    assert np.all(new_model.scales[0] >= 1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    model = init_model(3, 4, False, seed=15, dtype=dtype)
    path = tmp_path / "m.tlnn"
    save_checkpoint(model, path, extra={"note": 7})
    back, extra = load_checkpoint(path)
    assert extra == {"note": 7}
    assert back.residual is False
    assert back.dtype == dtype
    for ka, kb in zip(model.kernels, back.kernels):
        assert np.array_equal(ka, kb)
    for sa, sb in zip(model.scales, back.scales):
        assert np.array_equal(sa, sb)
    x = ImageGrid(_rng(16).normal(size=(8, 8)).astype(dtype), 1.0)
    assert np.array_equal(forward(model, x).data, forward(back, x).data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.tlnn"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = init_model(2, 2, True, seed=17)
    path = tmp_path / "m.tlnn"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(FormatError):
        load_checkpoint(path)
