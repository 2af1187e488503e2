"""Monte-Carlo verification harness for the prediction-error decomposition.

The central claim being checked: with measurement noise that is element-wise
independent and zero-mean, the expected self-supervised prediction error
(plain plus rotated term) splits into two supervised error terms against the
noiseless sub-reconstruction x*_J plus two noise-variance terms, because the
two cross terms have zero expectation.  Per trial the algebraic identity

    lhs - rhs = 2 * (cross_plain + cross_rotated)

is exact for any linear rotation operator; the statistical test is that both
cross-term means sit within a few standard errors of zero.  Rotations that
are not exact quarter-turns make the rotated terms differ in scale from the
plain ones (the interpolated operator is not unitary); that deviation is
quantified from the explicit sparse matrix and reported alongside.

The harness also measures the image-domain noise structure that motivates
splitting in the measurement domain: reconstructions of two independent
acquisitions are uncorrelated, while neighboring pixels within one
reconstruction are strongly correlated.
"""

from __future__ import annotations

import json

import numpy as np

from .core import ImageGrid, ScanGeometry, Sinogram, make_shepp_logan
from .fbp import fbp_reconstruct, fbp_subset
from .net import (DenoiserModel, backward_cached, forward_cached, init_model)
from .noise import postlog, simulate_counts
from .projector import back_project, build_dense_operator, forward_project
from .rotate import rotation_matrix
from .split import partition_angles

_MAX_N = 16
_MAX_ANGLES = 24


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _tiny_geometry(n_angles: int = 24, n_detectors: int = 23,
                   pitch: float = 1.0) -> ScanGeometry:
    angles = np.arange(n_angles) * (180.0 / n_angles)
    return ScanGeometry("parallel", angles, n_detectors, pitch)


def _guard(n: int, geometry: ScanGeometry) -> None:
    if n > _MAX_N or geometry.n_angles > _MAX_ANGLES:
        raise ValueError(
            f"oracle instances are capped at {_MAX_N}x{_MAX_N} images and "
            f"{_MAX_ANGLES} angles")


def _dense_subset_recon(geometry: ScanGeometry, subset, n: int,
                        pixel_size: float) -> np.ndarray:
    """Dense matrix mapping a flattened full sinogram to fbp_subset output."""
    k, m = geometry.n_angles, geometry.n_angles * geometry.n_detectors
    mat = np.zeros((n * n, m), dtype=np.float64)
    impulse = np.zeros((k, geometry.n_detectors))
    for a in subset:
        for d in range(geometry.n_detectors):
            impulse[a, d] = 1.0
            rec = fbp_subset(Sinogram(geometry, impulse.copy()), subset, n,
                             pixel_size)
            mat[:, a * geometry.n_detectors + d] = rec.data.ravel()
            impulse[a, d] = 0.0
    return mat


def _dense_full_recon(geometry: ScanGeometry, n: int,
                      pixel_size: float) -> np.ndarray:
    return _dense_subset_recon(geometry, range(geometry.n_angles), n,
                               pixel_size)


def _stat(values: np.ndarray):
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size))
    return mean, se


def verify_prop1(trials: int = 10_000, seed: int = 0, n: int = 16,
                 geometry: ScanGeometry | None = None,
                 rotation_deg: float = 90.0, noise: str = "gaussian",
                 noise_sigma: float = 0.05, i0: float = 1e5,
                 f_theta="linear", pixel_size: float = 1.0,
                 se_multiple: float = 4.0) -> dict:
    """Monte-Carlo check of the prediction-error decomposition.

    ``f_theta`` is "linear" (fixed random matrix, default), "oracle" (returns
    the noiseless target sub-reconstruction exactly), an explicit (d, d)
    matrix, or a DenoiserModel (slow path, applied per trial).
    """
    if geometry is None:
        geometry = _tiny_geometry()
    _guard(n, geometry)
    if trials < 2:
        raise ValueError("need at least 2 trials")
    d = n * n
    m = geometry.n_angles * geometry.n_detectors

    phantom = make_shepp_logan(n, pixel_size, contrast_scale=1.0,
                               dtype=np.float64)
    y_star = forward_project(phantom, geometry).data.ravel()

    part = partition_angles(geometry.n_angles, 2)
    j_sub, jc_sub = part.subsets[0], part.subsets[1]
    r_j = _dense_subset_recon(geometry, j_sub, n, pixel_size)
    r_jc = _dense_subset_recon(geometry, jc_sub, n, pixel_size)
    x_star_j = r_j @ y_star

    t_mat = np.asarray(rotation_matrix(n, rotation_deg).todense())
    gram = t_mat.T @ t_mat
    unitarity_residual = float(np.max(np.abs(gram - np.eye(d))))

    if noise == "gaussian":
        eps = _rng(seed, 1).normal(0.0, noise_sigma, size=(trials, m))
    elif noise == "poisson":
        lam = i0 * np.exp(-y_star)
        counts = np.maximum(_rng(seed, 1).poisson(lam, size=(trials, m)), 1)
        eps = np.log(i0 / counts) - y_star
    elif noise == "none":
        eps = np.zeros((trials, m))
    else:
        raise ValueError(f"unknown noise kind {noise!r}")

    xh_j = (y_star + eps) @ r_j.T          # (trials, d)
    xh_jc = (y_star + eps) @ r_jc.T

    if isinstance(f_theta, str) and f_theta == "linear":
        lin = _rng(seed, 2).normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        f_out = xh_jc @ lin.T
    elif isinstance(f_theta, str) and f_theta == "oracle":
        f_out = np.broadcast_to(x_star_j, (trials, d)).copy()
    elif isinstance(f_theta, DenoiserModel):
        f_out = np.empty((trials, d))
        for t in range(trials):
            out, _ = forward_cached(f_theta, xh_jc[t].reshape(n, n))
            f_out[t] = out.astype(np.float64).ravel()
    else:
        lin = np.asarray(f_theta, dtype=np.float64)
        if lin.shape != (d, d):
            raise ValueError(f"explicit map must be {(d, d)}, got {lin.shape}")
        f_out = xh_jc @ lin.T

    pred_err = f_out - x_star_j            # supervised residual
    noise_err = x_star_j - xh_j            # reconstruction noise (zero mean)
    pred_err_rot = pred_err @ t_mat.T
    noise_err_rot = noise_err @ t_mat.T

    lhs = np.einsum("td,td->t", pred_err + noise_err, pred_err + noise_err) \
        + np.einsum("td,td->t", pred_err_rot + noise_err_rot,
                    pred_err_rot + noise_err_rot)
    sup_plain = np.einsum("td,td->t", pred_err, pred_err)
    var_plain = np.einsum("td,td->t", noise_err, noise_err)
    sup_rot = np.einsum("td,td->t", pred_err_rot, pred_err_rot)
    var_rot = np.einsum("td,td->t", noise_err_rot, noise_err_rot)
    cross_plain = np.einsum("td,td->t", pred_err, noise_err)
    cross_rot = np.einsum("td,td->t", pred_err_rot, noise_err_rot)
    rhs = sup_plain + var_plain + sup_rot + var_rot

    gap_mean, gap_se = _stat(lhs - rhs)
    c1_mean, c1_se = _stat(cross_plain)
    c2_mean, c2_se = _stat(cross_rot)
    degenerate = noise == "none"
    pass_gap = degenerate or abs(gap_mean) < se_multiple * max(gap_se, 1e-300)
    pass_c1 = degenerate or abs(c1_mean) < se_multiple * max(c1_se, 1e-300)
    pass_c2 = degenerate or abs(c2_mean) < se_multiple * max(c2_se, 1e-300)

    report = {
        "trials": trials,
        "seed": seed,
        "noise": noise,
        "rotation_deg": rotation_deg,
        "lhs_mean": _stat(lhs)[0],
        "rhs_mean": _stat(rhs)[0],
        "terms": {
            "supervised_plain": _stat(sup_plain)[0],
            "variance_plain": _stat(var_plain)[0],
            "supervised_rotated": _stat(sup_rot)[0],
            "variance_rotated": _stat(var_rot)[0],
        },
        "gap_mean": gap_mean,
        "gap_se": gap_se,
        "cross_plain_mean": c1_mean,
        "cross_plain_se": c1_se,
        "cross_rotated_mean": c2_mean,
        "cross_rotated_se": c2_se,
        "identity_residual_max": float(
            np.max(np.abs(lhs - rhs - 2.0 * (cross_plain + cross_rot)))),
        "rotation_unitarity_residual": unitarity_residual,
        "se_multiple": se_multiple,
        "passed": bool(pass_gap and pass_c1 and pass_c2),
    }
    return report


def measure_image_noise_correlation(geometry: ScanGeometry | None = None,
                                    i0: float | None = 1e4,
                                    trials: int = 2000, seed: int = 0,
                                    n: int = 16,
                                    pixel_size: float = 1.0) -> dict:
    """Noise correlation structure of filtered-backprojection images.

    Reports (a) the mean absolute pixel-wise correlation between the noise
    images of two independent acquisitions (expected near zero) and (b) the
    mean correlation between horizontally adjacent pixels within one noise
    image (expected large, because reconstruction smears each measurement
    across the image).  ``i0 = None`` or infinite means a noiseless run,
    where correlations are undefined and reported as None.
    """
    if geometry is None:
        geometry = _tiny_geometry()
    _guard(n, geometry)
    phantom = make_shepp_logan(n, pixel_size, contrast_scale=1.0,
                               dtype=np.float64)
    y_star = forward_project(phantom, geometry).data.ravel()
    if i0 is None or not np.isfinite(i0):
        return {"trials": trials, "i0": None,
                "cross_acquisition_mean_abs_corr": None,
                "adjacent_pixel_mean_corr": None,
                "note": "zero noise: correlations undefined"}
    recon_mat = _dense_full_recon(geometry, n, pixel_size)
    m = geometry.n_angles * geometry.n_detectors
    lam = i0 * np.exp(-y_star)
    rng = _rng(seed, 3)
    noise_imgs = []
    for _ in range(2):
        counts = np.maximum(rng.poisson(lam, size=(trials, m)), 1)
        eps = np.log(i0 / counts) - y_star
        noise_imgs.append(eps @ recon_mat.T)   # (trials, d)

    def _corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        denom = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
        return (a * b).sum(axis=0) / np.maximum(denom, 1e-300)

    cross = _corr(noise_imgs[0], noise_imgs[1])
    img = noise_imgs[0].reshape(trials, n, n)
    adj = _corr(img[:, :, :-1].reshape(trials, -1),
                img[:, :, 1:].reshape(trials, -1))
    return {
        "trials": trials,
        "i0": i0,
        "cross_acquisition_mean_abs_corr": float(np.mean(np.abs(cross))),
        "adjacent_pixel_mean_corr": float(np.mean(adj)),
    }


# frozen finite-difference fixture: no ReLU sign change within +-h of any
# parameter perturbation, so central differences see a smooth function
_FD_MODEL_SEED = 5
_FD_DATA_SEED = 2
_FD_STEP = 1e-3


def _fd_gradcheck(dtype=np.float64) -> float:
    """Max relative error between analytic and central-difference gradients."""
    model = init_model(2, 2, True, seed=_FD_MODEL_SEED, dtype=dtype)
    rng = _rng(_FD_DATA_SEED)
    x = rng.normal(0.0, 1.0, (8, 8)).astype(dtype)
    u = rng.normal(0.0, 1.0, (8, 8)).astype(dtype)

    def objective(mdl) -> float:
        out, _ = forward_cached(mdl, x)
        return float(np.sum(u * out))

    out, cache = forward_cached(model, x)
    grads, grad_in = backward_cached(model, cache, u)
    h = _FD_STEP
    worst = 0.0
    for group in ("kernels", "scales"):
        params = getattr(model, group)
        for li, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                mp = model.copy()
                getattr(mp, group)[li][idx] += h
                mm = model.copy()
                getattr(mm, group)[li][idx] -= h
                fd = (objective(mp) - objective(mm)) / (2 * h)
                an = float(grads[group][li][idx])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        op, _ = forward_cached(model, xp)
        om, _ = forward_cached(model, xm)
        fd = (float(np.sum(u * op)) - float(np.sum(u * om))) / (2 * h)
        an = float(grad_in[idx])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    return worst


def _adjoint_error(geometry: ScanGeometry, n: int, pixel_size: float,
                   seed: int, dtype, perturb: bool = False) -> float:
    rng = _rng(seed, 4)
    x = ImageGrid(rng.normal(size=(n, n)).astype(dtype), pixel_size)
    y = Sinogram(geometry, rng.normal(
        size=(geometry.n_angles, geometry.n_detectors)).astype(dtype))
    ax = forward_project(x, geometry).data.astype(np.float64)
    aty = back_project(y, geometry, n, pixel_size).data.astype(np.float64)
    if perturb:
        aty = aty * (1.0 + 1e-6)
    lhs = float(np.sum(ax * y.data.astype(np.float64)))
    rhs = float(np.sum(x.data.astype(np.float64) * aty))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def adjoint_and_gradient_suite(perturb_backprojector: bool = False,
                               seed: int = 0) -> dict:
    """All linear-algebra and gradient oracles in one gated report.

    ``perturb_backprojector`` is a negative control: it injects a relative
    1e-6 error into the backprojection result, which must make the adjoint
    checks fail.
    """
    geo = _tiny_geometry()
    checks = []

    def add(name, error, threshold):
        checks.append({"name": name, "error": float(error),
                       "threshold": threshold,
                       "passed": bool(error < threshold)})

    err64 = max(_adjoint_error(geo, 16, 1.0, seed + t, np.float64,
                               perturb_backprojector) for t in range(20))
    add("projector_adjoint_f64", err64, 1e-12)
    err32 = max(_adjoint_error(geo, 16, 1.0, seed + t, np.float32,
                               perturb_backprojector) for t in range(20))
    add("projector_adjoint_f32", err32, 1e-4)

    small_geo = _tiny_geometry(n_angles=12, n_detectors=13)
    dense = build_dense_operator(small_geo, 8, 1.0)
    rng = _rng(seed, 5)
    worst = 0.0
    for _ in range(10):
        v = rng.normal(size=64)
        img = ImageGrid(v.reshape(8, 8), 1.0)
        sparse_out = forward_project(img, small_geo).data.ravel()
        dense_out = dense.entries @ v
        worst = max(worst, np.max(np.abs(sparse_out - dense_out))
                    / max(np.max(np.abs(dense_out)), 1e-300))
    add("dense_operator_agreement", worst, 1e-10)

    fd64 = _fd_gradcheck(np.float64)
    add("finite_difference_gradients_f64", fd64, 1e-6)
    fd32 = _fd_gradcheck(np.float32)
    add("finite_difference_gradients_f32", fd32, 1e-1)

    model = init_model(4, 8, True, seed=3, dtype=np.float64)
    x = _rng(seed, 6).normal(size=(16, 16))
    base, _ = forward_cached(model, x)
    hom = 0.0
    for alpha in (0.5, 2.0, 10.0):
        scaled, _ = forward_cached(model, alpha * x)
        hom = max(hom, np.max(np.abs(scaled - alpha * base))
                  / max(np.max(np.abs(alpha * base)), 1e-300))
    add("positive_homogeneity", hom, 1e-5)

    report = {
        "checks": checks,
        "perturbed": perturb_backprojector,
        "f64_vs_f32_gradient_ratio": fd32 / max(fd64, 1e-300),
        "passed": all(c["passed"] for c in checks),
    }
    return report


def format_report(report: dict) -> str:
    """Human-readable rendering; the dict itself is the machine format."""
    lines = []
    if "checks" in report:
        for c in report["checks"]:
            flag = "PASS" if c["passed"] else "FAIL"
            lines.append(f"[{flag}] {c['name']}: error {c['error']:.3e} "
                         f"(threshold {c['threshold']:.0e})")
        lines.append(f"overall: {'PASS' if report['passed'] else 'FAIL'}")
    else:
        lines.append(json.dumps(report, indent=2))
    return "\n".join(lines)
