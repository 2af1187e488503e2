"""Training losses, loops, inference averaging, and image metrics.

Loss kinds
----------
``supervised``  mse(f(noisy), clean)
``n2n``         mse(f(noisy_1), noisy_2), two independent acquisitions
``n2i``         mse(f(recon over complement subsets), recon over target subset)
``ran2i``       the n2i term plus a rotation-consistency term: for angles
                g_1..g_r, add (weight / r) * sum_g mse(T_g f(x), T_g target),
                where T_g rotates images about their center.  The rotation is
                applied to the loss arguments only, never to the network
                input; gradients flow through T_g via its exact adjoint.

With augmentation weight 0 the rotated branch is skipped entirely, so the
loss and its gradients reduce bit-for-bit to the plain two-argument form.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import ImageGrid
from .net import (DenoiserModel, adam_step, backward_cached, forward,
                  forward_cached, init_adam, init_model)
from .rotate import RotationSchedule, draw_rotations, rotate_adjoint_array, \
    rotate_array

LOSS_KINDS = ("supervised", "n2n", "n2i", "ran2i")
PSNR_CAP_DB = 200.0


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ImageGrid) else np.asarray(x)


def loss_mse(a, b):
    """Mean squared error and its gradient with respect to ``a``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    value = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return value, grad


def loss_ran2i(model: DenoiserModel, inp, target, angles, aug_weight: float = 1.0):
    """Rotation-augmented self-supervised loss with exact gradients.

    Returns (total, base_term, rotation_term, parameter_gradients).
    """
    if aug_weight < 0:
        raise ValueError("augmentation weight must be nonnegative")
    x = _as_array(inp)
    t = _as_array(target)
    out, cache = forward_cached(model, x)
    base, upstream = loss_mse(out, t)
    rot = 0.0
    if aug_weight > 0:
        angles = list(angles)
        if len(angles) == 0:
            raise ValueError("rotation branch needs at least one angle")
        w = aug_weight / len(angles)
        for g in angles:
            val_g, grad_g = loss_mse(rotate_array(out, g), rotate_array(t, g))
            rot += w * val_g
            upstream = upstream + w * rotate_adjoint_array(grad_g, g)
    grads, _ = backward_cached(model, cache, upstream)
    return base + rot, base, rot, grads


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for one training run."""

    loss_kind: str
    epochs: int
    lr: float = 1e-3
    batch_size: int = 1
    rotation: RotationSchedule | None = None
    aug_weight: float = 1.0
    seed: int = 0
    precision: str = "f32"
    depth: int = 5
    channels: int = 16
    residual: bool = True
    # with two splits, each pair is also used in the swapped direction;
    # for more splits the sections already enumerate every target subset
    mirror_pairs: bool = True

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.aug_weight < 0:
            raise ValueError("augmentation weight must be nonnegative")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.loss_kind == "ran2i" and self.aug_weight > 0 \
                and self.rotation is None:
            raise ValueError("ran2i with positive weight needs a rotation "
                             "schedule")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class TrainHistory:
    """Per-epoch loss averages and wall time."""

    total_loss: list = field(default_factory=list)
    base_loss: list = field(default_factory=list)
    rot_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total_loss)


def _expand_steps(config: TrainConfig, dataset):
    """Per-epoch step list of (input, target) array pairs."""
    steps = []
    for item in dataset:
        if len(item) < 2:
            raise ValueError("dataset items must be (input, target) pairs")
        a = _as_array(item[0]).astype(config.dtype)
        b = _as_array(item[1]).astype(config.dtype)
        if a.shape != b.shape:
            raise ValueError("input/target shape mismatch in dataset")
        steps.append((a, b))
        if config.loss_kind in ("n2i", "ran2i") and config.mirror_pairs:
            # symmetric self-supervised pairing: both directions are valid
            steps.append((b, a))
    return steps


def train(config: TrainConfig, dataset, model: DenoiserModel | None = None):
    """Run the configured loop; returns (final model, history).

    The dataset order is reshuffled every epoch with a permutation keyed by
    (seed, epoch); in random-rotation mode fresh angles are drawn per step.
    Two runs with identical config, dataset, and seed are bitwise identical.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    steps = _expand_steps(config, dataset)
    if model is None:
        model = init_model(config.depth, config.channels, config.residual,
                           seed=config.seed, dtype=config.dtype)
    state = init_adam(model, lr=config.lr)
    history = TrainHistory()
    global_step = 0
    use_rotation = config.loss_kind == "ran2i" and config.aug_weight > 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order_rng = np.random.Generator(np.random.Philox(
            key=np.array([config.seed, epoch], dtype=np.uint64)))
        order = order_rng.permutation(len(steps))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = None
            for si in batch:
                x, t = steps[si]
                if use_rotation:
                    angles = draw_rotations(config.rotation, global_step)
                    total, base, rot, grads = loss_ran2i(
                        model, x, t, angles, config.aug_weight)
                else:
                    total, base, rot, grads = loss_ran2i(model, x, t, (), 0.0)
                sums += (total, base, rot)
                if acc is None:
                    acc = grads
                else:
                    acc = {"kernels": [a + g for a, g in
                                       zip(acc["kernels"], grads["kernels"])],
                           "scales": [a + g for a, g in
                                      zip(acc["scales"], grads["scales"])]}
                global_step += 1
            nb = len(batch)
            if nb > 1:
                acc = {"kernels": [g / nb for g in acc["kernels"]],
                       "scales": [g / nb for g in acc["scales"]]}
            model, state = adam_step(model, state, acc)
        sums /= len(steps)
        history.total_loss.append(float(sums[0]))
        history.base_loss.append(float(sums[1]))
        history.rot_loss.append(float(sums[2]))
        history.seconds.append(time.perf_counter() - t0)
    return model, history


def infer_average(model: DenoiserModel, sub_inputs) -> ImageGrid:
    """Mean of the denoiser output over the sub-reconstructions."""
    sub_inputs = list(sub_inputs)
    if len(sub_inputs) == 0:
        raise ValueError("need at least one input image")
    outs = [forward(model, img).data.astype(np.float64) for img in sub_inputs]
    mean = np.mean(outs, axis=0)
    return ImageGrid(mean.astype(sub_inputs[0].data.dtype),
                     sub_inputs[0].pixel_size)


def metric_psnr(x, ref, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB, capped at 200 dB for exact matches."""
    x, ref = _as_array(x), _as_array(ref)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x.astype(np.float64) - ref.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    t = np.arange(size) - half
    w = np.exp(-t * t / (2.0 * sigma * sigma))
    return w / w.sum()


def metric_ssim(x, ref, data_range: float, window: int = 11,
                sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over valid (fully interior) windows."""
    x, ref = _as_array(x).astype(np.float64), _as_array(ref).astype(np.float64)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if min(x.shape) < window:
        raise ValueError("image smaller than the SSIM window")
    w = _gaussian_window(window, sigma)

    def smooth(img):
        out = correlate1d(img, w, axis=0, mode="constant")
        out = correlate1d(out, w, axis=1, mode="constant")
        h = window // 2
        return out[h:img.shape[0] - h, h:img.shape[1] - h]

    mu_x, mu_y = smooth(x), smooth(ref)
    sxx = smooth(x * x) - mu_x * mu_x
    syy = smooth(ref * ref) - mu_y * mu_y
    sxy = smooth(x * ref) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "total_loss", "base_loss", "rot_loss", "seconds"])
        for e in range(len(history)):
            wr.writerow([e, f"{history.total_loss[e]:.10g}",
                         f"{history.base_loss[e]:.10g}",
                         f"{history.rot_loss[e]:.10g}",
                         f"{history.seconds[e]:.6f}"])


def write_metrics_csv(rows, path) -> None:
    """Rows are dicts with image_id, method, psnr_db, ssim."""
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["image_id", "method",
                                           "psnr_db", "ssim"])
        wr.writeheader()
        for row in rows:
            wr.writerow({"image_id": row["image_id"],
                         "method": row["method"],
                         "psnr_db": f"{row['psnr_db']:.6f}",
                         "ssim": f"{row['ssim']:.6f}"})
