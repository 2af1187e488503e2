"""Dataset generation and experiment plumbing shared by the CLI and tests.

A dataset directory contains, per phantom index i (zero-padded to 4 digits):

    phantom_{i}.tlim            clean image
    clean_{i}.tlsn              noiseless line-integral sinogram
    counts_{i}_a{a}.tlct        photon counts, acquisition a
    noisy_{i}_a{a}.tlsn         post-log sinogram, acquisition a
    recon_{i}_a{a}.tlim         full-angle reconstruction of acquisition a
    subrec_{i}_a0_s{j}.tlim     reconstruction from angle subset j

plus manifest.json recording every parameter, enough to re-run exactly.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from .core import (ImageGrid, ScanGeometry, make_random_ellipses,
                   make_shepp_logan, read_image_raw, write_counts_raw,
                   write_image_raw, write_sinogram_raw)
from .fbp import fbp_reconstruct, fbp_subset
from .net import DenoiserModel
from .noise import postlog, simulate_counts
from .projector import check_field_of_view, forward_project
from .rotate import RotationSchedule
from .split import make_training_pair, partition_angles
from .train import (TrainConfig, infer_average, metric_psnr, metric_ssim,
                    train)

MANIFEST_NAME = "manifest.json"


def make_geometry(kind: str, k: int, n_detectors: int, detector_pitch: float,
                  source_to_origin: float = 0.0,
                  origin_to_detector: float = 0.0) -> ScanGeometry:
    """Evenly spaced view angles: [0, 180) parallel, [0, 360) fan."""
    span = 180.0 if kind == "parallel" else 360.0
    angles = np.arange(k) * (span / k)
    return ScanGeometry(kind, angles, n_detectors, detector_pitch,
                        source_to_origin, origin_to_detector)


def simulate_dataset(out_dir, count: int, n: int, geometry: ScanGeometry,
                     i0: float, s: int, seed: int, phantom: str = "ellipses",
                     pixel_size: float = 1.0, contrast_scale: float = 1.0,
                     acquisitions: int = 1) -> dict:
    """Write a full simulated dataset plus manifest; deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if acquisitions < 1:
        raise ValueError("acquisitions must be >= 1")
    if phantom not in ("ellipses", "shepp-logan"):
        raise ValueError(f"unknown phantom kind {phantom!r}")
    check_field_of_view(geometry, n, pixel_size)
    partition = partition_angles(geometry.n_angles, s)
    os.makedirs(out_dir, exist_ok=True)
    files = []

    def _save(name, writer, obj):
        path = os.path.join(out_dir, name)
        writer(obj, path)
        files.append(name)

    for i in range(count):
        tag = f"{i:04d}"
        if phantom == "ellipses":
            img = make_random_ellipses(n, pixel_size,
                                       seed=seed * 100_003 + i,
                                       contrast_scale=contrast_scale,
                                       dtype=np.float64)
        else:
            img = make_shepp_logan(n, pixel_size, contrast_scale,
                                   dtype=np.float64)
        _save(f"phantom_{tag}.tlim", write_image_raw, img)
        clean = forward_project(img, geometry)
        _save(f"clean_{tag}.tlsn", write_sinogram_raw, clean)
        for a in range(acquisitions):
            counts = simulate_counts(clean, i0,
                                     seed=seed * 1_000_003 + i * 10 + a)
            _save(f"counts_{tag}_a{a}.tlct", write_counts_raw, counts)
            noisy = postlog(counts)
            _save(f"noisy_{tag}_a{a}.tlsn", write_sinogram_raw, noisy)
            recon = fbp_reconstruct(noisy, n, pixel_size)
            _save(f"recon_{tag}_a{a}.tlim", write_image_raw, recon)
            if a == 0:
                for j, subset in enumerate(partition.subsets):
                    sub = fbp_subset(noisy, subset, n, pixel_size)
                    _save(f"subrec_{tag}_a0_s{j}.tlim", write_image_raw, sub)

    manifest = {
        "count": count,
        "n": n,
        "pixel_size": pixel_size,
        "contrast_scale": contrast_scale,
        "phantom": phantom,
        "geometry": geometry.to_dict(),
        "i0": i0,
        "s": s,
        "seed": seed,
        "acquisitions": acquisitions,
        "files": files,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ValueError(f"no {MANIFEST_NAME} in {dataset_dir}")
    with open(path) as f:
        return json.load(f)


def _img(dataset_dir, name) -> ImageGrid:
    return read_image_raw(os.path.join(dataset_dir, name))


def load_subrecs(dataset_dir, manifest, index: int):
    tag = f"{index:04d}"
    return [_img(dataset_dir, f"subrec_{tag}_a0_s{j}.tlim")
            for j in range(manifest["s"])]


def build_training_items(dataset_dir, manifest: dict, loss_kind: str,
                         indices) -> list:
    """(input, target) image pairs appropriate for the loss kind.

    For the split-based losses each section of the angular partition yields
    one pair (mean of complement sub-reconstructions, target
    sub-reconstruction); with s = 2 only the first section is emitted and the
    training loop adds the mirrored direction.
    """
    items = []
    s = manifest["s"]
    partition = partition_angles(len(manifest["geometry"]["angles_deg"]), s)
    for i in indices:
        tag = f"{i:04d}"
        if loss_kind == "supervised":
            items.append((_img(dataset_dir, f"recon_{tag}_a0.tlim"),
                          _img(dataset_dir, f"phantom_{tag}.tlim")))
        elif loss_kind == "n2n":
            if manifest["acquisitions"] < 2:
                raise ValueError("n2n needs a dataset with >= 2 acquisitions")
            items.append((_img(dataset_dir, f"recon_{tag}_a0.tlim"),
                          _img(dataset_dir, f"recon_{tag}_a1.tlim")))
        elif loss_kind in ("n2i", "ran2i"):
            subrecs = load_subrecs(dataset_dir, manifest, i)
            sections = partition.sections if s > 2 else partition.sections[:1]
            for section in sections:
                items.append(make_training_pair(subrecs, section))
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
    return items


def evaluate_model(model: DenoiserModel | None, dataset_dir, manifest: dict,
                   indices, method: str, data_range: float | None = None):
    """Per-image PSNR/SSIM of the averaged denoiser output (or, with
    ``model=None``, of the raw split-FBP average) against the phantom."""
    rows = []
    if data_range is None:
        data_range = manifest["contrast_scale"]
    for i in indices:
        tag = f"{i:04d}"
        ref = _img(dataset_dir, f"phantom_{tag}.tlim")
        subrecs = load_subrecs(dataset_dir, manifest, i)
        if model is None:
            out = ImageGrid(np.mean([im.data for im in subrecs], axis=0),
                            ref.pixel_size)
        else:
            out = infer_average(model, subrecs)
        rows.append({"image_id": i, "method": method,
                     "psnr_db": metric_psnr(out, ref, data_range),
                     "ssim": metric_ssim(out, ref, data_range)})
    return rows


def summarize_metrics(rows):
    psnr = np.array([r["psnr_db"] for r in rows], dtype=np.float64)
    ssim = np.array([r["ssim"] for r in rows], dtype=np.float64)
    return {"psnr_mean": float(psnr.mean()),
            "psnr_std": float(psnr.std(ddof=1)) if psnr.size > 1 else 0.0,
            "ssim_mean": float(ssim.mean()),
            "ssim_std": float(ssim.std(ddof=1)) if ssim.size > 1 else 0.0}


def run_experiment(dataset_dir, manifest: dict, loss_kind: str,
                   train_indices, test_indices, epochs: int, seed: int,
                   depth: int = 5, channels: int = 16, lr: float = 1e-3,
                   aug_weight: float = 1.0, rotation_mode: str = "random",
                   r: int = 2, precision: str = "f32"):
    """Train one model and evaluate it on the held-out indices."""
    items = build_training_items(dataset_dir, manifest, loss_kind,
                                 train_indices)
    rotation = None
    if loss_kind == "ran2i" and aug_weight > 0:
        rotation = RotationSchedule(rotation_mode, r, seed=seed)
    config = TrainConfig(loss_kind=loss_kind, epochs=epochs, lr=lr,
                         rotation=rotation, aug_weight=aug_weight, seed=seed,
                         precision=precision, depth=depth, channels=channels,
                         mirror_pairs=manifest["s"] == 2)
    t0 = time.perf_counter()
    model, history = train(config, items)
    seconds = time.perf_counter() - t0
    rows = evaluate_model(model, dataset_dir, manifest, test_indices,
                          method=loss_kind)
    return {"model": model, "history": history, "rows": rows,
            "summary": summarize_metrics(rows), "seconds": seconds,
            "config": config}
