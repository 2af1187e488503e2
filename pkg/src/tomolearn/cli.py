"""Command-line interface for the tomography denoising pipeline.

Subcommands: simulate, train, reconstruct, evaluate, sweep, verify.
Configs are INI files; every quantity that appears in them is first-class
(K, i0, S, r, lambda, lr, epochs).  Exit codes: 0 success, 1 gate or trend
failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
import time

import numpy as np

from .core import (FormatError, ScanGeometry, export_png, read_sinogram_raw,
                   write_image_raw)
from .fbp import fbp_subset
from .net import load_checkpoint, save_checkpoint
from .oracle import (adjoint_and_gradient_suite, format_report,
                     measure_image_noise_correlation, verify_prop1)
from .pipeline import (build_training_items, evaluate_model, load_manifest,
                       make_geometry, run_experiment, simulate_dataset,
                       summarize_metrics)
from .rotate import RotationSchedule
from .split import partition_angles
from .train import (TrainConfig, infer_average, metric_psnr, metric_ssim,
                    train, write_history_csv, write_metrics_csv)

EXIT_OK = 0
EXIT_GATE_FAILURE = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    pass


def _load_config(path) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    return cp


def _get(cp, section, key, cast, default=None):
    if not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _geometry_from_config(cp) -> ScanGeometry:
    kind = _get(cp, "geometry", "kind", str)
    if kind not in ("parallel", "fan"):
        raise ConfigError(f"geometry kind must be parallel or fan, got {kind!r}")
    return make_geometry(
        kind,
        _get(cp, "geometry", "k", int),
        _get(cp, "geometry", "n_detectors", int),
        _get(cp, "geometry", "detector_pitch", float),
        _get(cp, "geometry", "source_to_origin", float, 0.0),
        _get(cp, "geometry", "origin_to_detector", float, 0.0))


def _parse_range(text: str, limit: int):
    """ 'a:b' half-open range or comma-separated indices."""
    if ":" in text:
        a, b = text.split(":")
        indices = list(range(int(a), int(b)))
    else:
        indices = [int(t) for t in text.split(",") if t.strip()]
    for i in indices:
        if not 0 <= i < limit:
            raise ConfigError(f"index {i} out of range (dataset has {limit})")
    return indices


def cmd_simulate(args) -> int:
    cp = _load_config(args.config)
    geometry = _geometry_from_config(cp)
    seed = args.seed if args.seed is not None else _get(cp, "run", "seed",
                                                        int, 0)
    simulate_dataset(
        args.out,
        count=_get(cp, "dataset", "count", int),
        n=_get(cp, "dataset", "n", int),
        geometry=geometry,
        i0=_get(cp, "noise", "i0", float),
        s=_get(cp, "split", "s", int),
        seed=seed,
        phantom=_get(cp, "dataset", "phantom", str, "ellipses"),
        pixel_size=_get(cp, "dataset", "pixel_size", float, 1.0),
        contrast_scale=_get(cp, "dataset", "contrast_scale", float, 0.2),
        acquisitions=_get(cp, "dataset", "acquisitions", int, 1))
    print(f"dataset written to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = _load_config(args.config)
    manifest = load_manifest(args.dataset)
    loss = _get(cp, "train", "loss", str)
    seed = args.seed if args.seed is not None else _get(cp, "run", "seed",
                                                        int, 0)
    precision = args.precision or _get(cp, "run", "precision", str, "f32")
    indices = _parse_range(_get(cp, "train", "train_range", str,
                                f"0:{manifest['count']}"), manifest["count"])
    items = build_training_items(args.dataset, manifest, loss, indices)
    rotation = None
    aug_weight = _get(cp, "train", "aug_weight", float, 1.0)
    if loss == "ran2i" and aug_weight > 0:
        rotation = RotationSchedule(
            _get(cp, "train", "rotation_mode", str, "random"),
            _get(cp, "train", "r", int, 2), seed=seed)
    config = TrainConfig(
        loss_kind=loss,
        epochs=_get(cp, "train", "epochs", int),
        lr=_get(cp, "train", "lr", float, 1e-3),
        batch_size=_get(cp, "train", "batch_size", int, 1),
        rotation=rotation,
        aug_weight=aug_weight,
        seed=seed,
        precision=precision,
        depth=_get(cp, "train", "depth", int, 5),
        channels=_get(cp, "train", "channels", int, 16),
        mirror_pairs=manifest["s"] == 2)
    model, history = train(config, items)
    os.makedirs(args.out, exist_ok=True)
    extra = {
        "loss_kind": loss,
        "geometry": manifest["geometry"],
        "s": manifest["s"],
        "n": manifest["n"],
        "pixel_size": manifest["pixel_size"],
        "contrast_scale": manifest["contrast_scale"],
        "seed": seed,
        "epochs": config.epochs,
        "train_indices": indices,
    }
    ckpt = os.path.join(args.out, "checkpoint.tlnn")
    save_checkpoint(model, ckpt, extra=extra)
    write_history_csv(history, os.path.join(args.out, "history.csv"))
    with open(os.path.join(args.out, "train_manifest.json"), "w") as f:
        json.dump({"config_file": os.path.abspath(args.config),
                   "dataset": os.path.abspath(args.dataset),
                   "extra": extra}, f, indent=1, sort_keys=True)
    print(f"checkpoint written to {ckpt} "
          f"(final loss {history.total_loss[-1]:.6g})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    sino = read_sinogram_raw(args.sinogram)
    geo = sino.geometry
    trained = extra.get("geometry", {})
    if trained:
        if geo.n_detectors != trained["n_detectors"] or \
                abs(geo.detector_pitch - trained["detector_pitch"]) > 1e-9:
            raise ConfigError(
                "sinogram detector layout does not match the checkpoint "
                f"(got {geo.n_detectors} x {geo.detector_pitch}, trained on "
                f"{trained['n_detectors']} x {trained['detector_pitch']})")
    s = extra.get("s", 2)
    if geo.n_angles % s != 0:
        raise ConfigError(f"angle count {geo.n_angles} not divisible by the "
                          f"checkpoint's split count {s}")
    n = extra.get("n", geo.n_detectors)
    pixel_size = extra.get("pixel_size", 1.0)
    partition = partition_angles(geo.n_angles, s)
    subrecs = [fbp_subset(sino, sub, n, pixel_size)
               for sub in partition.subsets]
    out_img = infer_average(model, subrecs)
    raw_path = args.out + ".tlim"
    png_path = args.out + ".png"
    write_image_raw(out_img, raw_path)
    vmax = extra.get("contrast_scale", float(out_img.data.max()) or 1.0)
    export_png(out_img, png_path, display_min=0.0, display_max=vmax)
    print(f"wrote {raw_path} and {png_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .core import read_image_raw
    recs = sorted(f for f in os.listdir(args.recon_dir)
                  if f.endswith(".tlim"))
    if not recs:
        raise ConfigError(f"no .tlim images in {args.recon_dir}")
    rows = []
    for fname in recs:
        stem = os.path.splitext(fname)[0]
        tag = stem.rsplit("_", 1)[-1]
        ref_path = os.path.join(args.reference_dir, f"phantom_{tag}.tlim")
        if not os.path.exists(ref_path):
            raise ConfigError(f"no reference phantom_{tag}.tlim for {fname}")
        rec = read_image_raw(os.path.join(args.recon_dir, fname))
        ref = read_image_raw(ref_path)
        dr = args.data_range
        if dr is None:
            dr = float(ref.data.max() - ref.data.min()) or 1.0
        rows.append({"image_id": tag, "method": args.method,
                     "psnr_db": metric_psnr(rec, ref, dr),
                     "ssim": metric_ssim(rec, ref, dr)})
    summary = summarize_metrics(rows)
    out_rows = rows + [
        {"image_id": "mean", "method": args.method,
         "psnr_db": summary["psnr_mean"], "ssim": summary["ssim_mean"]},
        {"image_id": "std", "method": args.method,
         "psnr_db": summary["psnr_std"], "ssim": summary["ssim_std"]},
    ]
    write_metrics_csv(out_rows, args.out)
    print(f"{args.method}: PSNR {summary['psnr_mean']:.2f} +- "
          f"{summary['psnr_std']:.2f} dB, SSIM {summary['ssim_mean']:.4f} "
          f"+- {summary['ssim_std']:.4f} ({len(rows)} images) -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cp = _load_config(args.config)
    geometry = _geometry_from_config(cp)
    seed0 = args.seed if args.seed is not None else _get(cp, "run", "seed",
                                                         int, 0)
    r_values = [int(t) for t in _get(cp, "sweep", "r_values", str).split(",")]
    modes = [t.strip() for t in _get(cp, "sweep", "modes", str).split(",")]
    seeds = [int(t) for t in _get(cp, "sweep", "seeds", str).split(",")]
    epochs = _get(cp, "sweep", "epochs", int)
    count = _get(cp, "dataset", "count", int)
    train_count = _get(cp, "sweep", "train_count", int)
    test_count = _get(cp, "sweep", "test_count", int)
    if train_count + test_count > count:
        raise ConfigError("train_count + test_count exceeds dataset count")
    os.makedirs(args.out, exist_ok=True)
    ds_dir = os.path.join(args.out, "dataset")
    manifest = simulate_dataset(
        ds_dir, count=count, n=_get(cp, "dataset", "n", int),
        geometry=geometry, i0=_get(cp, "noise", "i0", float),
        s=_get(cp, "split", "s", int), seed=seed0,
        phantom=_get(cp, "dataset", "phantom", str, "ellipses"),
        pixel_size=_get(cp, "dataset", "pixel_size", float, 1.0),
        contrast_scale=_get(cp, "dataset", "contrast_scale", float, 0.2))
    tr = range(train_count)
    te = range(train_count, train_count + test_count)
    rows = []
    for r in r_values:
        for mode in modes:
            for seed in seeds:
                t0 = time.perf_counter()
                res = run_experiment(
                    ds_dir, manifest, "ran2i", tr, te, epochs=epochs,
                    seed=seed, rotation_mode=mode, r=r,
                    precision=args.precision or "f32")
                rows.append({
                    "r": r, "mode": mode, "seed": seed,
                    "psnr_mean": res["summary"]["psnr_mean"],
                    "psnr_std": res["summary"]["psnr_std"],
                    "ssim_mean": res["summary"]["ssim_mean"],
                    "ssim_std": res["summary"]["ssim_std"],
                    "seconds": time.perf_counter() - t0,
                })
                print(f"r={r} mode={mode} seed={seed}: "
                      f"PSNR {rows[-1]['psnr_mean']:.2f} dB "
                      f"({rows[-1]['seconds']:.0f}s)")
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["r", "mode", "seed", "psnr_mean",
                                           "psnr_std", "ssim_mean",
                                           "ssim_std", "seconds"])
        wr.writeheader()
        wr.writerows(rows)
    finite = all(np.isfinite(row["psnr_mean"]) and np.isfinite(row["ssim_mean"])
                 for row in rows)
    for r in r_values:
        for mode in modes:
            vals = [row["psnr_mean"] for row in rows
                    if row["r"] == r and row["mode"] == mode]
            print(f"summary r={r} mode={mode}: "
                  f"mean PSNR {np.mean(vals):.2f} dB over {len(vals)} seeds")
    print(f"sweep CSV -> {csv_path}")
    return EXIT_OK if finite else EXIT_GATE_FAILURE


def cmd_verify(args) -> int:
    reports = {}
    suite = adjoint_and_gradient_suite()
    print(format_report(suite))
    reports["adjoint_and_gradient"] = suite
    prop1 = verify_prop1(trials=args.trials, seed=args.seed or 0)
    flag = "PASS" if prop1["passed"] else "FAIL"
    print(f"[{flag}] prediction-error decomposition: gap "
          f"{prop1['gap_mean']:.3e} (se {prop1['gap_se']:.3e}), cross terms "
          f"{prop1['cross_plain_mean']:.3e} / {prop1['cross_rotated_mean']:.3e}")
    reports["prediction_error_decomposition"] = prop1
    poisson = verify_prop1(trials=min(args.trials, 3000),
                           seed=(args.seed or 0) + 1, noise="poisson", i0=1e5)
    print(f"[INFO] decomposition gap under Poisson post-log noise (reported, "
          f"not gated): {poisson['gap_mean']:.3e} (se {poisson['gap_se']:.3e})")
    reports["poisson_residual"] = poisson
    corr = measure_image_noise_correlation(seed=args.seed or 0)
    cross_ok = corr["cross_acquisition_mean_abs_corr"] < 0.05
    adj_ok = abs(corr["adjacent_pixel_mean_corr"]) > 0.1
    print(f"[{'PASS' if cross_ok else 'FAIL'}] cross-acquisition image "
          f"correlation {corr['cross_acquisition_mean_abs_corr']:.4f} < 0.05")
    print(f"[{'PASS' if adj_ok else 'FAIL'}] adjacent-pixel noise "
          f"correlation |{corr['adjacent_pixel_mean_corr']:.4f}| > 0.1")
    reports["image_noise_correlation"] = corr
    passed = suite["passed"] and prop1["passed"] and cross_ok and adj_ok
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"passed": passed, "reports": reports}, f, indent=1,
                      sort_keys=True)
        print(f"report JSON -> {args.out}")
    print(f"verify: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_GATE_FAILURE


def _apply_threads(threads: int | None) -> None:
    # best-effort cap for BLAS pools created after this point
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tomolearn",
                                description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker/BLAS thread count")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_default=None):
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--precision", choices=("f32", "f64"), default=None)
        if config:
            sp.add_argument("--config", required=True, help="INI config file")
        if out_default is not None:
            sp.add_argument("--out", default=out_default)

    sp = sub.add_parser("simulate", help="generate a phantom dataset")
    common(sp, out_default="dataset")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train", help="train a denoiser on a dataset")
    sp.add_argument("dataset", help="dataset directory (from simulate)")
    common(sp, out_default="run")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("reconstruct",
                        help="denoised reconstruction from a sinogram")
    sp.add_argument("checkpoint")
    sp.add_argument("sinogram")
    common(sp, config=False, out_default="recon")
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="PSNR/SSIM against references")
    sp.add_argument("recon_dir")
    sp.add_argument("reference_dir")
    sp.add_argument("--method", default="model")
    sp.add_argument("--data-range", type=float, default=None)
    common(sp, config=False, out_default="metrics.csv")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("sweep", help="rotation hyper-parameter sweep")
    common(sp, out_default="sweep")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("verify", help="run the oracle gates")
    sp.add_argument("--trials", type=int, default=10_000)
    common(sp, config=False, out_default=None)
    sp.add_argument("--out", default=None, help="optional JSON report path")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
