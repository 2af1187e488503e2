"""Desk-scale CT simulation, reconstruction, and self-supervised denoising.

The pipeline: simulate photon-limited sinograms of phantoms, reconstruct
with filtered backprojection, split the measurements into interleaved
angular subsets, and train a bias-free convolutional denoiser on
subset-to-subset prediction with an optional rotation-consistency term.
"""

from .core import (CountData, FormatError, ImageGrid, ScanGeometry, Sinogram,
                   export_png, make_random_ellipses, make_shepp_logan,
                   read_counts_raw, read_image_raw, read_sinogram_raw,
                   write_counts_raw, write_image_raw, write_sinogram_raw)
from .fbp import (fbp_reconstruct, fbp_subset, ramlak_filter, ramlak_kernel,
                  restrict_sinogram)
from .net import (AdamState, DenoiserModel, adam_step, backward, forward,
                  init_adam, init_model, load_checkpoint, save_checkpoint)
from .noise import (acquire_noisy_sinogram, expected_counts, postlog,
                    simulate_counts)
from .oracle import (adjoint_and_gradient_suite,
                     measure_image_noise_correlation, verify_prop1)
from .pipeline import (build_training_items, evaluate_model, load_manifest,
                       make_geometry, run_experiment, simulate_dataset)
from .projector import (back_project, build_dense_operator,
                        check_field_of_view, forward_project)
from .rotate import (RotationSchedule, draw_rotations, rotate_adjoint_array,
                     rotate_array, rotate_image, rotation_matrix)
from .split import (AngularPartition, make_training_pair, partition_angles,
                    reassemble_sinogram, split_sinogram)
from .train import (TrainConfig, TrainHistory, infer_average, loss_mse,
                    loss_ran2i, metric_psnr, metric_ssim, train,
                    write_history_csv, write_metrics_csv)

__version__ = "0.1.0"
