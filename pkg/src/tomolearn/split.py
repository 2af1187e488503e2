"""Angular partitioning of sinograms into interleaved subsets.

Subset j of S holds angle indices {j, j+S, j+2S, ...}.  Sections pair a
target index set J with its complement J^C over the subsets; only the
singleton-target ("1 : S-1") strategy is generated, which for S = 2 gives
the two symmetric input/target pairs used in training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ImageGrid, Sinogram
from .fbp import restrict_sinogram


@dataclass(frozen=True)
class AngularPartition:
    """Interleaved split of angle indices into S subsets plus sections."""

    k_total: int
    s: int
    subsets: tuple
    sections: tuple

    def to_json(self) -> str:
        return json.dumps({
            "k_total": self.k_total,
            "s": self.s,
            "subsets": [list(sub) for sub in self.subsets],
            "sections": [[list(j), list(jc)] for (j, jc) in self.sections],
        })

    @staticmethod
    def from_json(text: str) -> "AngularPartition":
        d = json.loads(text)
        return AngularPartition(
            d["k_total"], d["s"],
            tuple(tuple(sub) for sub in d["subsets"]),
            tuple((tuple(j), tuple(jc)) for j, jc in d["sections"]))


def partition_angles(k_total: int, s: int) -> AngularPartition:
    """Interleaved partition of {0..k_total-1} into s subsets."""
    if s < 2:
        raise ValueError("number of splits must be at least 2")
    if k_total % s != 0:
        raise ValueError(f"angle count {k_total} not divisible by s={s}")
    subsets = tuple(tuple(range(j, k_total, s)) for j in range(s))
    sections = tuple(((j,), tuple(i for i in range(s) if i != j))
                     for j in range(s))
    return AngularPartition(k_total, s, subsets, sections)


def split_sinogram(sinogram: Sinogram, partition: AngularPartition):
    """Restrict the sinogram to each subset's angles, preserving order."""
    if sinogram.geometry.n_angles != partition.k_total:
        raise ValueError(
            f"sinogram has {sinogram.geometry.n_angles} angles, partition "
            f"expects {partition.k_total}")
    return [restrict_sinogram(sinogram, sub) for sub in partition.subsets]


def reassemble_sinogram(subs, partition: AngularPartition,
                        geometry) -> Sinogram:
    """Inverse of :func:`split_sinogram`; exact row re-interleave."""
    data = np.empty((partition.k_total, geometry.n_detectors),
                    dtype=subs[0].data.dtype)
    for sub, indices in zip(subs, partition.subsets):
        data[np.asarray(indices, dtype=np.intp)] = sub.data
    return Sinogram(geometry, data)


def make_training_pair(sub_recons, section):
    """(input, target) images for one section: means over J^C and J."""
    j, jc = section
    if len(j) == 0 or len(jc) == 0:
        raise ValueError("both section sides must be nonempty")
    pixel_size = sub_recons[0].pixel_size

    def mean_over(indices) -> ImageGrid:
        stack = np.stack([sub_recons[i].data for i in indices], axis=0)
        return ImageGrid(stack.mean(axis=0).astype(stack.dtype), pixel_size)

    return mean_over(jc), mean_over(j)
