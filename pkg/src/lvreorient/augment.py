"""Truncated-Gaussian parameter modeling and inverse-warp data augmentation.

A per-parameter Gaussian is fit to the annotated transforms of a dataset;
new parameter sets are drawn from it, truncated to a band around the mean,
and each short-axis image is warped by the inverse of a drawn transform to
manufacture a synthetic transaxial image whose ground truth is that draw.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .manifest import DatasetManifest, ManifestEntry, save_manifest
from .stn import reorient
from .transform import RigidParams, invert, matrix_to_params, to_matrix
from .volume import Volume3D, load_volume, save_volume

# smallest allowed per-component std: half a voxel for translations, one
# degree for rotations; prevents degenerate sampling on tiny datasets
STD_FLOOR = np.array([0.5, 0.5, 0.5, 1.0, 1.0, 1.0])

DEFAULT_AUGMENTATIONS_PER_CASE = 40
DEFAULT_TRUNCATION_SIGMAS = 2.0


@dataclass(frozen=True)
class GaussianParamModel:
    """Componentwise mean/std of the six parameters plus a truncation width.

    std is clamped up to STD_FLOOR; draws are kept only inside
    mean +/- truncation_sigmas * std.
    """

    mean: np.ndarray
    std: np.ndarray
    truncation_sigmas: float = DEFAULT_TRUNCATION_SIGMAS

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(6)
        std = np.asarray(self.std, dtype=np.float64).reshape(6)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std)) and np.all(std >= 0)):
            raise ValueError("mean/std must be finite with non-negative std")
        if not np.isfinite(self.truncation_sigmas) or self.truncation_sigmas <= 0:
            raise ValueError(f"truncation_sigmas must be positive, got {self.truncation_sigmas}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, STD_FLOOR))

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.truncation_sigmas * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.truncation_sigmas * self.std


def fit_gaussians(params_list: list[RigidParams], truncation_sigmas: float = DEFAULT_TRUNCATION_SIGMAS) -> GaussianParamModel:
    """Componentwise sample mean and population std over annotated transforms."""
    if len(params_list) < 2:
        raise ValueError(f"need at least 2 parameter sets to fit, got {len(params_list)}")
    values = np.stack([p.as_array() for p in params_list])
    return GaussianParamModel(
        mean=values.mean(axis=0),
        std=values.std(axis=0),  # population std (ddof=0)
        truncation_sigmas=truncation_sigmas,
    )


def sample_truncated(model: GaussianParamModel, count: int, seed: int) -> list[RigidParams]:
    """Draw `count` parameter sets, each component rejected until in band."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    lower, upper = model.lower, model.upper
    draws = []
    for _ in range(count):
        values = rng.normal(model.mean, model.std)
        bad = (values < lower) | (values > upper)
        while np.any(bad):
            values[bad] = rng.normal(model.mean[bad], model.std[bad])
            bad = (values < lower) | (values > upper)
        draws.append(RigidParams.from_array(values))
    return draws


def augment_pair(sa_vol: Volume3D, p: RigidParams) -> Volume3D:
    """Inverse-warp a short-axis volume into a synthetic transaxial volume.

    The returned volume's ground-truth reorientation parameters are exactly p:
    reorienting it by p recovers sa_vol up to interpolation error.
    """
    p_inverse = matrix_to_params(invert(to_matrix(p)))
    return reorient(sa_vol, p_inverse)


def augment_manifest(
    manifest: DatasetManifest,
    out_dir: str,
    count: int = DEFAULT_AUGMENTATIONS_PER_CASE,
    seed: int = 0,
    truncation_sigmas: float = DEFAULT_TRUNCATION_SIGMAS,
) -> DatasetManifest:
    """Fit the parameter Gaussians over a dataset and append `count` synthetic
    transaxial images per case; writes the volumes and the grown manifest.

    Every entry must carry a short-axis volume. Per-case RNG streams are
    derived from (seed, case index) so the result does not depend on the order
    cases are processed in.
    """
    if any(entry.sa_path is None for entry in manifest.entries):
        raise ValueError("augmentation needs sa_path on every manifest entry")
    os.makedirs(out_dir, exist_ok=True)
    model = fit_gaussians([entry.params for entry in manifest.entries], truncation_sigmas)

    out_entries = []
    for entry in manifest.entries:
        out_entries.append(
            ManifestEntry(
                transaxial_path=os.path.relpath(manifest.abspath(entry.transaxial_path), out_dir),
                params=entry.params,
                sa_path=os.path.relpath(manifest.abspath(entry.sa_path), out_dir),
            )
        )

    case_seeds = np.random.SeedSequence(seed).spawn(len(manifest.entries))
    for case_index, entry in enumerate(manifest.entries):
        sa_vol = load_volume(manifest.abspath(entry.sa_path))
        sa_rel = os.path.relpath(manifest.abspath(entry.sa_path), out_dir)
        draws = sample_truncated(model, count, case_seeds[case_index])
        for aug_index, params in enumerate(draws):
            ta = augment_pair(sa_vol, params)
            name = f"case{case_index:04d}_aug{aug_index:03d}"
            save_volume(ta, os.path.join(out_dir, name))
            out_entries.append(
                ManifestEntry(
                    transaxial_path=name + ".f32",
                    params=params,
                    sa_path=sa_rel,
                    source_case=case_index,
                )
            )

    out = DatasetManifest(entries=out_entries, base_dir=out_dir)
    save_manifest(out, os.path.join(out_dir, "manifest.json"))
    return out
