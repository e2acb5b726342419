"""Spatial transformer: grid generation, trilinear sampling, parameter gradients.

Sampling is pull-back: the grid maps every output voxel through the inverse
transform, so applying parameters p moves image content forward by p.
Coordinates outside the volume contribute zero (SPECT background is empty).
Rotations pivot on the volume center; grid coordinates are exchanged in the
normalized [-1, 1] cube where -1 and +1 are the outer faces of the volume
(voxel center i of an n-voxel axis sits at (2 i + 1) / n - 1).

The trilinear interpolant is piecewise linear; its parameter gradient is the
exact derivative inside interpolation cells and a fixed subgradient choice on
cell faces, which is what the training and registration loops consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .transform import (
    RigidParams,
    matrices_from_values,
    matrix_vjp,
    rigid_inverse,
    to_matrix,
)
from .volume import Volume3D


@dataclass(frozen=True)
class SampleGrid:
    """Per-output-voxel source coordinates in normalized [-1, 1]^3 space.

    coords has shape (nx * ny * nz, 3) in C order over (x, y, z) indices.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        coords = np.asarray(self.coords, dtype=np.float64)
        n = dims[0] * dims[1] * dims[2]
        if coords.shape != (n, 3):
            raise ValueError(f"coords shape {coords.shape} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", coords)


def _center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def _lattice(dims) -> np.ndarray:
    """Integer voxel-index lattice, shape (N, 3), C order over (x, y, z)."""
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1).astype(np.float64)


def pad_source(data: np.ndarray) -> np.ndarray:
    """Zero-pad a (nx, ny, nz) array by one voxel per side for the kernels."""
    return np.pad(np.asarray(data), 1, mode="constant")


def index_affine(matrix: np.ndarray, dims) -> np.ndarray:
    """(3, 4) map from output voxel index to source voxel index.

    u = inv(M) (x - c) + c with c the volume center, i.e. the pull-back of the
    transform expressed directly in index space.
    """
    inv = rigid_inverse(matrix)
    c = _center(dims)
    a = inv[0:3, 0:3]
    b = inv[0:3, 3] + c - a @ c
    return np.concatenate([a, b[:, None]], axis=1)


def warp_padded(src_pad: np.ndarray, matrix: np.ndarray, dims) -> np.ndarray:
    """Warp an already padded source by a rigid matrix; returns float64 (dims)."""
    nx, ny, nz = dims
    p = np.ascontiguousarray(index_affine(matrix, dims))
    out = np.empty(nx * ny * nz, dtype=np.float64)
    _kernels.warp_affine(src_pad.reshape(-1), p, nx, ny, nz, out)
    return out.reshape(dims)


def warp_array(data: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Warp a (nx, ny, nz) array by a rigid matrix (pull-back, zero padding)."""
    src = np.ascontiguousarray(data, dtype=np.float64)
    return warp_padded(pad_source(src), matrix, src.shape)


def warp_matrix_vjp(src_pad: np.ndarray, matrix: np.ndarray, dims, upstream: np.ndarray) -> np.ndarray:
    """d<upstream, warp(src, M)>/dM as a (4, 4) cotangent.

    Chains the kernel's gradient w.r.t. the index-space affine through the
    center conjugation and the matrix inverse.
    """
    nx, ny, nz = dims
    p = np.ascontiguousarray(index_affine(matrix, dims))
    dp = np.zeros((3, 4), dtype=np.float64)
    _kernels.warp_affine_grad(
        src_pad.reshape(-1),
        p,
        nx,
        ny,
        nz,
        np.ascontiguousarray(upstream, dtype=np.float64).reshape(-1),
        dp,
    )
    # P = T(c) inv(M) T(-c): pull dP back through the constant conjugation
    c = _center(dims)
    t_pos = np.eye(4)
    t_pos[0:3, 3] = c
    t_neg = np.eye(4)
    t_neg[0:3, 3] = -c
    dp_full = np.zeros((4, 4), dtype=np.float64)
    dp_full[0:3, :] = dp
    d_inv = t_pos.T @ dp_full @ t_neg.T
    inv = rigid_inverse(matrix)
    return -inv.T @ d_inv @ inv.T


def affine_grid(p: RigidParams, dims) -> SampleGrid:
    """Grid of source coordinates: the pull-back of p at every output voxel."""
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    inv = rigid_inverse(to_matrix(p))
    c = _center(dims)
    centered = _lattice(dims) - c
    source = centered @ inv[0:3, 0:3].T + inv[0:3, 3]
    coords = source * (2.0 / np.asarray(dims, dtype=np.float64))
    return SampleGrid(dims=dims, coords=coords)


def sample(vol: Volume3D, grid: SampleGrid) -> Volume3D:
    """Trilinear sampling of vol at the grid's coordinates; zero outside."""
    n = np.asarray(vol.dims, dtype=np.float64)
    index_coords = (grid.coords + 1.0) * (n / 2.0) - 0.5
    src_pad = pad_source(vol.data.astype(np.float64)).reshape(-1)
    out = np.empty(grid.coords.shape[0], dtype=np.float64)
    _kernels.sample_at(
        src_pad,
        np.ascontiguousarray(index_coords[:, 0]),
        np.ascontiguousarray(index_coords[:, 1]),
        np.ascontiguousarray(index_coords[:, 2]),
        vol.dims[0],
        vol.dims[1],
        vol.dims[2],
        out,
    )
    scale = [vol.dims[a] / grid.dims[a] for a in range(3)]
    spacing = tuple(vol.voxel_size_mm[a] * scale[a] for a in range(3))
    return Volume3D(dims=grid.dims, voxel_size_mm=spacing, data=out.reshape(grid.dims).astype(np.float32))


def sample_grad_params(vol: Volume3D, p: RigidParams, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, reorient(vol, p)> w.r.t. the six parameters."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != vol.dims:
        upstream = upstream.reshape(vol.dims)
    matrix = to_matrix(p)
    src_pad = pad_source(vol.data.astype(np.float64))
    d_matrix = warp_matrix_vjp(src_pad, matrix, vol.dims, upstream)
    return matrix_vjp(p.as_array(), d_matrix)


def reorient(vol: Volume3D, p: RigidParams) -> Volume3D:
    """Apply the rigid transform p to vol: sample(vol, affine_grid(p, vol.dims))."""
    out = warp_array(vol.data, to_matrix(p))
    return Volume3D(dims=vol.dims, voxel_size_mm=vol.voxel_size_mm, data=out.astype(np.float32))
