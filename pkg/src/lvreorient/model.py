"""Cascaded three-block CNN predictor of rigid reorientation parameters.

Each block is a small 3D CNN (four stride-2 convolutions with batch
normalization and ReLU, global average pooling, two dense layers) that emits
a residual six-parameter transform. Between blocks the original volume is
warped by the transforms accumulated so far and both input channels
(intensity, max-normalized gradient magnitude) are re-derived from the warped
intensity, so later blocks refine what earlier blocks left over. The final
dense layer starts at zero, making the untrained cascade an exact identity.

Training follows a three-stage schedule: translations only (rotation outputs
forced to zero in the warp and their head columns frozen), then rotations
only (translation head columns frozen but their predictions still drive the
warp), then everything under the composite loss. All gradients are analytic,
including the paths through the between-block warps, the gradient-channel
recomputation, and the matrix composition/extraction.

Normalization layers always use current-batch statistics (per-instance
statistics at batch size 1), so prediction does not depend on training-time
running averages. The optimizer is Adam with bias correction; its state is
reset at stage boundaries so newly unfrozen heads start with fresh moments.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .loss import ParamLossConfig
from .manifest import DatasetManifest
from .stn import pad_source, warp_array, warp_matrix_vjp, warp_padded
from .transform import (
    RigidParams,
    matrices_from_values,
    matrix_vjp,
    values_from_matrices,
    values_vjp,
)
from .volume import Volume3D, normalize, resize_trilinear

CHECKPOINT_MAGIC = b"LVRC"
CHECKPOINT_VERSION = 1


class NonFiniteError(ArithmeticError):
    """A forward pass produced non-finite activations."""


class TrainingDivergedError(ArithmeticError):
    """Training loss became non-finite; carries the offending epoch."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class CheckpointError(ValueError):
    """Unreadable, truncated, or architecturally incompatible checkpoint."""


@dataclass(frozen=True)
class ArchConfig:
    dims: tuple[int, int, int] = (64, 64, 32)
    in_channels: int = 2
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    fc_hidden: int = 32
    n_blocks: int = 3

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 4 for d in dims):
            raise ValueError(f"dims must be three integers >= 4, got {self.dims}")
        if self.in_channels != 2:
            raise ValueError("the predictor expects intensity + gradient channels")
        if len(self.conv_channels) < 1 or any(c < 1 for c in self.conv_channels):
            raise ValueError(f"bad conv channels {self.conv_channels}")
        if self.fc_hidden < 1 or self.n_blocks < 1:
            raise ValueError("fc_hidden and n_blocks must be >= 1")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

    def to_json_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "fc_hidden": self.fc_hidden,
            "n_blocks": self.n_blocks,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ArchConfig":
        return cls(
            dims=tuple(obj["dims"]),
            in_channels=int(obj["in_channels"]),
            conv_channels=tuple(obj["conv_channels"]),
            fc_hidden=int(obj["fc_hidden"]),
            n_blocks=int(obj["n_blocks"]),
        )


@dataclass
class TrainConfig:
    epochs_stage1: int = 80
    epochs_stage2: int = 80
    epochs_stage3: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mu: float = 1.0
    seed: int = 0
    deep_supervision: bool = True

    def __post_init__(self):
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_stage3) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        ParamLossConfig(self.mu)  # validates mu

    @property
    def total_epochs(self) -> int:
        return self.epochs_stage1 + self.epochs_stage2 + self.epochs_stage3

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# layers (parameters float32 at rest; math in the dtype of the input tensor)
# ---------------------------------------------------------------------------

class Conv3d:
    """3x3x3 convolution, stride 2, zero padding 1, channels-last layout."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (cin * 27))
        self.weight = rng.normal(0.0, std, size=(cout, cin, 3, 3, 3)).astype(np.float32)
        self.bias = np.zeros(cout, dtype=np.float32)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        cout = self.weight.shape[0]
        b = x.shape[0]
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(pad, (3, 3, 3), axis=(1, 2, 3))[:, ::2, ::2, ::2]
        out_spatial = win.shape[1:4]
        col = win.reshape(b * np.prod(out_spatial), -1).astype(x.dtype, copy=False)
        wmat = self.weight.reshape(cout, -1).T.astype(x.dtype)
        out = col @ wmat
        out += self.bias.astype(x.dtype)
        cache = (col, x.shape, out_spatial, wmat)
        return out.reshape((b,) + out_spatial + (cout,)), cache

    def backward(self, cache, dy: np.ndarray, need_dx: bool = True):
        col, x_shape, out_spatial, wmat = cache
        cout = self.weight.shape[0]
        dy_mat = dy.reshape(-1, cout)
        d_weight = (col.T @ dy_mat).T.reshape(self.weight.shape)
        d_bias = dy_mat.sum(axis=0)
        dx = None
        if need_dx:
            b, nx, ny, nz, cin = x_shape
            ox, oy, oz = out_spatial
            dcol = (dy_mat @ wmat.T).reshape(b, ox, oy, oz, cin, 3, 3, 3)
            dxp = np.zeros((b, nx + 2, ny + 2, nz + 2, cin), dtype=dy.dtype)
            for di in range(3):
                for dj in range(3):
                    for dk in range(3):
                        dxp[:, di : di + 2 * ox : 2, dj : dj + 2 * oy : 2, dk : dk + 2 * oz : 2, :] += dcol[
                            ..., di, dj, dk
                        ]
            dx = dxp[:, 1 : nx + 1, 1 : ny + 1, 1 : nz + 1, :]
        return dx, [d_weight, d_bias]


class BatchNorm:
    """Per-channel normalization over batch + spatial axes, batch statistics
    always (degenerates to per-instance statistics at batch size 1)."""

    eps = 1e-5

    def __init__(self, channels: int):
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray):
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv
        y = xhat * self.gamma.astype(x.dtype) + self.beta.astype(x.dtype)
        return y, (xhat, inv, axes)

    def backward(self, cache, dy: np.ndarray):
        xhat, inv, axes = cache
        n = xhat.size // xhat.shape[-1]
        d_gamma = (dy * xhat).sum(axis=axes)
        d_beta = dy.sum(axis=axes)
        dxhat = dy * self.gamma.astype(dy.dtype)
        dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes) / n)
        return dx, [d_gamma, d_beta]


class Dense:
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None, zero_init: bool = False):
        if zero_init:
            self.weight = np.zeros((fin, fout), dtype=np.float32)
        else:
            std = np.sqrt(2.0 / fin)
            self.weight = rng.normal(0.0, std, size=(fin, fout)).astype(np.float32)
        self.bias = np.zeros(fout, dtype=np.float32)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        w = self.weight.astype(x.dtype)
        return x @ w + self.bias.astype(x.dtype), (x, w)

    def backward(self, cache, dy: np.ndarray):
        x, w = cache
        return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


def _relu(x: np.ndarray):
    y = np.maximum(x, 0)
    return y, y > 0


def _relu_backward(mask, dy):
    return dy * mask


class ReorientBlock:
    """Conv stack + pooled dense head emitting one residual transform."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.convs = []
        self.norms = []
        cin = arch.in_channels
        for cout in arch.conv_channels:
            self.convs.append(Conv3d(cin, cout, rng))
            self.norms.append(BatchNorm(cout))
            cin = cout
        self.fc1 = Dense(arch.conv_channels[-1], arch.fc_hidden, rng)
        self.fc2 = Dense(arch.fc_hidden, 6, None, zero_init=True)

    def parameters(self):
        params = []
        for conv, norm in zip(self.convs, self.norms):
            params.extend(conv.parameters())
            params.extend(norm.parameters())
        params.extend(self.fc1.parameters())
        params.extend(self.fc2.parameters())
        return params

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h, c_conv = conv.forward(h)
            h, c_norm = norm.forward(h)
            h, c_relu = _relu(h)
            caches.append((c_conv, c_norm, c_relu))
        spatial = h.shape[1:4]
        pooled = h.mean(axis=(1, 2, 3))
        f1, c_fc1 = self.fc1.forward(pooled)
        f1, c_relu1 = _relu(f1)
        head, c_fc2 = self.fc2.forward(f1)
        if not np.all(np.isfinite(head)):
            raise NonFiniteError("non-finite activations in reorientation block head")
        cache = (caches, spatial, c_fc1, c_relu1, c_fc2)
        return head.astype(np.float64), cache

    def backward(self, cache, d_head: np.ndarray, need_dx: bool):
        caches, spatial, c_fc1, c_relu1, c_fc2 = cache
        grads_tail = []
        dh, g_fc2 = self.fc2.backward(c_fc2, d_head.astype(c_fc2[0].dtype))
        dh = _relu_backward(c_relu1, dh)
        dh, g_fc1 = self.fc1.backward(c_fc1, dh)
        grads_tail = g_fc1 + g_fc2
        n_spatial = int(np.prod(spatial))
        dh = np.broadcast_to(
            dh[:, None, None, None, :] / n_spatial, (dh.shape[0],) + tuple(spatial) + (dh.shape[-1],)
        )
        grads_convs = []
        for layer_index in range(len(self.convs) - 1, -1, -1):
            c_conv, c_norm, c_relu = caches[layer_index]
            dh = _relu_backward(c_relu, dh)
            dh, g_norm = self.norms[layer_index].backward(c_norm, dh)
            dh, g_conv = self.convs[layer_index].backward(
                c_conv, dh, need_dx=(layer_index > 0 or need_dx)
            )
            grads_convs = g_conv + g_norm + grads_convs
        return dh, grads_convs + grads_tail


class ReorientModel:
    """Weights of the cascaded predictor; immutable for prediction use."""

    def __init__(self, arch: ArchConfig, blocks: list[ReorientBlock]):
        self.arch = arch
        self.blocks = blocks

    def parameters(self) -> list[np.ndarray]:
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def build_model(arch: ArchConfig = ArchConfig(), seed: int = 0) -> ReorientModel:
    """Deterministic He-initialized model; the output heads start at zero so
    the fresh cascade is the identity transform."""
    streams = np.random.SeedSequence(seed).spawn(arch.n_blocks)
    blocks = [ReorientBlock(arch, np.random.default_rng(streams[k])) for k in range(arch.n_blocks)]
    return ReorientModel(arch, blocks)


# ---------------------------------------------------------------------------
# two-channel input construction
# ---------------------------------------------------------------------------

def _channels(arr: np.ndarray):
    """(nx, ny, nz) float64 -> (nx, ny, nz, 2) channels + vjp cache."""
    mag = np.empty_like(arr)
    _kernels.gradmag_forward(arr, mag)
    peak = float(mag.max())
    argmax = int(mag.argmax()) if peak > 0 else -1
    c1 = mag / peak if peak > 0 else np.zeros_like(mag)
    x = np.stack([arr, c1], axis=-1)
    return x, (arr, c1, peak, argmax)


def _channels_vjp(cache, d_x: np.ndarray) -> np.ndarray:
    """Pull (nx, ny, nz, 2) cotangent back to the source array."""
    arr, c1, peak, argmax = cache
    d_arr = np.ascontiguousarray(d_x[..., 0], dtype=np.float64)
    if peak > 0:
        d_c1 = d_x[..., 1]
        d_mag = np.ascontiguousarray(d_c1, dtype=np.float64) / peak
        d_peak = -float(np.sum(d_c1 * c1)) / peak
        d_mag.reshape(-1)[argmax] += d_peak
        _kernels.gradmag_vjp(arr, d_mag, d_arr)
    return d_arr


def build_input(vol: Volume3D, dims: tuple[int, int, int] = (64, 64, 32)) -> np.ndarray:
    """Two-channel float32 tensor (2, nx, ny, nz): intensity and
    max-normalized gradient magnitude. The volume must already be resized to
    `dims` and normalized."""
    if vol.dims != tuple(dims):
        raise ValueError(f"expected dims {tuple(dims)}, got {vol.dims}")
    x, _ = _channels(vol.data.astype(np.float64))
    return np.moveaxis(x, -1, 0).astype(np.float32)


# ---------------------------------------------------------------------------
# cascade forward/backward
# ---------------------------------------------------------------------------

def _cascade_forward(
    model: ReorientModel,
    vols: np.ndarray,
    gate: np.ndarray,
    dtype=np.float32,
    need_cache: bool = True,
):
    """Run the cascade on a batch of raw volumes (B, nx, ny, nz).

    gate multiplies each block's残 residual output componentwise before it enters
    the warp and the composition (stage 1 zeroes the rotation components).
    Returns a dict with residuals, per-block cumulative matrices/params and,
    when need_cache, everything the backward pass needs.
    """
    b = vols.shape[0]
    dims = model.arch.dims
    vols64 = np.ascontiguousarray(vols, dtype=np.float64)
    padded = [pad_source(vols64[i]) for i in range(b)]

    x1 = np.empty((b,) + dims + (2,), dtype=np.float64)
    ch_caches_first = []
    for i in range(b):
        x, cache = _channels(vols64[i])
        x1[i] = x
        ch_caches_first.append(cache)
    x_k = x1.astype(dtype)

    n_blocks = model.arch.n_blocks
    r = np.zeros((n_blocks, b, 6))
    mats = np.zeros((n_blocks, b, 4, 4))
    cum = np.zeros((n_blocks, b, 4, 4))
    p = np.zeros((n_blocks, b, 6))
    block_caches = []
    warp_info = []  # per transition: (matrices used, channel caches)

    cum_prev = np.broadcast_to(np.eye(4), (b, 4, 4)).copy()
    for k in range(n_blocks):
        head, cache = model.blocks[k].forward(x_k)
        block_caches.append(cache if need_cache else None)
        r[k] = head * gate
        mats[k] = matrices_from_values(r[k])
        cum[k] = mats[k] @ cum_prev
        p[k] = values_from_matrices(cum[k])
        cum_prev = cum[k]
        if k + 1 < n_blocks:
            x_next = np.empty((b,) + dims + (2,), dtype=np.float64)
            ch_caches = []
            for i in range(b):
                warped = warp_padded(padded[i], cum[k][i], dims)
                x, ch_cache = _channels(warped)
                x_next[i] = x
                ch_caches.append(ch_cache if need_cache else None)
            warp_info.append((cum[k].copy(), ch_caches))
            x_k = x_next.astype(dtype)

    return {
        "r": r,
        "mats": mats,
        "cum": cum,
        "p": p,
        "gate": gate,
        "padded": padded,
        "block_caches": block_caches,
        "warp_info": warp_info,
        "dtype": dtype,
        "batch": b,
    }


def _cascade_backward(model: ReorientModel, fwd: dict, d_p: np.ndarray) -> list[np.ndarray]:
    """Backpropagate cotangents of the per-block cumulative parameters
    (n_blocks, B, 6) to gradients aligned with model.parameters()."""
    n_blocks = model.arch.n_blocks
    dims = model.arch.dims
    gate = fwd["gate"]
    grads: list[list[np.ndarray]] = [None] * n_blocks  # type: ignore[list-item]

    g_cum_next = None  # dL/d(cum_{k}) accumulated from block k+1's paths
    for k in range(n_blocks - 1, -1, -1):
        g_cum = values_vjp(fwd["cum"][k], d_p[k])
        if g_cum_next is not None:
            g_cum += g_cum_next
        if k > 0:
            d_mat = g_cum @ np.swapaxes(fwd["cum"][k - 1], -1, -2)
            g_cum_prev = np.swapaxes(fwd["mats"][k], -1, -2) @ g_cum
        else:
            d_mat = g_cum
            g_cum_prev = None
        d_r = matrix_vjp(fwd["r"][k], d_mat) * gate
        dx, block_grads = model.blocks[k].backward(fwd["block_caches"][k], d_r, need_dx=(k > 0))
        grads[k] = block_grads
        if k > 0:
            cum_mats, ch_caches = fwd["warp_info"][k - 1]
            dx64 = np.asarray(dx, dtype=np.float64)
            for i in range(fwd["batch"]):
                d_warped = _channels_vjp(ch_caches[i], dx64[i])
                g_cum_prev[i] += warp_matrix_vjp(fwd["padded"][i], cum_mats[i], dims, d_warped)
        g_cum_next = g_cum_prev

    flat: list[np.ndarray] = []
    for block_grads in grads:
        flat.extend(block_grads)
    return flat


# ---------------------------------------------------------------------------
# public forward / predict
# ---------------------------------------------------------------------------

def forward(model: ReorientModel, input_tensor: np.ndarray):
    """Run the cascade on a build_input tensor.

    Returns (cumulative RigidParams, per-block residual RigidParams, warped
    Volume3D). The warped volume is the original intensity channel resampled
    once under the cumulative transform.
    """
    expected = (2,) + model.arch.dims
    if tuple(input_tensor.shape) != expected:
        raise ValueError(f"expected input of shape {expected}, got {input_tensor.shape}")
    vols = np.asarray(input_tensor[0], dtype=np.float64)[None]
    fwd = _cascade_forward(model, vols, gate=np.ones(6), dtype=np.float64, need_cache=False)
    n_last = model.arch.n_blocks - 1
    cumulative = RigidParams.from_array(fwd["p"][n_last][0])
    per_block = [RigidParams.from_array(fwd["r"][k][0]) for k in range(model.arch.n_blocks)]
    warped_data = warp_array(vols[0], fwd["cum"][n_last][0])
    warped = Volume3D(dims=model.arch.dims, voxel_size_mm=(1.0, 1.0, 1.0), data=warped_data.astype(np.float32))
    return cumulative, per_block, warped


def predict(model: ReorientModel, vol: Volume3D) -> RigidParams:
    """Predict the transaxial-to-short-axis parameters for a volume."""
    if vol.dims != model.arch.dims:
        vol = resize_trilinear(vol, model.arch.dims)
    vol = normalize(vol)
    vols = vol.data.astype(np.float64)[None]
    fwd = _cascade_forward(model, vols, gate=np.ones(6), dtype=np.float64, need_cache=False)
    return RigidParams.from_array(fwd["p"][model.arch.n_blocks - 1][0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; float64 moments, float32 parameters."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def step(self, grads: list[np.ndarray], masks: list[np.ndarray | None]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v, mask in zip(self.params, grads, self.m, self.v, masks):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if mask is None:
                p -= step.astype(p.dtype)
            else:
                p[mask] = (p[mask].astype(np.float64) - step[mask]).astype(p.dtype)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    entries: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    CSV_COLUMNS = (
        "epoch",
        "stage",
        "train_loss",
        "val_loss",
        "val_mae_tx",
        "val_mae_ty",
        "val_mae_tz",
        "val_mae_alpha_deg",
        "val_mae_beta_deg",
        "val_mae_theta_deg",
    )

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for e in self.entries:
                row = [str(e["epoch"]), str(e["stage"]), repr(e["train_loss"]), repr(e["val_loss"])]
                row += [repr(v) for v in e["val_mae"]]
                fh.write(",".join(row) + "\n")

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.entries, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _stage_gate(stage: int) -> np.ndarray:
    if stage == 1:
        return np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    return np.ones(6)


def _head_masks(model: ReorientModel, stage: int) -> list[np.ndarray | None]:
    """Trainable masks aligned with model.parameters(): stage 1 freezes the
    rotation columns of every output head, stage 2 the translation columns."""
    masks: list[np.ndarray | None] = [None] * len(model.parameters())
    if stage == 3:
        return masks
    frozen = slice(3, 6) if stage == 1 else slice(0, 3)
    offset = 0
    for block in model.blocks:
        n_params = len(block.parameters())
        w_index = offset + n_params - 2  # fc2 weight, then fc2 bias
        w_mask = np.ones_like(block.fc2.weight, dtype=bool)
        w_mask[:, frozen] = False
        b_mask = np.ones_like(block.fc2.bias, dtype=bool)
        b_mask[frozen] = False
        masks[w_index] = w_mask
        masks[w_index + 1] = b_mask
        offset += n_params
    return masks


def _stage_loss_and_grad(p: np.ndarray, targets: np.ndarray, stage: int, cfg: TrainConfig):
    """Stage loss over per-block cumulative parameters p (n_blocks, B, 6).

    Deep supervision weights every block equally (mean over blocks); with
    deep_supervision off only the final block contributes.
    """
    n_blocks, batch, _ = p.shape
    if cfg.deep_supervision:
        lambdas = np.full(n_blocks, 1.0 / n_blocks)
    else:
        lambdas = np.zeros(n_blocks)
        lambdas[-1] = 1.0
    diff = p - targets[None, :, :]
    d_p = np.zeros_like(p)
    loss = 0.0
    for k in range(n_blocks):
        if lambdas[k] == 0.0:
            continue
        d_trans = diff[k, :, 0:3]
        d_rot = diff[k, :, 3:6]
        if stage in (1, 3):
            loss += lambdas[k] * float(np.abs(d_trans).mean())
            d_p[k, :, 0:3] += lambdas[k] * np.sign(d_trans) / (3.0 * batch)
        if stage == 2:
            loss += lambdas[k] * float((d_rot**2).mean())
            d_p[k, :, 3:6] += lambdas[k] * 2.0 * d_rot / (3.0 * batch)
        elif stage == 3:
            loss += lambdas[k] * cfg.mu * float((d_rot**2).mean())
            d_p[k, :, 3:6] += lambdas[k] * cfg.mu * 2.0 * d_rot / (3.0 * batch)
    return loss, d_p


def _load_training_arrays(manifest: DatasetManifest, arch: ArchConfig):
    from .volume import load_volume  # local import to avoid cycle at module load

    if len(manifest) == 0:
        raise ValueError("empty manifest")
    vols = np.empty((len(manifest),) + arch.dims, dtype=np.float32)
    targets = np.empty((len(manifest), 6), dtype=np.float64)
    for i, entry in enumerate(manifest.entries):
        vol = load_volume(manifest.transaxial_path(i))
        if vol.dims != arch.dims:
            vol = resize_trilinear(vol, arch.dims)
        vols[i] = normalize(vol).data
        targets[i] = entry.params.as_array()
    return vols, targets


def _evaluate_epoch(model, vols, targets, stage, cfg, dtype):
    gate = _stage_gate(stage)
    n = vols.shape[0]
    losses = []
    abs_err = np.zeros(6)
    for start in range(0, n, cfg.batch_size):
        idx = slice(start, min(start + cfg.batch_size, n))
        fwd = _cascade_forward(model, vols[idx], gate, dtype=dtype, need_cache=False)
        loss, _ = _stage_loss_and_grad(fwd["p"], targets[idx], stage, cfg)
        losses.append(loss * (idx.stop - idx.start))
        abs_err += np.abs(fwd["p"][-1] - targets[idx]).sum(axis=0)
    return float(np.sum(losses) / n), abs_err / n


def train(
    model: ReorientModel,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
    dtype=np.float32,
    progress=None,
) -> tuple[ReorientModel, TrainHistory]:
    """Three-stage training; returns the trained model and per-epoch history.

    Deterministic for a fixed seed and config: data order, weight updates and
    history depend only on (seed, config, manifests).
    """
    vols_tr, targets_tr = _load_training_arrays(train_manifest, model.arch)
    vols_va, targets_va = _load_training_arrays(val_manifest, model.arch)

    history = TrainHistory()
    params = model.parameters()
    epoch = 0
    stage_epochs = ((1, cfg.epochs_stage1), (2, cfg.epochs_stage2), (3, cfg.epochs_stage3))
    n = vols_tr.shape[0]
    for stage, n_epochs in stage_epochs:
        if n_epochs == 0:
            continue
        gate = _stage_gate(stage)
        masks = _head_masks(model, stage)
        optimizer = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for _ in range(n_epochs):
            epoch += 1
            rng = np.random.default_rng([cfg.seed, epoch])
            perm = rng.permutation(n)
            batch_losses = []
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                fwd = _cascade_forward(model, vols_tr[idx], gate, dtype=dtype, need_cache=True)
                loss, d_p = _stage_loss_and_grad(fwd["p"], targets_tr[idx], stage, cfg)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, f"training loss is {loss}")
                grads = _cascade_backward(model, fwd, d_p)
                optimizer.step(grads, masks)
                batch_losses.append(loss * len(idx))
                for p_arr in params:
                    if not np.all(np.isfinite(p_arr)):
                        raise TrainingDivergedError(epoch, "non-finite weights after update")
            val_loss, val_mae = _evaluate_epoch(model, vols_va, targets_va, stage, cfg, dtype)
            entry = {
                "epoch": epoch,
                "stage": stage,
                "train_loss": float(np.sum(batch_losses) / n),
                "val_loss": val_loss,
                "val_mae": [float(v) for v in val_mae],
            }
            history.entries.append(entry)
            if progress is not None:
                progress(entry, model)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensor_names(arch: ArchConfig) -> list[str]:
    names = []
    for b in range(arch.n_blocks):
        for i in range(len(arch.conv_channels)):
            names += [f"block{b}.conv{i}.weight", f"block{b}.conv{i}.bias"]
            names += [f"block{b}.norm{i}.gamma", f"block{b}.norm{i}.beta"]
        names += [f"block{b}.fc1.weight", f"block{b}.fc1.bias"]
        names += [f"block{b}.fc2.weight", f"block{b}.fc2.bias"]
    return names


def save_checkpoint(model: ReorientModel, path: str) -> None:
    """Binary checkpoint: magic, version, architecture header, f32 payload."""
    params = model.parameters()
    header = {
        "arch": model.arch.to_json_dict(),
        "tensors": [[name, list(p.shape)] for name, p in zip(_tensor_names(model.arch), params)],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> ReorientModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)
    magic = stream.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (magic {magic!r})")
    fixed = stream.read(8)
    if len(fixed) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, header_len = struct.unpack("<II", fixed)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_bytes = stream.read(header_len)
    if len(header_bytes) < header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
        arch = ArchConfig.from_json_dict(header["arch"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint header: {exc}") from exc

    model = build_model(arch, seed=0)
    params = model.parameters()
    names = _tensor_names(arch)
    listed = header.get("tensors", [])
    if len(listed) != len(params):
        raise CheckpointError(f"{path}: header lists {len(listed)} tensors, architecture has {len(params)}")
    for (name, shape), expected_name, p in zip(listed, names, params):
        if name != expected_name or tuple(shape) != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name} with shape {tuple(shape)} does not match "
                f"architecture tensor {expected_name} {p.shape}"
            )
        raw = stream.read(p.size * 4)
        if len(raw) < p.size * 4:
            raise CheckpointError(f"{path}: truncated payload at tensor {name}")
        p[...] = np.frombuffer(raw, dtype="<f4").reshape(p.shape)
    if stream.read(1):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return model
