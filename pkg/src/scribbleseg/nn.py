"""Dense tensor kernels with hand-written reverse-mode gradients.

Everything here is plain numpy: 3D convolution (cross-correlation, no kernel
flip), batch normalization, fully-connected layers, ReLU, inverted dropout,
log-softmax, and SGD with cosine / step learning-rate schedules.  Layers are
dtype-agnostic so tests can run them in float64 for finite-difference checks.

Backward methods take the forward input explicitly instead of caching it;
the network topology is fixed, so there is no autodiff graph.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError

# Upper bound on the im2col scratch copy per convolution chunk.
_CONV_CHUNK_BYTES = 32 * 1024 * 1024

_DEBUG = bool(os.environ.get("SCRIBBLESEG_NN_DEBUG"))


def _tripwire(arr: np.ndarray, where: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {where}")


def _valid_conv(xp: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Valid cross-correlation of (B,C,Z,Y,X) with (O,C,k,k,k), chunked over z."""
    b, c, nz, ny, nx = xp.shape
    o, _, k, _, _ = w.shape
    zo, yo, xo = nz - k + 1, ny - k + 1, nx - k + 1
    out = np.empty((b, o, zo, yo, xo), dtype=np.result_type(xp, w))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    per_slice = b * c * yo * xo * k ** 3 * xp.itemsize
    chunk = max(1, _CONV_CHUNK_BYTES // max(1, per_slice))
    for z0 in range(0, zo, chunk):
        z1 = min(zo, z0 + chunk)
        piece = np.tensordot(win[:, :, z0:z1], w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out[:, :, z0:z1] = np.moveaxis(piece, -1, 1)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


class Conv3d:
    """Cubic-kernel 3D convolution; padding 'valid' or 'same' (zero padded)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        padding: str = "valid",
        *,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if padding not in ("valid", "same"):
            raise ValidationError(f"padding must be 'valid' or 'same', got {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ValidationError("same padding requires an odd kernel size")
        if kernel_size < 1:
            raise ValidationError(f"kernel size must be >= 1, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng()
        fan_in = in_channels * kernel_size ** 3
        scale = math.sqrt(2.0 / fan_in)
        self.weights = (rng.standard_normal((out_channels, in_channels) + (kernel_size,) * 3) * scale).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if self.padding == "valid":
            return x
        p = (self.kernel_size - 1) // 2
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ValidationError(f"expected (B, {self.in_channels}, Z, Y, X) input, got {x.shape}")
        if self.padding == "valid" and min(x.shape[2:]) < self.kernel_size:
            raise ValidationError(f"spatial dims {x.shape[2:]} smaller than kernel {self.kernel_size}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        out = _valid_conv(self._pad(x), self.weights, self.bias)
        _tripwire(out, "conv3d forward")
        return out

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        self._check_input(x)
        k = self.kernel_size
        xp = self._pad(x)
        b, c, nz, ny, nx = xp.shape
        zo, yo, xo = grad_out.shape[2:]
        if (zo, yo, xo) != (nz - k + 1, ny - k + 1, nx - k + 1) or grad_out.shape[:2] != (b, self.out_channels):
            raise ValidationError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape}")

        grad_b = grad_out.sum(axis=(0, 2, 3, 4))

        grad_w = np.zeros_like(self.weights, dtype=np.result_type(xp, grad_out))
        win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
        per_slice = b * c * yo * xo * k ** 3 * xp.itemsize
        chunk = max(1, _CONV_CHUNK_BYTES // max(1, per_slice))
        for z0 in range(0, zo, chunk):
            z1 = min(zo, z0 + chunk)
            grad_w += np.tensordot(
                grad_out[:, :, z0:z1], win[:, :, z0:z1], axes=([0, 2, 3, 4], [0, 2, 3, 4])
            )

        # grad wrt input: full correlation with the spatially-flipped,
        # channel-transposed kernel, then crop away the zero padding.
        w_t = np.moveaxis(self.weights, 0, 1)[:, :, ::-1, ::-1, ::-1]
        gp = np.pad(grad_out, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
        grad_xp = _valid_conv(gp, np.ascontiguousarray(w_t), None)
        if self.padding == "same":
            p = (k - 1) // 2
            grad_x = grad_xp[:, :, p : p + x.shape[2], p : p + x.shape[3], p : p + x.shape[4]]
        else:
            grad_x = grad_xp
        return grad_x, grad_w.astype(self.weights.dtype, copy=False), grad_b.astype(self.bias.dtype, copy=False)

    def parameters(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


class BatchNorm:
    """Per-channel batch normalization over every non-channel axis."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _bshape(self, ndim: int) -> tuple[int, ...]:
        return (1, self.channels) + (1,) * (ndim - 2)

    def _axes(self, ndim: int) -> tuple[int, ...]:
        return tuple(i for i in range(ndim) if i != 1)

    def _batch_stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        axes = self._axes(x.ndim)
        return x.mean(axis=axes), x.var(axis=axes)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ValidationError(f"expected channel axis 1 of size {self.channels}, got {x.shape}")
        shape = self._bshape(x.ndim)
        if train:
            mean, var = self._batch_stats(x)
            n = x.size // self.channels
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mean
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        out = (x - mean.reshape(shape)) * (self.gamma * inv).reshape(shape) + self.beta.reshape(shape)
        _tripwire(out, "batchnorm forward")
        return out

    def backward(self, x: np.ndarray, grad_out: np.ndarray, train: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = self._axes(x.ndim)
        shape = self._bshape(x.ndim)
        if train:
            mean, var = self._batch_stats(x)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xc = x - mean.reshape(shape)
        xhat = xc * inv.reshape(shape)
        grad_gamma = (grad_out * xhat).sum(axis=axes)
        grad_beta = grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.reshape(shape)
        if not train:
            return dxhat * inv.reshape(shape), grad_gamma, grad_beta
        n = x.size // self.channels
        dvar = (dxhat * xc).sum(axis=axes) * -0.5 * inv ** 3
        dmean = -(dxhat.sum(axis=axes)) * inv + dvar * (-2.0 / n) * xc.sum(axis=axes)
        grad_x = (
            dxhat * inv.reshape(shape)
            + dvar.reshape(shape) * 2.0 * xc / n
            + dmean.reshape(shape) / n
        )
        return grad_x, grad_gamma, grad_beta

    def parameters(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [self.running_mean, self.running_var]


class Dense:
    """Fully-connected layer, y = x @ W.T + b."""

    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng()
        scale = math.sqrt(2.0 / in_features)
        self.weights = (rng.standard_normal((out_features, in_features)) * scale).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValidationError(f"expected (B, {self.in_features}) input, got {x.shape}")
        out = x @ self.weights.T + self.bias
        _tripwire(out, "dense forward")
        return out

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_x = grad_out @ self.weights
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        return grad_x, grad_w.astype(self.weights.dtype, copy=False), grad_b.astype(self.bias.dtype, copy=False)

    def parameters(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: kept entries carry 1/(1-p), dropped entries 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must lie in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(logits: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    soft = np.exp(log_softmax(logits))
    return grad_out - soft * grad_out.sum(axis=-1, keepdims=True)


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


@dataclass(frozen=True)
class CosineSchedule:
    """lr(e) = lr0 * (1 + cos(pi * e / total)) / 2, annealing to 0 at e = total."""

    lr0: float
    total_epochs: int

    def lr(self, epoch: int) -> float:
        return self.lr0 * (1.0 + math.cos(math.pi * epoch / self.total_epochs)) / 2.0


@dataclass(frozen=True)
class StepSchedule:
    """lr(e) = lr0 * factor^(number of drop epochs <= e)."""

    lr0: float
    drops: tuple[int, ...] = (35, 45)
    factor: float = 0.1

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.factor ** sum(1 for d in self.drops if epoch >= d)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    """Plain SGD, in place: p <- p - lr * g."""
    for p, g in zip(params, grads):
        p -= (lr * g).astype(p.dtype, copy=False)


_CKPT_MAGIC = b"MONW"


def checkpoint_bytes(manifest: dict, arrays: list[np.ndarray]) -> bytes:
    """Binary checkpoint: magic, version, JSON manifest, f32 LE blobs, CRC32."""
    body = io.BytesIO()
    body.write(_CKPT_MAGIC)
    body.write(struct.pack("<I", 1))
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(meta)))
    body.write(meta)
    for arr in arrays:
        body.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = body.getvalue()
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    return blob + struct.pack("<I", crc)


def write_checkpoint(path, manifest: dict, arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(manifest, arrays))


def checkpoint_from_bytes(raw: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(raw) < 16:
        raise FormatError("checkpoint too short")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch")
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    manifest = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
    offset = 12 + meta_len
    arrays = []
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append(arr.copy())
        offset += 4 * count
    if offset != len(blob):
        raise FormatError("checkpoint payload length mismatch")
    return manifest, arrays


def read_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
