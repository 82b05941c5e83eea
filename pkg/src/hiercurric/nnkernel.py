"""Dense-tensor kernels: layer forward/backward passes, loss, and SGD.

All arrays are numpy ndarrays in row-major NCHW layout, float64 by default
(float32 storage is accepted; reductions go through BLAS/float64 paths).
Checked mode scans every kernel output for NaN/Inf and raises NumericFault;
it is on by default and can be switched off for long runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFault, ValidationError

_CHECKED = True

INIT_STD = 0.01  # Gaussian std for fresh conv/fc weights; biases start at 0


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf faulting on kernel outputs; returns the previous value."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


def checked_enabled() -> bool:
    return _CHECKED


def _guard(*arrays):
    if _CHECKED:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericFault("non-finite values in kernel output")


# ---------------------------------------------------------------------------
# optimizer state

@dataclass
class SgdConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_gamma: float = 0.1
    lr_step: int = 100_000
    batch_size: int = 256
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValidationError("base_lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not 0 < self.lr_gamma <= 1:
            raise ValidationError("lr_gamma must be in (0, 1]")
        if self.lr_step <= 0:
            raise ValidationError("lr_step must be > 0")
        if self.batch_size <= 0:
            raise ValidationError("batch_size must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must be in [0, 1)")


@dataclass
class ParamEntry:
    weight: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray
    lr_mult: float = 1.0

    def copy(self) -> "ParamEntry":
        return ParamEntry(self.weight.copy(), self.grad.copy(),
                          self.momentum.copy(), self.lr_mult)


class ParamSet:
    """Named trainable tensors with their gradient and momentum buffers."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, weight: np.ndarray, lr_mult: float = 1.0) -> None:
        if name in self._entries:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(
            weight, np.zeros_like(weight), np.zeros_like(weight), lr_mult)

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, e in self._entries.items():
            out._entries[name] = e.copy()
        return out

    def n_values(self) -> int:
        return sum(e.weight.size for e in self._entries.values())


def default_init(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Fresh weight tensor: zero-mean Gaussian, std INIT_STD."""
    return rng.normal(0.0, INIT_STD, size=shape).astype(dtype, copy=False)


def lr_schedule(cfg: SgdConfig, iteration: int) -> float:
    """Step schedule: base_lr * gamma^(iteration // step)."""
    if iteration < 0:
        raise ValidationError("iteration must be >= 0")
    return cfg.base_lr * cfg.lr_gamma ** (iteration // cfg.lr_step)


def sgd_step(params: ParamSet, cfg: SgdConfig, iteration: int) -> None:
    """One momentum-SGD update, in place.

    Per entry with effective rate eta = schedule * lr_mult:
    v <- momentum*v - eta*(grad + weight_decay*w); w <- w + v.
    Entries with eta == 0 are skipped entirely so frozen layers stay
    bit-identical, momentum buffer included.
    """
    lr = lr_schedule(cfg, iteration)
    for name in params.names():
        e = params[name]
        eta = lr * e.lr_mult
        if eta == 0.0:
            continue
        e.momentum *= cfg.momentum
        e.momentum -= eta * (e.grad + cfg.weight_decay * e.weight)
        e.weight += e.momentum
        _guard(e.weight)


# ---------------------------------------------------------------------------
# layers

@dataclass
class ConvCache:
    windows: np.ndarray
    kernels: np.ndarray
    x_shape: tuple
    stride: int
    pad: int
    groups: int


def conv2d_forward(x, kernels, bias, stride: int = 1, pad: int = 0,
                   groups: int = 1):
    """Cross-correlation of NCHW input with (K, C/groups, kh, kw) kernels.

    Returns (output, cache). Output spatial dims follow
    floor((H + 2*pad - kh) / stride) + 1; padding is zero-fill.
    """
    n, c, h, w = x.shape
    k, cg, kh, kw = kernels.shape
    if c != cg * groups or k % groups != 0:
        raise ValidationError(
            f"channel mismatch: input {x.shape} vs kernels {kernels.shape} "
            f"with groups={groups}")
    if bias.shape != (k,):
        raise ValidationError(f"bias shape {bias.shape} != ({k},)")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValidationError(
            f"kernel {kernels.shape} larger than padded input {x.shape} (pad={pad})")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, out_h, out_w, kh, kw)
    kpg = k // groups
    parts = []
    for g in range(groups):
        wg = win[:, g * cg:(g + 1) * cg]
        kg = kernels[g * kpg:(g + 1) * kpg]
        og = np.tensordot(wg, kg, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, kpg)
        parts.append(np.moveaxis(og, 3, 1))
    out = parts[0] if groups == 1 else np.concatenate(parts, axis=1)
    out += bias[None, :, None, None]
    _guard(out)
    return out, ConvCache(win, kernels, x.shape, stride, pad, groups)


_COL2IM_IDX: dict[tuple, np.ndarray] = {}


def _col2im_spatial_index(out_h, out_w, kh, kw, stride, wp):
    key = (out_h, out_w, kh, kw, stride, wp)
    idx = _COL2IM_IDX.get(key)
    if idx is None:
        rows = (stride * np.arange(out_h))[:, None] + np.arange(kh)[None, :]
        cols = (stride * np.arange(out_w))[:, None] + np.arange(kw)[None, :]
        # (out_h, kh, out_w, kw) linearized over the padded plane
        idx = (rows[:, :, None, None] * wp + cols[None, None, :, :]).ravel()
        _COL2IM_IDX[key] = idx
    return idx


def conv2d_backward(dout, cache: ConvCache):
    """Gradients for conv2d_forward: returns (dx, dkernels, dbias)."""
    win, kernels, x_shape, stride, pad, groups = (
        cache.windows, cache.kernels, cache.x_shape, cache.stride,
        cache.pad, cache.groups)
    n, c, h, w = x_shape
    k, cg, kh, kw = kernels.shape
    if dout.shape[:2] != (n, k) or dout.shape[2:] != win.shape[2:4]:
        raise ValidationError(
            f"upstream gradient shape {dout.shape} does not match forward "
            f"output (n={n}, k={k}, spatial={win.shape[2:4]})")
    out_h, out_w = dout.shape[2:]
    kpg = k // groups

    db = dout.sum(axis=(0, 2, 3))
    dw = np.empty_like(kernels)
    hp, wp = h + 2 * pad, w + 2 * pad
    spatial = _col2im_spatial_index(out_h, out_w, kh, kw, stride, wp)
    dxp_flat = np.zeros(n * c * hp * wp)
    for g in range(groups):
        dg = dout[:, g * kpg:(g + 1) * kpg]
        wg = win[:, g * cg:(g + 1) * cg]
        dw[g * kpg:(g + 1) * kpg] = np.tensordot(
            dg, wg, axes=([0, 2, 3], [0, 2, 3]))
        # (n, oh, ow, cg, kh, kw) -> (n, cg, oh, kh, ow, kw) to match spatial idx
        dcols = np.tensordot(dg, kernels[g * kpg:(g + 1) * kpg], axes=([1], [0]))
        dcols = dcols.transpose(0, 3, 1, 4, 2, 5)
        # group channels live at c-offset g*cg within each sample's block
        offs = (np.arange(n)[:, None] * c + g * cg
                + np.arange(cg)[None, :]).ravel() * (hp * wp)
        idx = (offs[:, None] + spatial[None, :]).ravel()
        dxp_flat += np.bincount(idx, weights=dcols.ravel(),
                                minlength=dxp_flat.size)
    dxp = dxp_flat.reshape(n, c, hp, wp)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    dx = dx.astype(dout.dtype, copy=False)
    _guard(dx, dw, db)
    return dx, dw, db


@dataclass
class PoolCache:
    argmax: np.ndarray  # flat index into each window, lowest index on ties
    x_shape: tuple
    window: int
    stride: int


def maxpool_forward(x, window: int, stride: int):
    """Max over (window x window) patches; ties keep the lowest linear index."""
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValidationError(
            f"pool window {window} exceeds spatial dims of input {x.shape}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    argmax = flat.argmax(axis=4)
    out = np.take_along_axis(flat, argmax[..., None], axis=4)[..., 0]
    _guard(out)
    return out, PoolCache(argmax, x.shape, window, stride)


def pool_backward(dout, cache: PoolCache):
    """Scatter upstream gradients to each window's argmax position."""
    n, c, h, w = cache.x_shape
    window, stride = cache.window, cache.stride
    out_h, out_w = cache.argmax.shape[2:]
    if dout.shape != cache.argmax.shape:
        raise ValidationError(
            f"upstream gradient shape {dout.shape} != pooled shape {cache.argmax.shape}")
    rows = (stride * np.arange(out_h))[None, None, :, None] + cache.argmax // window
    cols = (stride * np.arange(out_w))[None, None, None, :] + cache.argmax % window
    plane = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
    idx = plane + rows * w + cols
    dx = np.bincount(idx.ravel(), weights=dout.ravel(), minlength=n * c * h * w)
    dx = dx.reshape(n, c, h, w).astype(dout.dtype, copy=False)
    _guard(dx)
    return dx


def relu_forward(x):
    out = np.maximum(x, 0.0)
    _guard(out)
    return out, x


def relu_backward(dout, cache):
    dx = dout * (cache > 0)
    _guard(dx)
    return dx


@dataclass
class FcCache:
    x_flat: np.ndarray
    x_shape: tuple
    weight: np.ndarray


def fc_forward(x, weight, bias):
    """Dense layer on flattened input; weight is (units, in_features)."""
    xf = x.reshape(x.shape[0], -1)
    if xf.shape[1] != weight.shape[1]:
        raise ValidationError(
            f"fc input width {xf.shape[1]} != weight shape {weight.shape}")
    out = xf @ weight.T + bias
    _guard(out)
    return out, FcCache(xf, x.shape, weight)


def fc_backward(dout, cache: FcCache):
    dw = dout.T @ cache.x_flat
    db = dout.sum(axis=0)
    dx = (dout @ cache.weight).reshape(cache.x_shape)
    _guard(dx, dw, db)
    return dx, dw, db


def dropout_forward(x, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout: train mode zeros units w.p. rate and rescales
    survivors by 1/(1-rate); eval mode is the identity.

    Returns (output, mask); mask is None in eval mode or at rate 0.
    """
    if not 0 <= rate < 1:
        raise ValidationError("dropout rate must be in [0, 1)")
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValidationError("train-mode dropout needs a generator")
    mask = rng.random(x.shape) >= rate
    out = x * mask / (1.0 - rate)
    _guard(out)
    return out, mask


def dropout_backward(dout, mask, rate: float):
    if mask is None:
        return dout
    dx = dout * mask / (1.0 - rate)
    _guard(dx)
    return dx


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch plus its logits gradient.

    Uses max-subtraction for stability. grad = (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(
            f"labels out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    _guard(grad)
    if not np.isfinite(loss):
        raise NumericFault("non-finite loss")
    return loss, grad


# ---------------------------------------------------------------------------
# tensor file format

_MAGIC = b"HCTN"
_IO_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize: magic, version u32, dtype code u32, rank u64, dims u64*,
    then raw little-endian row-major values."""
    code = _CODE_OF.get(np.dtype(arr.dtype))
    if code is None:
        raise ValidationError(f"unsupported dtype {arr.dtype}")
    header = _MAGIC + struct.pack("<II", _IO_VERSION, code)
    header += struct.pack("<Q", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Inverse of tensor_to_bytes; returns (array, bytes consumed)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ValidationError("bad tensor magic")
    version, code = struct.unpack_from("<II", buf, offset + 4)
    if version != _IO_VERSION:
        raise ValidationError(f"unsupported tensor format version {version}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise ValidationError(f"unknown dtype code {code}")
    (rank,) = struct.unpack_from("<Q", buf, offset + 12)
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 20)
    start = offset + 20 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arr, start + count * dtype.itemsize - offset


def save_tensor(arr: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr
