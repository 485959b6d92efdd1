"""Small hand-differentiated operator set for the tracker network.

Tensors are plain numpy arrays laid out as (H, W, C). Every operator is pure:
inputs are never modified and fresh arrays are returned. Backward passes are
written out by hand because the network topology is fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

PROB_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"DTPK"
CHECKPOINT_VERSION = 1


@dataclass
class ConvLayer:
    """Same-padded 2D convolution weights: kernel (kH, kW, C_in, C_out), bias (C_out,)."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kh, kw, _, c_out = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel must have odd spatial size, got {kh}x{kw}")
        if self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match C_out={c_out}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]

    @property
    def n_weights(self) -> int:
        return self.kernel.size + self.bias.size


def _pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    return np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """im2col: rows are output cells, columns are (dy, dx, c) window entries."""
    h, w, c = x.shape
    win = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(0, 1))  # H, W, C, kh, kw
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * c)


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation without bias."""
    kh, kw, c_in, c_out = kernel.shape
    h, w, _ = x.shape
    if kh * kw * c_in <= 128:
        return (_patches(x, kh, kw) @ kernel.reshape(-1, c_out)).reshape(h, w, c_out)
    # shift-and-accumulate avoids building a large patch matrix
    xp = _pad(x, kh, kw)
    out = np.zeros((h, w, c_out), dtype=np.result_type(x, kernel))
    for dy in range(kh):
        for dx in range(kw):
            out += xp[dy:dy + h, dx:dx + w] @ kernel[dy, dx]
    return out


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 3 or x.shape[2] != layer.in_channels:
        raise ValueError(
            f"input shape {x.shape} incompatible with kernel {layer.kernel.shape}")


def conv2d_same_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """output(i, j, o) = bias(o) + sum over the window of input * kernel, zero padded."""
    _check_input(x, layer)
    return _correlate(x, layer.kernel) + layer.bias


def conv2d_same_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray,
                         need_input_grad: bool = True):
    """Gradients of conv2d_same_forward.

    Returns (grad_input, grad_kernel, grad_bias); grad_input is None when
    ``need_input_grad`` is False.
    """
    _check_input(x, layer)
    kh, kw, c_in, c_out = layer.kernel.shape
    if grad_out.shape != x.shape[:2] + (c_out,):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output")
    g2 = grad_out.reshape(-1, c_out)
    grad_bias = g2.sum(axis=0)
    grad_kernel = (_patches(x, kh, kw).T @ g2).reshape(kh, kw, c_in, c_out)
    grad_input = None
    if need_input_grad:
        # adjoint of a same-padded odd correlation is the flipped, transposed correlation
        flipped = layer.kernel[::-1, ::-1].transpose(0, 1, 3, 2)
        grad_input = _correlate(grad_out, np.ascontiguousarray(flipped))
    return grad_input, grad_kernel, grad_bias


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of the sigmoid written in terms of its output y = sigmoid(z)."""
    return grad_out * y * (1.0 - y)


def masked_bce(p: np.ndarray, target: np.ndarray, mask: np.ndarray,
               normalize: bool = True):
    """Binary cross-entropy summed over masked cells.

    With ``normalize`` the sum is divided by max(1, number of masked cells).
    Probabilities are clamped to [1e-7, 1 - 1e-7]; the returned gradient is the
    exact derivative of the clamped loss with respect to ``p``.
    """
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    scale = 1.0 / max(1.0, float(mask.sum())) if normalize else 1.0
    ll = target * np.log(pc) + (1.0 - target) * np.log1p(-pc)
    loss = -float((ll * mask).sum()) * scale
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
    grad = -(target / pc - (1.0 - target) / (1.0 - pc)) * mask * inside * scale
    return loss, grad.astype(p.dtype, copy=False)


def masked_bce_logits(z: np.ndarray, target: np.ndarray, mask: np.ndarray,
                      normalize: bool = True):
    """masked_bce evaluated on logits ``z`` = sigmoid^-1(p), without clamping.

    Uses softplus(z) - target * z, so the loss stays finite and the gradient
    (sigmoid(z) - target) never vanishes on a confidently wrong cell.
    """
    scale = 1.0 / max(1.0, float(mask.sum())) if normalize else 1.0
    ll = np.logaddexp(0.0, z) - target * z
    loss = float((ll * mask).sum()) * scale
    grad = (sigmoid(z) - target) * mask * scale
    return loss, grad.astype(z.dtype, copy=False)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """Plain SGD, params - lr * grads, returned as a new dict."""
    _check_grads(params, grads)
    return {name: (value - lr * grads[name]).astype(value.dtype, copy=False)
            for name, value in params.items()}


def _check_grads(params, grads) -> None:
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {value.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries)")


class RMSProp:
    """Per-parameter step scaling by a running RMS of the gradient, no momentum.

    The second-moment average is bias-corrected so the first steps are not
    inflated while it warms up from zero.
    """

    def __init__(self, lr: float, decay: float = 0.99, eps: float = 1e-8):
        if lr <= 0 or not 0.0 <= decay < 1.0:
            raise ValueError("need lr > 0 and 0 <= decay < 1")
        self.lr, self.decay, self.eps = lr, decay, eps
        self.t = 0
        self.ms: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        _check_grads(params, grads)
        self.t += 1
        corr = 1.0 - self.decay ** self.t
        out = {}
        for name, value in params.items():
            g = grads[name].astype(np.float64)
            ms = self.ms.get(name)
            ms = (1.0 - self.decay) * g * g if ms is None else self.decay * ms + (1.0 - self.decay) * g * g
            self.ms[name] = ms
            out[name] = (value - self.lr * g / (np.sqrt(ms / corr) + self.eps)).astype(value.dtype, copy=False)
        return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[np.ndarray], float], theta: np.ndarray, analytic: np.ndarray,
               eps: float = 1e-5, tol: float = 1e-4, abs_floor: float = 1e-6,
               n_samples: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    ``f`` maps a flat parameter vector to a scalar. The relative error of an
    entry is |a - n| / max(|a|, |n|, abs_floor). When ``n_samples`` is given,
    only that many randomly chosen coordinates are checked.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    idx = np.arange(theta.size)
    if n_samples is not None and n_samples < theta.size:
        idx = np.sort(np.random.default_rng(seed).choice(theta.size, n_samples, replace=False))
    worst, worst_i = 0.0, -1
    work = theta.copy()
    for i in idx:
        work[i] = theta[i] + eps
        fp = f(work)
        work[i] = theta[i] - eps
        fm = f(work)
        work[i] = theta[i]
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if err > worst or worst_i < 0:
            worst, worst_i = err, int(i)
    return GradCheckReport(worst, worst_i, len(idx), tol)


def flatten(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in params.values()])


def unflatten(flat: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, k = {}, 0
    for name, v in like.items():
        out[name] = flat[k:k + v.size].reshape(v.shape).astype(v.dtype, copy=False)
        k += v.size
    return out


# -- checkpoint format -------------------------------------------------------

class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named float32 tensors in the little-endian DTPK layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 8:
        raise CheckpointFormatError("truncated header at offset 4")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated record at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return out
