"""Differentiable CNN building blocks on top of :mod:`fungnet.tensor`.

All spatial operations use NCHW layout. Convolution lowers one sample at a
time to an im2col patch matrix and a single GEMM, which keeps the patch
buffer to one image. Pooling shifts and accumulates over kernel offsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError, Tensor, add, flatten, record

__all__ = [
    "ConvParams", "BatchNormState", "PoolSpec", "DropoutSpec",
    "conv2d", "pool2d", "batchnorm2d", "linear", "dropout",
    "softmax_cross_entropy", "softmax", "relu", "concat", "add", "flatten",
    "output_extent",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.weight.ndim != 4 or min(self.weight.shape[2:]) < 1:
            raise ShapeError(f"conv weight must be (O, C, kh, kw) with kh, kw >= 1, got {self.weight.shape}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid stride {self.stride} / padding {self.padding}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


@dataclass
class PoolSpec:
    kind: str  # "max", "average" or "global_average"
    kernel: tuple = (2, 2)
    stride: Optional[tuple] = None
    padding: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in ("max", "average", "global_average"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        self.kernel = _pair(self.kernel)
        self.stride = self.kernel if self.stride is None else _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.kind != "global_average" and (min(self.kernel) < 1 or min(self.stride) < 1):
            raise ValueError(f"invalid pooling geometry {self}")


@dataclass
class DropoutSpec:
    rate: float = 0.5
    mode: str = field(default="train")

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _geometry(x: Tensor, kh, kw, sh, sw, ph, pw, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an (N, C, H, W) input, got {x.shape}")
    _, _, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"{what}: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    return output_extent(h, kh, sh, ph), output_extent(w, kw, sw, pw)


def _pad(x: np.ndarray, ph: int, pw: int, value=0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _im2col(xp: np.ndarray, kh, kw, sh, sw) -> np.ndarray:
    """(C, Hp, Wp) padded image -> (C*kh*kw, Ho*Wo) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    c, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    o, c, kh, kw = p.weight.shape
    if x.ndim == 4 and x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {c}")
    (sh, sw), (ph, pw) = p.stride, p.padding
    ho, wo = _geometry(x, kh, kw, sh, sw, ph, pw, "conv2d")
    n = x.shape[0]
    xp = _pad(x.data, ph, pw)
    w2 = p.weight.data.reshape(o, c * kh * kw)
    out = np.empty((n, o, ho * wo), dtype=np.result_type(x.dtype, w2.dtype))
    for b in range(n):
        np.matmul(w2, _im2col(xp[b], kh, kw, sh, sw), out=out[b])
    out = out.reshape(n, o, ho, wo)
    if p.bias is not None:
        out += p.bias.data.reshape(1, o, 1, 1)

    inputs = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        need_x, need_w = x.requires_grad, p.weight.requires_grad
        gw = np.zeros_like(w2) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        for b in range(n):
            if need_w:
                gw += g2[b] @ _im2col(xp[b], kh, kw, sh, sw).T
            if need_x:
                gcols = (w2.T @ g2[b]).reshape(c, kh, kw, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        gxp[b, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcols[:, i, j]
        gx = None
        if need_x:
            h, w = x.shape[2:]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        grads = (gx, gw.reshape(p.weight.shape) if need_w else None)
        if p.bias is not None:
            grads += (g.sum(axis=(0, 2, 3)) if p.bias.requires_grad else None,)
        return grads

    return record("conv2d", inputs, out, back)


def pool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    """Max, average (padding counted in the divisor) or global-average pooling."""
    if spec.kind == "global_average":
        if x.ndim != 4:
            raise ShapeError(f"global pooling expects (N, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return record("global_avg_pool", (x,), out,
                      lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))

    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = _geometry(x, kh, kw, sh, sw, ph, pw, "pool2d")
    h, w = x.shape[2:]
    slices = [
        (slice(None), slice(None),
         slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
        for i in range(kh) for j in range(kw)
    ]

    if spec.kind == "average":
        xp = _pad(x.data, ph, pw)
        area = kh * kw
        out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
        for sl in slices:
            out += xp[sl]
        out /= area

        def back_avg(g):
            gxp = np.zeros_like(xp)
            share = g / area
            for sl in slices:
                gxp[sl] += share
            return (gxp[:, :, ph:ph + h, pw:pw + w],)

        return record("avg_pool", (x,), out, back_avg)

    xp = _pad(x.data, ph, pw, value=-np.inf)
    best = xp[slices[0]].copy()
    arg = np.zeros(best.shape, dtype=np.int32)
    for k, sl in enumerate(slices[1:], start=1):
        cand = xp[sl]
        better = cand > best  # strict: first maximum in row-major order wins ties
        best[better] = cand[better]
        arg[better] = k

    def back_max(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, sl in enumerate(slices):
            gxp[sl] += np.where(arg == k, g, 0)
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return record("max_pool", (x,), best, back_max)


def batchnorm2d(x: Tensor, s: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization.

    Train mode uses biased batch statistics for the output and folds the
    unbiased batch variance into ``running_var``; eval mode uses the running
    statistics.
    """
    _check_mode(mode)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if s.gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma has shape {s.gamma.shape}")
    gamma = s.gamma.data.reshape(1, c, 1, 1)
    beta = s.beta.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)

    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 1:
            raise ShapeError("batchnorm2d in train mode needs at least one value per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + s.eps)
        xhat = centered * inv_std
        out = gamma * xhat + beta

        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        s.running_mean[...] = (1 - s.momentum) * s.running_mean + s.momentum * mu.reshape(c)
        s.running_var[...] = (1 - s.momentum) * s.running_var + s.momentum * unbiased

        def back_train(g):
            gg = g.sum(axis=axes)
            gxh = (g * xhat).sum(axis=axes)
            gx = None
            if x.requires_grad:
                dxhat = g * gamma
                gx = (inv_std / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            return gx, gxh, gg

        return record("batchnorm_train", (x, s.gamma, s.beta), out, back_train)

    inv_std = (1.0 / np.sqrt(s.running_var + s.eps)).reshape(1, c, 1, 1).astype(x.dtype)
    xhat = (x.data - s.running_mean.reshape(1, c, 1, 1)) * inv_std
    out = gamma * xhat + beta

    def back_eval(g):
        return g * gamma * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm_eval", (x, s.gamma, s.beta), out, back_eval)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (d_out, d_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = (g @ wd, g.T @ xd)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, back)


def dropout(x: Tensor, spec: DropoutSpec, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    _check_mode(spec.mode)
    if spec.mode == "eval" or spec.rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = 1.0 - spec.rate
    mask = (rng.random(x.shape) >= spec.rate).astype(x.dtype) / keep
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", (x,), np.maximum(xd, 0), lambda g: (np.where(xd > 0, g, 0),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"{n} rows of logits but {t.shape[0]} targets")
    if t.min() < 0 or t.max() >= k:
        raise ContractError(f"targets must lie in [0, {k}), got range [{t.min()}, {t.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), t].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        return (d * (g / n),)

    return record("softmax_xent", (logits,), np.asarray(loss, dtype=logits.dtype), back)
