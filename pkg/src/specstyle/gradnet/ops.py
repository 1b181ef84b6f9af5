"""Differentiable operators: exactly the set the autoencoder and its losses need."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather patches of a padded [B,C,H,W] array into [C*kh*kw, B*ho*wo]."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add the inverse of :func:`_im2col` into a zero [B,C,H,W] array."""
    b, c, h, w = shape
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def back(g, needs):
        return g, g

    return make_result(a.data + b.data, (a, b), back)


def scale(a: Tensor, factor: float) -> Tensor:
    def back(g, needs):
        return (g * factor,)

    return make_result(a.data * factor, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g, needs):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(a.data.sum()), (a,), back)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at zero is zero."""
    mask = x.data > 0

    def back(g, needs):
        return (g * mask,)

    return make_result(x.data * mask, (x,), back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``weight`` [Cout,Cin,kH,kW]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, cout, 1, 1)

    def back(g, needs):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if needs[0]:
            gcols = w2.T @ g2
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if needs[1]:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if needs[2]:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, weight, bias), back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of ``x`` [B,Cin,H,W] with ``weight`` [Cin,Cout,kH,kW].

    This is the adjoint of :func:`conv2d` with the same weight, plus bias.
    Output size is ``(H - 1) * stride - 2 * padding + kH``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-d input and weight")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: padding removes the whole output")

    x2 = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    w2 = weight.data.reshape(cin, -1)
    full = _col2im(w2.T @ x2, (b, cout, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo] + bias.data.reshape(1, cout, 1, 1)

    def back(g, needs):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gw = gb = None
        if needs[0]:
            gx = (w2 @ cols).reshape(cin, b, h, w).transpose(1, 0, 2, 3)
        if needs[1]:
            gw = (x2 @ cols.T).reshape(weight.shape)
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, weight, bias), back)


@dataclass
class RunningStats:
    """Per-channel running mean and variance used by batch norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, scale_: Tensor, shift: Tensor, stats: RunningStats, train: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In train mode batch statistics are used and ``stats`` is updated in place
    by an exponential moving average (unbiased variance, as torch does).
    In eval mode ``stats`` is used and left untouched.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d expects a 4-d input")
    b, c, h, w = x.shape
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError("batchnorm2d: scale/shift must have one entry per channel")
    n = b * h * w
    axes = (0, 2, 3)
    if train:
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
        stats.var[...] = (1 - momentum) * stats.var + momentum * var * (n / (n - 1))
    else:
        mean, var = stats.mean, stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * scale_.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def back(g, needs):
        gx = gs = gt = None
        if needs[1]:
            gs = (g * xhat).sum(axis=axes)
        if needs[2]:
            gt = g.sum(axis=axes)
        if needs[0]:
            gxhat = g * scale_.data.reshape(1, c, 1, 1)
            if train:
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                gx = (gxhat - s1 / n - xhat * (s2 / n)) * inv_std.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, gs, gt

    return make_result(out, (x, scale_, shift), back)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def back(g, needs):
        ga = g * (2.0 / n) * diff
        return ga, -ga

    return make_result(np.asarray((diff * diff).mean()), (a, b), back)


def gram(features: Tensor, normalize: bool = True) -> Tensor:
    """Per-item channel gram matrices ``F @ F.T`` of [B,C,H,W] features.

    With ``normalize`` the result is divided by ``C * H * W``.
    """
    if features.data.ndim != 4:
        raise ShapeError("gram expects [B,C,H,W] features")
    b, c, h, w = features.shape
    f = features.data.reshape(b, c, h * w)
    norm = float(c * h * w) if normalize else 1.0
    g = (f @ f.transpose(0, 2, 1)) / norm

    def back(grad, needs):
        gf = ((grad + grad.transpose(0, 2, 1)) @ f) / norm
        return (gf.reshape(features.shape),)

    return make_result(g, (features,), back)
