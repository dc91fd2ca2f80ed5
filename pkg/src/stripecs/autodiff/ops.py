"""Differentiable operations on :class:`Tensor`.

Every function computes its forward result eagerly with numpy and, when one of
its inputs is tracked by the active tape, records a backward closure.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, apply


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _live_taps(size: int, kernel: int, stride: int, pad: int, out: int) -> tuple[int, int]:
    """Contiguous range of kernel taps that ever overlap real (unpadded) input.

    Taps outside it only ever multiply zero padding, so they can be dropped
    from the product without changing the result.
    """
    starts = np.arange(out) * stride - pad
    live = [k for k in range(kernel) if np.any((starts + k >= 0) & (starts + k < size))]
    if not live:
        # every window sits in padding; keep one tap so the product is all zeros
        return 0, 1
    return live[0], live[-1] + 1


def conv2d(x: Tensor, weight: Tensor, stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, as one matrix product per group.

    ``weight`` has shape ``(out_c, in_c // groups, k_h, k_w)``; no bias.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    o, cg, kh, kw = wd.shape
    if groups < 1 or c % groups or o % groups:
        raise ValueError(
            f"conv2d: channels in={c}, out={o} must both be divisible by groups={groups}"
        )
    if cg != c // groups:
        raise ValueError(
            f"conv2d: weight expects {cg} channels per group, input gives {c // groups}"
        )
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"conv2d: invalid stride {(sh, sw)} or padding {(ph, pw)}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    i0, i1 = _live_taps(h, kh, sh, ph, oh)
    j0, j1 = _live_taps(w, kw, sw, pw, ow)
    th, tw = i1 - i0, j1 - j0

    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = xd
    base = xp[:, :, i0:, j0:]
    s = base.strides
    # columns laid out (c, th, tw, n, oh, ow) so each group is a single GEMM
    cols = as_strided(
        base,
        shape=(c, th, tw, n, oh, ow),
        strides=(s[1], s[2], s[3], s[0], s[2] * sh, s[3] * sw),
        writeable=False,
    ).reshape(c * th * tw, n * oh * ow)

    og = o // groups
    kg = cg * th * tw
    wt = np.ascontiguousarray(wd[:, :, i0:i1, j0:j1]).reshape(o, kg)
    out = np.empty((o, n * oh * ow), dtype=np.result_type(xd, wd))
    for g in range(groups):
        np.matmul(wt[g * og:(g + 1) * og], cols[g * kg:(g + 1) * kg], out=out[g * og:(g + 1) * og])
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    def make_backward(needs):
        need_x, need_w = needs

        def backward(grad):
            gy = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
            gx = gw = None
            if need_w:
                gwt = np.empty_like(wt)
                for g in range(groups):
                    np.matmul(gy[g * og:(g + 1) * og], cols[g * kg:(g + 1) * kg].T,
                              out=gwt[g * og:(g + 1) * og])
                gw = np.zeros_like(wd)
                gw[:, :, i0:i1, j0:j1] = gwt.reshape(o, cg, th, tw)
            if need_x:
                gcols = np.empty((c * th * tw, n * oh * ow), dtype=gy.dtype)
                for g in range(groups):
                    np.matmul(wt[g * og:(g + 1) * og].T, gy[g * og:(g + 1) * og],
                              out=gcols[g * kg:(g + 1) * kg])
                gcols = gcols.reshape(c, th, tw, n, oh, ow)
                gxp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=gy.dtype)
                for i in range(th):
                    for j in range(tw):
                        r, q = i0 + i, j0 + j
                        gxp[:, :, r:r + sh * oh:sh, q:q + sw * ow:sw] += gcols[:, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
            return gx, gw

        return backward

    return apply("conv2d", (x, weight), out, make_backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape ``(c,)`` to a 4-D tensor."""
    if bias.data.shape != (x.data.shape[1],):
        raise ValueError(f"bias shape {bias.data.shape} does not match {x.data.shape[1]} channels")
    out = x.data + bias.data[None, :, None, None]

    def make_backward(needs):
        def backward(grad):
            return (grad if needs[0] else None,
                    grad.sum(axis=(0, 2, 3)) if needs[1] else None)
        return backward

    return apply("add_bias", (x, bias), out, make_backward)


@lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_str: str) -> np.ndarray:
    """(2n, n) linear-interpolation matrix with half-pixel centres."""
    a = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        a[o, lo] += 1.0 - frac
        a[o, hi] += frac
    a.setflags(write=False)
    return a.astype(dtype_str)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (align_corners=False); a size-1 axis replicates."""
    xd = x.data
    if xd.ndim != 4 or xd.shape[2] < 1 or xd.shape[3] < 1:
        raise ValueError(f"bilinear_upsample2x expects a non-empty 4-D tensor, got {xd.shape}")
    ah = _upsample_matrix(xd.shape[2], xd.dtype.str)
    aw = _upsample_matrix(xd.shape[3], xd.dtype.str)
    out = np.matmul(np.matmul(ah, xd), aw.T)

    def make_backward(needs):
        def backward(grad):
            return (np.matmul(np.matmul(ah.T, grad), aw),)
        return backward

    return apply("bilinear_upsample2x", (x,), out, make_backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max-style leaky ReLU; the subgradient at exactly 0 is ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, xd * xd.dtype.type(slope))

    def make_backward(needs):
        def backward(grad):
            return (np.where(pos, grad, grad * grad.dtype.type(slope)),)
        return backward

    return apply("leaky_relu", (x,), out, make_backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate 4-D tensors along the channel axis, in argument order."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 4 or (t.data.shape[0], *t.data.shape[2:]) != (ref[0], *ref[2:]):
            raise ValueError(
                f"concat_channels: shapes {[t.data.shape for t in tensors]} disagree on n, h, w"
            )
    sizes = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def make_backward(needs):
        def backward(grad):
            return tuple(
                grad[:, bounds[k]:bounds[k + 1]] if needs[k] else None
                for k in range(len(tensors))
            )
        return backward

    return apply("concat_channels", tensors, out, make_backward)


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the batch axis."""
    out = x.data[start:stop]
    full = x.data.shape

    def make_backward(needs):
        def backward(grad):
            g = np.zeros(full, dtype=grad.dtype)
            g[start:stop] = grad
            return (g,)
        return backward

    return apply("batch_slice", (x,), out, make_backward)


def concat_batch(*tensors: Tensor) -> Tensor:
    """Concatenate 4-D tensors along the batch axis, in argument order."""
    if not tensors:
        raise ValueError("concat_batch needs at least one tensor")
    ref = tensors[0].data.shape[1:]
    if any(t.data.ndim != 4 or t.data.shape[1:] != ref for t in tensors):
        raise ValueError(f"concat_batch: shapes {[t.data.shape for t in tensors]} disagree on c, h, w")
    bounds = np.cumsum([0] + [t.data.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)

    def make_backward(needs):
        def backward(grad):
            return tuple(
                grad[bounds[k]:bounds[k + 1]] if needs[k] else None
                for k in range(len(tensors))
            )
        return backward

    return apply("concat_batch", tensors, out, make_backward)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def make_backward(needs):
        def backward(grad):
            return (grad if needs[0] else None, grad if needs[1] else None)
        return backward

    return apply("add", (a, b), a.data + b.data, make_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def make_backward(needs):
        def backward(grad):
            return (grad if needs[0] else None, -grad if needs[1] else None)
        return backward

    return apply("sub", (a, b), a.data - b.data, make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def make_backward(needs):
        def backward(grad):
            return (grad * bd if needs[0] else None, grad * ad if needs[1] else None)
        return backward

    return apply("mul", (a, b), ad * bd, make_backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    f = x.data.dtype.type(factor)

    def make_backward(needs):
        def backward(grad):
            return (grad * f,)
        return backward

    return apply("scale", (x,), x.data * f, make_backward)


def sum_all(x: Tensor) -> Tensor:
    xd = x.data

    def make_backward(needs):
        def backward(grad):
            return (np.broadcast_to(grad, xd.shape).astype(xd.dtype),)
        return backward

    return apply("sum", (x,), np.asarray(xd.sum(), dtype=xd.dtype), make_backward)


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    count = xd.size

    def make_backward(needs):
        def backward(grad):
            return (np.full(xd.shape, grad / count, dtype=xd.dtype),)
        return backward

    return apply("mean", (x,), np.asarray(xd.mean(), dtype=xd.dtype), make_backward)


def reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "sum":
        return sum_all(x)
    if kind == "mean":
        return mean_all(x)
    raise ValueError(f"unknown reduction {kind!r}")


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total
