"""Linear stripe encoder: one strided 9x1 convolution with no bias.

The convolution is the measurement operator of compressed sensing. Because it
is linear, it can be exported as an explicit dense matrix acting on the
vectorised stripe (:func:`as_measurement_matrix`), and it can be run in pure
integer arithmetic once its weights are quantized to int8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Parameter, Tensor, apply, conv2d, conv_output_size

KERNEL = (9, 1)
MAX_MATRIX_ENTRIES = 10**8
INT32_MAX = 2**31 - 1
RATE_TOLERANCE = 0.15


@dataclass(frozen=True)
class EncoderConfig:
    B: int
    H_s: int
    W_s: int
    b: int
    stride: tuple[int, int]
    padding: tuple[int, int]
    k_h: int = KERNEL[0]
    k_w: int = KERNEL[1]
    s_r: Optional[float] = None

    def __post_init__(self) -> None:
        if self.b < 1 or self.B < 1:
            raise ValueError(f"band counts must be >= 1 (B={self.B}, b={self.b})")
        if self.H_s < 1 or self.W_s < 1:
            raise ValueError(f"stripe extent must be >= 1, got {self.H_s}x{self.W_s}")
        if self.H_s + 2 * self.padding[0] < self.k_h or self.W_s + 2 * self.padding[1] < self.k_w:
            raise ValueError("encoder kernel exceeds the padded stripe")
        if self.s_r is not None:
            rel = abs(self.achieved_rate - self.s_r) / self.s_r
            if rel > RATE_TOLERANCE:
                raise ValueError(
                    f"achieved sampling rate {self.achieved_rate:.5f} is {rel:.1%} away from "
                    f"the target {self.s_r} (limit {RATE_TOLERANCE:.0%}); "
                    f"b={self.b} is too coarse for B={self.B}"
                )

    @property
    def h(self) -> int:
        return conv_output_size(self.H_s, self.k_h, self.stride[0], self.padding[0])

    @property
    def w(self) -> int:
        return conv_output_size(self.W_s, self.k_w, self.stride[1], self.padding[1])

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.b, self.B, self.k_h, self.k_w)

    @property
    def achieved_rate(self) -> float:
        return (self.b * self.h * self.w) / (self.B * self.H_s * self.W_s)

    @property
    def spatial_factor(self) -> int:
        """Total upsampling factor per axis needed to undo the stride."""
        return self.stride[0]


def _same_padding(size: int, kernel: int, stride: int) -> int:
    """Zero padding giving ``ceil(size / stride)`` outputs.

    The centred padding ``kernel // 2`` is preferred; otherwise the smallest
    padding that works.
    """
    target = -(-size // stride)
    for p in (kernel // 2, *range(kernel + 1)):
        if size + 2 * p >= kernel and conv_output_size(size, kernel, stride, p) == target:
            return p
    raise ValueError(f"no padding gives {target} outputs for size={size}, k={kernel}, s={stride}")


def shape_for_rate(B: int, H_s: int, W_s: int, s_r: float) -> EncoderConfig:
    """Encoder geometry for a target sampling rate.

    Rates up to 1% use stride 4 on both axes (1/16 of the pixels) and
    ``b = floor(16 B s_r)`` channels; higher rates use stride 2 (1/4 of the
    pixels) and ``b = floor(4 B s_r)``.
    """
    if not 0 < s_r <= 0.25:
        raise ValueError(f"sampling rate must lie in (0, 0.25], got {s_r}")
    if H_s < 1 or W_s < 1:
        raise ValueError(f"stripe extent must be >= 1, got {H_s}x{W_s}")
    s, factor = (4, 16) if s_r <= 0.01 else (2, 4)
    # the epsilon keeps e.g. 100*0.05*4 = 19.999... from flooring to 19
    b = math.floor(B * s_r * factor + 1e-9)
    if b < 1:
        raise ValueError(f"sampling rate {s_r} leaves no output channels for B={B}")
    k_h, k_w = KERNEL
    p_h = _same_padding(H_s, k_h, s)
    p_w = _same_padding(W_s, k_w, s)
    return EncoderConfig(B, H_s, W_s, b, (s, s), (p_h, p_w), k_h, k_w, s_r)


def init_weights(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """i.i.d. Gaussian taps with variance 1 / (B k_h k_w)."""
    fan_in = cfg.B * cfg.k_h * cfg.k_w
    return (rng.standard_normal(cfg.weight_shape) / math.sqrt(fan_in)).astype(dtype)


@dataclass
class CompressedStripe:
    """Measurements of one stripe.

    ``data`` holds float32 values for ``dtype == "f32"`` and int8 codes for
    ``dtype == "i8"`` (real value = code * scale).
    """

    data: np.ndarray
    dtype: str
    source: tuple[int, int, int]
    scale: float = 1.0
    index: int = 0

    def __post_init__(self) -> None:
        if self.dtype not in ("f32", "i8"):
            raise ValueError(f"unknown compressed dtype {self.dtype!r}")
        if self.data.ndim != 3:
            raise ValueError(f"compressed data must be (b, h, w), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def values(self) -> np.ndarray:
        if self.dtype == "i8":
            return (self.data.astype(np.float64) * self.scale).astype(np.float32)
        return self.data.astype(np.float32, copy=False)

    @property
    def nbytes(self) -> int:
        return int(self.data.size) * (1 if self.dtype == "i8" else 4)


def _as_batch(stripe: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    x = np.asarray(stripe)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.B:
        raise ValueError(f"stripe shape {np.shape(stripe)} does not carry B={cfg.B} bands")
    if x.shape[2:] != (cfg.H_s, cfg.W_s):
        raise ValueError(
            f"stripe extent {x.shape[2:]} differs from the configured {(cfg.H_s, cfg.W_s)}"
        )
    return x


def project(x: Tensor, weight: Tensor, cfg: EncoderConfig) -> Tensor:
    """Differentiable batch projection ``(n, B, H_s, W_s) -> (n, b, h, w)``."""
    return conv2d(x, weight, cfg.stride, cfg.padding, groups=1)


def encode(stripe: np.ndarray, weights: np.ndarray, cfg: EncoderConfig, index: int = 0) -> CompressedStripe:
    """Project one stripe ``(B, H_s, W_s)``: purely linear, no bias or activation."""
    x = _as_batch(stripe, cfg)
    if x.shape[0] != 1:
        raise ValueError("encode() takes a single stripe")
    w = np.asarray(weights)
    z = project(Tensor(x.astype(w.dtype, copy=False)), Tensor(w), cfg).data[0]
    return CompressedStripe(z.astype(np.float32), "f32", (cfg.B, cfg.H_s, cfg.W_s), index=index)


def conv_matrix(weights: np.ndarray, in_shape: tuple[int, int, int], stride, padding) -> np.ndarray:
    """Dense matrix of a bias-free convolution acting on C-order ``vec(x)``.

    Row ``(o, r, c)`` carries the kernel taps of that output placed at its
    receptive-field positions; taps landing in the zero padding are dropped.
    """
    wd = np.asarray(weights, dtype=np.float64)
    o, cin, kh, kw = wd.shape
    C, H, W = in_shape
    if cin != C:
        raise ValueError(f"weights expect {cin} channels, input has {C}")
    sh, sw = stride
    ph, pw = padding
    oh = conv_output_size(H, kh, sh, ph)
    ow = conv_output_size(W, kw, sw, pw)
    rows, cols = o * oh * ow, C * H * W
    if rows * cols > MAX_MATRIX_ENTRIES:
        raise ValueError(
            f"measurement matrix would have {rows}x{cols} entries (limit {MAX_MATRIX_ENTRIES})"
        )
    mat = np.zeros((rows, cols))
    out_r, out_c = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    out_r, out_c = out_r.ravel(), out_c.ravel()
    for i in range(kh):
        for j in range(kw):
            in_r = out_r * sh - ph + i
            in_c = out_c * sw - pw + j
            ok = (in_r >= 0) & (in_r < H) & (in_c >= 0) & (in_c < W)
            pos = np.flatnonzero(ok)
            for oc in range(o):
                row_idx = oc * oh * ow + pos
                for ch in range(C):
                    col_idx = ch * H * W + in_r[ok] * W + in_c[ok]
                    mat[row_idx, col_idx] = wd[oc, ch, i, j]
    return mat


def as_measurement_matrix(weights: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Explicit Psi with ``encode(X).ravel() == Psi @ X.ravel()``."""
    if np.shape(weights) != cfg.weight_shape:
        raise ValueError(f"weights {np.shape(weights)} do not match {cfg.weight_shape}")
    return conv_matrix(weights, (cfg.B, cfg.H_s, cfg.W_s), cfg.stride, cfg.padding)


def mac_count(cfg: EncoderConfig) -> int:
    """Multiply-accumulates of one stripe encode: b * B * k_h * k_w * h * w."""
    return cfg.b * cfg.B * cfg.k_h * cfg.k_w * cfg.h * cfg.w


def gram_cost(H_s: int, W_s: int, B: int) -> int:
    """Cost of forming the (HW x HW) Gram matrix of a B-band stripe."""
    return (H_s * W_s) ** 2 * B


# --- int8 -----------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedEncoder:
    weights_i8: np.ndarray
    scale: float

    def __post_init__(self) -> None:
        if self.weights_i8.dtype != np.int8:
            raise ValueError("quantized weights must be int8")
        if np.any(np.abs(self.weights_i8.astype(np.int16)) > 127):
            raise ValueError("int8 codes must lie in [-127, 127]")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def dequantize(self) -> np.ndarray:
        return (self.weights_i8.astype(np.float64) * self.scale).astype(np.float32)


def weight_scale(weights: np.ndarray) -> float:
    """Per-tensor symmetric scale ``max|w| / 127``; 1.0 for all-zero weights.

    Weights so small that the scale would underflow to zero count as zero.
    """
    amax = float(np.max(np.abs(weights))) if np.size(weights) else 0.0
    s = amax / 127.0
    return s if s > 0 else 1.0


def quantize_pq(weights: np.ndarray) -> QuantizedEncoder:
    """Post-training int8 quantization, symmetric, zero-point 0."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    s = weight_scale(w)
    codes = np.clip(np.rint(w / s), -127, 127).astype(np.int8)
    return QuantizedEncoder(codes, s)


def sqnr_db(reference: np.ndarray, approx: np.ndarray) -> float:
    """Signal-to-quantization-noise ratio in dB."""
    ref = np.asarray(reference, dtype=np.float64)
    err = ref - np.asarray(approx, dtype=np.float64)
    noise = float(np.sum(err**2))
    if noise == 0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(ref**2)) / noise)


def fake_quant(weight: Tensor) -> Tensor:
    """Quantize-dequantize in the forward pass, identity in the backward pass."""
    w = weight.data
    s = weight_scale(w)
    out = (np.clip(np.rint(w.astype(np.float64) / s), -127, 127) * s).astype(w.dtype)

    def make_backward(needs):
        def backward(grad):
            return (grad,)
        return backward

    return apply("fake_quant", (weight,), out, make_backward)


def qat_forward(x: Tensor, weight: Tensor, cfg: EncoderConfig) -> Tensor:
    """Projection with fake-quantized weights (straight-through gradients)."""
    return project(x, fake_quant(weight), cfg)


def check_accumulator_bound(cfg: EncoderConfig) -> None:
    bound = 255 * 127 * cfg.B * cfg.k_h * cfg.k_w
    if bound > INT32_MAX:
        raise ValueError(
            f"int8 accumulator could reach {bound} > 2^31-1 for B={cfg.B}, "
            f"kernel {cfg.k_h}x{cfg.k_w}"
        )


def quantize_input(stripe: np.ndarray) -> np.ndarray:
    """Reflectance in [0, 1] to uint8 codes with scale 1/255."""
    x = np.asarray(stripe, dtype=np.float64)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def int8_accumulate(stripe: np.ndarray, q: QuantizedEncoder, cfg: EncoderConfig) -> np.ndarray:
    """Integer convolution of uint8 input codes with int8 weight codes.

    Returns the raw int64 accumulators ``(b, h, w)``; every one fits in int32.
    """
    check_accumulator_bound(cfg)
    x = _as_batch(stripe, cfg)[0]
    if q.weights_i8.shape != cfg.weight_shape:
        raise ValueError(f"quantized weights {q.weights_i8.shape} do not match {cfg.weight_shape}")
    codes = quantize_input(x).astype(np.int64)
    sh, sw = cfg.stride
    ph, pw = cfg.padding
    xp = np.zeros((cfg.B, cfg.H_s + 2 * ph, cfg.W_s + 2 * pw), dtype=np.int64)
    xp[:, ph:ph + cfg.H_s, pw:pw + cfg.W_s] = codes
    s = xp.strides
    h, w = cfg.h, cfg.w
    cols = as_strided(
        xp, shape=(cfg.B, cfg.k_h, cfg.k_w, h, w),
        strides=(s[0], s[1], s[2], s[1] * sh, s[2] * sw), writeable=False,
    ).reshape(cfg.B * cfg.k_h * cfg.k_w, h * w)
    acc = q.weights_i8.astype(np.int64).reshape(cfg.b, -1) @ cols
    return acc.reshape(cfg.b, h, w)


def int8_dequantized(stripe: np.ndarray, q: QuantizedEncoder, cfg: EncoderConfig) -> np.ndarray:
    """Accumulators scaled back to real units by ``scale_w * scale_x``."""
    return int8_accumulate(stripe, q, cfg).astype(np.float64) * (q.scale / 255.0)


def int8_error_budget(stripe: np.ndarray, q: QuantizedEncoder, cfg: EncoderConfig,
                      weights: np.ndarray) -> np.ndarray:
    """First-order per-coefficient bound on ``|int8 - float|`` projections.

    ``scale_w * sum|x| + scale_x * sum|w| + n_taps * scale_w * scale_x`` over
    each output's receptive field.
    """
    x = _as_batch(stripe, cfg)[0].astype(np.float64)
    sx = 1.0 / 255.0
    ones = np.ones(cfg.weight_shape)
    sum_abs_x = project(Tensor(np.abs(x)[None]), Tensor(ones), cfg).data[0]
    sum_abs_w = project(Tensor(np.ones_like(x)[None]), Tensor(np.abs(np.asarray(weights, np.float64))), cfg).data[0]
    n_taps = cfg.B * cfg.k_h * cfg.k_w
    return q.scale * sum_abs_x + sx * sum_abs_w + n_taps * q.scale * sx


def _requantize(acc: np.ndarray) -> tuple[np.ndarray, int]:
    """Integer-only symmetric rounding of accumulators to int8 codes."""
    amax = int(np.max(np.abs(acc))) if acc.size else 0
    if amax == 0:
        return np.zeros(acc.shape, dtype=np.int8), 0
    num = acc * 127
    # round half away from zero using floor division on magnitudes
    mag = (np.abs(num) * 2 + amax) // (2 * amax)
    return (np.sign(num) * mag).astype(np.int8), amax


def encode_int8(stripe: np.ndarray, q: QuantizedEncoder, cfg: EncoderConfig, index: int = 0) -> CompressedStripe:
    """Integer-only encode: uint8 input, int8 weights, int8 output codes.

    The output codes and scale are a deterministic function of the integer
    accumulators, so results are bit-identical across runs and machines.
    """
    acc = int8_accumulate(stripe, q, cfg)
    codes, amax = _requantize(acc)
    real_per_acc = q.scale / 255.0
    out_scale = amax * real_per_acc / 127.0 if amax else real_per_acc
    return CompressedStripe(codes, "i8", (cfg.B, cfg.H_s, cfg.W_s), scale=out_scale, index=index)


@dataclass
class Encoder:
    """Learnable measurement operator."""

    cfg: EncoderConfig
    weight: Parameter = field(repr=False)

    @classmethod
    def create(cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> "Encoder":
        return cls(cfg, Parameter(init_weights(cfg, rng, dtype), name="encoder.weight"))

    def parameters(self) -> list[Parameter]:
        return [self.weight]

    def __call__(self, x: Tensor, qat: bool = False) -> Tensor:
        if qat:
            return qat_forward(x, self.weight.value, self.cfg)
        return project(x, self.weight.value, self.cfg)

    def encode(self, stripe: np.ndarray, index: int = 0) -> CompressedStripe:
        return encode(stripe, self.weight.data, self.cfg, index)

    def quantize(self) -> QuantizedEncoder:
        return quantize_pq(self.weight.data)
