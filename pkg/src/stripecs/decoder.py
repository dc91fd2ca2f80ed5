"""Two-stream decoder: a 3x3 aggregation branch and a 9x9 grouped dense branch.

Both branches run on the low-resolution measurements; their features are
fused by element-wise addition, upsampled by repeated (bilinear x2 + 3x3
convolution) stages and mapped back to the full band count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    add_bias,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    leaky_relu,
)
from .encoder import CompressedStripe, EncoderConfig

BASE_BLOCKS_PER_BLOCK = 3


@dataclass(frozen=True)
class DecoderConfig:
    n_f: int = 8
    N_base: int = 64
    c_s: int = 16
    frdb_width: int = 96
    frdb_growth: int = 2
    c_g: int = 4
    k_imfa: int = 3
    k_frdb: int = 9
    upsample_stages: int = 2
    B_out: int = 172
    slope: float = 0.2

    def __post_init__(self) -> None:
        for name in ("N_base", "c_s", "frdb_width", "frdb_growth", "c_g", "B_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_f < 0 or self.upsample_stages < 0:
            raise ValueError("n_f and upsample_stages must be non-negative")
        if self.frdb_width % self.c_g:
            raise ValueError(f"frdb_width={self.frdb_width} is not divisible by c_g={self.c_g}")
        stack = self.frdb_width + 2 * self.frdb_growth
        if stack % self.c_g:
            raise ValueError(
                f"dense stack of {stack} channels (frdb_width + 2*frdb_growth) "
                f"is not divisible by c_g={self.c_g}"
            )
        if self.k_imfa % 2 == 0 or self.k_frdb % 2 == 0:
            raise ValueError("kernel sizes must be odd")

    @property
    def fuse_width(self) -> int:
        """Channels after fusion; the FRDB branch width by construction."""
        return self.frdb_width


def stages_for(enc_cfg: EncoderConfig) -> int:
    s = enc_cfg.stride[0]
    if enc_cfg.stride[0] != enc_cfg.stride[1] or s & (s - 1):
        raise ValueError(f"encoder stride {enc_cfg.stride} is not a square power of two")
    return int(math.log2(s))


def _conv_params(cin: int, cout: int, k: int, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k + cout


def param_count(cfg: DecoderConfig, enc_cfg: EncoderConfig) -> int:
    """Closed-form parameter total of encoder plus decoder."""
    b, F, N, g = enc_cfg.b, cfg.frdb_width, cfg.N_base, cfg.frdb_growth
    total = enc_cfg.b * enc_cfg.B * enc_cfg.k_h * enc_cfg.k_w
    total += _conv_params(b, N, 3) + _conv_params(b, F, 3)
    imfa_base = _conv_params(N, cfg.c_s, cfg.k_imfa) + _conv_params(N + cfg.c_s, N, 1)
    frdb_base = (
        _conv_params(F, g, cfg.k_frdb)
        + _conv_params(F + g, g, cfg.k_frdb)
        + _conv_params(F + 2 * g, F, cfg.k_frdb, cfg.c_g)
    )
    total += cfg.n_f * BASE_BLOCKS_PER_BLOCK * (imfa_base + frdb_base)
    total += _conv_params(N, F, 1)
    total += cfg.upsample_stages * _conv_params(F, F, 3)
    total += _conv_params(F, cfg.B_out, 3)
    return total


class Conv:
    """Convolution with bias and 'same' zero padding."""

    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 groups: int = 1, gain: float = 1.0, init_scale: float = 1.0, dtype=np.float32):
        fan_in = (cin // groups) * k * k
        std = gain / math.sqrt(fan_in) * init_scale
        w = rng.standard_normal((cout, cin // groups, k, k)) * std
        self.weight = Parameter(w.astype(dtype), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), name=f"{name}.bias")
        self.pad = k // 2
        self.groups = groups

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight.value, 1, self.pad, self.groups)
        return add_bias(y, self.bias.value)


def _gain(slope: float) -> float:
    return math.sqrt(2.0 / (1.0 + slope * slope))


class ImfaBase:
    """Condense to ``c_s`` channels, concatenate with the input, fuse back by 1x1."""

    def __init__(self, name: str, cfg: DecoderConfig, rng, dtype):
        self.slope = cfg.slope
        self.squeeze = Conv(f"{name}.squeeze", cfg.N_base, cfg.c_s, cfg.k_imfa, rng,
                            gain=_gain(cfg.slope), dtype=dtype)
        self.fuse = Conv(f"{name}.fuse", cfg.N_base + cfg.c_s, cfg.N_base, 1, rng,
                         init_scale=0.1, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return self.squeeze.parameters() + self.fuse.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        h = self.squeeze(leaky_relu(x, self.slope))
        return self.fuse(concat_channels(x, h))


class FrdbBase:
    """Residual-dense pattern: two growth convs, then a grouped fuse conv."""

    def __init__(self, name: str, cfg: DecoderConfig, rng, dtype):
        F, g, k = cfg.frdb_width, cfg.frdb_growth, cfg.k_frdb
        self.slope = cfg.slope
        gain = _gain(cfg.slope)
        self.grow1 = Conv(f"{name}.grow1", F, g, k, rng, gain=gain, dtype=dtype)
        self.grow2 = Conv(f"{name}.grow2", F + g, g, k, rng, gain=gain, dtype=dtype)
        self.fuse = Conv(f"{name}.fuse", F + 2 * g, F, k, rng, groups=cfg.c_g,
                         init_scale=0.1, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return self.grow1.parameters() + self.grow2.parameters() + self.fuse.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        s1 = concat_channels(x, self.grow1(leaky_relu(x, self.slope)))
        s2 = concat_channels(s1, self.grow2(leaky_relu(s1, self.slope)))
        return self.fuse(leaky_relu(s2, self.slope))


class Block:
    """Three stacked base blocks with one shortcut from input to output."""

    def __init__(self, bases: list):
        self.bases = bases

    def parameters(self) -> list[Parameter]:
        return [p for base in self.bases for p in base.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for base in self.bases:
            y = base(y)
        return add(y, x)


class CsfNet:
    """Cross-scale feature decoder."""

    def __init__(self, cfg: DecoderConfig, b: int, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.b = b
        F = cfg.fuse_width
        self.stem_imfa = Conv("stem_imfa", b, cfg.N_base, 3, rng, dtype=dtype)
        self.stem_frdb = Conv("stem_frdb", b, F, 3, rng, dtype=dtype)
        self.imfa_blocks = [
            Block([ImfaBase(f"imfa.{i}.{j}", cfg, rng, dtype) for j in range(BASE_BLOCKS_PER_BLOCK)])
            for i in range(cfg.n_f)
        ]
        self.frdb_blocks = [
            Block([FrdbBase(f"frdb.{i}.{j}", cfg, rng, dtype) for j in range(BASE_BLOCKS_PER_BLOCK)])
            for i in range(cfg.n_f)
        ]
        self.f_u = Conv("f_u", cfg.N_base, F, 1, rng, dtype=dtype)
        self.upsamplers = [
            Conv(f"up.{i}", F, F, 3, rng, gain=_gain(cfg.slope), dtype=dtype)
            for i in range(cfg.upsample_stages)
        ]
        self.f_rec = Conv("f_rec", F, cfg.B_out, 3, rng, dtype=dtype)

    def modules(self) -> Iterator:
        yield self.stem_imfa
        yield self.stem_frdb
        yield from self.imfa_blocks
        yield from self.frdb_blocks
        yield self.f_u
        yield from self.upsamplers
        yield self.f_rec

    def parameters(self) -> list[Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def imfa(self, z: Tensor) -> Tensor:
        a = self.stem_imfa(z)
        for block in self.imfa_blocks:
            a = block(a)
        return a

    def frdb(self, z: Tensor) -> Tensor:
        f = self.stem_frdb(z)
        for block in self.frdb_blocks:
            f = block(f)
        return f

    def fuse(self, z: Tensor) -> Tensor:
        return add(self.f_u(self.imfa(z)), self.frdb(z))

    def __call__(self, z: Tensor) -> Tensor:
        """Unclamped reconstruction ``(n, b, h, w) -> (n, B_out, H, W)``."""
        if z.data.ndim != 4 or z.data.shape[1] != self.b:
            raise ValueError(f"decoder expects (n, {self.b}, h, w) input, got {z.data.shape}")
        zh = self.fuse(z)
        for up in self.upsamplers:
            zh = leaky_relu(up(bilinear_upsample2x(zh)), self.cfg.slope)
        return self.f_rec(zh)

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        """Batch inference on plain arrays, clamped to the reflectance range."""
        zt = Tensor(np.asarray(z, dtype=self.f_rec.weight.data.dtype))
        return np.clip(self(zt).data, 0.0, 1.0)


def build(cfg: DecoderConfig, enc_cfg: EncoderConfig, rng: Optional[np.random.Generator] = None,
          dtype=np.float32) -> CsfNet:
    """Instantiate a decoder matching an encoder geometry."""
    need = stages_for(enc_cfg)
    if cfg.upsample_stages != need:
        raise ValueError(
            f"upsample_stages={cfg.upsample_stages} but encoder stride {enc_cfg.stride} needs {need}"
        )
    if cfg.B_out != enc_cfg.B:
        raise ValueError(f"B_out={cfg.B_out} differs from the encoder's B={enc_cfg.B}")
    f = 2 ** need
    if enc_cfg.h * f != enc_cfg.H_s or enc_cfg.w * f != enc_cfg.W_s:
        raise ValueError(
            f"stripe {enc_cfg.H_s}x{enc_cfg.W_s} is not recovered by upsampling "
            f"{enc_cfg.h}x{enc_cfg.w} by {f}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    return CsfNet(cfg, enc_cfg.b, rng, dtype)


def decode(net: CsfNet, z: CompressedStripe) -> np.ndarray:
    """Reconstruct one stripe ``(B_out, H_s, W_s)`` clamped to [0, 1]."""
    if z.shape[0] != net.b:
        raise ValueError(f"stripe has {z.shape[0]} channels, decoder expects {net.b}")
    out = net.reconstruct(z.values()[None])[0]
    if out.shape != z.source:
        raise ValueError(f"decoded shape {out.shape} differs from the source geometry {z.source}")
    return out
