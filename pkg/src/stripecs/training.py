"""The end-to-end model and its training loop.

An epoch draws one random stripe from every training cube, so its length
does not depend on the image width. Every random choice in epoch ``e`` comes
from a generator seeded with ``(seed, phase, e)``; resuming from an
end-of-epoch checkpoint therefore replays exactly the same stream.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import (
    AdamWConfig,
    Parameter,
    Tape,
    Tensor,
    add,
    adamw_step,
    backward,
    batch_slice,
    concat_batch,
)
from .config import RunConfig
from .decoder import CsfNet, build
from .degradation import Mask, NoiseSpec, add_awgn, apply_mask, draw_training_mask
from .encoder import CompressedStripe, Encoder, QuantizedEncoder, encode_int8
from .hsi_data import HsiCube, pushbroom_stripes
from .objectives import MetricsReport, aug_loss, evaluate_metrics, total_loss

log = logging.getLogger(__name__)

PHASE_TRAIN = 1
PHASE_QAT = 2


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class Rtcs:
    """Learned measurement operator plus reconstruction network."""

    encoder: Encoder
    decoder: CsfNet

    @classmethod
    def create(cls, cfg: RunConfig) -> "Rtcs":
        rng = np.random.default_rng([cfg.seed, 0])
        enc_cfg = cfg.encoder_config()
        encoder = Encoder.create(enc_cfg, rng)
        return cls(encoder, build(cfg.decoder_config(), enc_cfg, rng))

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.encoder.parameters() + self.decoder.parameters()}
        if len(named) != len(self.encoder.parameters()) + len(self.decoder.parameters()):
            raise RuntimeError("duplicate parameter names")
        return named

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def forward(self, x: Tensor, qat: bool = False,
                noise: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Tensor:
        z = self.encoder(x, qat=qat)
        if noise is not None:
            z = add(z, Tensor(noise(z.data) - z.data))
        return self.decoder(z)

    # --- inference on arrays ---

    def measure(self, stripes: np.ndarray) -> np.ndarray:
        return self.encoder(Tensor(stripes.astype(np.float32))).data

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return self.decoder.reconstruct(z)


def stripes_of(cube: HsiCube, stripe_w: int) -> np.ndarray:
    return np.stack(pushbroom_stripes(cube, stripe_w).stripes)


def cube_from_stripes(stripes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stripes_of` on plain arrays ``(n, B, H, w) -> (B, H, n*w)``."""
    return np.concatenate(list(stripes), axis=2)


def noise_fn(snr_db: float, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    """AWGN at ``snr_db`` with the signal power measured per sample."""
    spec = NoiseSpec(snr_db)

    def apply(z: np.ndarray) -> np.ndarray:
        return np.stack([add_awgn(zi, spec, rng) for zi in z])

    return apply


# --- reconstruction of whole cubes ------------------------------------------------


@dataclass(frozen=True)
class Degradation:
    """What happens to a cube between the sensor and the decoder."""

    mask: Optional[Mask] = None  # applied to every stripe
    snr_db: float = math.inf
    quantized: Optional[QuantizedEncoder] = None
    noise_seed: int = 0


def encode_cube(model: Rtcs, cube: HsiCube, stripe_w: int,
                deg: Degradation = Degradation()) -> list[CompressedStripe]:
    stripes = stripes_of(cube, stripe_w)
    if deg.mask is not None:
        stripes = np.stack([apply_mask(s, deg.mask) for s in stripes])
    enc = model.encoder
    if deg.quantized is not None:
        out = [encode_int8(s, deg.quantized, enc.cfg, i) for i, s in enumerate(stripes)]
    else:
        z = model.measure(stripes)
        out = [CompressedStripe(zi, "f32", (enc.cfg.B, enc.cfg.H_s, enc.cfg.W_s), index=i)
               for i, zi in enumerate(z)]
    if not math.isinf(deg.snr_db):
        rng = np.random.default_rng(deg.noise_seed)
        spec = NoiseSpec(deg.snr_db)
        out = [CompressedStripe(add_awgn(c.values(), spec, rng), "f32", c.source, index=c.index)
               for c in out]
    return out


def decode_stripes(model: Rtcs, coded: list[CompressedStripe]) -> np.ndarray:
    coded = sorted(coded, key=lambda c: c.index)
    z = np.stack([c.values() for c in coded])
    return cube_from_stripes(model.reconstruct(z))


def reconstruct_cube(model: Rtcs, cube: HsiCube, stripe_w: int,
                     deg: Degradation = Degradation()) -> np.ndarray:
    return decode_stripes(model, encode_cube(model, cube, stripe_w, deg))


def mean_metrics(model: Rtcs, cubes: list[HsiCube], stripe_w: int,
                 deg: Degradation = Degradation()) -> MetricsReport:
    reports = [evaluate_metrics(c.data, reconstruct_cube(model, c, stripe_w, deg), c.native_scale)
               for c in cubes]
    return MetricsReport(*(float(np.mean([getattr(r, k) for r in reports])) for k in ("psnr", "rmse", "sam")))


# --- training -----------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    history: list[dict] = field(default_factory=list)


@dataclass
class StepResult:
    loss: float
    clean: float
    masked: float
    n_masked: int


def train_step(model: Rtcs, cfg: RunConfig, x: np.ndarray, rng: np.random.Generator,
               optim: AdamWConfig, lr: float, qat: bool = False) -> StepResult:
    """One optimisation step on a batch of stripes ``(n, B, H, w)``."""
    loss_cfg = cfg.loss_config()
    n = x.shape[0]
    masks: list[Optional[Mask]] = [None] * n
    if cfg.aug:
        masks = [draw_training_mask(cfg.B, x.shape[1:], rng, cfg.p_affect, cfg.max_band_frac)
                 for _ in range(n)]
    # masked samples go last so the unmasked rows of the clean pass can stand in
    # for the (identical) unmasked rows of the masked pass
    order = sorted(range(n), key=lambda i: masks[i] is not None)
    x = x[order]
    masks = [masks[i] for i in order]
    n_clean = sum(m is None for m in masks)
    noise = noise_fn(cfg.noise_snr_db, rng) if cfg.noise_train else None

    with Tape():
        out_clean = model.forward(Tensor(x), qat=qat, noise=noise)
        if cfg.aug:
            bits = np.stack([np.ones(x.shape[1:], np.uint8) if m is None else m.bits for m in masks])
            if n_clean < n:
                out_masked = model.forward(Tensor(apply_mask(x[n_clean:], bits[n_clean:])),
                                           qat=qat, noise=noise)
                parts = [out_masked] if n_clean == 0 else [batch_slice(out_clean, 0, n_clean), out_masked]
                out_masked = concat_batch(*parts)
            else:
                out_masked = out_clean
            loss = aug_loss(x, out_clean, out_masked, bits, loss_cfg)
        else:
            loss = total_loss(x, out_clean, loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        backward(loss)
    adamw_step(model.parameters(), optim, lr)
    clean = total_loss(x, Tensor(out_clean.data), loss_cfg).item()
    return StepResult(value, clean, value - clean if cfg.aug else 0.0, n - n_clean)


@dataclass
class TrainData:
    train: np.ndarray  # (n_cubes, n_stripes, B, H, w)
    val: list[HsiCube]

    @classmethod
    def from_cubes(cls, train: list[HsiCube], val: list[HsiCube], stripe_w: int) -> "TrainData":
        if not train:
            raise ValueError("no training cubes")
        return cls(np.stack([stripes_of(c, stripe_w) for c in train]), list(val))


def run_epochs(model: Rtcs, cfg: RunConfig, data: TrainData, state: TrainState, stop: int,
               phase: int = PHASE_TRAIN, qat: bool = False, lr: Optional[float] = None,
               on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Train from ``state.epoch`` up to ``stop`` epochs completed."""
    optim = cfg.optim_config()
    n_cubes, n_stripes = data.train.shape[:2]
    step = 0
    while state.epoch < stop:
        e = state.epoch
        rng = np.random.default_rng([cfg.seed, phase, e])
        picks = rng.integers(n_stripes, size=n_cubes)
        order = rng.permutation(n_cubes)
        step_lr = optim.lr_at(e) if lr is None else lr
        t0 = time.perf_counter()
        results = []
        for s in range(0, n_cubes, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = data.train[idx, picks[idx]]
            try:
                results.append(train_step(model, cfg, batch, rng, optim, step_lr, qat))
            except NumericalError as exc:
                raise NumericalError(f"epoch {e + 1}, step {step}: {exc}") from None
            step += 1
        state.epoch = e + 1
        row = {
            "epoch": state.epoch,
            "lr": step_lr,
            "loss": float(np.mean([r.loss for r in results])),
            "loss_clean": float(np.mean([r.clean for r in results])),
            "loss_masked": float(np.mean([r.masked for r in results])),
        }
        if data.val and (state.epoch % cfg.val_every == 0 or state.epoch == stop):
            m = mean_metrics(model, data.val, cfg.stripe_w)
            row.update(val_psnr=m.psnr, val_rmse=m.rmse, val_sam=m.sam)
            log.info("epoch %d loss %.5f val psnr %.3f sam %.3f (%.2fs)", state.epoch, row["loss"],
                     m.psnr, m.sam, time.perf_counter() - t0)
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(state)
    return state


def reset_optimizer(params) -> None:
    for p in params:
        p.m = np.zeros_like(p.data)
        p.v = np.zeros_like(p.data)
        p.step = 0
