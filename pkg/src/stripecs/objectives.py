"""Training losses and evaluation metrics.

Losses are differentiable tape operations on ``(n, bands, h, w)`` tensors;
metrics are plain numpy functions on cubes ``(bands, h, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, apply, scale

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    eps: float = 1e-8
    # "complete": the masked branch is supervised by the full cube;
    # "literal": it is supervised by the masked cube itself
    aug_target: str = "complete"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.aug_target not in ("complete", "literal"):
            raise ValueError(f"aug_target must be 'complete' or 'literal', got {self.aug_target!r}")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{what}: shape mismatch {a.data.shape} vs {b.data.shape}")


def l1_loss(x, x_hat) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    a, b = _tensor(x), _tensor(x_hat)
    _same_shape(a, b, "l1_loss")
    diff = b.data - a.data
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def make_backward(needs):
        def backward(grad):
            g = np.sign(diff) * (grad / count)
            return (-g if needs[0] else None, g if needs[1] else None)
        return backward

    return apply("l1_loss", (a, b), out, make_backward)


def _spectral_angles(x: np.ndarray, y: np.ndarray, eps: float, axis: int):
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    dot = np.sum(x * y, axis=axis)
    nx = np.sqrt(np.sum(x * x, axis=axis))
    ny = np.sqrt(np.sum(y * y, axis=axis))
    denom = nx * ny + eps
    t_raw = (dot + eps) / denom
    t = np.clip(t_raw, -1.0, 1.0)
    return np.arccos(t), (x, y, dot, nx, ny, denom, t, t_raw)


def sam_loss(x, x_hat, eps: float = 1e-8) -> Tensor:
    """Mean spectral angle in radians over all pixels of ``(n, bands, h, w)``.

    ``acos(clip((<x, x_hat> + eps) / (|x| |x_hat| + eps), -1, 1))`` per pixel.
    The gradient is zero where the clip is active and the ``1/sin`` factor is
    floored near |t| = 1.
    """
    a, b = _tensor(x), _tensor(x_hat)
    _same_shape(a, b, "sam_loss")
    if a.data.ndim != 4:
        raise ValueError(f"sam_loss expects (n, bands, h, w), got {a.data.shape}")
    angles, saved = _spectral_angles(a.data, b.data, eps, axis=1)
    out = np.asarray(angles.mean(), dtype=b.data.dtype)

    def make_backward(needs):
        xd, yd, dot, nx, ny, denom, t, t_raw = saved
        count = angles.size

        def backward(grad):
            inside = np.abs(t_raw) <= 1.0
            dtheta = np.where(inside, -1.0 / np.sqrt(np.maximum(1.0 - t * t, 1e-12)), 0.0)
            coef = float(grad) / count * dtheta
            num = dot + eps
            gx = gy = None
            if needs[1]:
                ny_safe = np.where(ny > 0, ny, 1.0)
                dt_dy = xd / denom[:, None] - (num * nx / (denom**2 * ny_safe))[:, None] * yd
                gy = (coef[:, None] * dt_dy).astype(b.data.dtype)
            if needs[0]:
                nx_safe = np.where(nx > 0, nx, 1.0)
                dt_dx = yd / denom[:, None] - (num * ny / (denom**2 * nx_safe))[:, None] * xd
                gx = (coef[:, None] * dt_dx).astype(a.data.dtype)
            return gx, gy

        return backward

    return apply("sam_loss", (a, b), out, make_backward)


def total_loss(x, x_hat, cfg: LossConfig = LossConfig()) -> Tensor:
    """L1 plus ``alpha`` times the SAM loss."""
    l1 = l1_loss(x, x_hat)
    if cfg.alpha == 0:
        return l1
    return add(l1, scale(sam_loss(x, x_hat, cfg.eps), cfg.alpha))


def aug_loss(x, x_hat_clean, x_hat_masked, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Clean-branch total loss plus the same terms on the masked branch.

    With ``aug_target="complete"`` the masked reconstruction is compared with
    the full ``x``; with ``"literal"`` it is compared with ``x * mask``.
    """
    xt = _tensor(x)
    m = np.asarray(mask)
    if m.shape != xt.data.shape:
        raise ValueError(f"aug_loss: mask shape {m.shape} differs from {xt.data.shape}")
    target = xt if cfg.aug_target == "complete" else Tensor((xt.data * m).astype(xt.data.dtype))
    return add(total_loss(xt, x_hat_clean, cfg), total_loss(target, x_hat_masked, cfg))


# --- metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    rmse: float
    sam: float

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "rmse": self.rmse, "sam": self.sam}


def _rms(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return math.sqrt(float(np.mean((x - x_hat) ** 2)))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB for data normalised to [0, 1], capped at 99 dB."""
    rms = _rms(x, x_hat)
    if rms == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * math.log10(1.0 / rms))


def rmse(x: np.ndarray, x_hat: np.ndarray, native_scale: float) -> float:
    """Root-mean-square error in native (pre-normalisation) units."""
    if not native_scale > 0:
        raise ValueError(f"native_scale must be positive, got {native_scale}")
    return _rms(x, x_hat) * native_scale


def sam_metric(x: np.ndarray, x_hat: np.ndarray, eps: float = 1e-8) -> float:
    """Mean spectral angle in degrees; bands on axis 0 of ``(bands, h, w)``."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    angles, _ = _spectral_angles(x, x_hat, eps, axis=0)
    return math.degrees(float(angles.mean()))


def evaluate_metrics(x: np.ndarray, x_hat: np.ndarray, native_scale: float) -> MetricsReport:
    return MetricsReport(psnr(x, x_hat), rmse(x, x_hat, native_scale), sam_metric(x, x_hat))
