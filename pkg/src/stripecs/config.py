"""Run configuration: a flat ``key = value`` text file with named profiles.

Resolution order, later wins: profile defaults, config file, ``--set``
overrides, dedicated CLI flags such as ``--seed``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Optional

from .autodiff import AdamWConfig
from .decoder import DecoderConfig, stages_for
from .encoder import EncoderConfig, shape_for_rate
from .objectives import LossConfig

PROFILES = ("desk", "full")
# keys that do not change what a checkpoint means, so resuming across them is fine
_UNHASHED = {"data_dir", "out_dir", "epochs", "val_every", "checkpoint_every", "qat", "qat_epochs", "profile"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    # data
    K: int = 5
    B: int = 32
    H: int = 64
    W: int = 64
    n_train: int = 40
    n_val: int = 5
    n_test: int = 5
    stripe_w: int = 4
    native_scale: float = 4096.0
    # encoder
    s_r: float = 0.01
    # decoder
    n_f: int = 2
    N_base: int = 16
    c_s: int = 8
    frdb_width: int = 24
    frdb_growth: int = 4
    c_g: int = 4
    # loss and augmentation
    alpha: float = 0.1
    aug: bool = True
    aug_target: str = "complete"
    p_affect: float = 0.2
    max_band_frac: float = 0.2
    noise_train: bool = False
    noise_snr_db: float = 30.0
    # optimiser
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    decay_every: int = 1000
    decay_factor: float = 0.5
    # schedule
    epochs: int = 1000
    batch_size: int = 10
    val_every: int = 50
    checkpoint_every: int = 100
    qat: bool = False
    qat_epochs: int = 100
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    # --- derived module configs ---

    def encoder_config(self) -> EncoderConfig:
        return shape_for_rate(self.B, self.H, self.stripe_w, self.s_r)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            n_f=self.n_f, N_base=self.N_base, c_s=self.c_s, frdb_width=self.frdb_width,
            frdb_growth=self.frdb_growth, c_g=self.c_g,
            upsample_stages=stages_for(self.encoder_config()), B_out=self.B,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, aug_target=self.aug_target)

    def optim_config(self) -> AdamWConfig:
        return AdamWConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps,
                           weight_decay=self.weight_decay, decay_every=self.decay_every,
                           decay_factor=self.decay_factor)

    # --- serialisation ---

    def canonical(self) -> str:
        lines = ["# stripecs run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> bytes:
        """SHA-256 over the keys that define the model and its training."""
        body = "\n".join(
            f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self) if f.name not in _UNHASHED
        )
        return hashlib.sha256(body.encode()).digest()


FULL_PROFILE = {
    "K": 8, "B": 172, "H": 128, "W": 256,
    "n_train": 1000, "n_val": 100, "n_test": 100,
    "n_f": 8, "N_base": 64, "c_s": 16, "frdb_width": 96, "frdb_growth": 2, "c_g": 4,
    "lr": 1e-4, "epochs": 5000, "val_every": 100, "checkpoint_every": 500,
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, text: str):
    kind = type(getattr(RunConfig(), key))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text, 0)
        if kind is float:
            v = float(text)
            if math.isnan(v):
                raise ValueError(text)
            return v
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key ({source}:{lineno})")
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key (override)")
        out[key] = value
    return out


def resolve(file_values: Mapping[str, str] = (), overrides: Mapping[str, str] = (),
            profile: Optional[str] = None) -> RunConfig:
    file_values, overrides = dict(file_values), dict(overrides)
    chosen = profile or overrides.get("profile") or file_values.get("profile") or "desk"
    if chosen not in PROFILES:
        raise ConfigError(f"profile: unknown profile {chosen!r}; expected one of {PROFILES}")
    values: dict = {"profile": chosen}
    if chosen == "full":
        values.update(FULL_PROFILE)
    merged = {**file_values, **overrides}
    merged.pop("profile", None)
    for key, text in merged.items():
        values[key] = _parse_value(key, text)
    cfg = replace(RunConfig(), **values)
    validate(cfg)
    return cfg


def parse_config(path=None, overrides=None, profile: Optional[str] = None,
                 seed: Optional[int] = None) -> RunConfig:
    """Load ``path`` (may be None), apply ``key=value`` overrides and flags."""
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file {p} does not exist")
        file_values = parse_text(p.read_text(), str(p))
    over = parse_overrides(overrides)
    if seed is not None:
        over["seed"] = str(seed)
    return resolve(file_values, over, profile)


def validate(cfg: RunConfig) -> None:
    def need(ok: bool, key: str, msg: str) -> None:
        if not ok:
            raise ConfigError(f"{key}: {msg} (got {getattr(cfg, key)!r})")

    need(0 <= cfg.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
    need(cfg.B >= 3, "B", "false-colour previews need at least 3 bands")
    need(cfg.K >= 1, "K", "need at least one endmember")
    need(cfg.H >= 1, "H", "must be positive")
    need(cfg.stripe_w >= 1, "stripe_w", "must be positive")
    need(cfg.W >= cfg.stripe_w and cfg.W % cfg.stripe_w == 0, "W", "must be a multiple of stripe_w")
    for key in ("n_train", "n_val", "n_test"):
        need(getattr(cfg, key) >= 1, key, "every split needs at least one cube")
    need(cfg.native_scale > 0, "native_scale", "must be positive")
    need(0 < cfg.s_r <= 1, "s_r", "must lie in (0, 1]")
    need(0 <= cfg.p_affect <= 1, "p_affect", "must lie in [0, 1]")
    need(0 <= cfg.max_band_frac <= 1, "max_band_frac", "must lie in [0, 1]")
    need(cfg.noise_snr_db > 0, "noise_snr_db", "must be positive")
    for key in ("epochs", "batch_size", "val_every", "checkpoint_every", "qat_epochs"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    for key in ("n_f",):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("N_base", "c_s", "frdb_width", "frdb_growth", "c_g"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.frdb_width % cfg.c_g == 0, "frdb_width", f"must be divisible by c_g={cfg.c_g}")
    need((cfg.frdb_width + 2 * cfg.frdb_growth) % cfg.c_g == 0, "frdb_growth",
         f"frdb_width + 2*frdb_growth must be divisible by c_g={cfg.c_g}")
    # module invariants, with the module's own message attached to the key
    checks = [
        ("s_r", cfg.encoder_config),
        ("n_f", cfg.decoder_config),
        ("alpha", cfg.loss_config),
        ("lr", cfg.optim_config),
    ]
    for key, make in checks:
        try:
            make()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        enc = cfg.encoder_config()
        dec = cfg.decoder_config()
        if enc.h * 2 ** dec.upsample_stages != cfg.H or enc.w * 2 ** dec.upsample_stages != cfg.stripe_w:
            raise ValueError(f"stripe {cfg.H}x{cfg.stripe_w} is not recovered from {enc.h}x{enc.w}")
    except ValueError as exc:
        raise ConfigError(f"H: {exc}") from None

