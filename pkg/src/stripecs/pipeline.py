"""Command implementations behind the CLI: synth, train, encode, decode, evaluate, quantize."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, resolve, parse_text
from .degradation import Mask, MaskSpec, apply_mask, gen_mask
from .encoder import QuantizedEncoder, as_measurement_matrix, quantize_pq, sqnr_db
from .formats import Bitstream, Checkpoint, FormatError, load_bitstream, load_checkpoint, save_bitstream, save_checkpoint
from .hsi_data import (
    DatasetManifest,
    HsiCube,
    false_color,
    load_cube,
    make_dataset,
    save_cube,
    save_png,
    scaled_bands,
)
from .objectives import evaluate_metrics, psnr
from .training import (
    PHASE_QAT,
    Degradation,
    Rtcs,
    TrainData,
    TrainState,
    cube_from_stripes,
    decode_stripes,
    encode_cube,
    reset_optimizer,
    run_epochs,
    stripes_of,
)

log = logging.getLogger(__name__)

MODEL_FILE = "model.rtck"
QAT_FILE = "model_qat.rtck"
LATEST_FILE = "checkpoint.rtck"
LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.txt"
METRIC_FIELDS = ("scenario", "cube", "psnr", "rmse", "sam", "masked_fraction")
NOISE_LEVELS_DB = (25.0, 30.0, 35.0, 40.0)


class DataError(RuntimeError):
    """Missing, malformed or incompatible input data."""


class ConfigMismatch(DataError):
    """A checkpoint was produced under a different configuration."""


# --- checkpoints ----------------------------------------------------------------------


def model_checkpoint(model: Rtcs, cfg: RunConfig, state: TrainState,
                     quant: Optional[QuantizedEncoder] = None, qat: bool = False) -> Checkpoint:
    entries: dict[str, np.ndarray] = {
        "meta/config": np.frombuffer(cfg.canonical().encode(), dtype=np.uint8),
        "meta/epoch": np.array(state.epoch, dtype=np.int64),
        "meta/qat": np.array(int(qat), dtype=np.int64),
    }
    for name, p in model.named_parameters().items():
        entries[f"param/{name}"] = p.data
        entries[f"adam_m/{name}"] = p.m
        entries[f"adam_v/{name}"] = p.v
        entries[f"adam_step/{name}"] = np.array(p.step, dtype=np.int64)
    if quant is not None:
        entries["quant/encoder.weight"] = quant.weights_i8
        entries["quant/encoder.scale"] = np.array(quant.scale, dtype=np.float64)
    return Checkpoint(cfg.hash(), entries)


@dataclass
class LoadedModel:
    model: Rtcs
    cfg: RunConfig
    state: TrainState
    quant: Optional[QuantizedEncoder]
    qat: bool


def checkpoint_config(ckpt: Checkpoint) -> RunConfig:
    text = ckpt.entries["meta/config"].tobytes().decode()
    return resolve(parse_text(text, "checkpoint config"))


def restore(ckpt: Checkpoint, cfg: Optional[RunConfig] = None, force: bool = False) -> LoadedModel:
    """Rebuild the model stored in ``ckpt``.

    With ``cfg`` given, its hash must match the checkpoint unless ``force``.
    """
    if "meta/config" not in ckpt.entries:
        raise FormatError("checkpoint has no embedded configuration")
    stored = checkpoint_config(ckpt)
    if cfg is None:
        cfg = stored
    elif cfg.hash() != ckpt.config_hash and not force:
        diff = [k for k, v in vars(cfg).items() if getattr(stored, k) != v]
        raise ConfigMismatch(f"checkpoint was trained with a different configuration (keys: {diff})")
    model = Rtcs.create(cfg)
    for name, p in model.named_parameters().items():
        key = f"param/{name}"
        if key not in ckpt.entries:
            raise FormatError(f"checkpoint lacks {key}")
        if ckpt.entries[key].shape != p.shape:
            raise FormatError(f"{key}: shape {ckpt.entries[key].shape} differs from model {p.shape}")
        p.data = ckpt.entries[key]
        p.m = ckpt.entries[f"adam_m/{name}"].copy()
        p.v = ckpt.entries[f"adam_v/{name}"].copy()
        p.step = int(ckpt.entries[f"adam_step/{name}"])
    quant = None
    if "quant/encoder.weight" in ckpt.entries:
        quant = QuantizedEncoder(ckpt.entries["quant/encoder.weight"], float(ckpt.entries["quant/encoder.scale"]))
    state = TrainState(int(ckpt.entries["meta/epoch"]))
    return LoadedModel(model, cfg, state, quant, bool(int(ckpt.entries.get("meta/qat", 0))))


def read_checkpoint(path, cfg: Optional[RunConfig] = None, force: bool = False) -> LoadedModel:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return restore(load_checkpoint(path), cfg, force)


# --- synth ------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_dir, overwrite: bool = False) -> DatasetManifest:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise DataError(f"output directory {out} is not empty (use --overwrite)")
    manifest = make_dataset(out, cfg.K, cfg.B, cfg.H, cfg.W, cfg.n_train, cfg.n_val, cfg.n_test,
                            cfg.seed, cfg.native_scale)
    log.info("wrote %d cubes (%d/%d/%d) of %dx%dx%d, seed %d, to %s", len(manifest.cubes),
             cfg.n_train, cfg.n_val, cfg.n_test, cfg.B, cfg.H, cfg.W, cfg.seed, out)
    return manifest


def load_dataset(data_dir, cfg: RunConfig, split: str) -> list[HsiCube]:
    try:
        manifest = DatasetManifest.load(data_dir)
        cubes = manifest.load_split(data_dir, split)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None
    for c in cubes:
        if (c.B, c.H) != (cfg.B, cfg.H) or c.W % cfg.stripe_w:
            raise DataError(f"cube {c.name} is {c.B}x{c.H}x{c.W}, config expects {cfg.B}x{cfg.H}x(k*{cfg.stripe_w})")
    return cubes


# --- train ------------------------------------------------------------------------------


def write_csv(rows: Sequence[dict], path, fields: Optional[Sequence[str]] = None) -> None:
    fields = list(fields or dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _cell(r.get(k, "")) for k in fields})
    Path(path).write_text(buf.getvalue())


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=None, force: bool = False) -> Path:
    """Train (or resume) and write checkpoints plus the training log; returns the model path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainData.from_cubes(load_dataset(data_dir, cfg, "train"), load_dataset(data_dir, cfg, "val"),
                                cfg.stripe_w)
    if resume is not None:
        loaded = read_checkpoint(resume, cfg, force)
        model, state = loaded.model, loaded.state
        log_path = out / LOG_FILE
        if log_path.is_file():
            with open(log_path) as fh:
                state.history = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= state.epoch]
        log.info("resuming from epoch %d", state.epoch)
    else:
        model, state = Rtcs.create(cfg), TrainState()
    (out / CONFIG_FILE).write_text(cfg.canonical())

    def on_epoch(st: TrainState) -> None:
        if st.epoch % cfg.checkpoint_every == 0 or st.epoch == cfg.epochs:
            save_checkpoint(model_checkpoint(model, cfg, st), out / LATEST_FILE)
            write_csv(st.history, out / LOG_FILE)

    run_epochs(model, cfg, data, state, cfg.epochs, on_epoch=on_epoch)
    save_checkpoint(model_checkpoint(model, cfg, state), out / MODEL_FILE)
    write_csv(state.history, out / LOG_FILE)
    if cfg.qat:
        qat_finetune(model, cfg, data)
        ckpt = model_checkpoint(model, cfg, state, quantize_pq(model.encoder.weight.data), qat=True)
        save_checkpoint(ckpt, out / QAT_FILE)
        return out / QAT_FILE
    return out / MODEL_FILE


def qat_finetune(model: Rtcs, cfg: RunConfig, data: TrainData) -> None:
    """Continue training with fake-quantized encoder weights at the final learning rate."""
    reset_optimizer(model.parameters())
    lr = cfg.optim_config().lr_at(cfg.epochs - 1)
    run_epochs(model, cfg, data, TrainState(), cfg.qat_epochs, phase=PHASE_QAT, qat=True, lr=lr)


# --- encode / decode ----------------------------------------------------------------


def _quantized(loaded: LoadedModel) -> QuantizedEncoder:
    return loaded.quant if loaded.quant is not None else quantize_pq(loaded.model.encoder.weight.data)


def encode_to_stream(loaded: LoadedModel, cube: HsiCube, int8: bool = False) -> Bitstream:
    enc = loaded.model.encoder.cfg
    deg = Degradation(quantized=_quantized(loaded) if int8 else None)
    coded = encode_cube(loaded.model, cube, loaded.cfg.stripe_w, deg)
    return Bitstream((enc.B, enc.H_s, enc.W_s), cube.native_scale, coded)


def decode_stream(loaded: LoadedModel, stream: Bitstream, name: str = "") -> HsiCube:
    enc = loaded.model.encoder.cfg
    if tuple(stream.source) != (enc.B, enc.H_s, enc.W_s):
        raise DataError(f"bitstream stripe geometry {stream.source} does not match the decoder's "
                        f"{(enc.B, enc.H_s, enc.W_s)}")
    for s in stream.stripes:
        if s.shape != (enc.b, enc.h, enc.w):
            raise DataError(f"stripe {s.index} carries {s.shape} measurements, decoder expects "
                            f"{(enc.b, enc.h, enc.w)}")
    if not stream.stripes:
        raise DataError("bitstream holds no stripes")
    indices = sorted(s.index for s in stream.stripes)
    if indices != list(range(len(indices))):
        raise DataError(f"bitstream stripe indices are not contiguous: {indices}")
    return HsiCube(decode_stripes(loaded.model, stream.stripes), stream.native_scale, name)


def cmd_encode(cfg: RunConfig, checkpoint, cubes: Sequence, out_dir, int8: bool = False,
               force: bool = False) -> list[Path]:
    loaded = read_checkpoint(checkpoint, cfg, force)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in cubes:
        cube = load_cube(path)
        if (cube.B, cube.H) != (cfg.B, cfg.H):
            raise DataError(f"{path}: cube is {cube.B}x{cube.H}x{cube.W}, config expects B={cfg.B}, H={cfg.H}")
        target = out / f"{Path(path).stem}.rtcz"
        save_bitstream(encode_to_stream(loaded, cube, int8), target)
        written.append(target)
    return written


def cmd_decode(cfg: RunConfig, checkpoint, streams: Sequence, out_dir, force: bool = False) -> list[Path]:
    loaded = read_checkpoint(checkpoint, cfg, force)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in streams:
        stem = Path(path).stem
        target = out / f"{stem}.hsic"
        save_cube(decode_stream(loaded, load_bitstream(path), stem), target)
        written.append(target)
    return written


# --- evaluate ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    text: str
    mask: Optional[MaskSpec] = None
    snr_db: float = math.inf
    int8: Optional[str] = None  # "pq" or "qat"


SCENARIO_HELP = ("clean | mask:{PM,BM,CM}:LO-HI | noise:{25,30,35,40} (any positive dB) | int8:{pq,qat}")


def parse_scenario(text: str, B: int, seed: int = 0) -> Scenario:
    parts = text.strip().split(":")
    try:
        if parts == ["clean"]:
            return Scenario(text)
        if parts[0] == "mask" and len(parts) == 3:
            lo, hi = (int(v) for v in parts[2].split("-"))
            if hi >= B:
                raise ValueError(f"band range {lo}-{hi} exceeds B={B}")
            return Scenario(text, mask=MaskSpec(parts[1].upper(), lo, hi, seed=seed))
        if parts[0] == "noise" and len(parts) == 2:
            db = float(parts[1])
            if not db > 0:
                raise ValueError("SNR must be positive")
            return Scenario(text, snr_db=db)
        if parts[0] == "int8" and len(parts) == 2 and parts[1] in ("pq", "qat"):
            return Scenario(text, int8=parts[1])
    except ValueError as exc:
        raise ValueError(f"bad scenario {text!r}: {exc}; valid forms: {SCENARIO_HELP}") from None
    raise ValueError(f"unknown scenario {text!r}; valid forms: {SCENARIO_HELP}")


def evaluate_scenario(loaded: LoadedModel, cubes: Sequence[HsiCube], scenario: Scenario,
                      png_dir=None, n_png: int = 2) -> list[dict]:
    """Per-cube metric rows plus a final ``mean`` row."""
    if scenario.int8 == "qat" and not loaded.qat:
        raise DataError("scenario int8:qat needs a checkpoint produced by QAT training")
    quant = _quantized(loaded) if scenario.int8 else None
    rows = []
    for k, cube in enumerate(cubes):
        mask = gen_mask(scenario.mask, (cube.B, cube.H, loaded.cfg.stripe_w)) if scenario.mask else None
        deg = Degradation(mask=mask, snr_db=scenario.snr_db, quantized=quant,
                          noise_seed=int(np.random.SeedSequence([loaded.cfg.seed, k]).generate_state(1)[0]))
        rec = decode_stripes(loaded.model, encode_cube(loaded.model, cube, loaded.cfg.stripe_w, deg))
        m = evaluate_metrics(cube.data, rec, cube.native_scale)
        masked = 0.0 if mask is None else mask.masked_fraction()
        rows.append({"scenario": scenario.text, "cube": cube.name, "psnr": m.psnr, "rmse": m.rmse,
                     "sam": m.sam, "masked_fraction": masked})
        if png_dir is not None and k < n_png:
            degraded = cube.data
            if mask is not None:
                degraded = cube_from_stripes(np.stack([apply_mask(s, mask) for s in stripes_of(cube, loaded.cfg.stripe_w)]))
            bands = scaled_bands(cube.B)
            safe = scenario.text.replace(":", "_")
            save_png([false_color(cube.data, bands), false_color(degraded, bands), false_color(rec, bands)],
                     Path(png_dir) / f"{cube.name}_{safe}.png")
    mean = {"scenario": scenario.text, "cube": "mean"}
    for key in ("psnr", "rmse", "sam", "masked_fraction"):
        mean[key] = float(np.mean([r[key] for r in rows]))
    return rows + [mean]


def cmd_evaluate(cfg: RunConfig, checkpoint, data_dir, scenarios: Sequence[str], out_dir,
                 split: str = "test", n_png: int = 2, force: bool = False) -> Path:
    parsed = [parse_scenario(s, cfg.B, cfg.seed) for s in scenarios]
    loaded = read_checkpoint(checkpoint, cfg, force)
    cubes = load_dataset(data_dir, cfg, split)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sc in parsed:
        rows.extend(evaluate_scenario(loaded, cubes, sc, out, n_png))
    write_csv(rows, out / "metrics.csv", METRIC_FIELDS)
    return out / "metrics.csv"


# --- quantize ----------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantReport:
    scale: float
    sqnr_db: float
    max_code: int

    def lines(self) -> list[str]:
        return [f"encoder.weight scale {self.scale:.6e}", f"encoder.weight SQNR {self.sqnr_db:.2f} dB",
                f"encoder.weight max |code| {self.max_code}"]


def quantize_model(loaded: LoadedModel) -> tuple[QuantizedEncoder, QuantReport]:
    w = loaded.model.encoder.weight.data
    q = quantize_pq(w)
    return q, QuantReport(q.scale, sqnr_db(w, q.dequantize()), int(np.abs(q.weights_i8.astype(int)).max()))


def cmd_quantize(checkpoint, out_path) -> QuantReport:
    """Post-training int8 quantization of the encoder; the decoder stays in float."""
    ckpt = load_checkpoint(checkpoint)
    loaded = restore(ckpt)
    q, report = quantize_model(loaded)
    ckpt.entries["quant/encoder.weight"] = q.weights_i8
    ckpt.entries["quant/encoder.scale"] = np.array(q.scale, dtype=np.float64)
    save_checkpoint(ckpt, out_path)
    return report


# --- baseline ----------------------------------------------------------------------------


def pinv_reconstruct(model: Rtcs, cube: HsiCube, stripe_w: int) -> np.ndarray:
    """Minimum-norm least-squares inverse of the learned measurement matrix."""
    enc = model.encoder
    psi = as_measurement_matrix(enc.weight.data.astype(np.float64), enc.cfg)
    inv = np.linalg.pinv(psi)
    stripes = stripes_of(cube, stripe_w)
    z = model.measure(stripes).reshape(len(stripes), -1).astype(np.float64)
    rec = (z @ inv.T).reshape(stripes.shape)
    return cube_from_stripes(np.clip(rec, 0.0, 1.0))


def pinv_psnr(model: Rtcs, cubes: Sequence[HsiCube], stripe_w: int) -> float:
    return float(np.mean([psnr(c.data, pinv_reconstruct(model, c, stripe_w)) for c in cubes]))
