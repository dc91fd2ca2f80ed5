"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The learning criteria (5 to 9) train four desk-profile models for 1000 epochs
each on the default synthetic dataset. On one CPU core the module takes about
twenty minutes.
"""

import struct
import time
from dataclasses import replace

import numpy as np
import pytest

from stripecs.autodiff import (
    Tensor,
    add,
    batch_slice,
    bilinear_upsample2x,
    concat_batch,
    concat_channels,
    conv2d,
    grad_check,
    leaky_relu,
    mean_all,
    mul,
    scale,
    sub,
    sum_all,
)
from stripecs.cli import main
from stripecs.config import FULL_PROFILE, RunConfig
from stripecs.decoder import DecoderConfig, build, param_count, stages_for
from stripecs.encoder import (
    as_measurement_matrix,
    conv_matrix,
    encode,
    encode_int8,
    gram_cost,
    init_weights,
    shape_for_rate,
)
from stripecs.formats import Bitstream, Checkpoint, FormatError
from stripecs.hsi_data import CubeFormatError, DatasetManifest, load_cube, save_cube
from stripecs.objectives import aug_loss, l1_loss, sam_loss, total_loss
from stripecs.pipeline import (
    MODEL_FILE,
    QAT_FILE,
    cmd_quantize,
    cmd_synth,
    cmd_train,
    evaluate_scenario,
    load_dataset,
    parse_scenario,
    pinv_psnr,
    read_checkpoint,
)
from stripecs.training import stripes_of

TRAIN_BUDGET_S = 30 * 60
SNR_LEVELS = (25, 30, 35, 40)


# --- shared desk runs ------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = RunConfig()
    root = tmp_path_factory.mktemp("desk_data")
    cmd_synth(cfg, root)
    return cfg, root, load_dataset(root, cfg, "test")


@pytest.fixture(scope="module")
def runs(desk, tmp_path_factory):
    """Train each named variant once, on first use."""
    cfg, root, _ = desk
    variants = {
        "main": dict(qat=True),
        "no_sam": dict(alpha=0.0),
        "no_aug": dict(aug=False),
        "noise": dict(noise_train=True),
    }
    done = {}

    def get(name):
        if name not in done:
            out = tmp_path_factory.mktemp(f"run_{name}")
            start = time.perf_counter()
            cmd_train(replace(cfg, **variants[name]), root, out)
            done[name] = (out, time.perf_counter() - start)
        return done[name]

    return get


def load(runs, name, file=MODEL_FILE):
    out, _ = runs(name)
    return read_checkpoint(out / file)


def mean_of(loaded, cubes, scenario, key="psnr"):
    rows = evaluate_scenario(loaded, cubes, parse_scenario(scenario, loaded.cfg.B, loaded.cfg.seed))
    return rows[-1][key]


def contiguous_range(B, frac=0.2):
    n = round(frac * B)
    lo = (B - n) // 2
    return lo, lo + n - 1


# --- criteria -------------------------------------------------------------------


class TestAcceptance:
    def test_01_gradient_suite(self, verdict):
        rng = np.random.default_rng(1)
        r = rng.standard_normal
        c_grp, c_up, c_cat = r((2, 6, 3, 5)), r((1, 2, 6, 2)), r((3, 5, 2, 2))
        mask = (rng.random((2, 4, 3, 2)) > 0.3).astype(float)

        def structural(a, b):
            cat = concat_channels(a, b)
            both = concat_batch(cat, batch_slice(cat, 0, 1))
            return sum_all(mul(leaky_relu(add(sub(both, scale(both, 0.3)), mul(both, both))), Tensor(c_cat)))

        checks = {
            "conv2d": (lambda x, w: mean_all(leaky_relu(conv2d(x, w, 1, 1))), [r((2, 3, 5, 5)), r((4, 3, 3, 3))]),
            "conv2d grouped strided": (lambda x, w: sum_all(mul(conv2d(x, w, (2, 1), (1, 2), groups=3), Tensor(c_grp))),
                                       [r((2, 6, 6, 3)), r((6, 2, 3, 3))]),
            "encoder conv 9x1 stride 4": (lambda x, w: mean_all(conv2d(x, w, (4, 4), (4, 0))),
                                          [r((1, 8, 16, 4)), r((3, 8, 9, 1))]),
            "bilinear_upsample2x": (lambda x: sum_all(mul(bilinear_upsample2x(x), Tensor(c_up))), [r((1, 2, 3, 1))]),
            "leaky_relu, concat, elementwise": (structural, [r((2, 2, 2, 2)), r((2, 3, 2, 2))]),
            "l1_loss": (lambda a, b: l1_loss(a, b), [r((2, 4, 3, 2)), r((2, 4, 3, 2))]),
            "sam_loss": (lambda a, b: sam_loss(a, b), [rng.random((2, 4, 3, 2)) + 0.1, rng.random((2, 4, 3, 2)) + 0.1]),
            "total_loss": (lambda a, b: total_loss(a, b), [rng.random((2, 4, 3, 2)) + 0.1, rng.random((2, 4, 3, 2)) + 0.1]),
            "aug_loss": (lambda a, b, m: aug_loss(a, b, m, mask),
                         [rng.random((2, 4, 3, 2)) + 0.1 for _ in range(3)]),
        }
        start = time.perf_counter()
        errors = {name: grad_check(fn, ins) for name, (fn, ins) in checks.items()}
        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        ok = errors[worst] < 1e-4 and elapsed < 120
        verdict(1, ok, f"{len(errors)} checks, worst rel err {errors[worst]:.2e} ({worst}) < 1e-4, {elapsed:.1f}s < 120s")

    def test_02_encoder_duality(self, verdict):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        w = np.array([10.0, 20.0, 30.0, 40.0]).reshape(1, 1, 2, 2)
        w1, w2, w3, w4 = w.ravel()
        wm = np.array([
            [w1, w2, 0, w3, w4, 0, 0, 0, 0],
            [0, w1, w2, 0, w3, w4, 0, 0, 0],
            [0, 0, 0, w1, w2, 0, w3, w4, 0],
            [0, 0, 0, 0, w1, w2, 0, w3, w4],
        ])
        worked = (np.array_equal(conv_matrix(w, (1, 3, 3), (1, 1), (0, 0)), wm)
                  and np.array_equal(conv2d(Tensor(x), Tensor(w)).data.ravel(), wm @ x.ravel()))

        rng = np.random.default_rng(2)
        pairs, worst = 0, 0.0
        while pairs < 100:
            B = int(rng.integers(8, 41))
            H = int(rng.choice([8, 12, 16, 24]))
            W = int(rng.choice([4, 8]))
            try:
                cfg = shape_for_rate(B, H, W, float(rng.choice([0.005, 0.01, 0.02, 0.05, 0.1])))
            except ValueError:
                continue
            wts = init_weights(cfg, rng, np.float64)
            psi = as_measurement_matrix(wts, cfg)
            for _ in range(2):
                xs = rng.random((B, H, W))
                z = encode(xs, wts, cfg).data.astype(np.float64).ravel()
                ref = psi @ xs.ravel()
                worst = max(worst, float(np.max(np.abs(z - ref)) / np.max(np.abs(ref))))
                pairs += 1
        verdict(2, worked and worst < 1e-5,
                f"worked 3x3/2x2 example exact: {worked}; {pairs} pairs, worst rel err {worst:.2e} < 1e-5")

    def test_03_shape_arithmetic(self, verdict):
        cfg = shape_for_rate(172, 128, 4, 0.01)
        shape = (cfg.b, cfg.h, cfg.w)
        rate_ok = cfg.achieved_rate == pytest.approx(864 / 88064, rel=1e-12)
        gram = gram_cost(128, 4, 172)
        ok = shape == (27, 32, 1) and rate_ok and gram == 45_088_768
        verdict(3, ok, f"shape {shape}, rate {cfg.achieved_rate:.5%} (864/88064), gram cost {gram:,}")

    def test_04_parameter_accounting(self, verdict):
        enc = shape_for_rate(172, 128, 4, 0.01)
        n_enc = int(np.prod(enc.weight_shape))
        rng = np.random.default_rng(4)
        matched = 0
        while matched < 20:
            try:
                e = shape_for_rate(int(rng.choice([16, 24, 32])), 16, 4, float(rng.choice([0.01, 0.05, 0.0625])))
            except ValueError:
                continue
            groups = int(rng.choice([1, 2, 4]))
            F = groups * int(rng.integers(1, 4)) * 2
            growth = int(rng.choice([2, 4]))
            cfg = DecoderConfig(n_f=int(rng.integers(0, 3)), N_base=int(rng.integers(1, 13)),
                                c_s=int(rng.integers(1, 7)), frdb_width=F, frdb_growth=growth, c_g=groups,
                                upsample_stages=stages_for(e), B_out=e.B)
            net = build(cfg, e, np.random.default_rng(matched))
            if net.num_parameters() + int(np.prod(e.weight_shape)) != param_count(cfg, e):
                break
            matched += 1
        full = RunConfig(**FULL_PROFILE)
        total = param_count(full.decoder_config(), full.encoder_config())
        ok = n_enc == 41_796 and matched == 20 and 5.0e6 <= total <= 7.5e6
        verdict(4, ok, f"encoder weights {n_enc:,}; {matched}/20 random configs exact; "
                       f"full profile {total / 1e6:.3f}M in [5.0M, 7.5M]")

    @pytest.mark.slow
    def test_05_desk_learning(self, verdict, desk, runs):
        cfg, _, test = desk
        loaded = load(runs, "main")
        _, seconds = runs("main")
        learned = mean_of(loaded, test, "clean")
        baseline = pinv_psnr(loaded.model, test, cfg.stripe_w)
        gain = learned - baseline
        ok = gain >= 3.0 and seconds <= TRAIN_BUDGET_S
        verdict(5, ok, f"test PSNR {learned:.2f} dB vs pseudo-inverse {baseline:.2f} dB "
                       f"(+{gain:.2f} >= 3 dB); {cfg.epochs} epochs + QAT in {seconds:.0f}s <= {TRAIN_BUDGET_S}s")

    @pytest.mark.slow
    def test_06_sam_ablation(self, verdict, desk, runs):
        _, _, test = desk
        with_sam = mean_of(load(runs, "main"), test, "clean", "sam")
        without = mean_of(load(runs, "no_sam"), test, "clean", "sam")
        verdict(6, with_sam < without, f"test SAM alpha=0.1 {with_sam:.3f} deg vs alpha=0 {without:.3f} deg (must be strictly lower)")

    @pytest.mark.slow
    def test_07_stripe_robustness(self, verdict, desk, runs):
        cfg, _, test = desk
        lo, hi = contiguous_range(cfg.B)
        drops = {}
        for name in ("main", "no_aug"):
            m = load(runs, name)
            clean = mean_of(m, test, "clean")
            drops[name] = {kind: clean - mean_of(m, test, f"mask:{kind}:{lo}-{hi}") for kind in ("CM", "BM")}
        aug, plain = drops["main"], drops["no_aug"]
        ok = (aug["CM"] <= 3.0 and aug["CM"] < plain["CM"]
              and np.isfinite(aug["BM"]) and aug["BM"] < plain["BM"])
        verdict(7, ok, f"bands {lo}-{hi}: CM drop {aug['CM']:.2f} dB (need <= 3 and < no-aug {plain['CM']:.2f}); "
                       f"BM drop {aug['BM']:.2f} dB (need < no-aug {plain['BM']:.2f})")

    @pytest.mark.slow
    def test_08_noise_robustness(self, verdict, desk, runs):
        _, _, test = desk
        m = load(runs, "noise")
        scores = [mean_of(m, test, f"noise:{db}") for db in SNR_LEVELS]
        monotone = all(a <= b for a, b in zip(scores, scores[1:]))
        spread = scores[-1] - scores[0]
        listing = ", ".join(f"{db} dB: {s:.2f}" for db, s in zip(SNR_LEVELS, scores))
        verdict(8, monotone and spread <= 2.0,
                f"PSNR {listing}; nondecreasing {monotone}, spread {spread:.2f} dB <= 2")

    @pytest.mark.slow
    def test_09_quantization(self, verdict, desk, runs):
        cfg, _, test = desk
        plain = load(runs, "main")
        qat = load(runs, "main", QAT_FILE)
        clean = mean_of(plain, test, "clean")
        pq = mean_of(plain, test, "int8:pq")
        after_qat = mean_of(qat, test, "int8:qat")

        again = load(runs, "main", QAT_FILE)
        identical = True
        for cube in test:
            for i, s in enumerate(stripes_of(cube, cfg.stripe_w)):
                a = encode_int8(s, qat.quant, qat.model.encoder.cfg, i)
                b = encode_int8(s, again.quant, again.model.encoder.cfg, i)
                identical &= a.data.tobytes() == b.data.tobytes() and a.scale == b.scale
        drop = clean - pq
        ok = drop <= 2.5 and after_qat >= pq and identical
        verdict(9, ok, f"PQ drop {drop:.2f} dB <= 2.5 ({clean:.2f} -> {pq:.2f}); "
                       f"QAT {after_qat:.2f} >= PQ {pq:.2f}; int8 codes bit-identical across runs: {identical}")

    def test_10_determinism_and_formats(self, verdict, desk, tmp_path):
        _, root, _ = desk
        manifest = DatasetManifest.load(root)
        cube_path = root / f"{manifest.splits['test'][0]}.hsic"
        lo, hi = contiguous_range(32)
        short = ["--set", "epochs=20", "--set", "val_every=10", "--set", "checkpoint_every=10"]
        artefacts = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            codes = [
                main(["train", "--data", str(root), "--out", str(out)] + short),
                main(["encode", "--checkpoint", str(out / MODEL_FILE), "--out", str(out / "f32"), str(cube_path)]
                     + short),
                main(["encode", "--int8", "--checkpoint", str(out / MODEL_FILE), "--out", str(out / "i8"),
                      str(cube_path)] + short),
                main(["evaluate", "--checkpoint", str(out / MODEL_FILE), "--data", str(root), "--out",
                      str(out / "eval"), "--png", "0", "--scenario", "clean", "--scenario",
                      f"mask:CM:{lo}-{hi}", "--scenario", "noise:30", "--scenario", "int8:pq"] + short),
            ]
            assert codes == [0, 0, 0, 0]
            files = [MODEL_FILE, "checkpoint.rtck", "train_log.csv", f"f32/{cube_path.stem}.rtcz",
                     f"i8/{cube_path.stem}.rtcz", "eval/metrics.csv"]
            artefacts.append({f: (out / f).read_bytes() for f in files})
        reproducible = artefacts[0] == artefacts[1]

        cube = load_cube(cube_path)
        save_cube(cube, tmp_path / "copy.hsic")
        cube_trip = (tmp_path / "copy.hsic").read_bytes() == cube_path.read_bytes()
        raw_ckpt = artefacts[0][MODEL_FILE]
        ckpt_trip = Checkpoint.from_bytes(raw_ckpt).to_bytes() == raw_ckpt
        raw_stream = artefacts[0][f"i8/{cube_path.stem}.rtcz"]
        stream_trip = Bitstream.from_bytes(raw_stream).to_bytes() == raw_stream

        rejected = 0
        raw_cube = cube_path.read_bytes()
        for raw, parse, err in ((raw_ckpt, Checkpoint.from_bytes, FormatError),
                                (raw_stream, Bitstream.from_bytes, FormatError),
                                (raw_cube, None, CubeFormatError)):
            for bad in (b"XXXX" + raw[4:], raw[:4] + struct.pack("<I", 99) + raw[8:]):
                try:
                    if parse is None:
                        (tmp_path / "bad.hsic").write_bytes(bad)
                        load_cube(tmp_path / "bad.hsic")
                    else:
                        parse(bad)
                except err:
                    rejected += 1
        ok = reproducible and cube_trip and ckpt_trip and stream_trip and rejected == 6
        verdict(10, ok, f"two seeded runs byte-identical over {len(artefacts[0])} artefacts: {reproducible}; "
                        f"round-trips cube {cube_trip} checkpoint {ckpt_trip} bitstream {stream_trip}; "
                        f"corrupt magic/version rejected {rejected}/6")


class TestTrainedModel:
    """Measured properties of the desk-trained model beyond the numbered criteria."""

    @pytest.mark.slow
    def test_encoder_sqnr(self, runs, tmp_path):
        out, _ = runs("main")
        report = cmd_quantize(out / MODEL_FILE, tmp_path / "int8.rtck")
        assert report.sqnr_db >= 30.0
        assert report.max_code == 127
