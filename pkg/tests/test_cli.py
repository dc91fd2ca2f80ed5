import csv
import math

import numpy as np
import pytest

from stripecs.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from stripecs.degradation import MaskSpec, gen_mask
from stripecs.formats import load_bitstream, load_checkpoint
from stripecs.hsi_data import DatasetManifest, load_cube
from stripecs.pipeline import (
    LATEST_FILE,
    LOG_FILE,
    METRIC_FIELDS,
    MODEL_FILE,
    QAT_FILE,
    Scenario,
    evaluate_scenario,
    parse_scenario,
    read_checkpoint,
)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_args, tiny_data):
    """One tiny training run with QAT, shared by the read-only tests below."""
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *tiny_args, "--set", "qat=true", "--data", str(tiny_data), "--out", str(out)]) == EXIT_OK
    return out


class TestSynth:
    def test_counts_and_determinism(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["--set", "H=16", "--set", "W=8", "--set", "B=16", "--set", "K=2", "--set", "s_r=0.0625"]
        assert main(["synth", *args, "--out", str(a)]) == EXIT_OK
        assert "50 cubes (40/5/5)" in capsys.readouterr().out
        assert main(["synth", *args, "--out", str(b)]) == EXIT_OK
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()
        assert len(DatasetManifest.load(a).cubes) == 50

    def test_refuses_non_empty_dir(self, tmp_path, tiny_args):
        (tmp_path / "x").write_text("keep")
        assert main(["synth", *tiny_args, "--out", str(tmp_path)]) == EXIT_DATA
        assert main(["synth", *tiny_args, "--out", str(tmp_path), "--overwrite"]) == EXIT_OK

    def test_too_few_bands(self, tmp_path):
        assert main(["synth", "--set", "B=2", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        assert main(["synth", "--set", "bogus=1", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestTrain:
    def test_outputs(self, trained):
        for name in (MODEL_FILE, QAT_FILE, LATEST_FILE, LOG_FILE, "config.txt"):
            assert (trained / name).is_file()
        rows = read_rows(trained / LOG_FILE)
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
        assert read_checkpoint(trained / QAT_FILE).qat
        assert read_checkpoint(trained / QAT_FILE).quant is not None

    def test_deterministic_and_resumable(self, tmp_path, tiny_args, tiny_data):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", *tiny_args, "--data", str(tiny_data), "--out", str(a)]) == EXIT_OK
        assert main(["train", *tiny_args, "--set", "epochs=2", "--data", str(tiny_data), "--out", str(b)]) == EXIT_OK
        assert main(["train", *tiny_args, "--data", str(tiny_data), "--out", str(b),
                     "--resume", str(b / LATEST_FILE)]) == EXIT_OK
        assert (a / MODEL_FILE).read_bytes() == (b / MODEL_FILE).read_bytes()
        assert (a / LOG_FILE).read_bytes() == (b / LOG_FILE).read_bytes()

    def test_resume_hash_mismatch(self, tmp_path, tiny_args, tiny_data, trained):
        args = ["train", *tiny_args, "--set", "alpha=0.3", "--data", str(tiny_data), "--out", str(tmp_path),
                "--resume", str(trained / MODEL_FILE)]
        assert main(args) == EXIT_DATA
        assert main(args + ["--force"]) == EXIT_OK

    def test_missing_data(self, tmp_path, tiny_args):
        assert main(["train", *tiny_args, "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, tiny_args, tiny_data):
        args = ["train", *tiny_args, "--set", "lr=1e30", "--set", "weight_decay=0",
                "--data", str(tiny_data), "--out", str(tmp_path)]
        assert main(args) == EXIT_NUMERIC


class TestEncodeDecode:
    def test_round_trip_shape(self, tmp_path, tiny_args, tiny_data, trained):
        cube = tiny_data / f"{DatasetManifest.load(tiny_data).splits['test'][0]}.hsic"
        streams, decoded = tmp_path / "s", tmp_path / "d"
        ckpt = str(trained / MODEL_FILE)
        assert main(["encode", *tiny_args, "--checkpoint", ckpt, "--out", str(streams), str(cube)]) == EXIT_OK
        stream = streams / f"{cube.stem}.rtcz"
        assert main(["decode", *tiny_args, "--checkpoint", ckpt, "--out", str(decoded), str(stream)]) == EXIT_OK
        back = load_cube(decoded / f"{cube.stem}.hsic")
        assert back.data.shape == load_cube(cube).data.shape

    def test_int8_stream_is_smaller_and_stable(self, tmp_path, tiny_args, tiny_data, trained):
        cube = tiny_data / f"{DatasetManifest.load(tiny_data).splits['test'][0]}.hsic"
        ckpt = str(trained / MODEL_FILE)
        for name, extra in (("f", []), ("q", ["--int8"]), ("q2", ["--int8"])):
            assert main(["encode", *tiny_args, *extra, "--checkpoint", ckpt, "--out", str(tmp_path / name),
                         str(cube)]) == EXIT_OK
        f = load_bitstream(tmp_path / "f" / f"{cube.stem}.rtcz")
        q_bytes = (tmp_path / "q" / f"{cube.stem}.rtcz").read_bytes()
        assert len(q_bytes) < (tmp_path / "f" / f"{cube.stem}.rtcz").stat().st_size
        assert q_bytes == (tmp_path / "q2" / f"{cube.stem}.rtcz").read_bytes()
        assert all(s.dtype == "f32" for s in f.stripes)

    def test_geometry_mismatch(self, tmp_path, tiny_args, tiny_data, trained):
        cube = tiny_data / f"{DatasetManifest.load(tiny_data).splits['test'][0]}.hsic"
        ckpt = str(trained / MODEL_FILE)
        assert main(["encode", *tiny_args, "--checkpoint", ckpt, "--out", str(tmp_path), str(cube)]) == EXIT_OK
        other = ["--set", "s_r=0.125"]
        rc = main(["decode", *tiny_args, *other, "--checkpoint", ckpt, "--force", "--out", str(tmp_path / "d"),
                   str(tmp_path / f"{cube.stem}.rtcz")])
        assert rc == EXIT_DATA

    def test_corrupt_stream(self, tmp_path, tiny_args, trained):
        bad = tmp_path / "bad.rtcz"
        bad.write_bytes(b"XXXX" + bytes(40))
        rc = main(["decode", *tiny_args, "--checkpoint", str(trained / MODEL_FILE), "--out", str(tmp_path), str(bad)])
        assert rc == EXIT_DATA


class TestEvaluate:
    SCENARIOS = ["clean", "mask:CM:3-5", "mask:BM:3-5", "mask:PM:3-5", "noise:30", "int8:pq", "int8:qat"]

    def run(self, out, tiny_args, tiny_data, trained, scenarios=None, ckpt=QAT_FILE):
        args = ["evaluate", *tiny_args, "--checkpoint", str(trained / ckpt), "--data", str(tiny_data),
                "--out", str(out)]
        for s in scenarios or self.SCENARIOS:
            args += ["--scenario", s]
        return main(args)

    def test_csv_schema_and_means(self, tmp_path, tiny_args, tiny_data, trained):
        assert self.run(tmp_path, tiny_args, tiny_data, trained) == EXIT_OK
        rows = read_rows(tmp_path / "metrics.csv")
        assert list(rows[0].keys()) == list(METRIC_FIELDS)
        for sc in self.SCENARIOS:
            mine = [r for r in rows if r["scenario"] == sc]
            per_cube, mean = mine[:-1], mine[-1]
            assert len(per_cube) == 2 and mean["cube"] == "mean"
            for key in ("psnr", "rmse", "sam", "masked_fraction"):
                assert float(mean[key]) == pytest.approx(np.mean([float(r[key]) for r in per_cube]), abs=1e-9)
        cm = [r for r in rows if r["scenario"] == "mask:CM:3-5"][0]
        assert float(cm["masked_fraction"]) == pytest.approx(3 / 16)
        assert len(list(tmp_path.glob("*.png"))) == 2 * len(self.SCENARIOS)

    def test_deterministic(self, tmp_path, tiny_args, tiny_data, trained):
        for name in ("a", "b"):
            assert self.run(tmp_path / name, tiny_args, tiny_data, trained) == EXIT_OK
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_bad_scenario(self, tmp_path, tiny_args, tiny_data, trained, caplog):
        assert self.run(tmp_path, tiny_args, tiny_data, trained, ["blur:3"]) == EXIT_CONFIG
        assert "clean | mask" in caplog.text

    def test_qat_scenario_needs_qat_checkpoint(self, tmp_path, tiny_args, tiny_data, trained):
        assert self.run(tmp_path, tiny_args, tiny_data, trained, ["int8:qat"], ckpt=MODEL_FILE) == EXIT_DATA

    def test_empty_mask_equals_clean(self, tiny_data, trained):
        loaded = read_checkpoint(trained / MODEL_FILE)
        cubes = DatasetManifest.load(tiny_data).load_split(tiny_data, "test")
        clean = evaluate_scenario(loaded, cubes, parse_scenario("clean", 16))
        empty = evaluate_scenario(loaded, cubes, Scenario("mask", mask=MaskSpec("CM", 0, 3, max_band_frac=0.0)))
        assert [r["psnr"] for r in clean] == [r["psnr"] for r in empty]


class TestScenarios:
    def test_parse(self):
        assert parse_scenario("clean", 16).mask is None
        assert parse_scenario("noise:25", 16).snr_db == 25.0
        assert parse_scenario("int8:pq", 16).int8 == "pq"
        sc = parse_scenario("mask:cm:50-80", 172)
        assert (sc.mask.kind, sc.mask.band_lo, sc.mask.band_hi) == ("CM", 50, 80)
        assert math.isinf(sc.snr_db)

    def test_reference_cm_fraction(self):
        sc = parse_scenario("mask:CM:50-80", 172)
        assert gen_mask(sc.mask, (172, 128, 4)).masked_fraction() == pytest.approx(31 / 172)

    @pytest.mark.parametrize("text", ["blur", "mask:CM:5", "mask:CM:10-40", "noise:-3", "int8:fp16", "mask:XM:1-2"])
    def test_rejects(self, text):
        with pytest.raises(ValueError, match="valid forms|mask kind"):
            parse_scenario(text, 32)


class TestQuantize:
    def test_report_and_idempotence(self, tmp_path, trained, capsys):
        once, twice = tmp_path / "q1.rtck", tmp_path / "q2.rtck"
        assert main(["quantize", "--checkpoint", str(trained / MODEL_FILE), "--out", str(once)]) == EXIT_OK
        assert "SQNR" in capsys.readouterr().out
        assert main(["quantize", "--checkpoint", str(once), "--out", str(twice)]) == EXIT_OK
        a, b = load_checkpoint(once).entries, load_checkpoint(twice).entries
        assert a["quant/encoder.weight"].tobytes() == b["quant/encoder.weight"].tobytes()
        # only the encoder is quantized; the decoder stays in float
        assert a["param/f_rec.weight"].dtype == np.float32

    def test_default_output_name(self, tmp_path, trained):
        src = tmp_path / "m.rtck"
        src.write_bytes((trained / MODEL_FILE).read_bytes())
        assert main(["quantize", "--checkpoint", str(src)]) == EXIT_OK
        assert (tmp_path / "m_int8.rtck").is_file()

    def test_missing_checkpoint(self, tmp_path):
        assert main(["quantize", "--checkpoint", str(tmp_path / "none.rtck")]) == EXIT_DATA
