"""Command-line entry point: ``stripecs {synth,train,encode,decode,evaluate,quantize}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .formats import FormatError
from .hsi_data import CubeFormatError
from .pipeline import (
    MODEL_FILE,
    SCENARIO_HELP,
    DataError,
    cmd_decode,
    cmd_encode,
    cmd_evaluate,
    cmd_quantize,
    cmd_synth,
    cmd_train,
)
from .training import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("stripecs")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration file")
    common.add_argument("--profile", choices=("desk", "full"), help="default table to start from")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (default: config out_dir / data_dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="stripecs", description="Stripe-wise hyperspectral compressed sensing.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty directory")

    p = sub.add_parser("train", parents=[common], help="train encoder and decoder")
    p.add_argument("--data", type=Path, help="dataset directory (default: config data_dir)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="resume despite a config hash mismatch")

    p = sub.add_parser("encode", parents=[common], help="cubes to bitstreams")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--int8", action="store_true", help="integer-only encoder path")
    p.add_argument("--force", action="store_true")
    p.add_argument("cubes", nargs="+", type=Path)

    p = sub.add_parser("decode", parents=[common], help="bitstreams to cubes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("streams", nargs="+", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="metrics CSV and previews")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--scenario", action="append", default=[], help=SCENARIO_HELP + " (repeatable)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--png", type=int, default=2, help="number of cubes to render as previews")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("quantize", parents=[common], help="int8 post-training quantization of the encoder")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.verb == "quantize":
        out = args.out or args.checkpoint.with_name(args.checkpoint.stem + "_int8.rtck")
        report = cmd_quantize(args.checkpoint, out)
        for line in report.lines():
            print(line)
        print(f"wrote {out}")
        return EXIT_OK

    cfg: RunConfig = parse_config(args.config, args.overrides, args.profile, args.seed)
    if args.verb == "synth":
        out = args.out or Path(cfg.data_dir)
        m = cmd_synth(cfg, out, args.overwrite)
        print(f"{len(m.cubes)} cubes ({cfg.n_train}/{cfg.n_val}/{cfg.n_test}) "
              f"of {cfg.B}x{cfg.H}x{cfg.W}, seed {cfg.seed} -> {out}")
    elif args.verb == "train":
        out = args.out or Path(cfg.out_dir)
        path = cmd_train(cfg, args.data or Path(cfg.data_dir), out, args.resume, args.force)
        print(f"wrote {path}")
    elif args.verb == "encode":
        out = args.out or Path(cfg.out_dir) / "streams"
        for path in cmd_encode(cfg, args.checkpoint, args.cubes, out, args.int8, args.force):
            print(f"wrote {path}")
    elif args.verb == "decode":
        out = args.out or Path(cfg.out_dir) / "decoded"
        for path in cmd_decode(cfg, args.checkpoint, args.streams, out, args.force):
            print(f"wrote {path}")
    elif args.verb == "evaluate":
        out = args.out or Path(cfg.out_dir) / "eval"
        path = cmd_evaluate(cfg, args.checkpoint, args.data or Path(cfg.data_dir),
                            args.scenario or ["clean"], out, args.split, args.png, args.force)
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FormatError, CubeFormatError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        # scenario strings and other argument values
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
