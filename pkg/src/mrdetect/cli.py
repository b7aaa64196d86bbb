"""Command-line entry point.

Exit codes: 0 success, 1 usage, config or input-data error, 2 missing or
unusable dependency (an earlier stage's artifact), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ALL_MODES, ConfigError, RunConfig, load_config
from .errors import DataError, DependencyError
from .nnutil import configure_determinism

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("mrdetect")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--out", default=d(None), help="run directory (overrides paths.out)")
    parser.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override a config value, e.g. --set detector.epochs=4")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrdetect", description="Multi-reconstruction synthetic face detector (toy scale).")
    _common(parser, suppress=False)
    common = _Parser(add_help=False)
    _common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toygen", parents=[common], help="write the toy dataset")
    p.add_argument("--stage", choices=["real", "synthetic", "all"], default="all",
                   help="real images only, synthetic classes only (needs trained generators), or both")

    p = sub.add_parser("train", parents=[common], help="train one component")
    p.add_argument("target", choices=["dm", "gan", "encoder", "detector"])
    p.add_argument("--mode", choices=ALL_MODES + ["all"], default=None,
                   help="detector input mode (default from config; 'all' trains the six)")

    p = sub.add_parser("reconstruct", parents=[common], help="compute GAN and DM reconstructions")
    p.add_argument("--input", default=None,
                   help="a single image; omit to fill the cache for every record of the split manifest")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained detector")
    p.add_argument("target", choices=["table", "robustness", "embeddings", "ablation"])
    return parser


def _run(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    if args.command == "toygen":
        outs: list[Path] = []
        if args.stage in ("real", "all"):
            outs += pipeline.make_real(cfg)
        if args.stage in ("synthetic", "all"):
            outs += pipeline.make_synthetic(cfg)
        return outs
    if args.command == "train":
        if args.target == "detector":
            modes = ALL_MODES if args.mode == "all" else [args.mode or cfg.detector.mode]
            return [p for m in modes for p in pipeline.train_detector_stage(cfg, m)]
        if args.mode is not None:
            raise ConfigError("--mode only applies to 'train detector'")
        stage = {"dm": pipeline.train_dm_stage, "gan": pipeline.train_gan_stage,
                 "encoder": pipeline.train_encoder_stage}[args.target]
        return stage(cfg)
    if args.command == "reconstruct":
        if args.input is None:
            return pipeline.reconstruct_manifest(cfg)
        image = Path(args.input)
        if not image.is_file():
            raise ConfigError(f"input image not found: {image}")
        outs, summary = pipeline.reconstruct_file(cfg, image)
        print(f"mse_gan={summary['mse_gan']:.6f} mse_dm={summary['mse_dm']:.6f}")
        return outs
    if args.command == "eval":
        if args.target == "table":
            outs, rep = pipeline.eval_table(cfg)
            print((cfg.dir("reports") / "table.txt").read_text(), end="")
            return outs
        if args.target == "ablation":
            outs, _ = pipeline.eval_ablation(cfg)
            print((cfg.dir("reports") / "ablation.txt").read_text(), end="")
            return outs
        if args.target == "robustness":
            outs, _ = pipeline.eval_robustness(cfg)
            print((cfg.dir("reports") / "robustness.txt").read_text(), end="")
            return outs
        return pipeline.eval_embeddings(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def _command_key(args: argparse.Namespace) -> str:
    parts = [args.command]
    for attr in ("stage", "target"):
        if getattr(args, attr, None):
            parts.append(getattr(args, attr))
    if getattr(args, "mode", None):
        parts.append(args.mode)
    return ".".join(parts)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        configure_determinism(cfg.threads)
        outputs = _run(args, cfg)
        manifest = pipeline.record_outputs(cfg, _command_key(args), outputs)
    except (ConfigError, DataError) as exc:
        print(f"mrdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DependencyError, CheckpointError) as exc:
        print(f"mrdetect: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # noqa: BLE001 - report, don't dump a traceback
        log.debug("failure", exc_info=True)
        print(f"mrdetect: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(outputs)} outputs; run manifest: {manifest}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
