from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict

from .errors import ConfigError, GsmcError
from .metrics import analyze_cloud, compare_files, qp_sweep
from .models import GROUP_NAMES, MBS_CHOICES, PCA_MODES
from .pipeline import ATTRIBUTE_GROUPS, EncodeConfig, run_decode, run_encode
from .ply import load_cloud, save_cloud
from .report import (
    dumps_json,
    generate_markdown_summary,
    render_analyze_report,
    render_compare_report,
    render_encode_report,
    render_sweep,
    write_markdown,
)
from .synthetic import generate_cloud

LOGGER = logging.getLogger("gsmc")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from exc


def _assignment(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected GROUP=VALUE, got {text!r}")
    return name, value


def _add_layout_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override its values.")
    parser.add_argument("--k", type=int, help="Retained PCA components (multiple of 3, default 12).")
    parser.add_argument("--pca-mode", choices=PCA_MODES, help="SH AC reduction mode (default joint).")
    parser.add_argument("--mbs", type=int, choices=MBS_CHOICES, help="Largest MiniPLAS block size (default 4).")
    parser.add_argument("--iterations", type=int, help="MiniPLAS passes per block size (default 1).")
    parser.add_argument("--block-sizes", type=_int_list, help="Explicit MiniPLAS block sizes, e.g. 8,4.")
    parser.add_argument("--seed", type=int, help="Seed for MiniPLAS grouping and random baselines.")
    parser.add_argument(
        "--no-rate-guard",
        dest="rate_guard",
        action="store_false",
        default=None,
        help="Keep MiniPLAS passes even when they grow the internal-lossless maps.",
    )
    parser.add_argument(
        "--weight",
        type=_assignment,
        action="append",
        default=[],
        metavar="GROUP=W",
        help=f"MiniPLAS channel weight per group ({', '.join(GROUP_NAMES)}).",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsmc", description="Gaussian splat compression through 2D attribute maps")
    parser.add_argument("--json", action="store_true", help="Print machine-readable JSON reports.")
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1, help="Parallel image coders (default: all cores)."
    )
    parser.add_argument("--verbose", action="store_true", help="Log debug details to stderr.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    encode = subparsers.add_parser("encode", help="Compress a 3DGS PLY file into a container")
    encode.add_argument("input", type=Path)
    encode.add_argument("output", type=Path)
    _add_layout_options(encode)
    encode.add_argument(
        "--qp",
        type=_assignment,
        action="append",
        default=[],
        metavar="GROUP=QP",
        help=f"Lossy qp per attribute group ({', '.join(ATTRIBUTE_GROUPS)}); 0 keeps it lossless.",
    )
    encode.add_argument("--qp-all", type=int, help="One qp for every attribute group.")
    encode.add_argument("--backend", choices=("internal", "external"), help="Codec backend (default internal).")
    encode.add_argument("--report", type=Path, help="Also write a Markdown summary to this path.")

    decode = subparsers.add_parser("decode", help="Reconstruct a PLY file from a container")
    decode.add_argument("input", type=Path)
    decode.add_argument("output", type=Path)

    compare = subparsers.add_parser("compare", help="Per-attribute PSNR between two PLY files")
    compare.add_argument("original", type=Path)
    compare.add_argument("decoded", type=Path)
    compare.add_argument(
        "--render-cmd", help="Renderer command template with {original} and {decoded}; stdout is reported."
    )

    analyze = subparsers.add_parser("analyze", help="Layout and PCA study of a PLY file")
    analyze.add_argument("input", type=Path)
    _add_layout_options(analyze)
    analyze.add_argument("--qp-sweep", type=_int_list, help="Also sweep these attribute qps, e.g. 0,2,4,6.")

    gen = subparsers.add_parser("gen", help="Write a synthetic clustered cloud")
    gen.add_argument("output", type=Path)
    gen.add_argument("--count", type=int, default=10000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--clusters", type=int, default=8)
    gen.add_argument("--noise", type=float, default=0.02)

    return parser


def _config_from_args(args: argparse.Namespace, **extra: Any) -> EncodeConfig:
    overrides: Dict[str, Any] = {
        "k": args.k,
        "pca_mode": args.pca_mode,
        "mbs": args.mbs,
        "iterations": args.iterations,
        "block_sizes": tuple(args.block_sizes) if args.block_sizes else None,
        "seed": args.seed,
        "rate_guard": args.rate_guard,
        "threads": args.threads,
        **extra,
    }
    try:
        if args.weight:
            overrides["weights"] = {name: float(value) for name, value in args.weight}
        qp_pairs = getattr(args, "qp", [])
        qp_all = getattr(args, "qp_all", None)
        if qp_pairs or qp_all is not None:
            qp = {group: qp_all for group in ATTRIBUTE_GROUPS} if qp_all is not None else {}
            qp.update({name: int(value) for name, value in qp_pairs})
            overrides["qp"] = qp
    except ValueError as exc:
        raise ConfigError(f"invalid numeric option: {exc}") from exc

    if args.config is not None:
        return EncodeConfig.from_file(args.config, **overrides)
    return EncodeConfig.from_json({}, **overrides)


def _emit(args: argparse.Namespace, payload: Any, text: str) -> None:
    print(dumps_json(payload) if args.json else text)


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "encode":
        config = _config_from_args(
            args, input=args.input, output=args.output, backend=args.backend
        )
        result = run_encode(config)
        if args.report is not None:
            write_markdown(args.report, generate_markdown_summary(result.report, source=args.input))
        _emit(args, result.report.as_json(), render_encode_report(result.report))
        return 0

    if args.command == "decode":
        cloud = run_decode(args.input, args.output, threads=args.threads)
        _emit(args, {"n": cloud.n, "output": str(args.output)}, f"Decoded {cloud.n} primitives to {args.output}")
        return 0

    if args.command == "compare":
        report = compare_files(args.original, args.decoded, render_cmd=args.render_cmd)
        _emit(args, report.as_json(), render_compare_report(report))
        return 0

    if args.command == "analyze":
        config = _config_from_args(args)
        cloud = load_cloud(args.input)
        report = analyze_cloud(cloud, config)
        payload: Dict[str, Any] = report.as_json()
        text = render_analyze_report(report)
        if args.qp_sweep:
            points = qp_sweep(cloud, args.qp_sweep, config)
            payload["qp_sweep"] = [point.as_json() for point in points]
            text += "\n\nqp sweep\n" + render_sweep(points)
        _emit(args, payload, text)
        return 0

    if args.command == "gen":
        cloud = generate_cloud(args.count, seed=args.seed, clusters=args.clusters, noise=args.noise)
        save_cloud(cloud, args.output)
        _emit(args, {"n": cloud.n, "output": str(args.output)}, f"Wrote {cloud.n} primitives to {args.output}")
        return 0

    raise ConfigError(f"Unknown command: {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        parser.error("--threads must be >= 1")

    try:
        return _dispatch(args)
    except GsmcError as exc:
        LOGGER.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        LOGGER.error("%s", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover - exercised via CLI entry point
    raise SystemExit(main())
