"""Rendering utilities for aligned text tables, JSON payloads and Markdown summaries."""
from __future__ import annotations

import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from .metrics import AnalyzeReport, CompareReport, SweepPoint
from .pipeline import EncodeReport


def _cell(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.4f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    cells = [[_cell(value) for value in row] for row in rows]
    widths = [len(header) for header in headers]
    for row in cells:
        widths = [max(width, len(value)) for width, value in zip(widths, row)]
    lines = ["  ".join(header.ljust(width) for header, width in zip(headers, widths))]
    lines.append("  ".join("-" * width for width in widths))
    for row in cells:
        lines.append("  ".join(value.rjust(width) for value, width in zip(row, widths)))
    return "\n".join(lines)


def render_encode_report(report: EncodeReport) -> str:
    times = report.map_generation_times()
    sections = [
        f"Encoded {report.n_real} primitives on a {report.side}x{report.side} grid "
        f"(k={report.k}, PCA {report.pca_mode})",
        "",
        "2D map generation time (s)",
        format_table(list(times), [list(times.values())]),
        "",
        "Coding stages (s)",
        format_table(
            ["Assemble", "Encode", "Pack"],
            [[report.timings.get(stage, 0.0) for stage in ("Assemble", "Encode", "Pack")]],
        ),
    ]
    if report.captured_variance is not None:
        sections += ["", f"PCA captured variance: {report.captured_variance:.4f}"]
    if report.miniplas.passes:
        sections += [
            "",
            "MiniPLAS passes",
            format_table(
                ["pass", "B", "ops", "cost before", "cost after", "map bytes", "accepted"],
                [
                    [index, record.block_size, record.op_count, record.cost_before, record.cost_after,
                     "-" if record.bytes_after is None else record.bytes_after, "yes" if record.accepted else "no"]
                    for index, record in enumerate(report.miniplas.passes)
                ],
            ),
        ]
    bitrate = report.bitrate
    groups = bitrate.group_bytes()
    sections += [
        "",
        format_table(
            ["group", "bytes"],
            [["header", bitrate.header_bytes]] + [[name, size] for name, size in groups.items()]
            + [["total", bitrate.total_bytes]],
        ),
        f"BPP: {bitrate.bpp:.4f}",
    ]
    return "\n".join(sections)


def render_compare_report(report: CompareReport) -> str:
    lines = [
        format_table(
            ["group", "PSNR (dB)", "max error", "peak"],
            [[quality.name, quality.psnr, quality.max_error, quality.peak] for quality in report.groups],
        ),
        f"Attribute PSNR: {_cell(report.attribute_psnr)} dB over {report.n} primitives",
        f"Matching: {report.matching} ({report.ambiguous} ambiguous)",
    ]
    if report.render_output:
        lines += ["", "Renderer output:", report.render_output]
    return "\n".join(lines)


def render_analyze_report(report: AnalyzeReport) -> str:
    lines = [
        f"Layout study for {report.n} primitives on a {report.side}x{report.side} grid (k={report.k})",
        format_table(
            ["layout", "smoothness", "lossless bytes"],
            [[row.layout, row.smoothness, row.lossless_bytes] for row in report.layouts],
        ),
    ]
    if report.evr:
        components = [str(3 * (index + 1)) for index in range(len(next(iter(report.evr.values()))))]
        lines += [
            "",
            "Cumulative explained variance",
            format_table(["mode"] + components, [[mode] + curve for mode, curve in report.evr.items()]),
        ]
    return "\n".join(lines)


def render_sweep(points: Sequence[SweepPoint]) -> str:
    return format_table(
        ["qp", "bytes", "bpp", "attribute PSNR", "coord max error"],
        [[p.qp, p.total_bytes, p.bpp, p.attribute_psnr, p.coordinate_max_error] for p in points],
    )


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True)


def generate_markdown_summary(report: EncodeReport, *, source: Path | None = None) -> str:
    times = report.map_generation_times()
    bitrate = report.bitrate

    lines = ["# GSMC Encode Report", ""]
    lines.append(f"Generated: {datetime.now(timezone.utc).isoformat()}")
    lines.append("")
    lines.append("## Overview")
    lines.append("")
    if source is not None:
        lines.append(f"- Source: `{source}`")
    lines.append(f"- Primitives: **{report.n_real}**")
    lines.append(f"- Grid: **{report.side} x {report.side}**")
    lines.append(f"- PCA: **{report.pca_mode}**, k = **{report.k}**")
    if report.captured_variance is not None:
        lines.append(f"- Captured variance: **{report.captured_variance:.2%}**")
    lines.append(f"- Container: **{bitrate.total_bytes}** bytes, **{bitrate.bpp:.3f}** BPP")
    lines.append("")

    lines.append("## 2D map generation time (s)")
    lines.append("")
    lines.append("| " + " | ".join(times) + " |")
    lines.append("| " + " | ".join("---" for _ in times) + " |")
    lines.append("| " + " | ".join(f"{value:.3f}" for value in times.values()) + " |")
    lines.append("")

    if report.miniplas.passes:
        lines.append("## MiniPLAS")
        lines.append("")
        lines.append("| Pass | Block | Ops | Cost before | Cost after | Accepted |")
        lines.append("| --- | --- | --- | --- | --- | --- |")
        for index, record in enumerate(report.miniplas.passes):
            lines.append(
                f"| {index} | {record.block_size} | {record.op_count} | {record.cost_before:.6g} "
                f"| {record.cost_after:.6g} | {'Yes' if record.accepted else 'No'} |"
            )
        lines.append("")

    lines.append("## Bytes per image group")
    lines.append("")
    lines.append("| Group | Bytes |")
    lines.append("| --- | --- |")
    lines.append(f"| header | {bitrate.header_bytes} |")
    for name, size in bitrate.group_bytes().items():
        lines.append(f"| {name} | {size} |")
    lines.append("")
    return "\n".join(lines)


def write_markdown(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(content)
