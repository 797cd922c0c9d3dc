"""Attribute-domain quality metrics and the layout/PCA analysis study."""
from __future__ import annotations

import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import BackendError, DataError, InsufficientDataError
from .mapping import (
    build_feature_grid,
    compute_ranges,
    feature_matrix,
    feature_weights,
    quantize,
    quantize_groups,
)
from .miniplas import run_miniplas, smoothness_cost
from .models import (
    CLOUD_FIELDS,
    COORD_BITS,
    PCA_MODES,
    SH_AC_CHANNELS,
    GaussianCloud,
    GridLayout,
    GroupRange,
)
from .morton import (
    build_layout,
    build_random_layout,
    build_row_major_layout,
    morton3_encode_array,
    sort_by_morton,
)
from .pca import fit, parse_model, project, serialize_model
from .pipeline import ATTRIBUTE_GROUPS, EncodeConfig, decode_container, encode_cloud, fit_pca, layout_coded_size
from .ply import load_cloud

LOGGER = logging.getLogger(__name__)

ATTRIBUTE_FIELDS = tuple(name for name, _ in CLOUD_FIELDS if name != "positions")


def psnr(reference: np.ndarray, test: np.ndarray, peak: float) -> float:
    mse = float(np.mean(np.square(np.subtract(reference, test, dtype=np.float64))))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10((peak ** 2) / mse)


def json_number(value: float) -> float | str:
    """JSON has no infinity; report it as the string "inf"."""

    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


@dataclass(slots=True)
class GroupQuality:
    name: str
    psnr: float
    max_error: float
    peak: float

    def as_json(self) -> dict[str, object]:
        return {
            "group": self.name,
            "psnr": json_number(self.psnr),
            "max_error": self.max_error,
            "peak": self.peak,
        }


@dataclass(slots=True)
class CompareReport:
    n: int
    groups: List[GroupQuality]
    attribute_psnr: float
    ambiguous: int = 0
    matching: str = "nearest"
    render_output: Optional[str] = None

    def group(self, name: str) -> GroupQuality:
        for quality in self.groups:
            if quality.name == name:
                return quality
        raise KeyError(name)

    def as_json(self) -> dict[str, object]:
        payload: dict[str, object] = {
            "n": self.n,
            "matching": self.matching,
            "ambiguous": self.ambiguous,
            "attribute_psnr": json_number(self.attribute_psnr),
            "groups": [quality.as_json() for quality in self.groups],
        }
        if self.render_output is not None:
            payload["render_output"] = self.render_output
        return payload


def _position_box(original: GaussianCloud) -> GroupRange:
    low = float(original.positions.min())
    high = float(original.positions.max())
    return GroupRange(minimum=[low] * 3, maximum=[high] * 3, bits=COORD_BITS)


def _morton_ranks(q: np.ndarray) -> np.ndarray:
    return np.argsort(morton3_encode_array(q[:, 0], q[:, 1], q[:, 2]), kind="stable")


def match_primitives(original: GaussianCloud, decoded: GaussianCloud) -> tuple[np.ndarray, int, str]:
    """Index into ``decoded`` for every original primitive.

    Nearest quantised position wins; when two originals claim one decoded
    primitive, both sides are paired by 3D Morton rank instead.
    """

    if original.n != decoded.n:
        raise DataError(f"cannot compare {original.n} primitives against {decoded.n}")
    box = _position_box(original)
    q_original = quantize(original.positions, box)
    q_decoded = quantize(decoded.positions, box)

    _, nearest = cKDTree(q_decoded).query(q_original, k=1)
    nearest = np.asarray(nearest, dtype=np.int64)
    ambiguous = original.n - int(np.unique(nearest).size)
    if ambiguous == 0:
        return nearest, 0, "nearest"

    LOGGER.warning("%d primitives share a nearest match; pairing by Morton rank", ambiguous)
    pairs = np.empty(original.n, dtype=np.int64)
    pairs[_morton_ranks(q_original)] = _morton_ranks(q_decoded)
    return pairs, ambiguous, "morton-rank"


def compare_clouds(original: GaussianCloud, decoded: GaussianCloud) -> CompareReport:
    pairs, ambiguous, matching = match_primitives(original, decoded)
    groups: List[GroupQuality] = []
    normalized: List[np.ndarray] = []
    for name, _ in CLOUD_FIELDS:
        reference = getattr(original, name).astype(np.float64)
        test = getattr(decoded, name)[pairs].astype(np.float64)
        ranges = reference.max(axis=0) - reference.min(axis=0)
        peak = float(ranges.max())
        groups.append(
            GroupQuality(
                name=name,
                psnr=psnr(reference, test, peak if peak > 0 else 1.0),
                max_error=float(np.max(np.abs(reference - test))),
                peak=peak,
            )
        )
        if name in ATTRIBUTE_FIELDS:
            scale = np.where(ranges > 0, ranges, 1.0)
            normalized.append(((reference - test) / scale).ravel())

    errors = np.concatenate(normalized)
    attribute = psnr(errors, np.zeros_like(errors), 1.0)
    return CompareReport(
        n=original.n, groups=groups, attribute_psnr=attribute, ambiguous=ambiguous, matching=matching
    )


def run_render_hook(template: str, original: Path, decoded: Path) -> str:
    """Run a user renderer command with {original} and {decoded}; returns its stdout."""

    args = [
        token.format(original=str(original), decoded=str(decoded)) for token in shlex.split(template)
    ]
    LOGGER.debug("Running render command: %s", shlex.join(args))
    try:
        completed = subprocess.run(args, capture_output=True, check=False)
    except OSError as exc:
        raise BackendError(f"render command could not start: {exc}") from exc
    if completed.returncode != 0:
        tail = completed.stderr.decode("utf-8", errors="replace")[-2000:]
        raise BackendError(f"render command exited with {completed.returncode}: {tail.strip()}")
    return completed.stdout.decode("utf-8", errors="replace").strip()


def compare_files(original: Path, decoded: Path, render_cmd: str | None = None) -> CompareReport:
    report = compare_clouds(load_cloud(original), load_cloud(decoded))
    if render_cmd:
        report.render_output = run_render_hook(render_cmd, original, decoded)
    return report


@dataclass(slots=True)
class LayoutStudyRow:
    layout: str
    smoothness: float
    lossless_bytes: int

    def as_json(self) -> dict[str, object]:
        return {"layout": self.layout, "smoothness": self.smoothness, "lossless_bytes": self.lossless_bytes}


@dataclass(slots=True)
class AnalyzeReport:
    n: int
    side: int
    k: int
    layouts: List[LayoutStudyRow] = field(default_factory=list)
    evr: Dict[str, List[float]] = field(default_factory=dict)

    def row(self, layout: str) -> LayoutStudyRow:
        for row in self.layouts:
            if row.layout == layout:
                return row
        raise KeyError(layout)

    def as_json(self) -> dict[str, object]:
        return {
            "n": self.n,
            "side": self.side,
            "k": self.k,
            "layouts": [row.as_json() for row in self.layouts],
            "evr": {mode: list(curve) for mode, curve in self.evr.items()},
        }


def cumulative_evr(cloud: GaussianCloud) -> Dict[str, List[float]]:
    """Cumulative explained variance at k = 3, 6, ..., 45 for every PCA mode."""

    curves: Dict[str, List[float]] = {}
    for mode in PCA_MODES:
        try:
            model = fit(cloud.sh_ac, mode=mode)
        except InsufficientDataError as exc:
            LOGGER.warning("Skipping %s curve: %s", mode, exc)
            continue
        totals = np.cumsum(model.evr)
        curves[mode] = [float(totals[k - 1]) for k in range(3, SH_AC_CHANNELS + 1, 3)]
    return curves


def analyze_cloud(cloud: GaussianCloud, config: EncodeConfig | None = None) -> AnalyzeReport:
    """Smoothness and internal-lossless size of four layouts, plus the evr curves."""

    config = config or EncodeConfig()
    pca = parse_model(serialize_model(fit_pca(cloud, config.pca_mode, config.k)))
    coeffs = project(pca, cloud.sh_ac)
    params = compute_ranges(cloud, coeffs)
    quantized = quantize_groups(cloud, coeffs, params)
    features = feature_matrix(quantized, params)
    weights = feature_weights(config.k, config.weights)
    ranking = sort_by_morton(cloud, params)

    morton2 = build_layout(cloud.n).relabel(ranking)
    layouts: Dict[str, GridLayout] = {
        "random": build_random_layout(cloud.n, config.seed),
        "row-major": build_row_major_layout(cloud.n).relabel(ranking),
        "morton2": morton2,
    }
    coded_size = layout_coded_size(quantized, config.k, config.threads)
    guard = coded_size if config.rate_guard else None
    _, refined, _ = run_miniplas(build_feature_grid(features, morton2, weights), morton2, config.schedule(), guard)
    layouts[f"morton2+miniplas({config.schedule().mbs})"] = refined

    report = AnalyzeReport(n=cloud.n, side=morton2.side, k=config.k)
    for name, layout in layouts.items():
        grid = build_feature_grid(features, layout, weights)
        row = LayoutStudyRow(layout=name, smoothness=smoothness_cost(grid), lossless_bytes=coded_size(layout))
        LOGGER.debug("Layout %s: smoothness %.6g, %d bytes", name, row.smoothness, row.lossless_bytes)
        report.layouts.append(row)
    report.evr = cumulative_evr(cloud)
    return report


@dataclass(slots=True)
class SweepPoint:
    qp: int
    total_bytes: int
    bpp: float
    attribute_psnr: float
    coordinate_max_error: float

    def as_json(self) -> dict[str, object]:
        return {
            "qp": self.qp,
            "total_bytes": self.total_bytes,
            "bpp": self.bpp,
            "attribute_psnr": json_number(self.attribute_psnr),
            "coordinate_max_error": self.coordinate_max_error,
        }


def qp_sweep(cloud: GaussianCloud, qps: List[int], config: EncodeConfig | None = None) -> List[SweepPoint]:
    """Encode with one qp for every attribute group, decode, and measure rate and quality."""

    config = config or EncodeConfig()
    points = []
    for qp in qps:
        swept = replace(config, qp={group: qp for group in ATTRIBUTE_GROUPS})
        result = encode_cloud(cloud, swept)
        quality = compare_clouds(result.reference(), decode_container(result.data, swept.threads))
        points.append(
            SweepPoint(
                qp=qp,
                total_bytes=len(result.data),
                bpp=result.report.bitrate.bpp,
                attribute_psnr=quality.attribute_psnr,
                coordinate_max_error=quality.group("positions").max_error,
            )
        )
        LOGGER.info("qp=%d: %d bytes, attribute PSNR %.3f dB", qp, len(result.data), quality.attribute_psnr)
    return points
