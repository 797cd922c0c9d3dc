"""High-level orchestration: cloud -> 2D maps -> coded container, and back."""
from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .codec import BackendConfig, decode_images, encode_images, internal_lossless_size, resolve_backend
from .container import (
    BitrateReport,
    bitrate_report,
    pack_container,
    unpack_container,
    write_container,
)
from .errors import ConfigError, ContainerError, GsmcError, InsufficientDataError
from .mapping import (
    assemble_quantized,
    build_feature_grid,
    compute_ranges,
    dequantize_groups,
    disassemble,
    feature_matrix,
    feature_weights,
    quantize_groups,
)
from .miniplas import MiniplasReport, run_miniplas
from .models import (
    GROUP_NAMES,
    PCA_MODES,
    AttributeMapSet,
    GaussianCloud,
    GridLayout,
    ImageEntry,
    Manifest,
    PcaModel,
    PlasSchedule,
    QuantizationParams,
    check_component_count,
    image_tags,
    tag_group,
)
from .morton import build_layout, sort_by_morton
from .pca import fit, parse_model, project, serialize_model
from .ply import load_cloud, save_cloud

LOGGER = logging.getLogger(__name__)

ATTRIBUTE_GROUPS = tuple(name for name in GROUP_NAMES if name != "positions")
MAP_STAGES = ("Morton3D", "Morton2D", "PCA", "MiniPLAS")


@dataclass(slots=True)
class EncodeConfig:
    input: Optional[Path] = None
    output: Optional[Path] = None
    k: int = 12
    pca_mode: str = "joint"
    mbs: int = 4
    iterations: int = 1
    seed: int = 0
    block_sizes: Optional[Tuple[int, ...]] = None
    qp: Dict[str, int] = field(default_factory=dict)
    backend: str = "internal"
    backend_config: Optional[BackendConfig] = None
    weights: Dict[str, float] = field(default_factory=dict)
    rate_guard: bool = True
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)

    def __post_init__(self) -> None:
        self.k = check_component_count(self.k)
        if self.pca_mode not in PCA_MODES:
            raise ConfigError(f"Unknown PCA mode: {self.pca_mode!r}")
        self.schedule()
        for name, value in self.qp.items():
            if name == "positions" and value != 0:
                raise ConfigError("coordinate images are always coded losslessly; qp must stay 0")
            if name not in GROUP_NAMES:
                raise ConfigError(f"Unknown image group for qp: {name!r}")
            if int(value) < 0:
                raise ConfigError(f"qp must be non-negative, got {value} for {name}")
        for name, value in self.weights.items():
            if name not in GROUP_NAMES:
                raise ConfigError(f"Unknown feature group for weights: {name!r}")
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"weights must be finite and non-negative, got {value} for {name}")
        if self.backend not in ("internal", "external"):
            raise ConfigError(f"Unknown codec backend: {self.backend!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def schedule(self) -> PlasSchedule:
        return PlasSchedule(
            mbs=self.mbs,
            iterations_per_size=self.iterations,
            seed=self.seed,
            explicit_sizes=self.block_sizes,
        )

    def group_qp(self, group: str) -> int:
        if group == "positions":
            return 0
        return int(self.qp.get(group, 0))

    def image_entries(self) -> list[ImageEntry]:
        entries = []
        for tag in image_tags(self.k):
            qp = self.group_qp(tag_group(tag))
            entries.append(ImageEntry(tag=tag, mode="lossy" if qp > 0 else "lossless", qp=qp))
        return entries

    @classmethod
    def from_file(cls, path: Path, **overrides: Any) -> "EncodeConfig":
        """Read a JSON config (the manifest dialect); keyword overrides win."""

        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return cls.from_json(payload, **overrides)

    @classmethod
    def from_json(cls, payload: Mapping[str, Any], **overrides: Any) -> "EncodeConfig":
        known = {
            "input", "output", "k", "pca_mode", "mbs", "iterations", "seed",
            "block_sizes", "qp", "backend", "weights", "rate_guard", "threads",
        }
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values: Dict[str, Any] = dict(payload)
        backend = values.get("backend")
        if isinstance(backend, Mapping):
            values["backend"] = str(backend.get("kind", "external"))
            values["backend_config"] = BackendConfig.from_json(backend)
        for key in ("input", "output"):
            if values.get(key) is not None:
                values[key] = Path(values[key])
        if values.get("block_sizes") is not None:
            values["block_sizes"] = tuple(values["block_sizes"])
        values.update({key: value for key, value in overrides.items() if value is not None})
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def as_json(self) -> dict[str, object]:
        return {
            "k": self.k,
            "pca_mode": self.pca_mode,
            "schedule": self.schedule().as_json(),
            "qp": {group: self.group_qp(group) for group in GROUP_NAMES},
            "backend": self.backend,
            "weights": {group: float(self.weights.get(group, 1.0)) for group in GROUP_NAMES},
            "rate_guard": self.rate_guard,
        }


@dataclass(slots=True)
class EncodeReport:
    n_real: int
    side: int
    k: int
    pca_mode: str
    captured_variance: Optional[float]
    timings: Dict[str, float]
    miniplas: MiniplasReport
    bitrate: BitrateReport

    def map_generation_times(self) -> Dict[str, float]:
        times = {stage: self.timings.get(stage, 0.0) for stage in MAP_STAGES}
        times["All"] = sum(times.values())
        return times

    def as_json(self) -> dict[str, object]:
        return {
            "n_real": self.n_real,
            "side": self.side,
            "k": self.k,
            "pca_mode": self.pca_mode,
            "captured_variance": self.captured_variance,
            "map_generation_seconds": self.map_generation_times(),
            "timings": dict(self.timings),
            "miniplas": self.miniplas.as_json(),
            "bitrate": self.bitrate.as_json(),
        }


@dataclass(slots=True, eq=False)
class EncodeResult:
    data: bytes
    manifest: Manifest
    report: EncodeReport
    quantized: Dict[str, np.ndarray]
    params: QuantizationParams
    pca: PcaModel
    maps: AttributeMapSet

    def reference(self) -> GaussianCloud:
        """The cloud an all-lossless container decodes to, in input order."""

        return dequantize_groups(self.quantized, self.params, self.pca)


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except GsmcError as exc:
        raise type(exc)(f"{name}: {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def layout_coded_size(
    quantized: Mapping[str, np.ndarray], k: int, threads: int = 1
) -> Callable[[GridLayout], int]:
    """Internal-lossless bytes of the maps a layout produces."""

    def measure(layout: GridLayout) -> int:
        return internal_lossless_size(assemble_quantized(quantized, layout, k).images, threads)

    return measure


def fit_pca(cloud: GaussianCloud, mode: str, k: int) -> PcaModel:
    try:
        model = fit(cloud.sh_ac, mode=mode)
    except InsufficientDataError as exc:
        LOGGER.warning("%s; falling back to order-clip", exc)
        model = fit(cloud.sh_ac, mode="order-clip")
    return model.truncated(k)


def encode_cloud(cloud: GaussianCloud, config: EncodeConfig) -> EncodeResult:
    timings: Dict[str, float] = {}
    backend = resolve_backend(config.backend, config.backend_config)

    with _stage("PCA", timings):
        fitted = fit_pca(cloud, config.pca_mode, config.k)
        block = serialize_model(fitted)
        pca = parse_model(block)
        coeffs = project(pca, cloud.sh_ac)

    with _stage("Morton3D", timings):
        params = compute_ranges(cloud, coeffs)
        quantized = quantize_groups(cloud, coeffs, params)
        ranking = sort_by_morton(cloud, params)

    with _stage("Morton2D", timings):
        layout = build_layout(cloud.n).relabel(ranking)

    with _stage("MiniPLAS", timings):
        grid = build_feature_grid(
            feature_matrix(quantized, params), layout, feature_weights(config.k, config.weights)
        )
        coded_size = layout_coded_size(quantized, config.k, config.threads) if config.rate_guard else None
        _, layout, plas_report = run_miniplas(grid, layout, config.schedule(), coded_size)
    LOGGER.info(
        "Mapped %d primitives onto a %dx%d grid (smoothness %.6g -> %.6g)",
        cloud.n, layout.side, layout.side, plas_report.initial_cost, plas_report.final_cost,
    )

    with _stage("Assemble", timings):
        maps = assemble_quantized(quantized, layout, config.k)

    entries = config.image_entries()
    with _stage("Encode", timings):
        blocks = encode_images(
            maps.images, {entry.tag: entry for entry in entries}, backend, config.threads
        )

    with _stage("Pack", timings):
        manifest = Manifest(
            n_real=cloud.n,
            side=layout.side,
            k=config.k,
            pca_mode=pca.mode,
            pca_block=block,
            quantization=params,
            images=entries,
            backend=backend.kind,
            schedule=config.schedule().as_json(),
        )
        data = pack_container(manifest, blocks)
        bitrate = bitrate_report(data)
    LOGGER.info("Encoded %d images into %d bytes (%.3f bpp)", len(entries), len(data), bitrate.bpp)

    report = EncodeReport(
        n_real=cloud.n,
        side=layout.side,
        k=config.k,
        pca_mode=pca.mode,
        captured_variance=fitted.captured_variance(),
        timings=timings,
        miniplas=plas_report,
        bitrate=bitrate,
    )
    return EncodeResult(
        data=data, manifest=manifest, report=report, quantized=quantized,
        params=params, pca=pca, maps=maps,
    )


def decode_container(data: bytes, threads: int = 1) -> GaussianCloud:
    manifest, blocks = unpack_container(data)
    pca = parse_model(manifest.pca_block)
    if pca.k != manifest.k or pca.mode != manifest.pca_mode:
        raise ContainerError(
            f"PCA block ({pca.mode}, k={pca.k}) disagrees with the manifest "
            f"({manifest.pca_mode}, k={manifest.k})"
        )
    backend = resolve_backend(manifest.backend)
    entries = {entry.tag: entry for entry in manifest.images}
    images = decode_images(blocks, entries, manifest.side, backend, threads)
    maps = AttributeMapSet(images=images, n_real=manifest.n_real, side=manifest.side)
    cloud = disassemble(maps, manifest.quantization, pca)
    LOGGER.info("Decoded %d primitives from a %dx%d grid", cloud.n, manifest.side, manifest.side)
    return cloud


def run_encode(config: EncodeConfig) -> EncodeResult:
    if config.input is None or config.output is None:
        raise ConfigError("encode needs both an input and an output path")
    cloud = load_cloud(config.input)
    result = encode_cloud(cloud, config)
    write_container(config.output, result.data)
    return result


def run_decode(container_path: Path, output_path: Path, threads: int = 1) -> GaussianCloud:
    cloud = decode_container(Path(container_path).read_bytes(), threads)
    save_cloud(cloud, output_path)
    return cloud
