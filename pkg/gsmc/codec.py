"""Raw 10-bit YUV444 frames and the pluggable single-image codec backends."""
from __future__ import annotations

import logging
import os
import shlex
import string
import subprocess
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np

try:  # pragma: no cover - optional dependency
    from dotenv import find_dotenv, load_dotenv
except ModuleNotFoundError:  # pragma: no cover - optional dependency
    def load_dotenv(*_args: Any, **_kwargs: Any) -> bool:
        return False

    def find_dotenv(*_args: Any, **_kwargs: Any) -> str:
        return ""

from .errors import BackendError, ConfigError, CorruptionError, FormatError, IntegrityError
from .models import ATTRIBUTE_BITS, CODEC_MODES, ImageEntry

LOGGER = logging.getLogger(__name__)

_SAMPLE_LIMIT = 1 << ATTRIBUTE_BITS
_INTERNAL_MAX_QP = ATTRIBUTE_BITS - 1
_EXTERNAL_MAX_QP = 51
_ENCODE_FIELDS = {"in", "out", "w", "h", "qp", "lossless"}
_DECODE_FIELDS = {"in", "out"}
_STDERR_TAIL = 2000


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ConfigError(f"expected an M x M x 3 image, got shape {image.shape}")
    if image.size and (int(image.min()) < 0 or int(image.max()) >= _SAMPLE_LIMIT):
        raise CorruptionError(f"image samples must lie in [0, {_SAMPLE_LIMIT})")
    return image.astype(np.uint16)


def frame_size(side: int) -> int:
    return 3 * side * side * 2


def write_yuv444p10(image: np.ndarray) -> bytes:
    """Planar ch0, ch1, ch2; row-major; 16-bit little-endian samples."""

    image = _check_image(image)
    return np.ascontiguousarray(np.moveaxis(image, 2, 0), dtype="<u2").tobytes()


def read_yuv444p10(data: bytes, side: int) -> np.ndarray:
    expected = frame_size(side)
    if len(data) != expected:
        raise FormatError(f"raw frame holds {len(data)} bytes, expected {expected} for side {side}")
    planes = np.frombuffer(data, dtype="<u2").reshape(3, side, side)
    if planes.size and int(planes.max()) >= _SAMPLE_LIMIT:
        raise CorruptionError(f"raw frame holds samples beyond {ATTRIBUTE_BITS} bits")
    return np.ascontiguousarray(np.moveaxis(planes, 0, 2)).astype(np.uint16)


def _template_fields(template: str) -> set[str]:
    try:
        return {name for _, name, _, _ in string.Formatter().parse(template) if name}
    except ValueError as exc:
        raise ConfigError(f"malformed command template {template!r}: {exc}") from exc


@dataclass(frozen=True)
class CodecBackend:
    """Either the built-in DEFLATE codec or a pair of external command templates."""

    kind: str = "internal"
    encode_cmd: str | None = None
    decode_cmd: str | None = None
    lossless_flags: str = ""
    lossy_flags: str = ""
    max_procs: int = 1

    def __post_init__(self) -> None:
        if self.kind == "internal":
            return
        if self.kind != "external":
            raise ConfigError(f"Unknown codec backend: {self.kind!r}")
        if not self.encode_cmd or not self.decode_cmd:
            raise ConfigError("external backend needs both an encode and a decode command")
        missing = _ENCODE_FIELDS - _template_fields(self.encode_cmd)
        if missing:
            raise ConfigError(f"encode template lacks placeholders: {', '.join(sorted(missing))}")
        missing = _DECODE_FIELDS - _template_fields(self.decode_cmd)
        if missing:
            raise ConfigError(f"decode template lacks placeholders: {', '.join(sorted(missing))}")
        if self.max_procs < 1:
            raise ConfigError("max_procs must be >= 1")

    @property
    def max_qp(self) -> int:
        return _INTERNAL_MAX_QP if self.kind == "internal" else _EXTERNAL_MAX_QP


INTERNAL_BACKEND = CodecBackend()


@dataclass(frozen=True)
class BackendConfig:
    """External codec settings read from the environment or a config file."""

    encode_cmd: str | None
    decode_cmd: str | None
    lossless_flags: str
    lossy_flags: str
    max_procs: int

    @classmethod
    def from_env(cls) -> "BackendConfig":
        load_dotenv(find_dotenv())
        procs = os.getenv("GSMC_MAX_PROCS", "")
        try:
            max_procs = int(procs) if procs else (os.cpu_count() or 1)
        except ValueError as exc:
            raise ConfigError(f"GSMC_MAX_PROCS must be an integer, got {procs!r}") from exc
        return cls(
            encode_cmd=os.getenv("GSMC_ENCODE_CMD") or None,
            decode_cmd=os.getenv("GSMC_DECODE_CMD") or None,
            lossless_flags=os.getenv("GSMC_LOSSLESS_FLAGS", ""),
            lossy_flags=os.getenv("GSMC_LOSSY_FLAGS", ""),
            max_procs=max_procs,
        )

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "BackendConfig":
        base = cls.from_env()
        return cls(
            encode_cmd=payload.get("encode_cmd", base.encode_cmd),
            decode_cmd=payload.get("decode_cmd", base.decode_cmd),
            lossless_flags=str(payload.get("lossless_flags", base.lossless_flags)),
            lossy_flags=str(payload.get("lossy_flags", base.lossy_flags)),
            max_procs=int(payload.get("max_procs", base.max_procs)),
        )

    def external(self) -> CodecBackend:
        return CodecBackend(
            kind="external",
            encode_cmd=self.encode_cmd,
            decode_cmd=self.decode_cmd,
            lossless_flags=self.lossless_flags,
            lossy_flags=self.lossy_flags,
            max_procs=self.max_procs,
        )


_CUSTOM_BACKEND: CodecBackend | None = None


def set_backend_for_testing(backend: CodecBackend | None) -> None:
    """Install a backend that overrides every lookup; None restores normal resolution."""

    global _CUSTOM_BACKEND
    _CUSTOM_BACKEND = backend


def resolve_backend(kind: str = "internal", config: BackendConfig | None = None) -> CodecBackend:
    if _CUSTOM_BACKEND is not None:
        return _CUSTOM_BACKEND
    if kind == "internal":
        return INTERNAL_BACKEND
    if kind == "external":
        return (config or BackendConfig.from_env()).external()
    raise ConfigError(f"Unknown codec backend: {kind!r}")


def _check_mode(mode: str, qp: int, backend: CodecBackend) -> None:
    if mode not in CODEC_MODES:
        raise ConfigError(f"codec mode must be one of {CODEC_MODES}, got {mode!r}")
    if not 0 <= qp <= backend.max_qp:
        raise ConfigError(f"qp must lie in [0, {backend.max_qp}] for the {backend.kind} backend, got {qp}")


# Internal codec: left-neighbour prediction per plane row, then DEFLATE.

def _deflate_planes(image: np.ndarray) -> bytes:
    planes = np.moveaxis(image, 2, 0).astype(np.int32)
    residuals = np.diff(planes, axis=2, prepend=0)
    return zlib.compress(residuals.astype("<i2").tobytes(), 9)


def _inflate_planes(data: bytes, side: int) -> np.ndarray:
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise CorruptionError(f"internal image block does not inflate: {exc}") from exc
    if len(raw) != frame_size(side):
        raise FormatError(f"internal image block holds {len(raw)} bytes, expected {frame_size(side)}")
    residuals = np.frombuffer(raw, dtype="<i2").astype(np.int32).reshape(3, side, side)
    planes = np.cumsum(residuals, axis=2)
    if planes.size and (planes.min() < 0 or planes.max() >= _SAMPLE_LIMIT):
        raise CorruptionError("internal image block decodes beyond 10 bits")
    return np.ascontiguousarray(np.moveaxis(planes, 0, 2)).astype(np.uint16)


def internal_lossless_size(images: Mapping[str, np.ndarray], threads: int = 1) -> int:
    """Bytes the internal codec spends on ``images`` coded losslessly."""

    checked = [_check_image(image) for image in images.values()]
    workers = max(1, min(threads, len(checked) or 1))
    if workers == 1:
        return sum(len(_deflate_planes(image)) for image in checked)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return sum(len(block) for block in pool.map(_deflate_planes, checked))


def _internal_encode(image: np.ndarray, mode: str, qp: int) -> bytes:
    if mode == "lossy" and qp > 0:
        image = image >> qp
    return _deflate_planes(image)


def _internal_decode(data: bytes, mode: str, qp: int, side: int) -> np.ndarray:
    image = _inflate_planes(data, side)
    if mode == "lossy" and qp > 0:
        image = (image << qp) + (1 << (qp - 1))
    return image.astype(np.uint16)


# External codec: raw frames through command templates.

def _expand(template: str, values: Mapping[str, str], flags: str) -> list[str]:
    args: list[str] = []
    for token in shlex.split(template):
        if token == "{lossless}":
            args.extend(shlex.split(flags))
        else:
            args.append(token.format(**values, lossless=flags))
    return args


def _run(args: list[str], action: str) -> None:
    LOGGER.debug("Running %s command: %s", action, shlex.join(args))
    try:
        completed = subprocess.run(args, capture_output=True, check=False)
    except OSError as exc:
        raise BackendError(f"{action} command could not start: {exc}") from exc
    if completed.returncode != 0:
        tail = completed.stderr.decode("utf-8", errors="replace")[-_STDERR_TAIL:]
        raise BackendError(f"{action} command exited with {completed.returncode}: {tail.strip()}")


def _external_encode(image: np.ndarray, mode: str, qp: int, backend: CodecBackend) -> bytes:
    side = image.shape[0]
    flags = backend.lossless_flags if mode == "lossless" else backend.lossy_flags
    with tempfile.TemporaryDirectory(prefix="gsmc-") as workdir:
        source = Path(workdir) / "in.yuv"
        target = Path(workdir) / "out.bin"
        source.write_bytes(write_yuv444p10(image))
        values = {"in": str(source), "out": str(target), "w": str(side), "h": str(side), "qp": str(qp)}
        _run(_expand(backend.encode_cmd or "", values, flags), "encode")
        if not target.exists():
            raise BackendError("encode command produced no output file")
        return target.read_bytes()


def _external_decode(data: bytes, mode: str, qp: int, side: int, backend: CodecBackend) -> np.ndarray:
    flags = backend.lossless_flags if mode == "lossless" else backend.lossy_flags
    with tempfile.TemporaryDirectory(prefix="gsmc-") as workdir:
        source = Path(workdir) / "in.bin"
        target = Path(workdir) / "out.yuv"
        source.write_bytes(data)
        values = {"in": str(source), "out": str(target), "w": str(side), "h": str(side), "qp": str(qp)}
        _run(_expand(backend.decode_cmd or "", values, flags), "decode")
        if not target.exists():
            raise BackendError("decode command produced no output file")
        raw = target.read_bytes()
    if len(raw) != frame_size(side):
        raise BackendError(
            f"decoded frame holds {len(raw)} bytes, expected a {side}x{side} YUV444 10-bit frame"
        )
    return read_yuv444p10(raw, side)


def encode_image(
    image: np.ndarray, mode: str, qp: int = 0, backend: CodecBackend | None = None
) -> bytes:
    """Encode one map; lossless results are decoded again and compared."""

    backend = backend or resolve_backend()
    image = _check_image(image)
    _check_mode(mode, qp, backend)
    if backend.kind == "internal":
        data = _internal_encode(image, mode, qp)
    else:
        data = _external_encode(image, mode, qp, backend)

    if mode == "lossless":
        entry = ImageEntry(tag="", mode=mode, qp=qp)
        restored = decode_image(data, entry, image.shape[0], backend)
        if not np.array_equal(restored, image):
            raise IntegrityError(f"{backend.kind} backend did not reproduce a lossless image")
    return data


def decode_image(
    data: bytes, entry: ImageEntry, side: int, backend: CodecBackend | None = None
) -> np.ndarray:
    backend = backend or resolve_backend()
    _check_mode(entry.mode, entry.qp, backend)
    if backend.kind == "internal":
        return _internal_decode(data, entry.mode, entry.qp, side)
    return _external_decode(data, entry.mode, entry.qp, side, backend)


def encode_images(
    images: Mapping[str, np.ndarray],
    entries: Mapping[str, ImageEntry],
    backend: CodecBackend | None = None,
    threads: int = 1,
) -> Dict[str, bytes]:
    """Encode every map concurrently; the result keeps the order of ``images``."""

    backend = backend or resolve_backend()
    workers = max(1, min(threads, len(images) or 1))
    if backend.kind == "external":
        workers = min(workers, backend.max_procs)

    def job(tag: str) -> bytes:
        entry = entries[tag]
        return encode_image(images[tag], entry.mode, entry.qp, backend)

    tags = list(images)
    if workers == 1:
        return {tag: job(tag) for tag in tags}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        blocks = list(pool.map(job, tags))
    return dict(zip(tags, blocks))


def decode_images(
    blocks: Mapping[str, bytes],
    entries: Mapping[str, ImageEntry],
    side: int,
    backend: CodecBackend | None = None,
    threads: int = 1,
) -> Dict[str, np.ndarray]:
    backend = backend or resolve_backend()
    workers = max(1, min(threads, len(blocks) or 1))
    if backend.kind == "external":
        workers = min(workers, backend.max_procs)

    tags = list(blocks)
    if workers == 1:
        return {tag: decode_image(blocks[tag], entries[tag], side, backend) for tag in tags}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(lambda tag: decode_image(blocks[tag], entries[tag], side, backend), tags))
    return dict(zip(tags, images))
