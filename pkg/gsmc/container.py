"""Single-file container: magic, version, canonical JSON manifest, then image blocks."""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np

from .errors import ConfigError, ContainerError
from .models import ATTRIBUTE_BITS, COORD_BITS, Manifest, image_tags, tag_group
from .morton import grid_side

LOGGER = logging.getLogger(__name__)

MAGIC = b"GSMC"
VERSION = 1
_HEADER = struct.Struct("<4sII")
MIN_IMAGES = 7


def canonical_json(payload: Any) -> bytes:
    """Sorted keys, no whitespace, finite numbers only."""

    try:
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise ConfigError(f"manifest holds a non-finite number: {exc}") from exc
    return text.encode("utf-8")


def _check_manifest(manifest: Manifest) -> None:
    if len(manifest.images) < MIN_IMAGES:
        raise ContainerError(f"a container needs at least {MIN_IMAGES} images, got {len(manifest.images)}")
    try:
        expected = image_tags(manifest.k)
    except ConfigError as exc:
        raise ContainerError(f"manifest carries an invalid k: {exc}") from exc
    tags = [entry.tag for entry in manifest.images]
    if sorted(tags) != sorted(expected):
        raise ContainerError(f"manifest images {tags} do not match k={manifest.k}")
    for entry in manifest.images:
        if tag_group(entry.tag) == "positions" and entry.mode != "lossless":
            raise ContainerError(f"coordinate image {entry.tag} must be coded losslessly")
    if manifest.n_real < 1:
        raise ContainerError(f"manifest declares {manifest.n_real} primitives")
    side = grid_side(manifest.n_real)
    if manifest.side != side:
        raise ContainerError(f"{manifest.n_real} primitives need a {side}x{side} grid, manifest says {manifest.side}")
    _check_quantization(manifest)


def _check_quantization(manifest: Manifest) -> None:
    widths = {"positions": 3, "sh_dc": 3, "ac": manifest.k, "opacity": 1, "scale": 3, "rotation": 4}
    for name, width in widths.items():
        group = manifest.quantization.groups.get(name)
        if group is None:
            raise ContainerError(f"manifest has no quantization range for {name}")
        bits = COORD_BITS if name == "positions" else ATTRIBUTE_BITS
        if group.bits != bits:
            raise ContainerError(f"{name} range declares {group.bits} bits, expected {bits}")
        if group.minimum.shape != (width,) or group.maximum.shape != (width,):
            raise ContainerError(
                f"{name} range holds {group.minimum.size}/{group.maximum.size} channels, expected {width}"
            )
        if not (np.isfinite(group.minimum).all() and np.isfinite(group.maximum).all()):
            raise ContainerError(f"{name} range holds non-finite bounds")
        if (group.maximum < group.minimum).any():
            raise ContainerError(f"{name} range has a maximum below its minimum")


def pack_container(manifest: Manifest, blocks: Mapping[str, bytes]) -> bytes:
    """Assign block offsets in manifest order and serialise everything."""

    _check_manifest(manifest)
    offset = 0
    for entry in manifest.images:
        block = blocks.get(entry.tag)
        if block is None:
            raise ContainerError(f"no encoded block for image {entry.tag}")
        entry.offset = offset
        entry.length = len(block)
        offset += len(block)

    text = canonical_json(manifest.as_json())
    chunks = [_HEADER.pack(MAGIC, manifest.version, len(text)), text]
    chunks.extend(blocks[entry.tag] for entry in manifest.images)
    data = b"".join(chunks)
    LOGGER.debug("Packed %d images into %d bytes", len(manifest.images), len(data))
    return data


def unpack_container(data: bytes) -> tuple[Manifest, Dict[str, bytes]]:
    if len(data) < _HEADER.size:
        raise ContainerError("container is truncated before its header")
    magic, version, text_length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad container magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    body_start = _HEADER.size + text_length
    if body_start > len(data):
        raise ContainerError("container is truncated inside its manifest")

    try:
        payload = json.loads(data[_HEADER.size:body_start].decode("utf-8"))
        manifest = Manifest.from_json(payload)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from exc
    if manifest.version != version:
        raise ContainerError("manifest version disagrees with the container header")
    _check_manifest(manifest)

    body = memoryview(data)[body_start:]
    blocks: Dict[str, bytes] = {}
    end = 0
    for entry in sorted(manifest.images, key=lambda item: item.offset):
        if entry.offset < end or entry.length < 0:
            raise ContainerError(f"image {entry.tag} overlaps its predecessor")
        end = entry.offset + entry.length
        if end > len(body):
            raise ContainerError(f"container is truncated inside image {entry.tag}")
        blocks[entry.tag] = bytes(body[entry.offset:end])
    if end != len(body):
        raise ContainerError(f"container carries {len(body) - end} unexpected trailing bytes")
    return manifest, {entry.tag: blocks[entry.tag] for entry in manifest.images}


def write_container(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp_name = tempfile.mkstemp(prefix=".gsmc-", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


@dataclass(slots=True)
class BitrateReport:
    n_real: int
    header_bytes: int
    image_bytes: Dict[str, int] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(self.image_bytes.values())

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / self.n_real

    def group_bytes(self) -> Dict[str, int]:
        totals: Dict[str, int] = {}
        for tag, size in self.image_bytes.items():
            group = tag_group(tag)
            totals[group] = totals.get(group, 0) + size
        return totals

    def as_json(self) -> dict[str, object]:
        return {
            "n_real": self.n_real,
            "header_bytes": self.header_bytes,
            "images": dict(self.image_bytes),
            "groups": self.group_bytes(),
            "total_bytes": self.total_bytes,
            "bpp": self.bpp,
        }


def bitrate_report(data: bytes) -> BitrateReport:
    manifest, blocks = unpack_container(data)
    body = sum(len(block) for block in blocks.values())
    return BitrateReport(
        n_real=manifest.n_real,
        header_bytes=len(data) - body,
        image_bytes={tag: len(block) for tag, block in blocks.items()},
    )
