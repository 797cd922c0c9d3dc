"""Data models shared by the mapping, layout and coding stages."""
from __future__ import annotations

import base64
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError, SchemaError

SH_AC_CHANNELS = 45
SH_COLOR_CHANNELS = 15

# Field name, channel width and PLY property names, in 3DGS file order.
CLOUD_FIELDS: Tuple[Tuple[str, int], ...] = (
    ("positions", 3),
    ("sh_dc", 3),
    ("sh_ac", SH_AC_CHANNELS),
    ("opacity", 1),
    ("scale", 3),
    ("rotation", 4),
)

PROPERTY_NAMES: Tuple[str, ...] = (
    ("x", "y", "z")
    + tuple(f"f_dc_{i}" for i in range(3))
    + tuple(f"f_rest_{i}" for i in range(SH_AC_CHANNELS))
    + ("opacity",)
    + tuple(f"scale_{i}" for i in range(3))
    + tuple(f"rot_{i}" for i in range(4))
)

CLOUD_CHANNELS = len(PROPERTY_NAMES)

PADDING = -1

PCA_MODES = ("joint", "per-color", "order-clip")

# Quantization groups in map order; "ac" holds PCA coefficients, not raw SH AC.
GROUP_NAMES = ("positions", "sh_dc", "ac", "opacity", "scale", "rotation")

COORD_BITS = 20
ATTRIBUTE_BITS = 10
MID_VALUE = 1 << (ATTRIBUTE_BITS - 1)

CODEC_MODES = ("lossless", "lossy")


def check_component_count(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or k < 3 or k > SH_AC_CHANNELS or k % 3:
        raise ConfigError(f"k must be a multiple of 3 in [3, 45], got {k!r}")
    return int(k)


@dataclass(frozen=True, slots=True, eq=False)
class GaussianCloud:
    """N Gaussian primitives in the native 3DGS parameterisation."""

    positions: np.ndarray
    sh_dc: np.ndarray
    sh_ac: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray

    def __post_init__(self) -> None:
        count: int | None = None
        for name, width in CLOUD_FIELDS:
            values = np.asarray(getattr(self, name), dtype=np.float32)
            if values.ndim == 1 and width == 1:
                values = values[:, np.newaxis]
            if values.ndim != 2 or values.shape[1] != width:
                raise SchemaError(
                    f"{name} must have {width} channels per primitive, got shape {values.shape}"
                )
            if count is None:
                count = values.shape[0]
            elif values.shape[0] != count:
                raise SchemaError(
                    f"{name} has {values.shape[0]} rows, expected {count}")
            values = np.ascontiguousarray(values)
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        if not count:
            raise DataError("a cloud needs at least one primitive")

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    def to_matrix(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name, _ in CLOUD_FIELDS], axis=1)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "GaussianCloud":
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] != CLOUD_CHANNELS:
            raise SchemaError(
                f"expected {CLOUD_CHANNELS} channels per primitive, got shape {matrix.shape}"
            )
        parts: Dict[str, np.ndarray] = {}
        start = 0
        for name, width in CLOUD_FIELDS:
            parts[name] = matrix[:, start:start + width]
            start += width
        return cls(**parts)

    def take(self, indices: np.ndarray) -> "GaussianCloud":
        return GaussianCloud.from_matrix(self.to_matrix()[np.asarray(indices)])

    def first_non_finite(self) -> int | None:
        bad = ~np.isfinite(self.to_matrix()).all(axis=1)
        if bad.any():
            return int(np.flatnonzero(bad)[0])
        return None

    def equals(self, other: "GaussianCloud") -> bool:
        """Bit-exact equality in primitive order."""

        a, b = self.to_matrix(), other.to_matrix()
        return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))

    def same_point_set(self, other: "GaussianCloud") -> bool:
        """Bit-exact equality ignoring primitive order."""

        if self.n != other.n:
            return False
        a = _sorted_rows(self.to_matrix())
        b = _sorted_rows(other.to_matrix())
        return np.array_equal(a, b)


def _sorted_rows(matrix: np.ndarray) -> np.ndarray:
    bits = matrix.view(np.uint32)
    order = np.lexsort(bits.T[::-1])
    return bits[order]


@dataclass(slots=True)
class GridLayout:
    """Assignment of primitives to the pixels of an M x M grid.

    ``order`` is indexed by raster position (row * side + col) and holds a
    primitive index or PADDING.
    """

    side: int
    order: np.ndarray
    n_real: int
    scan: str = "morton"

    @property
    def valid(self) -> np.ndarray:
        return self.order != PADDING

    def relabel(self, permutation: np.ndarray) -> "GridLayout":
        order = self.order.copy()
        mask = order != PADDING
        order[mask] = np.asarray(permutation, dtype=np.int64)[order[mask]]
        return replace(self, order=order)


@dataclass(slots=True, eq=False)
class PcaModel:
    """Decoder-side description of the SH AC reduction."""

    mode: str
    mean: np.ndarray
    basis: np.ndarray
    evr: Optional[np.ndarray] = None
    k: int = SH_AC_CHANNELS

    def __post_init__(self) -> None:
        if self.mode not in PCA_MODES:
            raise ConfigError(f"Unknown PCA mode: {self.mode!r}")
        check_component_count(self.k)
        if self.basis.shape[0] != SH_AC_CHANNELS or self.basis.shape[1] < self.k:
            raise ConfigError(
                f"basis of shape {self.basis.shape} cannot provide {self.k} components")

    @property
    def components(self) -> np.ndarray:
        return self.basis[:, : self.k]

    def truncated(self, k: int) -> "PcaModel":
        return replace(self, k=check_component_count(k))

    def captured_variance(self) -> float | None:
        if self.evr is None:
            return None
        return float(np.sum(self.evr[: self.k]))


@dataclass(slots=True, eq=False)
class AcCoefficients:
    coeffs: np.ndarray
    k: int

    def __post_init__(self) -> None:
        check_component_count(self.k)


@dataclass(slots=True, eq=False)
class GroupRange:
    """Per-channel affine quantisation range of one attribute group."""

    minimum: np.ndarray
    maximum: np.ndarray
    bits: int

    def __post_init__(self) -> None:
        if self.bits not in (ATTRIBUTE_BITS, COORD_BITS):
            raise ConfigError(f"bit depth must be 10 or 20, got {self.bits}")
        self.minimum = np.atleast_1d(np.asarray(self.minimum, dtype=np.float64))
        self.maximum = np.atleast_1d(np.asarray(self.maximum, dtype=np.float64))

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def constant(self) -> np.ndarray:
        return self.maximum <= self.minimum

    def as_json(self) -> dict[str, object]:
        return {
            "bits": self.bits,
            "min": [float(v) for v in self.minimum],
            "max": [float(v) for v in self.maximum],
        }

    @classmethod
    def from_json(cls, payload: dict[str, object]) -> "GroupRange":
        return cls(minimum=payload["min"], maximum=payload["max"], bits=int(payload["bits"]))


@dataclass(slots=True, eq=False)
class QuantizationParams:
    groups: Dict[str, GroupRange]

    def __getitem__(self, name: str) -> GroupRange:
        return self.groups[name]

    def as_json(self) -> dict[str, object]:
        return {name: self.groups[name].as_json() for name in GROUP_NAMES if name in self.groups}

    @classmethod
    def from_json(cls, payload: dict[str, object]) -> "QuantizationParams":
        missing = [name for name in GROUP_NAMES if name not in payload]
        if missing:
            raise ConfigError(f"quantization block lacks groups: {', '.join(missing)}")
        return cls(groups={name: GroupRange.from_json(payload[name]) for name in GROUP_NAMES})


def image_tags(k: int) -> list[str]:
    check_component_count(k)
    return (
        ["coord_hi", "coord_lo", "sh_dc"]
        + [f"ac_{t}" for t in range(k // 3)]
        + ["scale", "opacity", "rot_0", "rot_1"]
    )


def tag_group(tag: str) -> str:
    if tag.startswith("coord_"):
        return "positions"
    if tag.startswith("ac_"):
        return "ac"
    if tag.startswith("rot_"):
        return "rotation"
    return tag


@dataclass(slots=True, eq=False)
class AttributeMapSet:
    """The 7 + N_k three-channel 10-bit images of one cloud."""

    images: Dict[str, np.ndarray]
    n_real: int
    side: int

    @property
    def tags(self) -> list[str]:
        return list(self.images)

    def __len__(self) -> int:
        return len(self.images)


@dataclass(slots=True, eq=False)
class FeatureGrid:
    """Normalised feature planes of shape (C, M, M) with per-channel weights."""

    planes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise ConfigError(f"feature planes must be (C, M, M), got {self.planes.shape}")
        if self.weights.shape != (self.planes.shape[0],):
            raise ConfigError("one weight per feature channel is required")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ConfigError("channel weights must be finite and non-negative")

    @property
    def side(self) -> int:
        return int(self.planes.shape[1])

    @property
    def channels(self) -> int:
        return int(self.planes.shape[0])


MBS_CHOICES = (4, 8, 16, 32, 64)


@dataclass(slots=True)
class PlasSchedule:
    mbs: int = 4
    iterations_per_size: int = 1
    seed: int = 0
    explicit_sizes: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.explicit_sizes is not None:
            self.explicit_sizes = tuple(int(size) for size in self.explicit_sizes)
            for size in self.explicit_sizes:
                if size < 4 or size & (size - 1):
                    raise ConfigError(f"block sizes must be powers of two >= 4, got {size}")
            if not self.explicit_sizes:
                raise ConfigError("an explicit schedule needs at least one block size")
            self.mbs = max(self.explicit_sizes)
        elif self.mbs not in MBS_CHOICES:
            raise ConfigError(f"mbs must be one of {MBS_CHOICES}, got {self.mbs}")
        if self.iterations_per_size < 1:
            raise ConfigError("iterations_per_size must be >= 1")

    @property
    def block_sizes(self) -> list[int]:
        if self.explicit_sizes is not None:
            return list(self.explicit_sizes)
        sizes = []
        size = self.mbs
        while size >= 4:
            sizes.append(size)
            size //= 2
        return sizes

    def passes(self) -> list[int]:
        return [size for size in self.block_sizes for _ in range(self.iterations_per_size)]

    def as_json(self) -> dict[str, object]:
        return {
            "mbs": self.mbs,
            "block_sizes": self.block_sizes,
            "iterations": self.iterations_per_size,
            "seed": self.seed,
        }


@dataclass(slots=True)
class ImageEntry:
    tag: str
    mode: str
    qp: int
    offset: int = 0
    length: int = 0

    def as_json(self) -> dict[str, object]:
        return {
            "tag": self.tag,
            "mode": self.mode,
            "qp": self.qp,
            "offset": self.offset,
            "length": self.length,
        }

    @classmethod
    def from_json(cls, payload: dict[str, object]) -> "ImageEntry":
        return cls(
            tag=str(payload["tag"]),
            mode=str(payload["mode"]),
            qp=int(payload["qp"]),
            offset=int(payload["offset"]),
            length=int(payload["length"]),
        )


@dataclass(slots=True, eq=False)
class Manifest:
    n_real: int
    side: int
    k: int
    pca_mode: str
    pca_block: bytes
    quantization: QuantizationParams
    images: List[ImageEntry]
    backend: str = "internal"
    schedule: Dict[str, object] = field(default_factory=dict)
    version: int = 1

    def entry(self, tag: str) -> ImageEntry:
        for image in self.images:
            if image.tag == tag:
                return image
        raise KeyError(tag)

    def as_json(self) -> dict[str, object]:
        return {
            "version": self.version,
            "n_real": self.n_real,
            "side": self.side,
            "k": self.k,
            "pca": {
                "mode": self.pca_mode,
                "block": base64.b64encode(self.pca_block).decode("ascii"),
            },
            "quantization": self.quantization.as_json(),
            "images": [image.as_json() for image in self.images],
            "backend": self.backend,
            "schedule": self.schedule,
        }

    @classmethod
    def from_json(cls, payload: dict[str, object]) -> "Manifest":
        pca = payload["pca"]
        return cls(
            version=int(payload["version"]),
            n_real=int(payload["n_real"]),
            side=int(payload["side"]),
            k=int(payload["k"]),
            pca_mode=str(pca["mode"]),
            pca_block=base64.b64decode(pca["block"]),
            quantization=QuantizationParams.from_json(payload["quantization"]),
            images=[ImageEntry.from_json(item) for item in payload["images"]],
            backend=str(payload.get("backend", "internal")),
            schedule=dict(payload.get("schedule") or {}),
        )
