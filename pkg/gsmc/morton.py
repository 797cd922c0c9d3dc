"""Two-stage Morton scan: 3D Morton sort, then 2D Z-order placement on a square grid."""
from __future__ import annotations

import logging

import numpy as np

from .errors import RangeError
from .models import COORD_BITS, PADDING, GaussianCloud, GridLayout, QuantizationParams

LOGGER = logging.getLogger(__name__)

_U = np.uint64
_AXIS_LIMIT = 1 << COORD_BITS
_RANK_LIMIT = 1 << (2 * COORD_BITS)


def _spread3(values: np.ndarray) -> np.ndarray:
    """Insert two zero bits between the low 21 bits of every value."""

    x = values.astype(_U) & _U(0x1FFFFF)
    x = (x | (x << _U(32))) & _U(0x1F00000000FFFF)
    x = (x | (x << _U(16))) & _U(0x1F0000FF0000FF)
    x = (x | (x << _U(8))) & _U(0x100F00F00F00F00F)
    x = (x | (x << _U(4))) & _U(0x10C30C30C30C30C3)
    x = (x | (x << _U(2))) & _U(0x1249249249249249)
    return x


def _spread2(values: np.ndarray) -> np.ndarray:
    x = values.astype(_U) & _U(0xFFFFFFFF)
    x = (x | (x << _U(16))) & _U(0x0000FFFF0000FFFF)
    x = (x | (x << _U(8))) & _U(0x00FF00FF00FF00FF)
    x = (x | (x << _U(4))) & _U(0x0F0F0F0F0F0F0F0F)
    x = (x | (x << _U(2))) & _U(0x3333333333333333)
    x = (x | (x << _U(1))) & _U(0x5555555555555555)
    return x


def _compact2(values: np.ndarray) -> np.ndarray:
    x = values.astype(_U) & _U(0x5555555555555555)
    x = (x | (x >> _U(1))) & _U(0x3333333333333333)
    x = (x | (x >> _U(2))) & _U(0x0F0F0F0F0F0F0F0F)
    x = (x | (x >> _U(4))) & _U(0x00FF00FF00FF00FF)
    x = (x | (x >> _U(8))) & _U(0x0000FFFF0000FFFF)
    x = (x | (x >> _U(16))) & _U(0x00000000FFFFFFFF)
    return x


def _check_axis(values: np.ndarray, limit: int, label: str) -> np.ndarray:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= limit):
        raise RangeError(f"{label} must lie in [0, {limit}), got [{values.min()}, {values.max()}]")
    return values


def morton3_encode_array(xq: np.ndarray, yq: np.ndarray, zq: np.ndarray) -> np.ndarray:
    """Vectorised 60-bit codes; bit j of x/y/z lands at 3j / 3j+1 / 3j+2."""

    xq = _check_axis(xq, _AXIS_LIMIT, "x")
    yq = _check_axis(yq, _AXIS_LIMIT, "y")
    zq = _check_axis(zq, _AXIS_LIMIT, "z")
    return _spread3(xq) | (_spread3(yq) << _U(1)) | (_spread3(zq) << _U(2))


def morton3_encode(xq: int, yq: int, zq: int) -> int:
    code = morton3_encode_array(np.array([xq]), np.array([yq]), np.array([zq]))
    return int(code[0])


def morton2_encode_array(col: np.ndarray, row: np.ndarray) -> np.ndarray:
    col = _check_axis(col, _AXIS_LIMIT, "col")
    row = _check_axis(row, _AXIS_LIMIT, "row")
    return _spread2(col) | (_spread2(row) << _U(1))


def morton2_encode(col: int, row: int) -> int:
    return int(morton2_encode_array(np.array([col]), np.array([row]))[0])


def morton2_decode_array(ranks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ranks = _check_axis(ranks, _RANK_LIMIT, "rank").astype(_U)
    col = _compact2(ranks)
    row = _compact2(ranks >> _U(1))
    return col.astype(np.int64), row.astype(np.int64)


def morton2_decode(rank: int) -> tuple[int, int]:
    col, row = morton2_decode_array(np.array([rank]))
    return int(col[0]), int(row[0])


def quantized_positions(cloud: GaussianCloud, params: QuantizationParams) -> np.ndarray:
    from .mapping import quantize

    group = params["positions"]
    if group.bits != COORD_BITS:
        raise RangeError(f"Morton sorting needs {COORD_BITS}-bit coordinates, got {group.bits}")
    return quantize(cloud.positions, group)


def sort_by_morton(cloud: GaussianCloud, params: QuantizationParams) -> np.ndarray:
    """Stable permutation ordering primitives by ascending 3D Morton code."""

    q = quantized_positions(cloud, params)
    codes = morton3_encode_array(q[:, 0], q[:, 1], q[:, 2])
    return np.argsort(codes, kind="stable")


def grid_side(count: int) -> int:
    if count < 1:
        raise RangeError("a layout needs at least one primitive")
    side = 1
    while side * side < count:
        side *= 2
    return side


def build_layout(sorted_count: int) -> GridLayout:
    """Place sorted primitive i at the pixel of 2D Morton rank i."""

    side = grid_side(sorted_count)
    pixels = morton_scan_pixels(side)
    order = np.full(side * side, PADDING, dtype=np.int64)
    order[pixels[:sorted_count]] = np.arange(sorted_count, dtype=np.int64)
    LOGGER.debug("Laid out %d primitives on a %dx%d grid", sorted_count, side, side)
    return GridLayout(side=side, order=order, n_real=sorted_count, scan="morton")


def build_row_major_layout(sorted_count: int) -> GridLayout:
    """Row-by-row placement, kept as an analysis baseline."""

    side = grid_side(sorted_count)
    order = np.full(side * side, PADDING, dtype=np.int64)
    order[:sorted_count] = np.arange(sorted_count, dtype=np.int64)
    return GridLayout(side=side, order=order, n_real=sorted_count, scan="raster")


def build_random_layout(count: int, seed: int) -> GridLayout:
    """Seeded random placement of primitives over the Morton scan positions."""

    layout = build_layout(count)
    permutation = np.random.default_rng(seed).permutation(count)
    return layout.relabel(permutation)


def morton_scan_pixels(side: int) -> np.ndarray:
    """Raster indices of the grid in 2D Morton scan order."""

    col, row = morton2_decode_array(np.arange(side * side, dtype=np.int64))
    return row * side + col


def scan_pixels(layout: GridLayout) -> np.ndarray:
    if layout.scan == "raster":
        return np.arange(layout.side * layout.side, dtype=np.int64)
    return morton_scan_pixels(layout.side)


def filled_order(layout: GridLayout) -> np.ndarray:
    """Layout order with padding cells replaced by the last real primitive in scan order."""

    order = layout.order.copy()
    tail = order[scan_pixels(layout)[layout.n_real - 1]]
    order[order == PADDING] = tail
    return order
