"""Blockwise layout refinement: permutes 4-pixel groups inside aligned B x B blocks.

Every pass freezes a 3x3 box-blurred copy of the grid as its target. Inside each
block the pixels are split into seeded random groups of four, and each group
takes whichever of its 24 arrangements lies closest to the target.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError
from .models import FeatureGrid, GridLayout, PlasSchedule

LOGGER = logging.getLogger(__name__)

# Lexicographic order; row 0 is the identity, so argmin ties resolve to it.
PERMUTATIONS = np.array(list(itertools.permutations(range(4))), dtype=np.int64)
_POSITIONS = np.arange(4)

_GROUP_CHUNK = 4096


@dataclass(slots=True)
class PassRecord:
    block_size: int
    op_count: int
    target_cost_before: float
    target_cost_after: float
    cost_before: float
    cost_after: float
    bytes_before: Optional[int] = None
    bytes_after: Optional[int] = None
    accepted: bool = True

    @property
    def cost_delta(self) -> float:
        return self.target_cost_after - self.target_cost_before

    def as_json(self) -> dict[str, object]:
        return {
            "block_size": self.block_size,
            "op_count": self.op_count,
            "target_cost_before": self.target_cost_before,
            "target_cost_after": self.target_cost_after,
            "cost_before": self.cost_before,
            "cost_after": self.cost_after,
            "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after,
            "accepted": self.accepted,
        }


@dataclass(slots=True)
class MiniplasReport:
    initial_cost: float
    final_cost: float
    initial_bytes: Optional[int] = None
    final_bytes: Optional[int] = None
    passes: List[PassRecord] = field(default_factory=list)

    @property
    def op_count(self) -> int:
        return sum(record.op_count for record in self.passes)

    def as_json(self) -> dict[str, object]:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "initial_bytes": self.initial_bytes,
            "final_bytes": self.final_bytes,
            "op_count": self.op_count,
            "passes": [record.as_json() for record in self.passes],
        }


def smoothness_cost(grid: FeatureGrid) -> float:
    """Weighted mean squared difference over horizontally and vertically adjacent pixels."""

    side = grid.side
    pairs = 2 * side * (side - 1)
    if pairs == 0:
        return 0.0
    planes = grid.planes
    horizontal = np.square(np.diff(planes, axis=2)).sum(axis=(1, 2))
    vertical = np.square(np.diff(planes, axis=1)).sum(axis=(1, 2))
    return float(np.dot(grid.weights, horizontal + vertical) / pairs)


def blur_target(grid: FeatureGrid) -> FeatureGrid:
    """Per-channel 3x3 box filter with edge clamping."""

    blurred = uniform_filter(grid.planes, size=(1, 3, 3), mode="nearest")
    return FeatureGrid(planes=blurred, weights=grid.weights.copy())


def target_distance(grid: FeatureGrid, target: FeatureGrid) -> float:
    diff = np.square(grid.planes - target.planes).sum(axis=(1, 2))
    return float(np.dot(grid.weights, diff))


def pass_op_count(side: int, block_size: int) -> int:
    blocks = (side // block_size) ** 2
    return blocks * (block_size * block_size // 4) * len(PERMUTATIONS)


def _group_pixels(side: int, block_size: int, rng: np.random.Generator) -> np.ndarray:
    """(groups, 4) raster indices; keys are drawn per block coordinate, so groups
    depend only on the generator state and the block position."""

    per_axis = side // block_size
    keys = rng.random((per_axis, per_axis, block_size * block_size))
    local = np.argsort(keys, axis=-1, kind="stable")
    block_rows = np.arange(per_axis)[:, None, None] * block_size
    block_cols = np.arange(per_axis)[None, :, None] * block_size
    rows = block_rows + local // block_size
    cols = block_cols + local % block_size
    return (rows * side + cols).reshape(-1, 4)


def optimize_pass(
    grid: FeatureGrid,
    layout: GridLayout,
    block_size: int,
    rng: np.random.Generator,
) -> tuple[FeatureGrid, GridLayout, float, int]:
    """One blockwise pass against a frozen blurred target.

    Returns the new grid and layout, the change of the target distance
    (never positive) and the number of evaluated assignments.
    """

    side = grid.side
    if block_size < 4 or block_size & (block_size - 1):
        raise ConfigError(f"block size must be a power of two >= 4, got {block_size}")
    if side % block_size:
        raise ConfigError(f"block size {block_size} does not divide grid side {side}")
    if layout.side != side:
        raise ConfigError(f"layout side {layout.side} differs from grid side {side}")

    channels = grid.channels
    features = grid.planes.reshape(channels, -1)
    target = blur_target(grid).planes.reshape(channels, -1)
    weights = grid.weights
    valid = layout.valid

    groups = _group_pixels(side, block_size, rng)
    new_features = features.copy()
    new_order = layout.order.copy()
    delta = 0.0

    for start in range(0, groups.shape[0], _GROUP_CHUNK):
        chunk = groups[start:start + _GROUP_CHUNK]
        source = features[:, chunk]
        wanted = target[:, chunk]
        # pair[g, i, j]: weighted distance of feature i placed at position j.
        pair = np.einsum(
            "c,cgij->gij", weights, np.square(source[:, :, :, None] - wanted[:, :, None, :])
        )
        costs = pair[:, PERMUTATIONS, _POSITIONS].sum(axis=2)

        # Padding features may only land on padding cells.
        mask = valid[chunk]
        allowed = (mask[:, PERMUTATIONS] == mask[:, None, :]).all(axis=2)
        costs = np.where(allowed, costs, np.inf)

        best = np.argmin(costs, axis=1)
        rows = np.arange(chunk.shape[0])
        delta += float(np.sum(costs[rows, best] - costs[:, 0]))

        moved = best != 0
        if not moved.any():
            continue
        destinations = chunk[moved]
        origins = np.take_along_axis(chunk[moved], PERMUTATIONS[best[moved]], axis=1)
        new_features[:, destinations] = features[:, origins]
        new_order[destinations] = layout.order[origins]

    op_count = pass_op_count(side, block_size)
    refined = FeatureGrid(planes=new_features.reshape(channels, side, side), weights=weights.copy())
    relaid = GridLayout(side=side, order=new_order, n_real=layout.n_real, scan=layout.scan)
    return refined, relaid, delta, op_count


def fitted_passes(schedule: PlasSchedule, side: int) -> list[int]:
    """Pass block sizes of the schedule, without sizes larger than the grid."""

    sizes = [size for size in schedule.block_sizes if size <= side]
    if sizes != schedule.block_sizes:
        LOGGER.warning(
            "Grid side %d cannot host block sizes %s; running %s",
            side, schedule.block_sizes, sizes or "no passes",
        )
    return [size for size in sizes for _ in range(schedule.iterations_per_size)]


def run_miniplas(
    grid: FeatureGrid,
    layout: GridLayout,
    schedule: PlasSchedule,
    coded_size: Optional[Callable[[GridLayout], int]] = None,
) -> tuple[FeatureGrid, GridLayout, MiniplasReport]:
    """Run every pass of ``schedule``.

    A pass is kept only if it does not raise the smoothness cost and, when
    ``coded_size`` is given, does not grow the coded size of the layout.
    """

    initial = smoothness_cost(grid)
    current_bytes = coded_size(layout) if coded_size is not None else None
    report = MiniplasReport(
        initial_cost=initial, final_cost=initial, initial_bytes=current_bytes, final_bytes=current_bytes
    )
    current = initial

    for index, block_size in enumerate(fitted_passes(schedule, grid.side)):
        rng = np.random.default_rng([schedule.seed, index])
        target = blur_target(grid)
        before_target = target_distance(grid, target)
        candidate_grid, candidate_layout, delta, op_count = optimize_pass(grid, layout, block_size, rng)
        after = smoothness_cost(candidate_grid)
        record = PassRecord(
            block_size=block_size,
            op_count=op_count,
            target_cost_before=before_target,
            target_cost_after=target_distance(candidate_grid, target),
            cost_before=current,
            cost_after=after,
            bytes_before=current_bytes,
        )
        if after <= current and coded_size is not None:
            record.bytes_after = coded_size(candidate_layout)

        if after > current:
            record.accepted = False
            LOGGER.warning(
                "MiniPLAS pass %d (B=%d) raised smoothness cost %.6g -> %.6g; reverted",
                index, block_size, current, after,
            )
        elif record.bytes_after is not None and record.bytes_after > current_bytes:
            record.accepted = False
            LOGGER.warning(
                "MiniPLAS pass %d (B=%d) grew the coded maps %d -> %d bytes; reverted",
                index, block_size, current_bytes, record.bytes_after,
            )
        else:
            grid, layout, current = candidate_grid, candidate_layout, after
            if record.bytes_after is not None:
                current_bytes = record.bytes_after
        LOGGER.debug(
            "MiniPLAS pass %d B=%d ops=%d delta=%.6g cost=%.6g", index, block_size, op_count, delta, current
        )
        report.passes.append(record)

    report.final_cost = current
    report.final_bytes = current_bytes
    return grid, layout, report
