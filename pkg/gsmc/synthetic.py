"""Synthetic clouds: clustered Gaussian mixtures with smooth attribute fields."""
from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigError
from .models import SH_AC_CHANNELS, GaussianCloud

LOGGER = logging.getLogger(__name__)

_LATENT_FIELDS = 6


def _smooth_fields(positions: np.ndarray, count: int, rng: np.random.Generator, frequency: float) -> np.ndarray:
    """``count`` sinusoidal fields of the position, each in [-1, 1]."""

    directions = rng.normal(size=(3, count)) * frequency
    phases = rng.uniform(0.0, 2 * np.pi, size=count)
    return np.sin(positions @ directions + phases)


def generate_cloud(
    count: int,
    seed: int = 0,
    clusters: int = 8,
    noise: float = 0.02,
    extent: float = 10.0,
) -> GaussianCloud:
    """Seeded cloud whose attributes vary smoothly with position.

    SH AC energy falls off with SH order and is driven by a handful of latent
    fields, so a few principal components capture most of it.
    """

    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if clusters < 1:
        raise ConfigError(f"clusters must be >= 1, got {clusters}")
    if noise < 0:
        raise ConfigError(f"noise must be non-negative, got {noise}")

    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent, extent, size=(clusters, 3))
    spreads = rng.uniform(0.05, 0.15, size=clusters) * extent
    weights = rng.dirichlet(np.ones(clusters))
    labels = rng.choice(clusters, size=count, p=weights)
    positions = centers[labels] + rng.normal(size=(count, 3)) * spreads[labels, None]

    frequency = 1.0 / extent
    sh_dc = 1.5 * _smooth_fields(positions, 3, rng, frequency) + noise * rng.normal(size=(count, 3))

    latent = _smooth_fields(positions, _LATENT_FIELDS, rng, 2 * frequency)
    order_decay = np.array([1.0] * 3 + [0.5] * 5 + [0.25] * 7)
    mixing = rng.normal(size=(_LATENT_FIELDS, SH_AC_CHANNELS)) * np.tile(order_decay, 3) * 0.2
    sh_ac = latent @ mixing + noise * 0.5 * rng.normal(size=(count, SH_AC_CHANNELS))

    opacity = 2.0 * _smooth_fields(positions, 1, rng, frequency) + noise * rng.normal(size=(count, 1))
    scale = -4.0 + 0.8 * _smooth_fields(positions, 3, rng, frequency) + noise * rng.normal(size=(count, 3))

    rotation = _smooth_fields(positions, 4, rng, frequency) + np.array([2.0, 0.0, 0.0, 0.0])
    rotation += noise * rng.normal(size=(count, 4))
    rotation /= np.linalg.norm(rotation, axis=1, keepdims=True)

    LOGGER.debug("Generated %d primitives in %d clusters (seed %d)", count, clusters, seed)
    return GaussianCloud(
        positions=positions,
        sh_dc=sh_dc,
        sh_ac=sh_ac,
        opacity=opacity,
        scale=scale,
        rotation=rotation,
    )


def generate_random_cloud(count: int, seed: int = 0) -> GaussianCloud:
    """Attributes independent of position; the worst case for every layout."""

    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-1.0, 1.0, size=(count, 3)),
        sh_dc=rng.normal(size=(count, 3)),
        sh_ac=rng.normal(size=(count, SH_AC_CHANNELS)) * 0.1,
        opacity=rng.normal(size=(count, 1)),
        scale=rng.normal(-4.0, 0.5, size=(count, 3)),
        rotation=rng.normal(size=(count, 4)),
    )
