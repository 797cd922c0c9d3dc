"""Low-rank reduction of the 45 SH AC channels and its decoder metadata block."""
from __future__ import annotations

import logging
import struct

import numpy as np

from .errors import ConfigError, ContainerError, InsufficientDataError, ShapeError
from .models import (
    PCA_MODES,
    SH_AC_CHANNELS,
    SH_COLOR_CHANNELS,
    AcCoefficients,
    PcaModel,
    check_component_count,
)

LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sBBH")
_MAGIC = b"PCA1"
_MODE_CODES = {mode: code for code, mode in enumerate(PCA_MODES)}

# Eigenvalues below this fraction of the largest one are treated as zero variance.
_RANK_TOLERANCE = 1e-10


def sh_order_permutation() -> np.ndarray:
    """Channel index per column when coefficients are ranked by SH order, colour-minor.

    Column 3*j + c holds colour c's coefficient j, so clipping to k keeps the
    lowest k/3 coefficients of all three colours.
    """

    return np.array(
        [c * SH_COLOR_CHANNELS + j for j in range(SH_COLOR_CHANNELS) for c in range(3)],
        dtype=np.int64,
    )


def _check_matrix(sh_ac: np.ndarray) -> np.ndarray:
    sh_ac = np.asarray(sh_ac, dtype=np.float64)
    if sh_ac.ndim != 2 or sh_ac.shape[1] != SH_AC_CHANNELS:
        raise ShapeError(f"expected an N x {SH_AC_CHANNELS} matrix, got {sh_ac.shape}")
    return sh_ac


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def _complete_basis(kept: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns to a full basis using identity columns, in order."""

    columns = [kept[:, i] for i in range(kept.shape[1])]
    for axis in range(dim):
        if len(columns) == dim:
            break
        candidate = np.zeros(dim)
        candidate[axis] = 1.0
        for _ in range(2):
            for column in columns:
                candidate -= column * float(column @ candidate)
        norm = float(np.linalg.norm(candidate))
        if norm > 1e-8:
            columns.append(candidate / norm)
    return np.stack(columns, axis=1) if columns else np.eye(dim)


def _eigen_decompose(centered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenpairs of the 1/(N-1) covariance, sign-fixed and completed."""

    n, dim = centered.shape
    covariance = (centered.T @ centered) / (n - 1)
    covariance = (covariance + covariance.T) / 2
    values, vectors = np.linalg.eigh(covariance)
    values = values[::-1]
    vectors = vectors[:, ::-1]

    top = float(values[0]) if values.size else 0.0
    rank = int(np.sum(values > top * _RANK_TOLERANCE)) if top > 0 else 0
    values = np.where(np.arange(dim) < rank, np.clip(values, 0.0, None), 0.0)
    basis = _complete_basis(vectors[:, :rank], dim)
    return values, _fix_signs(basis)


def _ratios(values: np.ndarray) -> np.ndarray:
    total = float(np.sum(values))
    if total <= 0:
        ratios = np.zeros_like(values, dtype=np.float64)
        ratios[0] = 1.0
        return ratios
    return values / total


def fit(sh_ac: np.ndarray, mode: str = "joint", k: int = SH_AC_CHANNELS) -> PcaModel:
    sh_ac = _check_matrix(sh_ac)
    k = check_component_count(k)
    if mode not in PCA_MODES:
        raise ConfigError(f"Unknown PCA mode: {mode!r}")

    if mode == "order-clip":
        channels = sh_order_permutation()
        basis = np.zeros((SH_AC_CHANNELS, SH_AC_CHANNELS))
        basis[channels, np.arange(SH_AC_CHANNELS)] = 1.0
        variances = sh_ac.var(axis=0, ddof=1) if sh_ac.shape[0] > 1 else np.zeros(SH_AC_CHANNELS)
        return PcaModel(
            mode=mode,
            mean=np.zeros(SH_AC_CHANNELS),
            basis=basis,
            evr=_ratios(variances[channels]),
            k=k,
        )

    n = sh_ac.shape[0]
    if n < 2:
        raise InsufficientDataError(f"{mode} PCA needs at least 2 primitives, got {n}")

    mean = sh_ac.mean(axis=0)
    centered = sh_ac - mean

    if mode == "joint":
        values, basis = _eigen_decompose(centered)
    else:
        values = np.zeros(SH_AC_CHANNELS)
        blocks = np.zeros((SH_AC_CHANNELS, SH_AC_CHANNELS))
        for color in range(3):
            span = slice(color * SH_COLOR_CHANNELS, (color + 1) * SH_COLOR_CHANNELS)
            color_values, color_basis = _eigen_decompose(centered[:, span])
            values[span] = color_values
            blocks[span, span] = color_basis
        # Interleave the three colour PCAs into one descending order; ties keep colour order.
        ranking = np.argsort(-values, kind="stable")
        values = values[ranking]
        basis = blocks[:, ranking]

    model = PcaModel(mode=mode, mean=mean, basis=basis, evr=_ratios(values), k=k)
    LOGGER.debug(
        "Fitted %s PCA on %d rows; first %d components explain %.4f", mode, n, k,
        model.captured_variance(),
    )
    return model


def project(model: PcaModel, sh_ac: np.ndarray, k: int | None = None) -> AcCoefficients:
    sh_ac = _check_matrix(sh_ac)
    k = check_component_count(model.k if k is None else k)
    if k > model.basis.shape[1]:
        raise ShapeError(f"model carries {model.basis.shape[1]} components, {k} requested")

    centered = sh_ac - model.mean
    coeffs = np.zeros((sh_ac.shape[0], k))
    # Fixed accumulation order keeps results identical for every row position.
    for channel in range(SH_AC_CHANNELS):
        coeffs += centered[:, channel:channel + 1] * model.basis[channel, :k]
    return AcCoefficients(coeffs=coeffs, k=k)


def reconstruct(model: PcaModel, coeffs: AcCoefficients) -> np.ndarray:
    values = np.asarray(coeffs.coeffs, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != coeffs.k:
        raise ShapeError(f"coefficient matrix of shape {values.shape} does not hold k={coeffs.k}")
    if coeffs.k != model.k:
        raise ShapeError(f"coefficients carry k={coeffs.k} but the model expects k={model.k}")

    out = np.repeat(model.mean[np.newaxis, :], values.shape[0], axis=0)
    for component in range(coeffs.k):
        out += values[:, component:component + 1] * model.basis[:, component]
    return out


def serialize_model(model: PcaModel, k: int | None = None) -> bytes:
    """Header, 45 float32 means, then the 45 x k basis (omitted for order-clip)."""

    k = check_component_count(model.k if k is None else k)
    if k > model.basis.shape[1]:
        raise ShapeError(f"model carries {model.basis.shape[1]} components, {k} requested")
    chunks = [
        _HEADER.pack(_MAGIC, _MODE_CODES[model.mode], k, 0),
        np.asarray(model.mean, dtype="<f4").tobytes(),
    ]
    if model.mode != "order-clip":
        chunks.append(np.ascontiguousarray(model.basis[:, :k], dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_model(block: bytes) -> PcaModel:
    if len(block) < _HEADER.size:
        raise ContainerError("PCA block is truncated before its header")
    magic, mode_code, k, _ = _HEADER.unpack_from(block)
    if magic != _MAGIC or mode_code >= len(PCA_MODES):
        raise ContainerError("PCA block has an invalid header")
    mode = PCA_MODES[mode_code]
    try:
        k = check_component_count(k)
    except ConfigError as exc:
        raise ContainerError(f"PCA block declares an invalid component count: {exc}") from exc

    basis_reals = 0 if mode == "order-clip" else SH_AC_CHANNELS * k
    expected = _HEADER.size + 4 * (SH_AC_CHANNELS + basis_reals)
    if len(block) != expected:
        raise ContainerError(f"PCA block holds {len(block)} bytes, expected {expected}")

    payload = np.frombuffer(block, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if not np.isfinite(payload).all():
        raise ContainerError("PCA block holds non-finite values")
    mean = payload[:SH_AC_CHANNELS]
    if mode == "order-clip":
        basis = np.zeros((SH_AC_CHANNELS, SH_AC_CHANNELS))
        basis[sh_order_permutation(), np.arange(SH_AC_CHANNELS)] = 1.0
        basis = basis[:, :k]
    else:
        basis = payload[SH_AC_CHANNELS:].reshape(SH_AC_CHANNELS, k)
    return PcaModel(mode=mode, mean=mean, basis=basis, evr=None, k=k)
