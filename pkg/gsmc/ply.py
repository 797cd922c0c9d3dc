"""Reading and writing 3DGS point files (binary little-endian PLY)."""
from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .errors import DataError, SchemaError
from .models import PROPERTY_NAMES, GaussianCloud

LOGGER = logging.getLogger(__name__)

_FLOAT_TYPES = {"f4", "float", "float32"}


def load_cloud(path: Path) -> GaussianCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    try:
        ply = PlyData.read(str(path))
    except (PlyParseError, ValueError, EOFError) as exc:
        raise SchemaError(f"{path} is not a readable PLY file: {exc}") from exc

    if ply.text:
        raise SchemaError(f"{path} is ASCII PLY; only binary_little_endian is accepted")
    if ply.byte_order not in ("<", "="):
        raise SchemaError(f"{path} is big-endian PLY; only binary_little_endian is accepted")

    try:
        vertex = ply["vertex"]
    except KeyError as exc:
        raise SchemaError(f"{path} has no 'vertex' element") from exc

    declared = {prop.name: prop for prop in vertex.properties}
    for name in PROPERTY_NAMES:
        prop = declared.get(name)
        if prop is None:
            raise SchemaError(f"missing property {name}")
        if getattr(prop, "val_dtype", "f4").lstrip("<>=") not in _FLOAT_TYPES:
            raise SchemaError(f"property {name} must be a 32-bit float")

    matrix = np.stack([np.asarray(vertex[name], dtype=np.float32) for name in PROPERTY_NAMES], axis=1)
    if matrix.shape[0] == 0:
        raise DataError(f"{path} contains no vertices")
    cloud = GaussianCloud.from_matrix(matrix)

    bad = cloud.first_non_finite()
    if bad is not None:
        raise DataError(f"non-finite attribute value at primitive {bad}")

    LOGGER.debug("Loaded %d primitives from %s", cloud.n, path)
    return cloud


def save_cloud(cloud: GaussianCloud, path: Path) -> None:
    """Write ``cloud`` atomically; a failed write leaves no partial file."""

    bad = cloud.first_non_finite()
    if bad is not None:
        raise DataError(f"refusing to write non-finite value at primitive {bad}")

    path = Path(path)
    matrix = cloud.to_matrix()
    records = np.empty(cloud.n, dtype=[(name, "<f4") for name in PROPERTY_NAMES])
    for column, name in enumerate(PROPERTY_NAMES):
        records[name] = matrix[:, column]
    element = PlyElement.describe(records, "vertex")

    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp_name = tempfile.mkstemp(prefix=".gsmc-", suffix=".ply", dir=path.parent)
    try:
        with os.fdopen(handle, "wb") as stream:
            PlyData([element], text=False, byte_order="<").write(stream)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    LOGGER.debug("Wrote %d primitives to %s", cloud.n, path)
