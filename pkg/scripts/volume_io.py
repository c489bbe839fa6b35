"""
RSSV1 volume files.

Layout (little-endian):
    8s   magic "RSSVOL01"
    4I   version, nx, ny, nz
    4d   delta, delta_z, min_db, max_db   (NaN when no NormStats)
    I    JSON metadata length, then UTF-8 JSON (config, section, grid, z, normalized)
    f4   nx*ny*nz values, slice-major, row-major within a slice
"""
import math
import struct

import numpy as np

from binfmt import (
    ByteReader,
    DimensionOverflowError,
    FormatError,
    pack_json,
    read_file,
    write_atomic,
)
from pwe_solver import NormStats, PweConfig, RssVolume
from tunnel_geometry import GridSpec

# --- CONFIGURATION ---
MAGIC = b"RSSVOL01"
VERSION = 1
MAX_ELEMENTS = 1 << 31
MAX_META_BYTES = 64 << 20

_DIMS = struct.Struct("<4I")
_SCALARS = struct.Struct("<4d")


def volume_to_bytes(volume):
    nz, nx, ny = volume.slices.shape
    if (nx, ny) != (volume.grid.nx, volume.grid.ny):
        raise ValueError(f"Slices {nx}x{ny} do not match grid {volume.grid.nx}x{volume.grid.ny}")
    if len(volume.z) != nz:
        raise ValueError(f"{len(volume.z)} z values for {nz} slices")
    if nx * ny * nz > MAX_ELEMENTS:
        raise DimensionOverflowError(f"Volume of {nx}x{ny}x{nz} exceeds {MAX_ELEMENTS} values")

    delta_z = volume.config.delta_z if volume.config is not None else (
        float(volume.z[1] - volume.z[0]) if nz > 1 else 0.0
    )
    min_db = volume.stats.min_db if volume.stats is not None else math.nan
    max_db = volume.stats.max_db if volume.stats is not None else math.nan
    meta = {
        "config": volume.config.to_dict() if volume.config is not None else None,
        "section": volume.config.section.to_dict() if volume.config is not None else None,
        "grid": volume.grid.to_dict(),
        "z": [float(z) for z in volume.z],
        "normalized": bool(volume.normalized),
    }
    payload = np.ascontiguousarray(volume.slices, dtype="<f4").tobytes()
    return b"".join([
        MAGIC,
        _DIMS.pack(VERSION, nx, ny, nz),
        _SCALARS.pack(volume.grid.delta, delta_z, min_db, max_db),
        pack_json(meta),
        payload,
    ])


def volume_from_bytes(blob, what="RSSV1 volume"):
    reader = ByteReader(blob, what)
    reader.expect_magic(MAGIC)
    reader.expect_version(VERSION)
    nx, ny, nz = reader.unpack("<3I")
    if nx * ny * nz > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{what}: {nx}x{ny}x{nz} exceeds {MAX_ELEMENTS} values")
    delta, _delta_z, min_db, max_db = reader.unpack("<4d")
    meta = reader.read_json(MAX_META_BYTES)
    values = np.frombuffer(reader.take(4 * nx * ny * nz), dtype="<f4")
    reader.expect_end()

    grid = GridSpec.from_dict(meta["grid"])
    if (grid.nx, grid.ny) != (nx, ny) or grid.delta != delta:
        raise FormatError(f"{what}: header grid {nx}x{ny} @ {delta} disagrees with metadata")
    z = np.asarray(meta["z"], dtype=np.float64)
    if len(z) != nz:
        raise FormatError(f"{what}: {len(z)} z values for {nz} slices")

    stats = None if math.isnan(min_db) else NormStats(min_db, max_db)
    config = PweConfig.from_dict(meta["config"]) if meta.get("config") else None
    return RssVolume(
        slices=values.astype(np.float32).reshape(nz, nx, ny),
        z=z,
        grid=grid,
        config=config,
        stats=stats,
        normalized=bool(meta.get("normalized", False)),
    )


def save_volume(volume, path):
    write_atomic(path, volume_to_bytes(volume))
    return path


def load_volume(path):
    return volume_from_bytes(read_file(path), what=f"RSSV1 volume '{path}'")
