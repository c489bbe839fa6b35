"""
Plot artifacts for RSS volumes: 16-bit binary PGM heatmaps with a JSON
sidecar, axial curves as CSV and optional matplotlib PNG previews.

PGM rows run from the top of the tunnel (largest y) down to the floor and
columns from -x to +x, so the image reads like a cross-section drawing.
"""
from __future__ import annotations

import json
import os
import re

import numpy as np

from rss_dataset import denormalize_array
from rss_metrics import axial_curve

# --- CONFIGURATION ---
PGM_MAXVAL = 65535
PNG_DPI = 120
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def slice_db(volume, t):
    """Slice t of the volume in dB, denormalizing when needed."""
    if not 0 <= t < volume.nz:
        raise ValueError(f"Slice index {t} out of range for a volume of {volume.nz} slices")
    values = volume.slices[t].astype(np.float64)
    if volume.normalized:
        values = denormalize_array(values, volume.stats)
    return values


# ==========================================
# PGM
# ==========================================
def heatmap_image(values):
    """(nx, ny) slice to an (ny, nx) image, top row = largest y."""
    return np.asarray(values, dtype=np.float64).T[::-1]


def pgm_bytes(values):
    """P5 16-bit big-endian image of one slice, min -> 0 and max -> 65535. Returns (blob, lo, hi)."""
    img = heatmap_image(values)
    if not np.isfinite(img).all():
        raise ValueError("Slice contains non-finite values; cannot render a heatmap")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        levels = np.rint((img - lo) / (hi - lo) * PGM_MAXVAL)
    else:
        levels = np.zeros_like(img)
    height, width = img.shape
    header = f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + levels.astype(">u2").tobytes(), lo, hi


def read_pgm(path):
    """uint16 image of a 16-bit P5 file written by write_heatmap."""
    with open(path, "rb") as f:
        blob = f.read()
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise ValueError(f"'{path}' is not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != PGM_MAXVAL:
        raise ValueError(f"'{path}' has maxval {maxval}, expected {PGM_MAXVAL}")
    data = blob[m.end():]
    if len(data) != 2 * width * height:
        raise ValueError(f"'{path}' holds {len(data)} pixel bytes, expected {2 * width * height}")
    return np.frombuffer(data, dtype=">u2").reshape(height, width).astype(np.uint16)


def write_heatmap(volume, t, path):
    """PGM of slice t plus `<path>.json` with its dB range. Returns the sidecar dict."""
    blob, lo, hi = pgm_bytes(slice_db(volume, t))
    with open(path, "wb") as f:
        f.write(blob)
    sidecar = {
        "t": int(t),
        "z": float(volume.z[t]),
        "width": int(volume.grid.nx),
        "height": int(volume.grid.ny),
        "min_db": lo,
        "max_db": hi,
        "grid": volume.grid.to_dict(),
    }
    if volume.config is not None:
        sidecar["shape"] = volume.config.section.kind
        sidecar["frequency"] = volume.config.frequency
    with open(f"{os.path.splitext(path)[0]}.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return sidecar


# ==========================================
# AXIAL CURVES
# ==========================================
def write_axial_csv(volume, rx, path):
    curve = axial_curve(volume, rx)
    curve.to_csv(path, index=False, columns=["z", "rss_db"])
    return curve


# ==========================================
# PNG PREVIEWS
# ==========================================
def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def heatmap_png(volume, t, path):
    plt = _pyplot()
    xmin, ymin, xmax, ymax = volume.grid.bounds
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(slice_db(volume, t).T, origin="lower", extent=(xmin, xmax, ymin, ymax), cmap="viridis")
    if volume.config is not None:
        ox, oy = volume.config.section.outline().exterior.xy
        ax.plot(ox, oy, color="white", linewidth=1.0)
        ax.set_title(f"{volume.config.section.kind} @ {volume.config.frequency / 1e9:.1f} GHz, z = {volume.z[t]:.0f} m")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.colorbar(im, ax=ax, label="RSS [dB]")
    fig.savefig(path, dpi=PNG_DPI)
    plt.close(fig)
    return path


def axial_png(curve, path, label=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.plot(curve["z"], curve["rss_db"], label=label or "RSS", alpha=0.8)
    ax.set_xlabel("z [m]")
    ax.set_ylabel("RSS [dB]")
    ax.legend()
    fig.savefig(path, dpi=PNG_DPI)
    plt.close(fig)
    return path
