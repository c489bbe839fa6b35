"""
Error metrics on denormalized dB fields, per-group evaluation tables and
longitudinal (axial) RSS curves.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import (
    mean_absolute_error,
    mean_absolute_percentage_error,
    mean_squared_error,
    r2_score,
)
from tqdm import tqdm

from rss_dataset import denormalize_array

# --- CONFIGURATION ---
MAPE_EPS_DB = 1e-6
AXIAL_WINDOW_M = 100.0
METRIC_ROWS = (("MAE", "mae"), ("MAPE", "mape"), ("RMSE", "rmse"), ("R2", "r2"))

# Receiver grid over the cross-section [m]
RX_X_RANGE = (-1.5, 1.5)
RX_Y_RANGE = (0.2, 3.2)
RX_STEP = 0.15
POINT_SETS = ("interior", "rx")


class UndefinedMetricError(ValueError):
    """The reference makes a metric meaningless (constant field, no usable MAPE point)."""


@dataclass(frozen=True)
class MetricsRecord:
    mae: float
    mape: float   # percent
    rmse: float
    r2: float
    n_points: int
    excluded_points: int

    def to_dict(self):
        return asdict(self)


def compute_metrics(y, y_hat, mask=None):
    """
    MAE, MAPE (%), RMSE and R^2 of y_hat against reference y. `mask`
    restricts the points (broadcast over leading slice axes); MAPE skips
    points with |y| < 1e-6 dB and reports how many it skipped.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"Reference {y.shape} and prediction {y_hat.shape} differ in shape")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), y.shape)
        y, y_hat = y[mask], y_hat[mask]
    y, y_hat = y.ravel(), y_hat.ravel()
    n = y.size
    if n < 2:
        raise ValueError(f"Need at least 2 points, got {n}")

    keep = np.abs(y) >= MAPE_EPS_DB
    if not keep.any():
        raise UndefinedMetricError(f"All {n} points have |y| < {MAPE_EPS_DB} dB; MAPE undefined")
    if np.sum((y - y.mean()) ** 2) == 0.0:
        raise UndefinedMetricError("Reference has zero variance; R^2 undefined")

    return MetricsRecord(
        mae=float(mean_absolute_error(y, y_hat)),
        mape=100.0 * float(mean_absolute_percentage_error(y[keep], y_hat[keep])),
        rmse=math.sqrt(mean_squared_error(y, y_hat)),
        r2=float(r2_score(y, y_hat)),
        n_points=int(n),
        excluded_points=int(n - keep.sum()),
    )


# ==========================================
# MODEL EVALUATION
# ==========================================
def predict_volume_slices(model, coarse01, t_indices):
    """Clamped SR slices (len(t), 8h, 8w) for the listed target indices."""
    n = model.config.context_radius
    out = []
    for t in t_indices:
        idx = np.clip(np.arange(t - n, t + n + 1), 0, coarse01.nz - 1)
        out.append(model.predict(coarse01.slices[idx]))
    return np.stack(out)


def rx_points(grid, section=None, x_range=RX_X_RANGE, y_range=RX_Y_RANGE, step=RX_STEP):
    """
    Boolean (nx, ny) mask of the cells nearest to a regular receiver grid.
    Receivers off the grid (cropped volumes) or outside `section` are
    dropped; receivers sharing a cell count once.
    """
    if step <= 0:
        raise ValueError(f"Receiver step must be > 0 m, got {step}")
    xs = np.round(np.arange(x_range[0], x_range[1] + 0.5 * step, step), 10)
    ys = np.round(np.arange(y_range[0], y_range[1] + 0.5 * step, step), 10)
    xmin, ymin, xmax, ymax = grid.bounds
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    for x in xs:
        for y in ys:
            if not (xmin <= x <= xmax and ymin <= y <= ymax):
                continue
            if section is not None and not section.contains(x, y):
                continue
            mask[grid.nearest_cell(x, y)] = True
    if not mask.any():
        raise ValueError(f"No receiver of the {len(xs)}x{len(ys)} grid falls on the volume")
    return mask


def point_mask(volume, points="interior"):
    if points == "interior":
        return volume.interior_mask()
    if points == "rx":
        section = volume.config.section if volume.config is not None else None
        return rx_points(volume.grid, section)
    raise ValueError(f"Unknown point set '{points}'. Expected one of {list(POINT_SETS)}")


def pair_metrics(model, coarse01, fine01, t_indices=None, points="interior"):
    mask = point_mask(fine01, points)
    t_indices = list(range(coarse01.nz)) if t_indices is None else list(t_indices)
    sr = predict_volume_slices(model, coarse01, t_indices)
    y = denormalize_array(fine01.slices[t_indices], fine01.stats)
    y_hat = denormalize_array(sr, fine01.stats)
    return compute_metrics(y, y_hat, mask=mask)


def evaluate_pairs(model, pairs, t_indices=None, verbose=True, points="interior"):
    """
    One row of metrics per (coarse, fine[, entry]) pair, with its shape and
    frequency. Pairs whose reference leaves a metric undefined are skipped
    with a warning; any other error propagates.
    """
    rows = []
    for item in tqdm(pairs, desc="Evaluating", disable=not verbose):
        coarse01, fine01 = item[0], item[1]
        cfg = coarse01.config
        try:
            record = pair_metrics(model, coarse01, fine01, t_indices, points)
        except UndefinedMetricError as exc:
            warnings.warn(f"Skipping pair {cfg.section.kind} @ {cfg.frequency / 1e9:.2f} GHz: {exc}")
            continue
        rows.append({
            "shape": cfg.section.kind,
            "frequency": cfg.frequency,
            "tx_x": cfg.tx[0],
            "tx_y": cfg.tx[1],
            **record.to_dict(),
        })
    return pd.DataFrame(rows, columns=["shape", "frequency", "tx_x", "tx_y", "mae", "mape", "rmse", "r2",
                                       "n_points", "excluded_points"])


def group_metrics(per_pair):
    """Average per-pair metrics within (shape, frequency) groups, sorted."""
    if per_pair.empty:
        warnings.warn("No pair produced metrics; evaluation table is empty")
        return per_pair.iloc[0:0][["shape", "frequency", "mae", "mape", "rmse", "r2"]]
    grouped = (
        per_pair.groupby(["shape", "frequency"], sort=True)
        .agg(mae=("mae", "mean"), mape=("mape", "mean"), rmse=("rmse", "mean"), r2=("r2", "mean"),
             n_pairs=("mae", "size"), n_points=("n_points", "sum"))
        .reset_index()
    )
    return grouped


def evaluate(model, pairs, t_indices=None, verbose=True, points="interior"):
    return group_metrics(evaluate_pairs(model, pairs, t_indices, verbose, points))


def format_table(grouped):
    """Aligned text: one block per shape, metric rows, frequency (GHz) columns."""
    blocks = []
    for shape, df in grouped.groupby("shape", sort=True):
        table = pd.DataFrame(
            {f"f={f / 1e9:.1f} GHz": [row[key] for _, key in METRIC_ROWS] for f, row in
             df.set_index("frequency").iterrows()},
            index=[label for label, _ in METRIC_ROWS],
        )
        table.index.name = "Indicators"
        blocks.append(f"{shape}\n{table.to_string(float_format=lambda v: f'{v:.4f}')}")
    return "\n\n".join(blocks)


def write_json(df, path):
    df.to_json(path, orient="records", indent=2)
    return path


# ==========================================
# AXIAL CURVES
# ==========================================
def axial_curve(volume, rx):
    """RSS in dB at the cell nearest to rx, for every slice."""
    x, y = rx
    if volume.config is not None and not volume.config.section.contains(x, y):
        raise ValueError(f"Receiver ({x}, {y}) lies outside the {volume.config.section.kind} section")
    xmin, ymin, xmax, ymax = volume.grid.bounds
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        raise ValueError(f"Receiver ({x}, {y}) lies outside the grid")
    i, j = volume.grid.nearest_cell(x, y)
    values = volume.slices[:, i, j].astype(np.float64)
    if volume.normalized:
        values = denormalize_array(values, volume.stats)
    return pd.DataFrame({"z": np.asarray(volume.z, dtype=np.float64), "rss_db": values})


def window_means(curve, window_m=AXIAL_WINDOW_M):
    """Mean RSS over consecutive window_m stretches of z."""
    if window_m <= 0:
        raise ValueError(f"Window length must be > 0 m, got {window_m}")
    start = np.floor(curve["z"] / window_m) * window_m
    return curve.groupby(start.rename("z_start"))["rss_db"].mean().reset_index()
