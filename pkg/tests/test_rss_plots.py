import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from rss_dataset import normalize
from rss_plots import (
    PGM_MAXVAL,
    axial_png,
    heatmap_image,
    heatmap_png,
    pgm_bytes,
    read_pgm,
    slice_db,
    write_axial_csv,
    write_heatmap,
)
from tunnel_geometry import GridSpec


def test_constant_slice_gives_constant_pgm(tmp_path, synthetic_volume):
    synthetic_volume.slices[1] = -60.0
    sidecar = write_heatmap(synthetic_volume, 1, tmp_path / "flat.pgm")
    img = read_pgm(tmp_path / "flat.pgm")
    assert np.all(img == img.flat[0])
    assert sidecar["min_db"] == sidecar["max_db"] == -60.0


def test_extremes_map_to_the_full_range(tmp_path, synthetic_volume):
    write_heatmap(synthetic_volume, 2, tmp_path / "s.pgm")
    img = read_pgm(tmp_path / "s.pgm")
    assert img.min() == 0 and img.max() == PGM_MAXVAL
    values = synthetic_volume.slices[2].astype(np.float64)
    i, j = np.unravel_index(np.argmax(values), values.shape)
    assert img[values.shape[1] - 1 - j, i] == PGM_MAXVAL


def test_image_orientation():
    values = np.zeros((3, 2))
    values[0, 1] = 1.0  # leftmost x, top y
    values[2, 0] = 2.0  # rightmost x, floor
    img = heatmap_image(values)
    assert img.shape == (2, 3)
    assert img[0, 0] == 1.0
    assert img[1, 2] == 2.0


def test_header_and_byte_order():
    # one x column, two y rows: the top row is the larger y
    blob, lo, hi = pgm_bytes(np.array([[0.0, 1.0]]))
    assert blob.startswith(b"P5\n1 2\n65535\n")
    assert (lo, hi) == (0.0, 1.0)
    pixels = blob[len(b"P5\n1 2\n65535\n"):]
    assert pixels == b"\xff\xff\x00\x00"


def test_non_finite_slice_is_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        pgm_bytes(np.array([[np.nan, 1.0]]))


def test_sidecar_reports_denormalized_extremes(tmp_path, synthetic_volume):
    vol01, _ = normalize(synthetic_volume)
    sidecar = write_heatmap(vol01, 0, tmp_path / "n.pgm")
    values = slice_db(vol01, 0)
    assert sidecar["min_db"] == pytest.approx(values.min())
    assert sidecar["max_db"] == pytest.approx(values.max())
    on_disk = json.loads((tmp_path / "n.json").read_text())
    assert on_disk == sidecar
    assert on_disk["shape"] == "rectangular"
    assert (on_disk["width"], on_disk["height"]) == (6, 5)
    assert GridSpec.from_dict(on_disk["grid"]) == synthetic_volume.grid


def test_prediction_sized_slice(tmp_path, synthetic_volume):
    grid = GridSpec(nx=24, ny=24, delta=0.1, x_origin=-1.15, y_origin=0.05)
    slices = np.random.default_rng(1).random((1, 24, 24)).astype(np.float32)
    pred = replace(synthetic_volume, slices=slices, z=synthetic_volume.z[:1], grid=grid, normalized=True)
    write_heatmap(pred, 0, tmp_path / "pred.pgm")
    assert read_pgm(tmp_path / "pred.pgm").shape == (24, 24)


def test_heatmap_is_reproducible(tmp_path, synthetic_volume):
    write_heatmap(synthetic_volume, 3, tmp_path / "a.pgm")
    write_heatmap(synthetic_volume, 3, tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_slice_index_range(synthetic_volume):
    with pytest.raises(ValueError, match="out of range"):
        slice_db(synthetic_volume, synthetic_volume.nz)


def test_read_pgm_rejects_other_files(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(ValueError, match="P5"):
        read_pgm(path)
    path.write_bytes(b"P5\n2 2\n65535\n\x00\x00")
    with pytest.raises(ValueError, match="pixel bytes"):
        read_pgm(path)


def test_axial_csv(tmp_path, synthetic_volume):
    curve = write_axial_csv(synthetic_volume, (0.2, 1.0), tmp_path / "axial.csv")
    text = (tmp_path / "axial.csv").read_text()
    assert text.splitlines()[0] == "z,rss_db"
    back = pd.read_csv(tmp_path / "axial.csv")
    assert len(back) == synthetic_volume.nz
    assert np.allclose(back["rss_db"], curve["rss_db"])


def test_png_previews(tmp_path, synthetic_volume):
    heatmap_png(synthetic_volume, 0, tmp_path / "h.png")
    curve = write_axial_csv(synthetic_volume, (0.2, 1.0), tmp_path / "axial.csv")
    axial_png(curve, tmp_path / "a.png", label="coarse")
    for name in ("h.png", "a.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
