import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prbpn import Prbpn, PrbpnConfig
from pwe_solver import Material, NormStats, PweConfig, RssVolume, march
from rss_dataset import SCALE
from rss_metrics import (
    UndefinedMetricError,
    axial_curve,
    compute_metrics,
    evaluate_pairs,
    format_table,
    group_metrics,
    pair_metrics,
    rx_points,
    window_means,
    write_json,
)
from tunnel_geometry import COARSE_MESH_FACTOR, GridSpec, make_cross_section

db_values = arrays(np.float64, 12, elements=st.floats(min_value=-150.0, max_value=-1.0))


def naive_metrics(y, y_hat):
    n = len(y)
    mae = sum(abs(a - b) for a, b in zip(y, y_hat)) / n
    mape = 100.0 * sum(abs((a - b) / a) for a, b in zip(y, y_hat)) / n
    rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, y_hat)) / n)
    mean = sum(y) / n
    r2 = 1.0 - sum((a - b) ** 2 for a, b in zip(y, y_hat)) / sum((a - mean) ** 2 for a in y)
    return mae, mape, rmse, r2


# ==========================================
# METRICS
# ==========================================
def test_perfect_prediction():
    y = np.array([-40.0, -55.0, -70.0])
    rec = compute_metrics(y, y)
    assert (rec.mae, rec.mape, rec.rmse, rec.r2) == (0.0, 0.0, 0.0, 1.0)
    assert rec.n_points == 3 and rec.excluded_points == 0


def test_hand_computed_example():
    rec = compute_metrics([1.0, 2.0, 3.0], [1.1, 1.9, 3.3])
    assert rec.mae == pytest.approx(0.16667, abs=1e-5)
    assert rec.mape == pytest.approx(8.3333, abs=1e-4)
    assert rec.rmse == pytest.approx(0.191485, abs=1e-6)
    assert rec.r2 == pytest.approx(0.945, abs=1e-12)


@settings(max_examples=50)
@given(y=db_values, y_hat=db_values)
def test_matches_brute_force(y, y_hat):
    if np.var(y) < 1e-6:
        return
    rec = compute_metrics(y, y_hat)
    mae, mape, rmse, r2 = naive_metrics(list(y), list(y_hat))
    assert rec.mae == pytest.approx(mae, rel=1e-10, abs=1e-10)
    assert rec.mape == pytest.approx(mape, rel=1e-10, abs=1e-10)
    assert rec.rmse == pytest.approx(rmse, rel=1e-10, abs=1e-10)
    assert rec.r2 == pytest.approx(r2, rel=1e-10, abs=1e-10)
    assert rec.rmse >= rec.mae - 1e-12
    assert rec.r2 <= 1.0


def test_offset_changes_only_relative_metrics():
    rng = np.random.default_rng(0)
    y = rng.uniform(-90, -30, 50)
    y_hat = y + rng.normal(0, 2, 50)
    a, b = compute_metrics(y, y_hat), compute_metrics(y + 20.0, y_hat + 20.0)
    assert b.mae == pytest.approx(a.mae, rel=1e-9)
    assert b.rmse == pytest.approx(a.rmse, rel=1e-9)
    assert b.mape != pytest.approx(a.mape, rel=1e-3)
    shifted = compute_metrics(y, y_hat + 5.0)
    assert shifted.r2 < a.r2


def test_mask_restricts_points():
    y = np.array([[-10.0, -20.0], [-30.0, -999.0]])
    y_hat = np.array([[-10.0, -20.0], [-30.0, 0.0]])
    mask = np.array([[True, True], [True, False]])
    rec = compute_metrics(y, y_hat, mask=mask)
    assert rec.n_points == 3
    assert rec.mae == 0.0


def test_mask_broadcasts_over_slices():
    y = np.arange(1.0, 9.0).reshape(2, 2, 2)
    rec = compute_metrics(y, y, mask=np.array([[True, False], [True, False]]))
    assert rec.n_points == 4


def test_near_zero_references_are_excluded_from_mape():
    rec = compute_metrics([0.0, -10.0, -20.0], [1.0, -11.0, -20.0])
    assert rec.excluded_points == 1
    assert rec.mape == pytest.approx(5.0)
    assert rec.mae == pytest.approx(2.0 / 3.0)


@pytest.mark.parametrize(
    "y, y_hat, match",
    [
        ([0.0, 0.0, 1e-9], [1.0, 1.0, 1.0], "MAPE"),
        ([-5.0, -5.0, -5.0], [-5.0, -4.0, -5.0], "variance"),
        ([-5.0], [-5.0], "2 points"),
        ([-5.0, -6.0], [-5.0, -6.0, -7.0], "shape"),
    ],
)
def test_metric_errors(y, y_hat, match):
    with pytest.raises(ValueError, match=match):
        compute_metrics(y, y_hat)


@pytest.mark.parametrize(
    "y, y_hat, match",
    [
        ([0.0, 0.0, 1e-9], [1.0, 1.0, 1.0], "MAPE"),
        ([-5.0, -5.0, -5.0], [-5.0, -4.0, -5.0], "variance"),
    ],
)
def test_degenerate_references_are_undefined(y, y_hat, match):
    with pytest.raises(UndefinedMetricError, match=match):
        compute_metrics(y, y_hat)


@pytest.mark.parametrize("y, y_hat", [([-5.0], [-5.0]), ([-5.0, -6.0], [-5.0, -6.0, -7.0])])
def test_malformed_inputs_are_plain_errors(y, y_hat):
    with pytest.raises(ValueError) as info:
        compute_metrics(y, y_hat)
    assert not isinstance(info.value, UndefinedMetricError)


# ==========================================
# EVALUATION TABLES
# ==========================================
def constant_model(value):
    model = Prbpn(PrbpnConfig(base_channels=1, resblocks_per_net=0, refine_iters=0, context_radius=1), seed=0)
    for t in model.params.values():
        t.data = np.zeros(t.shape)
    model.params["recon.bias"].data = np.array([value])
    return model


def labelled_pair(frequency, fine_value, seed=0):
    cfg = PweConfig(
        frequency=frequency,
        section=make_cross_section("rectangular"),
        material=Material(5.0, 0.01),
        tx=(0.0, 2.0),
        length=2.0,
        mesh_factor=COARSE_MESH_FACTOR,
    )
    rng = np.random.default_rng(seed)
    stats = NormStats(-100.0, 0.0)
    coarse_grid = GridSpec(nx=4, ny=4, delta=1.6, x_origin=-2.4, y_origin=-0.4)
    fine_grid = GridSpec(nx=32, ny=32, delta=0.2, x_origin=-3.1, y_origin=-1.1)
    z = np.array([1.0, 2.0, 3.0])
    coarse = RssVolume(rng.random((3, 4, 4)).astype(np.float32), z, coarse_grid, cfg, stats, True)
    fine = fine_value(rng, (3, SCALE * 4, SCALE * 4))
    return coarse, RssVolume(fine.astype(np.float32), z, fine_grid, cfg, stats, True)


def test_single_perfect_group_has_unit_r2():
    rec = compute_metrics([-40.0, -50.0, -65.0], [-40.0, -50.0, -65.0])
    per_pair = pd.DataFrame([{"shape": "arched", "frequency": 0.9e9, **rec.to_dict()}])
    table = group_metrics(per_pair)
    assert len(table) == 1
    assert table.loc[0, "r2"] == 1.0
    assert table.loc[0, "n_points"] == 3


def test_constant_reference_is_skipped_with_a_warning():
    coarse, fine = labelled_pair(0.9e9, lambda rng, shape: np.full(shape, 0.4))
    model = constant_model(0.4)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        per_pair = evaluate_pairs(model, [(coarse, fine)], verbose=False)
    assert per_pair.empty
    assert any("variance" in str(w.message) for w in caught)


def test_grouping_by_frequency():
    def field(rng, shape):
        return rng.uniform(0.3, 0.7, shape)

    pairs = [labelled_pair(f, field, seed=i) for i, f in enumerate((2.4e9, 0.9e9, 2.4e9))]
    per_pair = evaluate_pairs(constant_model(0.5), pairs, verbose=False)
    assert len(per_pair) == 3
    table = group_metrics(per_pair)
    assert list(table["frequency"]) == [0.9e9, 2.4e9]
    assert list(table["n_pairs"]) == [1, 2]
    twin = per_pair[per_pair["frequency"] == 2.4e9]
    assert table.loc[1, "mae"] == pytest.approx(twin["mae"].mean())


def test_metrics_use_denormalized_db():
    def field(rng, shape):
        return rng.uniform(0.3, 0.7, shape)

    coarse, fine = labelled_pair(0.9e9, field)
    per_pair = evaluate_pairs(constant_model(0.5), [(coarse, fine)], verbose=False)
    mask = fine.interior_mask()
    expected = np.mean(np.abs(fine.slices[:, mask].astype(np.float64) * 100.0 - 100.0 + 50.0))
    assert per_pair.loc[0, "mae"] == pytest.approx(expected, rel=1e-5)


def test_mismatched_pair_is_not_skipped():
    coarse, fine = labelled_pair(0.9e9, lambda rng, shape: rng.uniform(0.3, 0.7, shape))
    small = GridSpec(nx=24, ny=24, delta=0.2, x_origin=-2.3, y_origin=-0.3)
    fine = RssVolume(fine.slices[:, :24, :24].copy(), fine.z, small, fine.config, fine.stats, True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(ValueError, match="differ in shape"):
            evaluate_pairs(constant_model(0.5), [(coarse, fine)], verbose=False)


def test_empty_evaluation_warns():
    empty = evaluate_pairs(constant_model(0.5), [], verbose=False)
    with pytest.warns(UserWarning, match="empty"):
        table = group_metrics(empty)
    assert table.empty


def test_table_layout():
    grouped = pd.DataFrame({
        "shape": ["rectangular", "rectangular", "arched"],
        "frequency": [0.9e9, 2.4e9, 0.9e9],
        "mae": [0.8587, 1.1, 0.5], "mape": [2.27, 3.0, 1.0],
        "rmse": [1.8183, 2.0, 0.7], "r2": [0.9753, 0.96, 0.99],
    })
    text = format_table(grouped)
    blocks = text.split("\n\n")
    assert blocks[0].startswith("arched")
    assert blocks[1].startswith("rectangular")
    assert "f=0.9 GHz" in blocks[1] and "f=2.4 GHz" in blocks[1]
    for label in ("MAE", "MAPE", "RMSE", "R2"):
        assert label in blocks[1]
    assert "0.8587" in blocks[1] and "0.9753" in blocks[1]


def test_write_json(tmp_path):
    df = pd.DataFrame({"shape": ["arched"], "mae": [0.5]})
    path = write_json(df, tmp_path / "eval.json")
    assert pd.read_json(path).to_dict("records") == [{"shape": "arched", "mae": 0.5}]


# ==========================================
# RECEIVER GRID
# ==========================================
def test_rx_points_on_an_aligned_grid():
    grid = GridSpec(nx=41, ny=25, delta=0.15, x_origin=-3.0, y_origin=-0.1)
    mask = rx_points(grid)
    assert mask.shape == (41, 25)
    assert mask.sum() == 21 * 21
    assert mask[10:31, 2:23].all()


def test_rx_points_drop_receivers_off_a_cropped_grid():
    grid = GridSpec(nx=10, ny=25, delta=0.15, x_origin=0.0, y_origin=-0.1)
    mask = rx_points(grid)
    assert mask.sum() == 10 * 21
    with pytest.raises(ValueError, match="No receiver"):
        rx_points(GridSpec(nx=4, ny=4, delta=0.15, x_origin=0.0, y_origin=3.5))


def test_rx_points_stay_inside_the_section():
    grid = GridSpec(nx=41, ny=25, delta=0.15, x_origin=-3.0, y_origin=-0.1)
    sec = make_cross_section("rectangular", width=2.2, height=2.1)
    mask = rx_points(grid, sec)
    assert mask.sum() == 15 * 13
    X, Y = np.meshgrid(grid.x_coords(), grid.y_coords(), indexing="ij")
    assert sec.contains(X[mask], Y[mask]).all()


def test_rx_metrics_score_only_the_receiver_cells():
    def field(rng, shape):
        return rng.uniform(0.3, 0.7, shape)

    coarse, fine = labelled_pair(0.9e9, field)
    mask = rx_points(fine.grid, fine.config.section)
    rec = pair_metrics(constant_model(0.5), coarse, fine, points="rx")
    expected = np.mean(np.abs(fine.slices[:, mask].astype(np.float64) * 100.0 - 100.0 + 50.0))
    assert rec.n_points == 3 * mask.sum()
    assert rec.n_points < 3 * fine.interior_mask().sum()
    assert rec.mae == pytest.approx(expected, rel=1e-5)

    per_pair = evaluate_pairs(constant_model(0.5), [(coarse, fine)], verbose=False, points="rx")
    assert per_pair.loc[0, "n_points"] == rec.n_points
    with pytest.raises(ValueError, match="point set"):
        pair_metrics(constant_model(0.5), coarse, fine, points="corners")


# ==========================================
# AXIAL CURVES
# ==========================================
def test_constant_volume_gives_constant_curve(synthetic_volume):
    synthetic_volume.slices[:] = -42.0
    curve = axial_curve(synthetic_volume, (0.0, 1.0))
    assert len(curve) == synthetic_volume.nz
    assert np.all(curve["rss_db"] == -42.0)
    assert np.array_equal(curve["z"], synthetic_volume.z)


def test_curve_picks_the_nearest_cell(synthetic_volume):
    curve = axial_curve(synthetic_volume, (0.19, 1.05))
    i, j = synthetic_volume.grid.nearest_cell(0.19, 1.05)
    assert (i, j) == (3, 2)
    assert np.array_equal(curve["rss_db"], synthetic_volume.slices[:, 3, 2].astype(np.float64))


def test_normalized_volume_curve_is_in_db(synthetic_volume):
    synthetic_volume.slices[:] = 0.5
    synthetic_volume.normalized = True
    curve = axial_curve(synthetic_volume, (0.0, 1.0))
    assert np.allclose(curve["rss_db"], -50.0)


@pytest.mark.parametrize("rx", [(2.5, 1.0), (0.0, -0.5)])
def test_receiver_outside_the_section(synthetic_volume, rx):
    with pytest.raises(ValueError, match="outside"):
        axial_curve(synthetic_volume, rx)


def test_window_means():
    curve = pd.DataFrame({"z": [10.0, 60.0, 110.0, 190.0, 210.0], "rss_db": [-10.0, -20.0, -30.0, -50.0, -70.0]})
    means = window_means(curve, 100.0)
    assert list(means["z_start"]) == [0.0, 100.0, 200.0]
    assert list(means["rss_db"]) == [-15.0, -40.0, -70.0]
    with pytest.raises(ValueError):
        window_means(curve, 0.0)


@pytest.mark.slow
def test_lossy_tunnel_curve_trends_down():
    cfg = PweConfig(
        frequency=0.9e9,
        section=make_cross_section("rectangular"),
        material=Material(5.0, 0.05),
        tx=(0.0, 2.0),
        length=600.0,
        mesh_factor=COARSE_MESH_FACTOR,
    )
    means = window_means(axial_curve(march(cfg), (0.0, 2.0)))["rss_db"].to_numpy()
    assert means[-1] < means[0]
    assert np.polyfit(np.arange(len(means)), means, 1)[0] < 0
