import json
from dataclasses import replace

import numpy as np
import pytest

from binfmt import FormatError
from prbpn import Prbpn, PrbpnConfig, save_model
from pwe_solver import NormStats, RssVolume
from rss_dataset import SCALE, TunnelDatasetPrepper, load_training_set, read_manifest, table_one_grid
from rss_metrics import evaluate_pairs, group_metrics
from tensorcore import Xoshiro256
from train_prbpn import (
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    train,
)
from tunnel_geometry import GridSpec


def blocky_pair(seed, nz=4, h=4, w=4):
    """Normalized pair whose fine slices are the coarse ones blown up 8x."""
    rng = np.random.default_rng(seed)
    stats = NormStats(-100.0, 0.0)
    coarse = rng.uniform(0.2, 0.8, (nz, h, w)).astype(np.float32)
    fine = np.stack([np.kron(s, np.ones((SCALE, SCALE), dtype=np.float32)) for s in coarse])
    z = np.arange(1, nz + 1) * 0.5
    x0 = -0.4 * (h - 1)
    coarse_grid = GridSpec(nx=h, ny=w, delta=0.8, x_origin=x0, y_origin=0.4)
    fine_grid = GridSpec(nx=SCALE * h, ny=SCALE * w, delta=0.1, x_origin=x0 - 0.35, y_origin=0.05)
    return (RssVolume(coarse, z, coarse_grid, stats=stats, normalized=True),
            RssVolume(fine, z, fine_grid, stats=stats, normalized=True))


def tiny_model(seed=0):
    return Prbpn(PrbpnConfig(base_channels=2, resblocks_per_net=1, refine_iters=1, context_radius=1), seed=seed)


def params_of(model):
    return {name: t.data.copy() for name, t in model.params.items()}


@pytest.fixture
def pairs():
    return [blocky_pair(s) for s in range(2)]


# ==========================================
# CONFIG
# ==========================================
@pytest.mark.parametrize(
    "overrides",
    [{"max_iters": 0}, {"batch_size": 0}, {"lr": 0.0}, {"lr_schedule": "cosine"}, {"checkpoint_every": -1}],
)
def test_invalid_train_config(overrides):
    with pytest.raises(ValueError):
        TrainConfig(**overrides)


def test_train_config_defaults_and_round_trip():
    cfg = TrainConfig(crop=[2, 3])
    assert (cfg.max_iters, cfg.batch_size, cfg.lr, cfg.lr_schedule) == (2000, 4, 1e-4, "constant")
    assert cfg.crop == (2, 3)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_step_schedule_halves_the_rate():
    cfg = TrainConfig(lr=1e-3, lr_schedule="step", lr_step=10)
    assert [cfg.lr_at(i) for i in (0, 9, 10, 25)] == [1e-3, 1e-3, 5e-4, 2.5e-4]
    assert TrainConfig(lr=1e-3).lr_at(10_000) == 1e-3


# ==========================================
# BATCHES
# ==========================================
def test_batch_shapes(pairs):
    cfg = TrainConfig(batch_size=3, crop=(2, 2))
    x, y = sample_batch(pairs, cfg, 1, Xoshiro256(0))
    assert x.shape == (3, 3, 2, 2)
    assert y.shape == (3, 1, 16, 16)
    assert x.dtype == np.float64


def test_batches_are_seeded(pairs):
    cfg = TrainConfig(batch_size=2)
    a = sample_batch(pairs, cfg, 1, Xoshiro256(4))
    b = sample_batch(pairs, cfg, 1, Xoshiro256(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mixed_geometries_need_a_crop():
    mixed = [blocky_pair(0), blocky_pair(1, h=5, w=4)]
    with pytest.raises(ValueError, match="crop"):
        train(tiny_model(), mixed, TrainConfig(max_iters=1), verbose=False)


def test_empty_training_set():
    with pytest.raises(ValueError, match="empty"):
        train(tiny_model(), [], TrainConfig(max_iters=1), verbose=False)


# ==========================================
# LOOP
# ==========================================
def test_training_writes_checkpoint_and_log(tmp_path, pairs):
    state = train(tiny_model(), pairs, TrainConfig(max_iters=3, batch_size=2), out_dir=tmp_path, verbose=False)
    assert state.iteration == 3
    assert (tmp_path / "checkpoint.prbw").exists()
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["iter"] for r in records] == [1, 2, 3]
    for r in records:
        assert {"iter", "loss", "lr", "wall_ms"} <= set(r)
        assert np.isfinite(r["loss"])
    assert state.log_frame().shape[0] == 3


def test_training_moves_the_parameters(pairs):
    model = tiny_model()
    before = params_of(model)
    train(model, pairs, TrainConfig(max_iters=2, batch_size=1), verbose=False)
    assert any(not np.array_equal(before[n], t.data) for n, t in model.params.items())


def test_divergence_reports_the_iteration(pairs):
    model = tiny_model()
    model.params["recon.bias"].data = np.array([np.inf])
    with pytest.raises(TrainingDivergedError) as info:
        train(model, pairs, TrainConfig(max_iters=2, batch_size=1), verbose=False)
    assert info.value.iteration == 0


def test_target_loss_stops_early(pairs):
    state = train(tiny_model(), pairs, TrainConfig(max_iters=50, batch_size=1, target_loss=10.0), verbose=False)
    assert state.iteration == 1


def test_same_seed_gives_identical_checkpoints(tmp_path, pairs):
    cfg = TrainConfig(max_iters=3, batch_size=2, seed=7, crop=(2, 2))
    blobs = []
    for run in ("a", "b"):
        train(tiny_model(seed=7), pairs, cfg, out_dir=tmp_path / run, verbose=False)
        blobs.append((tmp_path / run / "checkpoint.prbw").read_bytes())
    assert blobs[0] == blobs[1]


def test_resumed_run_matches_uninterrupted_run(tmp_path, pairs):
    full_cfg = TrainConfig(max_iters=6, batch_size=2, seed=1)
    full = train(tiny_model(seed=1), pairs, full_cfg, verbose=False)

    train(tiny_model(seed=1), pairs, replace(full_cfg, max_iters=3), out_dir=tmp_path, verbose=False)
    state, cfg = load_checkpoint(tmp_path / "checkpoint.prbw")
    assert state.iteration == 3
    resumed = train(state.model, pairs, replace(cfg, max_iters=6), state=state, verbose=False)

    assert resumed.iteration == 6
    assert [r["loss"] for r in resumed.log] == [r["loss"] for r in full.log[3:]]
    for name, t in full.model.params.items():
        assert np.array_equal(resumed.model.params[name].data, t.data)
        assert np.array_equal(resumed.adam.m[name], full.adam.m[name])
    assert resumed.rng.get_state() == full.rng.get_state()


# ==========================================
# CHECKPOINTS
# ==========================================
def test_checkpoint_save_load_save_is_byte_identical(tmp_path, pairs):
    cfg = TrainConfig(max_iters=2, batch_size=1, crop=(2, 3), lr_schedule="step", lr_step=1)
    state = train(tiny_model(), pairs, cfg, verbose=False)
    first = save_checkpoint(tmp_path / "a.prbw", state, cfg)
    loaded, loaded_cfg = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.prbw", loaded, loaded_cfg)
    assert first.read_bytes() == second.read_bytes()
    assert loaded_cfg == cfg
    assert loaded.adam.step == 2


def test_corrupted_checkpoint(tmp_path, pairs):
    cfg = TrainConfig(max_iters=1, batch_size=1)
    path = save_checkpoint(tmp_path / "c.prbw", train(tiny_model(), pairs, cfg, verbose=False), cfg)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_model_file_is_not_a_checkpoint(tmp_path):
    path = save_model(tiny_model(), tmp_path / "model.prbw")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(path)


@pytest.mark.slow
def test_overfits_four_pairs():
    four = [blocky_pair(s) for s in range(4)]
    cfg = TrainConfig(max_iters=500, batch_size=2, lr=1e-3, seed=2)
    state = train(tiny_model(seed=2), four, cfg, verbose=False)
    losses = state.log_frame()["loss"]
    assert losses.tail(10).mean() <= 0.5 * losses.head(5).mean()


# ==========================================
# END-TO-END ON SIMULATED TUNNELS
# ==========================================
def rectangular_grid():
    """0.9 GHz rectangular tunnel, two wall permittivities, the full TX axes."""
    return replace(table_one_grid(length=30.0), shapes=("rectangular",), frequencies=(0.9e9,),
                   eps_r=(5.0, 7.5), sigma=(0.01,))


def desk_model(dwtf_enabled=True):
    cfg = PrbpnConfig(base_channels=16, resblocks_per_net=1, refine_iters=1, context_radius=2,
                      dwtf_enabled=dwtf_enabled)
    return Prbpn(cfg, seed=0)


DESK_TRAINING = TrainConfig(max_iters=2000, batch_size=4, lr=1e-3, seed=0)


@pytest.fixture(scope="module")
def tunnel_sets(tmp_path_factory):
    """16 train-split and 4 test-split pairs, 8x8 coarse crops, test scaled with the train range."""
    root = tmp_path_factory.mktemp("tunnels")
    grid = rectangular_grid()
    train_manifest = TunnelDatasetPrepper(grid, split="train", out_dir=str(root / "train"), limit=16,
                                          crop=(8, 8), verbose=False).run()
    stats = NormStats(**read_manifest(train_manifest)["stats"])
    test_manifest = TunnelDatasetPrepper(grid, split="test", out_dir=str(root / "test"), limit=4,
                                         crop=(8, 8), stats=stats, verbose=False).run()
    return load_training_set(train_manifest, split="train"), load_training_set(test_manifest, split="test")


@pytest.fixture(scope="module")
def fused_model(tunnel_sets):
    train_set, _ = tunnel_sets
    return train(desk_model(), train_set, DESK_TRAINING, verbose=False).model


@pytest.mark.slow
def test_fits_four_simulated_pairs(tunnel_sets):
    four = tunnel_sets[0][:4]
    assert all((c.grid.nx, c.grid.ny) == (8, 8) for c, *_ in four)
    state = train(desk_model(), four, DESK_TRAINING, verbose=False)
    assert state.iteration <= 2000
    table = group_metrics(evaluate_pairs(state.model, four, verbose=False))
    assert table.loc[0, "r2"] >= 0.95


@pytest.mark.slow
def test_generalizes_to_held_out_transmitters(tunnel_sets, fused_model):
    train_set, test_set = tunnel_sets
    assert len(train_set) == 16 and len(test_set) == 4
    assert {e["split"] for *_, e in test_set} == {"test"}
    table = group_metrics(evaluate_pairs(fused_model, test_set, verbose=False))
    assert table.loc[0, "n_pairs"] == 4
    assert table.loc[0, "r2"] >= 0.80
    assert table.loc[0, "mape"] <= 6.0


@pytest.mark.slow
def test_temporal_fusion_does_not_hurt(tunnel_sets, fused_model):
    train_set, test_set = tunnel_sets
    single = train(desk_model(dwtf_enabled=False), train_set, DESK_TRAINING, verbose=False).model
    fused_rmse = evaluate_pairs(fused_model, test_set, verbose=False)["rmse"].mean()
    single_rmse = evaluate_pairs(single, test_set, verbose=False)["rmse"].mean()
    assert fused_rmse <= single_rmse
