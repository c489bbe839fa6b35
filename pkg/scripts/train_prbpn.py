"""
Deterministic PRBPN training: augmented window batches, L1 + smoothness loss,
Adam, JSON-lines logging and bit-exact resumable checkpoints.
"""
from __future__ import annotations

import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from prbpn import Prbpn, PrbpnConfig, prbpn_loss
from rss_dataset import window, augment
from rss_metrics import evaluate_pairs
from tensorcore import (
    AdamState,
    NonFiniteTensorError,
    Tensor,
    Xoshiro256,
    adam_step,
    backward,
    deterministic_mode,
    load_bundle,
    save_bundle,
)

# --- CONFIGURATION ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MODELS_DIR = os.path.join(BASE_DIR, "models")

DEFAULT_MAX_ITERS = 2000
DEFAULT_BATCH_SIZE = 4
DEFAULT_LR = 1e-4
LR_SCHEDULES = ("constant", "step")
DATA_STREAM = 1  # rng stream for batch sampling and augmentation


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"Training diverged at iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = DEFAULT_MAX_ITERS
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    lr: float = DEFAULT_LR
    lr_schedule: str = "constant"
    lr_step: int = 500          # "step": halve the rate every lr_step iterations
    beta: float = None          # None keeps the model's smoothness weight
    checkpoint_every: int = 0   # 0: final checkpoint only
    eval_every: int = 0
    crop: tuple = None          # coarse cells (h, w) of the random crop
    augment: bool = True
    target_loss: float = None   # early stop once the batch loss reaches it
    deterministic: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"Learning rate must be > 0, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"Unknown lr schedule '{self.lr_schedule}'. Expected one of {LR_SCHEDULES}")
        if self.lr_step < 1:
            raise ValueError(f"lr_step must be >= 1, got {self.lr_step}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("checkpoint_every and eval_every must be >= 0")
        if self.crop is not None:
            object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))

    def lr_at(self, iteration):
        if self.lr_schedule == "step":
            return self.lr * 0.5 ** (iteration // self.lr_step)
        return self.lr

    def to_dict(self):
        d = asdict(self)
        d["crop"] = list(self.crop) if self.crop is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainingState:
    model: Prbpn
    adam: AdamState
    rng: Xoshiro256
    iteration: int = 0
    log: list = field(default_factory=list)

    def log_frame(self):
        return pd.DataFrame(self.log)


def new_training_state(model, cfg):
    return TrainingState(model=model, adam=AdamState(lr=cfg.lr), rng=Xoshiro256(cfg.seed, DATA_STREAM))


# ==========================================
# BATCHES
# ==========================================
def sample_batch(pairs, cfg, n, rng):
    """
    Draw batch_size windows: pair index, then slice index (uniform over t),
    then the augmentation draws. Returns (b, 2n+1, h, w) inputs and (b, 1, 8h, 8w) targets.
    """
    coarse_windows, targets = [], []
    for _ in range(cfg.batch_size):
        coarse, fine = pairs[rng.integers(len(pairs))][:2]
        sample = window(coarse, fine, rng.integers(coarse.nz), n)
        if cfg.augment:
            sample = augment(sample, rng, cfg.crop)
        coarse_windows.append(sample.coarse_window)
        targets.append(sample.fine_target[None])
    shapes = {w.shape for w in coarse_windows}
    if len(shapes) > 1:
        raise ValueError(f"Pairs differ in slice geometry {sorted(shapes)}; set a crop size")
    return np.stack(coarse_windows).astype(np.float64), np.stack(targets).astype(np.float64)


# ==========================================
# CHECKPOINTS
# ==========================================
def checkpoint_arrays(state):
    arrays = OrderedDict(state.model.state_dict())
    for name, t in state.model.params.items():
        arrays[f"adam.m/{name}"] = state.adam.m.get(name, np.zeros_like(t.data))
    for name, t in state.model.params.items():
        arrays[f"adam.v/{name}"] = state.adam.v.get(name, np.zeros_like(t.data))
    return arrays


def save_checkpoint(path, state, cfg):
    header = {
        "kind": "checkpoint",
        "config": state.model.config.to_dict(),
        "seed": state.model.seed,
        "train": cfg.to_dict(),
        "adam": state.adam.hyper(),
        "rng": state.rng.get_state(),
        "iteration": state.iteration,
    }
    return save_bundle(path, checkpoint_arrays(state), header, dtype="f64")


def load_checkpoint(path):
    """Returns (TrainingState, TrainConfig) exactly as saved."""
    header, arrays = load_bundle(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"'{path}' is not a training checkpoint")
    model = Prbpn(PrbpnConfig.from_dict(header["config"]), seed=header["seed"], init=False)
    model.load_state_dict({name: arrays[name] for name in model.params})

    hyper = dict(header["adam"])
    adam = AdamState(**hyper)
    for name in model.params:
        adam.m[name] = arrays[f"adam.m/{name}"].astype(np.float64)
        adam.v[name] = arrays[f"adam.v/{name}"].astype(np.float64)
    state = TrainingState(
        model=model,
        adam=adam,
        rng=Xoshiro256.from_state(header["rng"]),
        iteration=int(header["iteration"]),
    )
    return state, TrainConfig.from_dict(header["train"])


def write_log(log, path):
    pd.DataFrame(log).to_json(path, orient="records", lines=True)
    return path


# ==========================================
# LOOP
# ==========================================
def train_step(state, x, y, beta):
    model = state.model
    try:
        sr = model.forward(Tensor(x))
        loss = prbpn_loss(sr, Tensor(y), beta)
    except NonFiniteTensorError as exc:
        raise TrainingDivergedError(state.iteration) from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(state.iteration)
    names = list(model.params)
    grads = backward(loss, [model.params[n] for n in names])
    adam_step(model.params, dict(zip(names, grads)), state.adam)
    return value


def train(model, pairs, cfg, state=None, eval_pairs=None, out_dir=None, verbose=True):
    """
    Train `model` on normalized (coarse, fine[, entry]) volume pairs until
    cfg.max_iters. Pass the `state` of a loaded checkpoint to resume.
    """
    if not pairs:
        raise ValueError("Training set is empty")
    grids = {(c.grid.nx, c.grid.ny) for c, *_ in pairs}
    if len(grids) > 1 and cfg.crop is None:
        raise ValueError(f"Pairs have different coarse grids {sorted(grids)}; set a crop size")
    state = state or new_training_state(model, cfg)
    beta = model.config.beta if cfg.beta is None else cfg.beta
    n = model.config.context_radius
    ckpt_path = os.path.join(out_dir, "checkpoint.prbw") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    with deterministic_mode(cfg.deterministic):
        # RESUME: the loop starts at the saved iteration; Adam moments and the batch RNG come from the state
        bar = tqdm(range(state.iteration, cfg.max_iters), desc="Training", disable=not verbose)
        for it in bar:
            state.adam.lr = cfg.lr_at(it)
            start = time.perf_counter()
            # BATCH: pair, slice and augmentation draws all come from the one seeded stream
            x, y = sample_batch(pairs, cfg, n, state.rng)
            # STEP: forward, L1 + beta * smoothness loss, backward, Adam update
            loss = train_step(state, x, y, beta)
            state.iteration = it + 1

            record = {
                "iter": state.iteration,
                "loss": loss,
                "lr": state.adam.lr,
                "wall_ms": 1000.0 * (time.perf_counter() - start),
            }
            # Held-out metrics ride along in the same log record
            if eval_pairs and cfg.eval_every and state.iteration % cfg.eval_every == 0:
                record["eval"] = evaluate_pairs(model, eval_pairs, verbose=False).mean(numeric_only=True).to_dict()
            state.log.append(record)
            bar.set_postfix(loss=f"{loss:.4f}")

            if ckpt_path and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, state, cfg)
            # EARLY STOP: the first batch loss at or under the target ends the run
            if cfg.target_loss is not None and loss <= cfg.target_loss:
                if verbose:
                    print(f"✅ Reached target loss {cfg.target_loss} at iteration {state.iteration}")
                break

    # The final checkpoint always holds the last completed iteration
    if out_dir:
        save_checkpoint(ckpt_path, state, cfg)
        write_log(state.log, os.path.join(out_dir, "train_log.jsonl"))
        if verbose:
            print(f"✅ Checkpoint saved to: {ckpt_path}")
    return state


if __name__ == "__main__":
    from rss_dataset import DATA_DIR, load_training_set

    manifest = os.path.join(DATA_DIR, "demo", "manifest.json")
    print(f"📂 Loading training pairs from {manifest}")
    pairs = load_training_set(manifest, split="train")
    model = Prbpn(PrbpnConfig(base_channels=8, resblocks_per_net=1, refine_iters=1), seed=0)
    cfg = TrainConfig(max_iters=50, crop=(4, 4))
    state = train(model, pairs, cfg, out_dir=os.path.join(MODELS_DIR, "demo"))
    print(f"⚙️ Final loss {state.log[-1]['loss']:.5f} after {state.iteration} iterations")
