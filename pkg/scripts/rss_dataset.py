"""
Paired coarse/fine RSS datasets: parameter grids, split filtering, pair
generation, [0, 1] normalization, multi-slice windows, augmentation and the
staged builder that writes RSSV1 volumes plus a JSON manifest.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Memory, Parallel, delayed
from tqdm import tqdm

from pwe_solver import Material, NormStats, PweConfig, march
from tunnel_geometry import (
    COARSE_MESH_FACTOR,
    DEFAULT_HEIGHT,
    DEFAULT_SPRING_HEIGHT,
    DEFAULT_TOP_WIDTH,
    DEFAULT_WIDTH,
    FINE_MESH_FACTOR,
    SHAPE_KINDS,
    GridSpec,
    grid_pair,
    make_cross_section,
)
from volume_io import load_volume, save_volume

# --- CONFIGURATION ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(BASE_DIR, "data")
CACHE_ENV = "TUNNELWAVE_CACHE"

SCALE = 8
DEFAULT_CONTEXT_RADIUS = 2
DEFAULT_LENGTH = 1000.0  # comparison slices are taken at 500 m and 1000 m
SPLIT_TOL = 1e-9

# (x_tx range, y_tx range) per split; bounds inclusive
SPLIT_RANGES = {
    "train": ((0.0, 1.0), (0.5, 1.0)),
    "test": ((1.2, 2.0), (2.0, 2.5)),
}
SPLITS = ("train", "test", "all")


def _axis(start, stop, step):
    count = int(round((stop - start) / step)) + 1
    return tuple(float(v) for v in np.round(np.linspace(start, stop, count), 10))


@dataclass(frozen=True)
class ParamGrid:
    shapes: tuple
    frequencies: tuple  # [Hz]
    eps_r: tuple
    sigma: tuple        # [S/m]
    tx_x: tuple         # [m] offset from the centerline
    tx_y: tuple         # [m] above the floor
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH
    height: float = DEFAULT_HEIGHT
    arch_spring_height: float = DEFAULT_SPRING_HEIGHT
    top_width: float = DEFAULT_TOP_WIDTH

    def __post_init__(self):
        for name in ("shapes", "frequencies", "eps_r", "sigma", "tx_x", "tx_y"):
            values = getattr(self, name)
            if isinstance(values, (str, int, float)):
                values = (values,)
            if len(values) == 0:
                raise ValueError(f"Parameter axis '{name}' is empty")
            if name == "shapes":
                values = tuple(SHAPE_KINDS[v - 1] if isinstance(v, (int, np.integer)) else v for v in values)
                unknown = [v for v in values if v not in SHAPE_KINDS]
                if unknown:
                    raise ValueError(f"Unknown tunnel shapes {unknown}")
            else:
                values = tuple(float(v) for v in values)
            object.__setattr__(self, name, values)
        if self.length <= 0:
            raise ValueError(f"Tunnel length must be > 0 m, got {self.length}")
        # Validates the dimensions once for every shape in use
        self.sections()

    @property
    def size(self):
        return (len(self.shapes) * len(self.frequencies) * len(self.eps_r)
                * len(self.sigma) * len(self.tx_x) * len(self.tx_y))

    def sections(self):
        return {
            kind: make_cross_section(
                kind, self.width, self.height,
                arch_spring_height=self.arch_spring_height, top_width=self.top_width,
            )
            for kind in self.shapes
        }

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ==========================================
# PRESETS
# ==========================================
def table_one_grid(length=DEFAULT_LENGTH):
    """The full simulation grid: 4 shapes x 6 frequencies x 3 x 3 x 11 x 5 = 11,880 configs."""
    return ParamGrid(
        shapes=SHAPE_KINDS,
        frequencies=tuple(f * 1e9 for f in _axis(0.9, 5.9, 1.0)),
        eps_r=_axis(5.0, 10.0, 2.5),
        sigma=(0.001, 0.01, 0.1),
        tx_x=_axis(0.0, 2.0, 0.2),
        tx_y=_axis(0.5, 2.5, 0.5),
        length=length,
    )


def figures_grid(length=DEFAULT_LENGTH):
    """Same axes, restricted to the four carrier frequencies of the comparison figures."""
    return replace(table_one_grid(length), frequencies=(0.9e9, 2.4e9, 4.9e9, 5.8e9))


def massif_grid(length=2500.0):
    """Long masonry tunnel: arched with vertical walls, eps_r 5, sigma 0.01 S/m."""
    return ParamGrid(
        shapes=("arched_vertical_walls",),
        frequencies=(0.9e9, 2.1e9),
        eps_r=(5.0,),
        sigma=(0.01,),
        tx_x=_axis(0.0, 2.0, 0.5),
        tx_y=_axis(0.5, 3.0, 0.5),
        length=length,
        width=6.0,
        height=5.0,
        arch_spring_height=2.5,
    )


PRESETS = {"tableI": table_one_grid, "figures": figures_grid, "massif": massif_grid}


def preset_grid(name, length=None):
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'. Expected one of {sorted(PRESETS)}")
    return PRESETS[name]() if length is None else PRESETS[name](length)


# ==========================================
# ENUMERATION
# ==========================================
def config_table(grid, split="all"):
    """Lexicographic cartesian product of the grid axes as a DataFrame, split-filtered."""
    if split not in SPLITS:
        raise ValueError(f"Unknown split '{split}'. Expected one of {SPLITS}")
    axes = [grid.shapes, grid.frequencies, grid.eps_r, grid.sigma, grid.tx_x, grid.tx_y]
    names = ["shape", "frequency", "eps_r", "sigma", "tx_x", "tx_y"]
    df = pd.MultiIndex.from_product(axes, names=names).to_frame(index=False)

    if split != "all":
        (x_lo, x_hi), (y_lo, y_hi) = SPLIT_RANGES[split]
        keep = (
            df["tx_x"].between(x_lo - SPLIT_TOL, x_hi + SPLIT_TOL)
            & df["tx_y"].between(y_lo - SPLIT_TOL, y_hi + SPLIT_TOL)
        )
        df = df[keep].reset_index(drop=True)
        if df.empty:
            raise ValueError(
                f"Split '{split}' (x_tx in [{x_lo}, {x_hi}], y_tx in [{y_lo}, {y_hi}]) "
                f"leaves no configurations"
            )
    return df


def enumerate_configs(grid, split="all", mesh_factor=FINE_MESH_FACTOR):
    """Deterministically ordered PweConfigs for a grid and split."""
    sections = grid.sections()
    return [
        PweConfig(
            frequency=row.frequency,
            section=sections[row.shape],
            material=Material(eps_r=row.eps_r, sigma=row.sigma),
            tx=(row.tx_x, row.tx_y),
            length=grid.length,
            mesh_factor=mesh_factor,
        )
        for row in config_table(grid, split).itertuples(index=False)
    ]


def split_of(config):
    x, y = config.tx
    for name, ((x_lo, x_hi), (y_lo, y_hi)) in SPLIT_RANGES.items():
        if x_lo - SPLIT_TOL <= x <= x_hi + SPLIT_TOL and y_lo - SPLIT_TOL <= y <= y_hi + SPLIT_TOL:
            return name
    return "none"


# ==========================================
# PAIRS AND NORMALIZATION
# ==========================================
def generate_pair(config, verbose=False):
    """Coarse (3.2 lambda) and fine (0.4 lambda) marches of one config on aligned grids."""
    coarse_grid, fine_grid = grid_pair(config.frequency, config.section)
    if fine_grid.nx != SCALE * coarse_grid.nx or fine_grid.ny != SCALE * coarse_grid.ny:
        raise ValueError(
            f"Fine grid {fine_grid.nx}x{fine_grid.ny} is not {SCALE}x coarse {coarse_grid.nx}x{coarse_grid.ny}"
        )
    coarse = march(config.with_mesh(COARSE_MESH_FACTOR), coarse_grid, verbose=verbose)
    fine = march(config.with_mesh(FINE_MESH_FACTOR), fine_grid, verbose=verbose)
    return coarse, fine


def _memory():
    return Memory(os.environ.get(CACHE_ENV) or None, verbose=0)


def generate_pair_cached(config):
    """generate_pair behind a joblib cache rooted at $TUNNELWAVE_CACHE (no-op when unset)."""
    return _memory().cache(generate_pair)(config)


def _interior_values(volume):
    mask = volume.interior_mask()
    return volume.slices[:, mask]


def volume_stats(volume):
    values = _interior_values(volume)
    if values.size == 0:
        raise ValueError("Volume has no interior cells")
    if not np.isfinite(values).all():
        raise ValueError("Volume contains non-finite RSS values")
    lo, hi = float(values.min()), float(values.max())
    if not lo < hi:
        raise ValueError(f"Degenerate constant volume at {lo} dB; cannot normalize")
    return NormStats(lo, hi)


def split_norm_stats(volumes):
    """Shared min/max over the interior cells of every volume in a split."""
    stats = [volume_stats(v) for v in volumes]
    if not stats:
        raise ValueError("No volumes to compute normalization stats from")
    return NormStats(min(s.min_db for s in stats), max(s.max_db for s in stats))


def normalize(volume, stats=None):
    if volume.normalized:
        raise ValueError("Volume is already normalized")
    if not np.isfinite(volume.slices).all():
        raise ValueError("Volume contains non-finite RSS values")
    if stats is None:
        stats = volume_stats(volume)
    scaled = (volume.slices.astype(np.float64) - stats.min_db) / (stats.max_db - stats.min_db)
    out = replace(volume, slices=np.clip(scaled, 0.0, 1.0).astype(np.float32), stats=stats, normalized=True)
    return out, stats


def denormalize_array(values01, stats):
    v = np.asarray(values01, dtype=np.float64)
    return v * (stats.max_db - stats.min_db) + stats.min_db


def denormalize(volume01):
    if not volume01.normalized or volume01.stats is None:
        raise ValueError("Volume is not normalized")
    db = denormalize_array(volume01.slices, volume01.stats).astype(np.float32)
    return replace(volume01, slices=db, normalized=False)


def _crop_grid(grid, i0, j0, nx, ny):
    return GridSpec(
        nx=nx, ny=ny, delta=grid.delta,
        x_origin=grid.x_origin + i0 * grid.delta,
        y_origin=grid.y_origin + j0 * grid.delta,
    )


def crop_volume_pair(coarse, fine, size):
    """Centre crop to `size` = (cx, cy) coarse cells, fine crop the aligned 8x region."""
    cx, cy = size
    if cx > coarse.grid.nx or cy > coarse.grid.ny or cx < 1 or cy < 1:
        raise ValueError(f"Crop {cx}x{cy} does not fit coarse slices {coarse.grid.nx}x{coarse.grid.ny}")
    i0, j0 = (coarse.grid.nx - cx) // 2, (coarse.grid.ny - cy) // 2
    fi, fj = SCALE * i0, SCALE * j0
    coarse_c = replace(
        coarse,
        slices=np.ascontiguousarray(coarse.slices[:, i0:i0 + cx, j0:j0 + cy]),
        grid=_crop_grid(coarse.grid, i0, j0, cx, cy),
    )
    fine_c = replace(
        fine,
        slices=np.ascontiguousarray(fine.slices[:, fi:fi + SCALE * cx, fj:fj + SCALE * cy]),
        grid=_crop_grid(fine.grid, fi, fj, SCALE * cx, SCALE * cy),
    )
    return coarse_c, fine_c


# ==========================================
# WINDOWS AND AUGMENTATION
# ==========================================
@dataclass
class SamplePair:
    coarse_window: np.ndarray  # (2n+1, h, w), normalized
    fine_target: np.ndarray    # (8h, 8w), normalized
    t_index: int
    config: PweConfig = None
    stats: NormStats = None

    def __post_init__(self):
        k, h, w = self.coarse_window.shape
        if k % 2 != 1:
            raise ValueError(f"Window length must be odd (2n+1), got {k}")
        if self.fine_target.shape != (SCALE * h, SCALE * w):
            raise ValueError(
                f"Fine target {self.fine_target.shape} is not {SCALE}x the coarse slice {(h, w)}"
            )

    @property
    def context_radius(self):
        return self.coarse_window.shape[0] // 2


def window(coarse01, fine01, t, n=DEFAULT_CONTEXT_RADIUS):
    """Slices t-n..t+n (clamped at the ends) plus the fine target at t."""
    if not (coarse01.normalized and fine01.normalized):
        raise ValueError("Windows are cut from normalized volumes")
    if coarse01.stats != fine01.stats:
        raise ValueError(f"Coarse and fine stats differ: {coarse01.stats} vs {fine01.stats}")
    if coarse01.nz != fine01.nz:
        raise ValueError(f"Slice counts differ: {coarse01.nz} coarse vs {fine01.nz} fine")
    if not 0 <= t < coarse01.nz:
        raise ValueError(f"Slice index {t} outside [0, {coarse01.nz})")
    if n < 0:
        raise ValueError(f"Context radius must be >= 0, got {n}")
    idx = np.clip(np.arange(t - n, t + n + 1), 0, coarse01.nz - 1)
    return SamplePair(
        coarse_window=coarse01.slices[idx].copy(),
        fine_target=fine01.slices[t].copy(),
        t_index=int(t),
        config=coarse01.config,
        stats=coarse01.stats,
    )


def flip_x(pair):
    """Mirror x -> -x on every slice and the target."""
    return replace(
        pair,
        coarse_window=np.ascontiguousarray(pair.coarse_window[:, ::-1, :]),
        fine_target=np.ascontiguousarray(pair.fine_target[::-1, :]),
    )


def rotate180(pair):
    return replace(
        pair,
        coarse_window=np.ascontiguousarray(pair.coarse_window[:, ::-1, ::-1]),
        fine_target=np.ascontiguousarray(pair.fine_target[::-1, ::-1]),
    )


def crop_pair(pair, i0, j0, size):
    ch, cw = size
    return replace(
        pair,
        coarse_window=np.ascontiguousarray(pair.coarse_window[:, i0:i0 + ch, j0:j0 + cw]),
        fine_target=np.ascontiguousarray(
            pair.fine_target[SCALE * i0:SCALE * (i0 + ch), SCALE * j0:SCALE * (j0 + cw)]
        ),
    )


def augment(pair, rng, crop=None):
    """
    Shape-preserving augmentation: x-flip and 180 degree rotation, each with
    probability 1/2, then an optional random crop of `crop` coarse cells.
    The rng draw order is fixed (flip, rotate, crop i, crop j).
    """
    _, h, w = pair.coarse_window.shape
    if crop is not None and (crop[0] > h or crop[1] > w or min(crop) < 1):
        raise ValueError(f"Crop {crop[0]}x{crop[1]} is larger than the {h}x{w} coarse slice")

    if rng.uniform() < 0.5:
        pair = flip_x(pair)
    if rng.uniform() < 0.5:
        pair = rotate180(pair)
    if crop is not None:
        i0 = rng.integers(h - crop[0] + 1)
        j0 = rng.integers(w - crop[1] + 1)
        pair = crop_pair(pair, i0, j0, crop)
    return pair


# ==========================================
# DATASET BUILDER
# ==========================================
def _pair_name(index, config):
    return (f"{index:05d}_{config.section.kind}_{config.frequency / 1e9:.1f}GHz"
            f"_x{config.tx[0]:.2f}_y{config.tx[1]:.2f}")


@dataclass
class TunnelDatasetPrepper:
    grid: ParamGrid
    split: str = "train"
    out_dir: str = os.path.join(DATA_DIR, "dataset")
    workers: int = 1
    limit: int = None
    crop: tuple = None
    stats: NormStats = None
    verbose: bool = True
    configs: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def _say(self, msg):
        if self.verbose:
            print(msg)

    def collect_configs(self):
        self._say("--- STEP 1: Enumerating configurations ---")
        kept = []
        for cfg in enumerate_configs(self.grid, self.split):
            # SKIP: a TX outside the air region cannot launch a beam.
            # Happens for the high corner positions of arched and trapezoidal shapes.
            if not cfg.section.contains(*cfg.tx):
                warnings.warn(f"Skipping TX {cfg.tx} outside the {cfg.section.kind} section")
                continue
            kept.append(cfg)
        # LIMIT: the first N configs in enumeration order, so a limited run is a prefix of the full one
        if self.limit is not None:
            kept = kept[: self.limit]
        if not kept:
            raise ValueError(f"No simulable configurations in split '{self.split}'")
        self.configs = kept
        self._say(f"📂 {len(kept)} configurations in split '{self.split}'")

    def simulate(self):
        self._say(f"--- STEP 2: Simulating {len(self.configs)} coarse/fine pairs ---")
        # One job per config marches both meshes; results come back in submission order
        jobs = (delayed(generate_pair_cached)(cfg) for cfg in self.configs)
        results = Parallel(n_jobs=self.workers)(
            tqdm(jobs, total=len(self.configs), desc="Pairs", disable=not self.verbose)
        )
        # CROP: centre window of the coarse grid, the fine grid cut to the matching 8x window
        if self.crop is not None:
            results = [crop_volume_pair(c, f, self.crop) for c, f in results]
        self.pairs = list(results)

    def normalize(self):
        self._say("--- STEP 3: Normalizing ---")
        # SPLIT RANGE: one [min, max] dB range over the interior cells of every volume in the split.
        # A test split reuses the training range through `stats` so both live on the same scale.
        if self.stats is None:
            self.stats = split_norm_stats([v for pair in self.pairs for v in pair])
        # Values outside a borrowed range are clipped to [0, 1]
        self.pairs = [(normalize(c, self.stats)[0], normalize(f, self.stats)[0]) for c, f in self.pairs]
        self._say(f"⚙️ Split range [{self.stats.min_db:.2f}, {self.stats.max_db:.2f}] dB")

    def persist(self):
        self._say("--- STEP 4: Writing RSSV1 volumes ---")
        entries = []
        for i, (cfg, (coarse, fine)) in enumerate(zip(self.configs, self.pairs)):
            name = _pair_name(i, cfg)
            save_volume(coarse, os.path.join(self.out_dir, f"{name}_coarse.rssv"))
            save_volume(fine, os.path.join(self.out_dir, f"{name}_fine.rssv"))
            entries.append({
                "coarse": f"{name}_coarse.rssv",
                "fine": f"{name}_fine.rssv",
                "split": split_of(cfg),
                "shape": cfg.section.kind,
                "frequency": cfg.frequency,
                "eps_r": cfg.material.eps_r,
                "sigma": cfg.material.sigma,
                "tx_x": cfg.tx[0],
                "tx_y": cfg.tx[1],
                "n_slices": coarse.nz,
            })
        return entries

    def write_manifest(self, entries):
        self._say("--- STEP 5: Writing manifest ---")
        manifest = {
            "split": self.split,
            "stats": self.stats.to_dict(),
            "param_grid": self.grid.to_dict(),
            "crop": list(self.crop) if self.crop is not None else None,
            "pairs": entries,
        }
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        self._say(f"✅ Manifest with {len(entries)} pairs saved to: {path}")
        return path

    def run(self):
        os.makedirs(self.out_dir, exist_ok=True)
        self.collect_configs()   # 1. Parameter grid, filtered to this split
        self.simulate()          # 2. Coarse and fine marches
        self.normalize()         # 3. Shared [0, 1] scale
        return self.write_manifest(self.persist())  # 4-5. RSSV1 files and manifest


def read_manifest(path):
    with open(path) as f:
        manifest = json.load(f)
    for key in ("stats", "pairs"):
        if key not in manifest:
            raise ValueError(f"Manifest '{path}' has no '{key}' entry")
    return manifest


def manifest_table(manifest):
    return pd.DataFrame(manifest["pairs"])


def load_training_set(manifest_path, split=None):
    """Normalized (coarse, fine, entry) triples listed in a manifest, optionally split-filtered."""
    manifest = read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    stats = NormStats(**manifest["stats"])
    out = []
    for entry in manifest["pairs"]:
        if split not in (None, "all") and entry["split"] != split:
            continue
        coarse = load_volume(os.path.join(root, entry["coarse"]))
        fine = load_volume(os.path.join(root, entry["fine"]))
        if coarse.stats != stats or fine.stats != stats:
            raise ValueError(f"Pair {entry['coarse']} was normalized with different stats than the manifest")
        out.append((coarse, fine, entry))
    if not out:
        raise ValueError(f"Manifest '{manifest_path}' lists no pairs for split '{split}'")
    return out


if __name__ == "__main__":
    grid = replace(preset_grid("figures", length=20.0), frequencies=(0.9e9,), eps_r=(5.0,), sigma=(0.01,))
    prepper = TunnelDatasetPrepper(grid, split="train", out_dir=os.path.join(DATA_DIR, "demo"), limit=4)
    prepper.run()
