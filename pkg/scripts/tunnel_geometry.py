"""
Tunnel cross-sections and the transverse simulation grids they are rasterized on.

Coordinates: x is measured from the tunnel axis (x = 0 is the centerline),
y from the floor (y = 0). Every section is symmetric about x = 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from shapely.geometry import Polygon, box

# --- CONFIGURATION ---
C0 = 299_792_458.0  # speed of light [m/s]

SHAPE_KINDS = ("rectangular", "arched", "arched_vertical_walls", "trapezoidal")

# Default dimensions [m]. Keep the tableI receiver window x in [-1.5, 1.5],
# y in [0.2, 3.2] inside every shape.
DEFAULT_WIDTH = 4.0
DEFAULT_HEIGHT = 4.0
DEFAULT_SPRING_HEIGHT = 2.0
DEFAULT_TOP_WIDTH = 3.0
ARCH_FLOOR_FILLET = 0.25  # invert corner radius of the "arched" kind [m]

COARSE_MESH_FACTOR = 3.2  # delta = 3.2 lambda
FINE_MESH_FACTOR = 0.4    # delta = 0.4 lambda
GUARD_CELLS = 8           # exterior padding, in coarse cells, on every side
MIN_COARSE_CELLS = 4


def wavelength(frequency):
    """Free-space wavelength [m] for a frequency in Hz."""
    if frequency <= 0:
        raise ValueError(f"Frequency must be > 0 Hz, got {frequency}")
    return C0 / frequency


@dataclass(frozen=True)
class CrossSection:
    kind: str
    width: float
    height: float
    arch_spring_height: float = DEFAULT_SPRING_HEIGHT
    top_width: float = DEFAULT_TOP_WIDTH

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"Unknown tunnel shape '{self.kind}'. Expected one of {SHAPE_KINDS}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"Tunnel width and height must be > 0 (got {self.width} x {self.height})")
        if self.kind == "trapezoidal" and not (0 < self.top_width <= self.width):
            raise ValueError(f"Trapezoid top width must be in (0, {self.width}], got {self.top_width}")
        if self.kind in ("arched", "arched_vertical_walls") and not (0 <= self.arch_spring_height < self.height):
            raise ValueError(
                f"Arch spring height must be in [0, {self.height}), got {self.arch_spring_height}"
            )

    @property
    def shape_index(self):
        """1-based shape number used in the parameter tables."""
        return SHAPE_KINDS.index(self.kind) + 1

    @property
    def floor_fillet(self):
        """Radius of the rounded floor corners; only the "arched" kind has them."""
        if self.kind != "arched":
            return 0.0
        return min(ARCH_FLOOR_FILLET, self.arch_spring_height, 0.5 * self.width)

    def half_width_at(self, y):
        """Half-width of the air region at height y (0 outside [0, height])."""
        y = np.asarray(y, dtype=float)
        half = 0.5 * self.width

        if self.kind == "rectangular":
            hw = np.full_like(y, half)
        elif self.kind in ("arched", "arched_vertical_walls"):
            # Walls up to the spring line, then a semi-ellipse cap (half, height - spring)
            rise = self.height - self.arch_spring_height
            t = np.clip((y - self.arch_spring_height) / rise, 0.0, 1.0)
            hw = np.where(y <= self.arch_spring_height, half, half * np.sqrt(1.0 - t**2))
            if self.kind == "arched":
                # The arched wall curves away from the floor on a quarter circle
                r = self.floor_fillet
                if r > 0:
                    s = np.clip(r - y, 0.0, r)
                    hw = np.where(y < r, hw - r + np.sqrt(r**2 - s**2), hw)
        else:
            top_half = 0.5 * self.top_width
            hw = half - (half - top_half) * (y / self.height)

        return np.where((y >= 0) & (y <= self.height), hw, 0.0)

    def contains(self, x, y):
        """
        True where (x, y) lies in the closed air region. Works on scalars
        and on broadcastable arrays; evaluated on |x| so the result is
        mirror-symmetric by construction.
        """
        x = np.abs(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        inside = (y >= 0) & (y <= self.height) & (x <= self.half_width_at(y))
        if inside.ndim == 0:
            return bool(inside)
        return inside

    @cached_property
    def _outline(self):
        ys = np.linspace(0.0, self.height, 513)
        right = [(float(hw), float(y)) for hw, y in zip(self.half_width_at(ys), ys)]
        left = [(-x, y) for x, y in reversed(right)]
        return Polygon(right + left)

    def outline(self):
        """Polygon of the air region (arches sampled at 513 heights)."""
        return self._outline

    @property
    def area(self):
        return self._outline.area

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_cross_section(kind, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT, **extras):
    """
    Build a validated cross-section. `kind` may be a name or the 1-based
    shape number of the parameter tables; `extras` carries
    arch_spring_height and top_width.
    """
    if isinstance(kind, (int, np.integer)):
        if not 1 <= kind <= len(SHAPE_KINDS):
            raise ValueError(f"Shape number must be in 1..{len(SHAPE_KINDS)}, got {kind}")
        kind = SHAPE_KINDS[kind - 1]

    unknown = set(extras) - {"arch_spring_height", "top_width"}
    if unknown:
        raise ValueError(f"Unknown cross-section parameters: {sorted(unknown)}")

    return CrossSection(kind=kind, width=float(width), height=float(height), **extras)


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred transverse grid; cell (i, j) sits at x_origin + i*delta, y_origin + j*delta."""
    nx: int
    ny: int
    delta: float
    x_origin: float
    y_origin: float

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"Grid needs at least 4x4 cells, got {self.nx}x{self.ny}")
        if not self.delta > 0:
            raise ValueError(f"Grid spacing must be > 0, got {self.delta}")

    def x_coords(self):
        # Offsets from the grid centre keep symmetric grids exactly symmetric
        c = 0.5 * (self.nx - 1)
        centre = self.x_origin + c * self.delta
        return (np.arange(self.nx) - c) * self.delta + centre

    def y_coords(self):
        c = 0.5 * (self.ny - 1)
        centre = self.y_origin + c * self.delta
        return (np.arange(self.ny) - c) * self.delta + centre

    @property
    def bounds(self):
        """(xmin, ymin, xmax, ymax) of the cell edges."""
        h = 0.5 * self.delta
        return (
            self.x_origin - h,
            self.y_origin - h,
            self.x_origin + (self.nx - 1) * self.delta + h,
            self.y_origin + (self.ny - 1) * self.delta + h,
        )

    def covers(self, section):
        return box(*self.bounds).buffer(1e-9, join_style=2).contains(section.outline())

    def nearest_cell(self, x, y):
        i = int(round((x - self.x_origin) / self.delta))
        j = int(round((y - self.y_origin) / self.delta))
        return min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rasterize_mask(section, grid):
    """Boolean (nx, ny) mask, True where the cell centre is tunnel air."""
    X, Y = np.meshgrid(grid.x_coords(), grid.y_coords(), indexing="ij")
    return section.contains(X, Y)


def grid_from_wavelength(frequency, mesh_factor, section, guard_band=None):
    """
    Grid with delta = mesh_factor * lambda over a physical extent fixed by the
    coarse (3.2 lambda) mesh, so grids built for different mesh factors at the
    same frequency cover identical extents. When the coarse spacing is an
    integer multiple of this spacing the counts are exact multiples of the
    coarse counts (8x for the 0.4 lambda mesh).
    """
    if mesh_factor <= 0:
        raise ValueError(f"Mesh factor must be > 0, got {mesh_factor}")
    lam = wavelength(frequency)
    coarse_delta = COARSE_MESH_FACTOR * lam
    if guard_band is None:
        guard_band = GUARD_CELLS * coarse_delta
    if guard_band < 0:
        raise ValueError(f"Guard band must be >= 0, got {guard_band}")

    # Coarse counts set the extent; pad upward to whole coarse cells
    nx_c = math.ceil(round((section.width + 2 * guard_band) / coarse_delta, 9))
    ny_c = math.ceil(round((section.height + 2 * guard_band) / coarse_delta, 9))
    if nx_c < MIN_COARSE_CELLS or ny_c < MIN_COARSE_CELLS:
        raise ValueError(
            f"Section {section.width} x {section.height} m spans only {nx_c} x {ny_c} coarse cells "
            f"at {frequency / 1e9:.3f} GHz (need >= {MIN_COARSE_CELLS})"
        )

    ratio = COARSE_MESH_FACTOR / mesh_factor
    if abs(ratio - round(ratio)) < 1e-9:
        r = int(round(ratio))
        nx, ny = nx_c * r, ny_c * r
        delta = coarse_delta / r
    else:
        delta = mesh_factor * lam
        nx = math.ceil(nx_c * coarse_delta / delta)
        ny = math.ceil(ny_c * coarse_delta / delta)

    extent_x = nx_c * coarse_delta
    extent_y = ny_c * coarse_delta
    y_low = 0.5 * (section.height - extent_y)  # section centred vertically
    grid = GridSpec(
        nx=nx,
        ny=ny,
        delta=delta,
        x_origin=-(0.5 * (nx - 1)) * delta,
        y_origin=y_low + 0.5 * delta,
    )
    if not grid.covers(section):
        raise ValueError(f"Grid {nx}x{ny} @ {delta:.4g} m does not cover the {section.kind} section")
    return grid


def refined_grid(grid, factor):
    """Grid splitting every cell of `grid` into factor x factor cells over the same extent."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"Refinement factor must be a positive integer, got {factor}")
    d = grid.delta / factor
    return GridSpec(
        nx=grid.nx * factor,
        ny=grid.ny * factor,
        delta=d,
        x_origin=grid.x_origin - 0.5 * grid.delta + 0.5 * d,
        y_origin=grid.y_origin - 0.5 * grid.delta + 0.5 * d,
    )


def grid_pair(frequency, section, guard_band=None):
    """Aligned (coarse, fine) grids for one frequency."""
    return (
        grid_from_wavelength(frequency, COARSE_MESH_FACTOR, section, guard_band),
        grid_from_wavelength(frequency, FINE_MESH_FACTOR, section, guard_band),
    )


if __name__ == "__main__":
    for kind in SHAPE_KINDS:
        sec = make_cross_section(kind)
        coarse, fine = grid_pair(2.4e9, sec)
        mask = rasterize_mask(sec, fine)
        print(f"📐 {kind:<22} area {sec.area:6.3f} m2 | coarse {coarse.nx}x{coarse.ny} | "
              f"fine {fine.nx}x{fine.ny} | interior cells {mask.sum()}")
