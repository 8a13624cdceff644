"""Multi-resolution hash grid: position -> concatenated trilinear features."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

DEFAULT_LEVELS = 12
DEFAULT_TABLE_SIZE = 1 << 16
DEFAULT_FEATURES = 2
DEFAULT_BASE_RESOLUTION = 16
DEFAULT_FINEST_RESOLUTION = 2048
INIT_SCALE = 1e-4

_GRID_MAGIC = b"SSGR"


def level_resolutions(levels: int, base: int, growth: float) -> np.ndarray:
    """V_l = floor(V_1 * b^(l-1)); must be strictly increasing."""
    res = np.floor(base * growth ** np.arange(levels)).astype(np.int64)
    if np.any(np.diff(res) <= 0):
        raise ValueError("per-level resolutions must be strictly increasing")
    return res


def growth_for_finest(levels: int, base: int, finest: int) -> float:
    if levels < 2:
        return 1.0
    return float(np.exp((np.log(finest) - np.log(base)) / (levels - 1)))


@dataclass
class HashGrid:
    """L levels of trainable feature tables over an axis-aligned bounding box."""

    levels: int = DEFAULT_LEVELS
    table_size: int = DEFAULT_TABLE_SIZE
    features: int = DEFAULT_FEATURES
    base_resolution: int = DEFAULT_BASE_RESOLUTION
    growth: float = 0.0
    bounds_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    tables: np.ndarray = None
    resolutions: np.ndarray = None

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if not self.growth:
            self.growth = growth_for_finest(self.levels, self.base_resolution,
                                            DEFAULT_FINEST_RESOLUTION)
        self.bounds_min = np.asarray(self.bounds_min, dtype=float).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float).reshape(3)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("bounds_max must exceed bounds_min on every axis")
        if self.resolutions is None:
            self.resolutions = level_resolutions(self.levels, self.base_resolution,
                                                 self.growth)
        if self.tables is None:
            self.tables = np.zeros((self.levels, self.table_size, self.features))

    @classmethod
    def create(cls, seed: int = 0, bounds_min=(0.0, 0.0, 0.0), bounds_max=(1.0, 1.0, 1.0),
               **kwargs) -> "HashGrid":
        """Fresh grid with tables uniform in [-1e-4, 1e-4]."""
        grid = cls(bounds_min=bounds_min, bounds_max=bounds_max, **kwargs)
        rng = np.random.default_rng(seed)
        grid.tables = rng.uniform(-INIT_SCALE, INIT_SCALE, size=grid.tables.shape)
        return grid

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def is_dense(self, level: int) -> bool:
        return (int(self.resolutions[level]) + 1) ** 3 <= self.table_size

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Clamp into bounds and rescale to [0,1]^3."""
        p = np.clip(points, self.bounds_min, self.bounds_max)
        return (p - self.bounds_min) / (self.bounds_max - self.bounds_min)


def hash_index(grid: HashGrid, cell, level: int) -> int:
    """Table index of one integer cell corner: dense row-major where the level
    fits the table, spatial-hash otherwise."""
    if level >= grid.levels:
        raise ValueError(f"level {level} out of range (L={grid.levels})")
    x, y, z = (int(v) for v in cell)
    res = int(grid.resolutions[level])
    if grid.is_dense(level):
        return x + y * (res + 1) + z * (res + 1) ** 2
    # uint32 wraparound semantics, spelled out with Python ints
    h = x ^ ((y * kernels.HASH_PRIME_Y) & 0xFFFFFFFF) \
        ^ ((z * kernels.HASH_PRIME_Z) & 0xFFFFFFFF)
    return h & (grid.table_size - 1)


def touched_corner_indices(grid: HashGrid, point) -> list:
    """Per-level sets of table rows a point's trilinear stencil reads."""
    p01 = grid.normalize(np.asarray(point, dtype=float).reshape(1, 3))[0]
    out = []
    for lvl in range(grid.levels):
        res = int(grid.resolutions[lvl])
        cell = np.clip(np.floor(p01 * res), 0, res - 1).astype(int)
        rows = set()
        for corner in range(8):
            off = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1)
            rows.add(hash_index(grid, cell + np.array(off), lvl))
        out.append(rows)
    return out


def encode(grid: HashGrid, points: np.ndarray) -> np.ndarray:
    """gamma(x): (N, L*F) concatenated per-level trilinear features."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p01 = np.ascontiguousarray(grid.normalize(points))
    return kernels.encode(p01, np.ascontiguousarray(grid.tables),
                          np.ascontiguousarray(grid.resolutions))


def encode_backward(grid: HashGrid, points: np.ndarray, grad_features: np.ndarray,
                    accumulator: np.ndarray) -> None:
    """Scatter dL/dgamma into the table-gradient accumulator (in place)."""
    if accumulator.shape != grid.tables.shape:
        raise ValueError(
            f"accumulator shape {accumulator.shape} != tables {grid.tables.shape}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    grad_features = np.ascontiguousarray(grad_features, dtype=np.float64)
    if grad_features.shape != (points.shape[0], grid.output_dim):
        raise ValueError(
            f"grad_features shape {grad_features.shape} != {(points.shape[0], grid.output_dim)}")
    p01 = np.ascontiguousarray(grid.normalize(points))
    kernels.encode_backward(p01, grad_features, grid.tables.shape,
                            np.ascontiguousarray(grid.resolutions), accumulator)


def save_grid(grid: HashGrid, fh) -> None:
    """Checkpoint: (L,T,F,V1) u32, b f32, bounds 6xf32, tables f32 LE."""
    fh.write(_GRID_MAGIC)
    fh.write(struct.pack("<IIII", grid.levels, grid.table_size, grid.features,
                         grid.base_resolution))
    fh.write(struct.pack("<f", grid.growth))
    fh.write(np.concatenate([grid.bounds_min, grid.bounds_max]).astype("<f4").tobytes())
    fh.write(grid.tables.astype("<f4").tobytes())


def load_grid(fh) -> HashGrid:
    magic = fh.read(4)
    if magic != _GRID_MAGIC:
        raise ValueError(f"bad grid checkpoint magic {magic!r}")
    levels, table_size, features, base = struct.unpack("<IIII", fh.read(16))
    (growth,) = struct.unpack("<f", fh.read(4))
    bounds = np.frombuffer(fh.read(24), dtype="<f4").astype(np.float64)
    grid = HashGrid(levels=levels, table_size=table_size, features=features,
                    base_resolution=base, growth=growth,
                    bounds_min=bounds[:3], bounds_max=bounds[3:])
    n = levels * table_size * features
    tables = np.frombuffer(fh.read(n * 4), dtype="<f4").astype(np.float64)
    grid.tables = tables.reshape(levels, table_size, features)
    return grid


def save_grid_file(grid: HashGrid, path) -> None:
    with Path(path).open("wb") as fh:
        save_grid(grid, fh)


def load_grid_file(path) -> HashGrid:
    with Path(path).open("rb") as fh:
        return load_grid(fh)
