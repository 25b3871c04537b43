"""Spatial primitives: microphone arrays, candidate-source grids and the TDOA model.

All coordinates are in meters. Functions accept either :class:`Point3`
instances or anything ``np.asarray`` turns into a length-3 vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

DEFAULT_SOUND_SPEED = 340.0


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Point3.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def of(cls, p) -> "Point3":
        if isinstance(p, Point3):
            return p
        arr = np.asarray(p, dtype=float).reshape(-1)
        if arr.shape != (3,):
            raise ValueError(f"expected 3 coordinates, got shape {arr.shape}")
        return cls(*arr.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.z))


def _vec(p) -> np.ndarray:
    if isinstance(p, Point3):
        return p.as_array()
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates must be finite")
    return arr


@dataclass(frozen=True)
class PhysicalConstants:
    fs: float = 96000.0
    c: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"sound speed must be positive, got {self.c}")
        if not (math.isfinite(self.fs) and self.fs > 0):
            raise ValueError(f"sampling rate must be positive, got {self.fs}")


@dataclass(frozen=True, eq=False)
class MicArray:
    """Ordered set of M >= 2 distinct microphone positions.

    ``positions`` is stored as an (M, 3) float array; ``labels`` is optional.
    """

    positions: np.ndarray
    labels: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"mic positions must have shape (M, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("a microphone array needs at least 2 microphones")
        if not np.all(np.isfinite(pos)):
            raise ValueError("microphone coordinates must be finite")
        for k, l in enumerate_pairs(pos.shape[0]):
            if np.array_equal(pos[k], pos[l]):
                raise ValueError(f"microphones {k} and {l} share coordinates {pos[k].tolist()}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != pos.shape[0]:
                raise ValueError("one label per microphone is required")
            object.__setattr__(self, "labels", labels)

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.n_mics

    def __getitem__(self, k: int) -> Point3:
        return Point3.of(self.positions[k])

    def pairs(self) -> list[tuple[int, int]]:
        return enumerate_pairs(self.n_mics)

    def max_distance(self) -> float:
        p = self.positions
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        return float(d.max())

    @classmethod
    def circular(cls, center, radius: float, n_mics: int = 8, rotation: float = 0.0) -> "MicArray":
        """Uniform circular array in the horizontal plane through ``center``."""
        c = _vec(center)
        phi = rotation + 2 * np.pi * np.arange(n_mics) / n_mics
        pos = np.stack(
            [c[0] + radius * np.cos(phi), c[1] + radius * np.sin(phi), np.full(n_mics, c[2])],
            axis=1,
        )
        return cls(pos)


class Grid3D:
    """Axis-aligned grid of candidate source positions, both boundaries included.

    ``resolution`` may be a scalar or one value per axis. The number of
    points along an axis is ``floor(extent / resolution) + 1``; points are
    ``min + i * resolution`` so every point lies inside ``[min, max]``.
    Enumeration is row-major with x varying fastest.
    """

    def __init__(self, min_corner, max_corner, resolution=0.1):
        lo = _vec(min_corner).astype(float).reshape(3)
        hi = _vec(max_corner).astype(float).reshape(3)
        res = np.broadcast_to(np.asarray(resolution, dtype=float), (3,)).copy()
        if np.any(hi < lo):
            raise ValueError(f"grid max corner {hi.tolist()} below min corner {lo.tolist()}")
        if not np.all(np.isfinite(res)) or np.any(res <= 0):
            raise ValueError(f"grid resolution must be positive, got {res.tolist()}")
        # tolerance absorbs decimal extents such as 0.3 / 0.1 = 2.9999999999999996
        counts = np.floor((hi - lo) / res + 1e-9).astype(int) + 1
        self.min_corner = lo
        self.max_corner = hi
        self.resolution = res
        self.shape = tuple(int(n) for n in counts)  # (nx, ny, nz)

    def __repr__(self) -> str:
        return (
            f"Grid3D(min={self.min_corner.tolist()}, max={self.max_corner.tolist()}, "
            f"resolution={self.resolution.tolist()}, shape={self.shape})"
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid3D):
            return NotImplemented
        return (
            np.array_equal(self.min_corner, other.min_corner)
            and np.array_equal(self.max_corner, other.max_corner)
            and np.array_equal(self.resolution, other.resolution)
        )

    @property
    def size(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    def __len__(self) -> int:
        return self.size

    def axis(self, i: int) -> np.ndarray:
        pts = self.min_corner[i] + self.resolution[i] * np.arange(self.shape[i])
        # guard against the last point drifting past max by rounding
        return np.minimum(pts, self.max_corner[i])

    def points(self) -> np.ndarray:
        """All grid points as an (N, 3) array in enumeration order."""
        zz, yy, xx = np.meshgrid(self.axis(2), self.axis(1), self.axis(0), indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def index_of(self, ix: int, iy: int, iz: int) -> int:
        nx, ny, _ = self.shape
        return ix + nx * (iy + ny * iz)

    def point(self, index: int) -> Point3:
        nx, ny, nz = self.shape
        if not 0 <= index < self.size:
            raise IndexError(index)
        ix = index % nx
        iy = (index // nx) % ny
        iz = index // (nx * ny)
        return Point3(self.axis(0)[ix], self.axis(1)[iy], self.axis(2)[iz])

    def nearest_index(self, p) -> int:
        v = _vec(p).reshape(3)
        idx = np.rint((v - self.min_corner) / self.resolution).astype(int)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        return self.index_of(*idx)


def grid_points(grid: Grid3D) -> list[Point3]:
    return [Point3(*row) for row in grid.points().tolist()]


def tdoa(q, mk, ml, c: float = DEFAULT_SOUND_SPEED):
    """Time difference of arrival ``(|q - mk| - |q - ml|) / c`` in seconds.

    Positive when the source is farther from ``mk`` than from ``ml``, i.e. the
    wavefront reaches ``ml`` first. Broadcasts over leading dimensions of ``q``.
    """
    if not (math.isfinite(c) and c > 0):
        raise ValueError(f"sound speed must be positive, got {c}")
    q, mk, ml = _vec(q), _vec(mk), _vec(ml)
    out = (np.linalg.norm(q - mk, axis=-1) - np.linalg.norm(q - ml, axis=-1)) / c
    return float(out) if np.ndim(out) == 0 else out


def max_lag_samples(array: MicArray, consts: PhysicalConstants) -> int:
    """Largest possible |TDOA| in samples over all pairs, rounded up."""
    lag = consts.fs * array.max_distance() / consts.c
    return int(math.ceil(lag - 1e-9))


def enumerate_pairs(array: MicArray | int) -> list[tuple[int, int]]:
    m = array if isinstance(array, int) else array.n_mics
    if m < 2:
        raise ValueError("need at least 2 microphones to form a pair")
    return list(itertools.combinations(range(m), 2))


def pair_tdoas(points: np.ndarray, array: MicArray, c: float = DEFAULT_SOUND_SPEED,
               pairs: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """TDOA of every pair for every point: shape (n_pairs, n_points), seconds."""
    pts = np.atleast_2d(_vec(points))
    pairs = array.pairs() if pairs is None else list(pairs)
    dist = np.linalg.norm(pts[None, :, :] - array.positions[:, None, :], axis=-1)
    k = np.array([p[0] for p in pairs])
    l = np.array([p[1] for p in pairs])
    return (dist[k] - dist[l]) / c
