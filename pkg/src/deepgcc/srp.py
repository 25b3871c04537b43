"""Acoustic power maps over a candidate grid and argmax localization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsp
from .geometry import Grid3D, MicArray, PhysicalConstants, Point3, pair_tdoas
from .io import atomic_write_text

logger = logging.getLogger(__name__)

ENGINES = ("gcc-phat", "deepgcc")


class ConfigurationError(ValueError):
    pass


def sample_lag(lags: np.ndarray, tau: float, fs: float, counter: dict | None = None) -> float:
    """Linearly interpolated value of a centred lag vector at delay ``tau`` seconds.

    Delays outside ``[-L/2, L/2 - 1]`` samples contribute 0; if ``counter``
    is given its ``"out_of_support"`` entry is incremented.
    """
    lags = np.asarray(lags, dtype=float)
    L = lags.shape[0]
    pos = tau * fs + L // 2
    if not 0 <= pos <= L - 1:
        if counter is not None:
            counter["out_of_support"] = counter.get("out_of_support", 0) + 1
        return 0.0
    i0 = min(int(np.floor(pos)), L - 2)
    w = pos - i0
    return float((1 - w) * lags[i0] + w * lags[i0 + 1])


@dataclass
class LagFunctionSet:
    """One length-L lag vector per microphone pair, ordered like ``pairs``."""

    lags: np.ndarray
    pairs: list[tuple[int, int]]
    fs: float

    def __post_init__(self):
        self.lags = np.asarray(self.lags, dtype=float)
        if self.lags.ndim != 2 or self.lags.shape[0] != len(self.pairs):
            raise ValueError(
                f"need one lag vector per pair: got shape {self.lags.shape} for {len(self.pairs)} pairs"
            )

    @property
    def L(self) -> int:
        return self.lags.shape[1]


@dataclass
class PowerMap:
    grid: Grid3D
    values: np.ndarray
    provenance: str = "gcc-phat"
    out_of_support: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.grid.size,):
            raise ValueError(f"{self.values.shape[0]} values for a grid of {self.grid.size} points")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("power map contains non-finite values")

    def as_volume(self) -> np.ndarray:
        """Values reshaped to (nz, ny, nx)."""
        nx, ny, nz = self.grid.shape
        return self.values.reshape(nz, ny, nx)


class DelayTable:
    """Per-pair interpolation indices and weights for every grid point.

    TDOAs depend only on geometry, so they are computed once and reused for
    every frame. ``mode`` is ``"linear"`` (default) or ``"nearest"``.
    """

    def __init__(self, array: MicArray, grid: Grid3D, consts: PhysicalConstants, L: int,
                 mode: str = "linear", pairs: Sequence[tuple[int, int]] | None = None):
        if mode not in ("linear", "nearest"):
            raise ValueError(f"unknown interpolation mode {mode!r}")
        self.array = array
        self.grid = grid
        self.consts = consts
        self.L = L
        self.mode = mode
        self.pairs = list(pairs) if pairs is not None else array.pairs()
        pos = pair_tdoas(grid.points(), array, consts.c, self.pairs) * consts.fs + L // 2
        if mode == "nearest":
            pos = np.rint(pos)
        valid = (pos >= 0) & (pos <= L - 1)
        i0 = np.clip(np.floor(pos), 0, L - 2).astype(np.int32)
        w = np.where(valid, pos - i0, 0.0)
        self.index = i0
        self.w_lo = np.where(valid, 1.0 - w, 0.0)
        self.w_hi = w
        self.out_of_support = int((~valid).sum())

    def apm(self, lags: np.ndarray) -> np.ndarray:
        """Sum of interpolated lag values over pairs, in pair order."""
        lags = np.asarray(lags, dtype=float)
        if lags.shape != (len(self.pairs), self.L):
            raise ValueError(f"expected lag array of shape {(len(self.pairs), self.L)}, got {lags.shape}")
        out = np.zeros(self.index.shape[1])
        for p in range(len(self.pairs)):
            i0 = self.index[p]
            out += self.w_lo[p] * lags[p, i0] + self.w_hi[p] * lags[p, i0 + 1]
        return out


def build_apm(lag_set: LagFunctionSet, array: MicArray, grid: Grid3D,
              consts: PhysicalConstants | None = None, provenance: str = "gcc-phat",
              mode: str = "linear", table: DelayTable | None = None) -> PowerMap:
    """Acoustic power map: for each grid point, sum each pair's lag function at its TDOA."""
    consts = consts or PhysicalConstants(fs=lag_set.fs)
    expected = array.pairs()
    if list(lag_set.pairs) != expected:
        raise ValueError(f"lag set pairs do not match a {array.n_mics}-microphone array")
    if consts.fs != lag_set.fs:
        raise ValueError("lag set sampling rate differs from the physical constants")
    if table is None:
        table = DelayTable(array, grid, consts, lag_set.L, mode=mode)
    elif table.grid != grid or table.L != lag_set.L or table.array is not array:
        raise ValueError("delay table was built for a different array, grid or lag count")
    return PowerMap(grid, table.apm(lag_set.lags), provenance, table.out_of_support)


def localize(pmap: PowerMap) -> tuple[Point3, float]:
    """Grid point of maximum power; ties go to the lowest enumeration index."""
    if pmap.values.size == 0:
        raise ValueError("empty power map")
    i = int(np.argmax(pmap.values))
    return pmap.grid.point(i), float(pmap.values[i])


@dataclass
class SequenceLocalization:
    positions: list[Point3]
    peaks: list[float]
    frame_times: np.ndarray
    maps: list[PowerMap] | None = None
    lag_sets: list[np.ndarray] = field(default_factory=list)


def localize_sequence(audio: np.ndarray, array: MicArray, grid: Grid3D,
                      consts: PhysicalConstants, engine: str = "gcc-phat", model=None,
                      frame_spec: dsp.FrameSpec | None = None, L: int = dsp.DEFAULT_LAGS,
                      mode: str = "linear", keep_maps: bool = False,
                      table: DelayTable | None = None) -> SequenceLocalization:
    """Per-frame localization of multichannel ``audio`` (channels, samples).

    Each frame: windowed frames -> GCC-PHAT per pair -> (DeepGCC network when
    ``engine='deepgcc'``) -> power map -> argmax.
    """
    if engine not in ENGINES:
        raise ConfigurationError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if engine == "deepgcc":
        if model is None:
            raise ConfigurationError("engine 'deepgcc' needs a loaded checkpoint")
        if model.L != L:
            raise ConfigurationError(f"checkpoint expects {model.L} lags, configuration uses {L}")
    audio = np.asarray(audio, dtype=float)
    if audio.ndim != 2 or audio.shape[0] != array.n_mics:
        raise ValueError(f"audio must have shape ({array.n_mics}, samples), got {audio.shape}")
    frame_spec = frame_spec or dsp.FrameSpec.from_duration(consts.fs)
    table = table or DelayTable(array, grid, consts, L, mode=mode)
    pairs = array.pairs()

    frames = dsp.extract_frames(audio, frame_spec)
    positions, peaks, maps = [], [], []
    for block in frames:
        lags = dsp.gcc_phat_pairs(block, pairs, L)
        if engine == "deepgcc":
            lags = model.forward(lags, mode="infer").astype(float)
        pmap = PowerMap(grid, table.apm(lags), engine, table.out_of_support)
        pos, peak = localize(pmap)
        positions.append(pos)
        peaks.append(peak)
        if keep_maps:
            maps.append(pmap)
    times = np.array([frame_spec.frame_center(i, consts.fs) for i in range(len(frames))])
    return SequenceLocalization(positions, peaks, times, maps if keep_maps else None)


def write_power_map(path, pmap: PowerMap):
    """Text dump: ``#`` header lines with grid geometry, then one value per line."""
    g = pmap.grid
    lines = [
        "# deepgcc power map v1",
        f"# provenance {pmap.provenance}",
        "# min " + " ".join(repr(float(v)) for v in g.min_corner),
        "# max " + " ".join(repr(float(v)) for v in g.max_corner),
        "# resolution " + " ".join(repr(float(v)) for v in g.resolution),
        "# shape " + " ".join(str(n) for n in g.shape),
        "# order x-fastest",
    ]
    lines += [repr(float(v)) for v in pmap.values]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_power_map(path) -> PowerMap:
    header, values = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 2:
                    header[parts[0]] = parts[1:]
            elif line.strip():
                values.append(float(line))
    grid = Grid3D(
        [float(v) for v in header["min"]],
        [float(v) for v in header["max"]],
        [float(v) for v in header["resolution"]],
    )
    return PowerMap(grid, np.array(values), header.get("provenance", ["gcc-phat"])[0])
