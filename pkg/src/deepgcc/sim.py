"""Shoebox image-source simulator for labelled multichannel recordings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal as sps

from . import dsp
from .geometry import MicArray, PhysicalConstants, Point3, _vec, pair_tdoas
from .io import GroundTruthTrack

SINC_HALF_WIDTH = 16


@dataclass
class RoomSpec:
    """Shoebox room with one corner at the origin.

    ``absorption`` is a scalar or six values ordered x0, x1, y0, y1, z0, z1
    (walls at coordinate 0 and at the room dimension). Absorption 1 with any
    ``max_order`` is anechoic.
    """

    dims: tuple[float, float, float]
    absorption: float | Sequence[float] = 1.0
    max_order: int = 0

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        if len(self.dims) != 3 or any(not d > 0 for d in self.dims):
            raise ValueError(f"room dimensions must be 3 positive lengths, got {self.dims}")
        a = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,)).copy()
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("absorption coefficients must lie in [0, 1]")
        self.absorption = a
        if int(self.max_order) != self.max_order or self.max_order < 0:
            raise ValueError("max reflection order must be a nonnegative integer")
        self.max_order = int(self.max_order)

    @classmethod
    def from_rt60(cls, dims, rt60: float, max_order: int, c: float = 340.0) -> "RoomSpec":
        """Uniform absorption from Sabine's formula ``RT60 = 24 ln(10) V / (c S a)``."""
        x, y, z = dims
        volume = x * y * z
        surface = 2 * (x * y + x * z + y * z)
        alpha = 24 * math.log(10) * volume / (c * surface * rt60)
        if alpha > 1:
            raise ValueError(f"RT60 of {rt60} s is unreachable in this room (absorption {alpha:.2f} > 1)")
        return cls(dims, alpha, max_order)

    @property
    def reflection(self) -> np.ndarray:
        """Pressure reflection coefficients sqrt(1 - absorption)."""
        return np.sqrt(1.0 - self.absorption)

    def sabine_rt60(self, c: float = 340.0) -> float:
        x, y, z = self.dims
        areas = np.array([y * z, y * z, x * z, x * z, x * y, x * y])
        a = float((areas * self.absorption).sum())
        return math.inf if a == 0 else 24 * math.log(10) * x * y * z / (c * a)

    def contains(self, p, margin: float = 0.0) -> bool:
        v = _vec(p).reshape(3)
        return bool(np.all(v > margin) and np.all(v < np.array(self.dims) - margin))

    def check_inside(self, p, what: str = "point"):
        if not self.contains(p):
            raise ValueError(f"{what} {np.asarray(_vec(p)).tolist()} is not strictly inside the room {self.dims}")


def image_sources(room: RoomSpec, src) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image positions (K, 3), reflection gains (K,) and orders (K,) up to ``max_order``.

    Images are sorted by order, then by position, so raising ``max_order``
    only appends new images.
    """
    s = _vec(src).reshape(3)
    N = room.max_order
    n = np.arange(-N, N + 1)
    beta = room.reflection.reshape(3, 2)
    dims = np.array(room.dims)
    # per axis: every (n, p) combination, its coordinate, order and gain
    per_axis = []
    for ax in range(3):
        nn, pp = np.meshgrid(n, [0, 1], indexing="ij")
        nn, pp = nn.ravel(), pp.ravel()
        coord = 2 * nn * dims[ax] + (1 - 2 * pp) * s[ax]
        k0 = np.abs(nn - pp)  # hits on the wall at 0
        k1 = np.abs(nn)  # hits on the wall at dims[ax]
        order = k0 + k1
        with np.errstate(divide="ignore"):
            gain = np.power(beta[ax, 0], k0) * np.power(beta[ax, 1], k1)
        keep = order <= N
        per_axis.append((coord[keep], order[keep], gain[keep]))
    (cx, ox, gx), (cy, oy, gy), (cz, oz, gz) = per_axis
    ix, iy, iz = np.meshgrid(np.arange(len(cx)), np.arange(len(cy)), np.arange(len(cz)), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    order = ox[ix] + oy[iy] + oz[iz]
    keep = order <= N
    ix, iy, iz, order = ix[keep], iy[keep], iz[keep], order[keep]
    pos = np.stack([cx[ix], cy[iy], cz[iz]], axis=1)
    gain = gx[ix] * gy[iy] * gz[iz]
    srt = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], order))
    return pos[srt], gain[srt], order[srt]


def _fractional_taps(delays: np.ndarray, amps: np.ndarray, length: int,
                     half_width: int = SINC_HALF_WIDTH) -> np.ndarray:
    """Sum of Hann-windowed sinc pulses centred at fractional sample ``delays``."""
    base = np.floor(delays).astype(np.int64)
    offs = np.arange(-half_width + 1, half_width + 1)
    idx = base[:, None] + offs[None, :]
    t = idx - delays[:, None]
    win = 0.5 * (1 + np.cos(np.pi * t / half_width))
    vals = amps[:, None] * np.sinc(t) * win
    ok = (idx >= 0) & (idx < length)
    return np.bincount(idx[ok], weights=vals[ok], minlength=length)[:length]


def rir(room: RoomSpec, src, mic, fs: float, c: float = 340.0, length: int | None = None) -> np.ndarray:
    """Room impulse response from ``src`` to ``mic`` by the image-source method.

    Each image contributes ``gain / distance`` at a delay of ``distance / c``
    seconds, rendered with a windowed-sinc fractional delay.
    """
    room.check_inside(src, "source")
    room.check_inside(mic, "microphone")
    pos, gain, _ = image_sources(room, src)
    m = _vec(mic).reshape(3)
    dist = np.linalg.norm(pos - m, axis=1)
    delays = dist / c * fs
    if length is None:
        length = int(math.ceil(delays.max())) + SINC_HALF_WIDTH + 1
    live = gain > 0
    return _fractional_taps(delays[live], gain[live] / dist[live], length)


def array_rirs(room: RoomSpec, src, array: MicArray, fs: float, c: float = 340.0) -> np.ndarray:
    """Impulse responses to every microphone, zero-padded to a common length (M, n)."""
    room.check_inside(src, "source")
    for k in range(array.n_mics):
        room.check_inside(array.positions[k], f"microphone {k}")
    pos, gain, _ = image_sources(room, src)
    live = gain > 0
    pos, gain = pos[live], gain[live]
    dist = np.linalg.norm(pos[None, :, :] - array.positions[:, None, :], axis=-1)
    length = int(math.ceil(dist.max() / c * fs)) + SINC_HALF_WIDTH + 1
    return np.stack([_fractional_taps(d / c * fs, gain / d, length) for d in dist])


# ---------------------------------------------------------------------------
# excitation and synthesis


def excitation(kind: str, n: int, fs: float, rng: np.random.Generator,
               wav: np.ndarray | None = None) -> np.ndarray:
    """Source signal: ``white`` noise, ``speech`` (formant-filtered, syllable-modulated noise) or ``wav``."""
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "speech":
        x = rng.standard_normal(n)
        poles = []
        for f, r in ((500.0, 0.985), (1500.0, 0.98), (2500.0, 0.975)):
            w = 2 * np.pi * f / fs
            poles += [r * np.exp(1j * w), r * np.exp(-1j * w)]
        a = np.real(np.poly(poles))
        x = sps.lfilter([1.0], a, x)
        t = np.arange(n) / fs
        envelope = 0.3 + 0.7 * np.abs(np.sin(2 * np.pi * 2.5 * t + rng.uniform(0, np.pi)))
        x = x * envelope
        return x / (np.std(x) + 1e-12)
    if kind == "wav":
        if wav is None:
            raise ValueError("excitation 'wav' needs the source samples")
        src = np.asarray(wav, dtype=float).reshape(-1)
        reps = int(math.ceil(n / len(src)))
        return np.tile(src, reps)[:n]
    raise ValueError(f"unknown excitation {kind!r}")


@dataclass
class SourceScript:
    """Source trajectory as time-stamped waypoints (one waypoint = static)."""

    times: np.ndarray
    positions: np.ndarray
    excitation: str = "white"
    snr_db: float | None = None
    wav: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.times) == 0 or len(self.times) != len(self.positions):
            raise ValueError("one waypoint time per position is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")

    @classmethod
    def static(cls, position, **kw) -> "SourceScript":
        return cls([0.0], [_vec(position)], **kw)

    @property
    def is_static(self) -> bool:
        return len(self.times) == 1

    def position_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.times, self.positions[:, ax]) for ax in range(3)], axis=-1)


@dataclass
class Simulation:
    audio: np.ndarray  # (channels, samples)
    fs: float
    ground_truth: GroundTruthTrack


def _add_sensor_noise(y: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    if snr_db is None or math.isinf(snr_db):
        return y
    power = float(np.mean(y**2))
    return y + rng.standard_normal(y.shape) * math.sqrt(power / 10 ** (snr_db / 10))


def synthesize(room: RoomSpec, array: MicArray, script: SourceScript, duration: float,
               fs: float, seed: int = 0, c: float = 340.0,
               frame_spec: dsp.FrameSpec | None = None) -> Simulation:
    """Render ``duration`` seconds of microphone signals for ``script``.

    Static sources use a single impulse response; moving sources are rendered
    block-wise at the frame hop with Hann crossfades. Ground truth is labelled
    at each analysis frame centre.
    """
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = int(round(duration * fs))
    for p in script.positions:
        room.check_inside(p, "source")
    rng = np.random.default_rng(seed)
    frame_spec = frame_spec or dsp.FrameSpec.from_duration(fs)

    if script.is_static:
        h = array_rirs(room, script.positions[0], array, fs, c)
        pre = h.shape[1]
        s = excitation(script.excitation, n + pre, fs, rng, script.wav)
        y = sps.oaconvolve(s[None, :], h, axes=1)[:, pre:pre + n]
    else:
        hop = frame_spec.hop
        win = np.hanning(2 * hop + 1)[:-1]  # periodic: overlapping copies sum to one
        tail = array_rirs(room, script.positions[0], array, fs, c).shape[1]
        lead = (-(-tail // hop) + 1) * hop  # samples simulated before t=0
        starts = np.arange(-lead, n, hop)
        rirs = [array_rirs(room, p, array, fs, c) for p in script.position_at((starts + hop) / fs)]
        s = excitation(script.excitation, lead + n + 2 * hop, fs, rng, script.wav)
        out = np.zeros((array.n_mics, lead + n + 2 * hop + max(h.shape[1] for h in rirs)))
        for st, h in zip(starts, rirs):
            a = st + lead
            blk = sps.oaconvolve((s[a:a + 2 * hop] * win)[None, :], h, axes=1)
            out[:, a:a + blk.shape[1]] += blk
        y = out[:, lead:lead + n]
    y = _add_sensor_noise(y, script.snr_db, rng)

    n_frames = frame_spec.n_frames(n)
    times = np.array([frame_spec.frame_center(i, fs) for i in range(n_frames)])
    if n_frames == 0:
        times = np.array([0.0])
    track = GroundTruthTrack(times, script.position_at(times))
    return Simulation(y, fs, track)


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingSet:
    inputs: np.ndarray  # (n, L) GCC-PHAT vectors
    targets: np.ndarray  # (n, L) Gaussian delay likelihoods
    delays: np.ndarray  # (n,) true TDOA in seconds
    pairs: np.ndarray  # (n, 2) microphone indices

    def __len__(self) -> int:
        return len(self.inputs)

    def __iter__(self):
        return iter(zip(self.inputs, self.targets))

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.inputs[idx], self.targets[idx], self.delays[idx], self.pairs[idx])

    @staticmethod
    def concat(sets: Sequence["TrainingSet"]) -> "TrainingSet":
        return TrainingSet(*(np.concatenate([getattr(s, f) for s in sets])
                             for f in ("inputs", "targets", "delays", "pairs")))


def random_positions(room: RoomSpec, n: int, rng: np.random.Generator, margin: float = 0.3,
                     region=None) -> np.ndarray:
    """Uniform positions inside ``region`` (min, max corners) clipped to the room minus ``margin``."""
    lo = np.full(3, margin)
    hi = np.array(room.dims) - margin
    if region is not None:
        lo = np.maximum(lo, np.asarray(region[0], dtype=float))
        hi = np.minimum(hi, np.asarray(region[1], dtype=float))
    if np.any(hi <= lo):
        raise ValueError("source region is empty")
    return rng.uniform(lo, hi, size=(n, 3))


def make_dataset(room: RoomSpec, array: MicArray, n: int, seed: int = 0,
                 consts: PhysicalConstants | None = None, L: int = dsp.DEFAULT_LAGS,
                 sigma: float = dsp.DEFAULT_SIGMA, frame_spec: dsp.FrameSpec | None = None,
                 excitation_kind: str = "white", snr_db: float | None = None,
                 region=None, margin: float = 0.3) -> TrainingSet:
    """``n`` (GCC-PHAT, Gaussian target) pairs from random static sources in ``room``.

    Every simulated source position yields one frame and thus one example
    per microphone pair; positions are drawn until ``n`` examples exist.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    consts = consts or PhysicalConstants()
    frame_spec = frame_spec or dsp.FrameSpec.from_duration(consts.fs)
    rng = np.random.default_rng(seed)
    pairs = array.pairs()
    N = frame_spec.frame_length
    taper = frame_spec.taper()
    per_source = len(pairs)
    n_sources = -(-n // per_source)
    positions = random_positions(room, n_sources, rng, margin, region)
    xs, ys, ds, ps = [], [], [], []
    for q in positions:
        h = array_rirs(room, q, array, consts.fs, consts.c)
        pre = h.shape[1]
        s = excitation(excitation_kind, N + pre, consts.fs, rng)
        y = sps.oaconvolve(s[None, :], h, axes=1)[:, pre:pre + N]
        y = _add_sensor_noise(y, snr_db, rng)
        xs.append(dsp.gcc_phat_pairs(y * taper, pairs, L))
        d = pair_tdoas(q, array, consts.c, pairs)[:, 0]
        ds.append(d)
        ys.append(dsp.gaussian_targets(d, consts.fs, L, sigma))
        ps.append(np.array(pairs))
    out = TrainingSet(
        np.concatenate(xs).astype(np.float32),
        np.concatenate(ys).astype(np.float32),
        np.concatenate(ds),
        np.concatenate(ps),
    )
    return out.subset(slice(0, n))
