"""Framing, GCC-PHAT, Gaussian delay targets and resampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import signal as sps

DEFAULT_LAGS = 400
DEFAULT_SIGMA = 5.0
DEFAULT_FRAME_SECONDS = 0.166
EPS_REL = 1e-12


class ShortSignalWarning(UserWarning):
    """Raised (as a warning) when a signal is too short to yield any frame."""


class DelayOutOfRangeError(ValueError):
    pass


def blackman(n: int) -> np.ndarray:
    """Symmetric Blackman taper clipped to [0, 1]."""
    # np.blackman leaves ~-1e-17 at the endpoints
    return np.clip(np.blackman(n), 0.0, 1.0)


@dataclass(frozen=True)
class FrameSpec:
    frame_length: int
    hop: int
    window: str = "blackman"

    def __post_init__(self):
        if self.frame_length <= 0:
            raise ValueError("frame length must be positive")
        if not 0 < self.hop <= self.frame_length:
            raise ValueError(f"hop must be in (0, frame_length], got {self.hop}")
        if self.window not in ("blackman", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def from_duration(cls, fs: float, seconds: float = DEFAULT_FRAME_SECONDS,
                      overlap: float = 0.5) -> "FrameSpec":
        """Frame of ``seconds`` at ``fs`` rounded down to an even sample count."""
        if not 0 <= overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {overlap}")
        n = int(math.floor(seconds * fs + 1e-6))
        n -= n % 2
        hop = max(1, int(round(n * (1 - overlap))))
        return cls(n, hop)

    def taper(self) -> np.ndarray:
        if self.window == "rect":
            return np.ones(self.frame_length)
        return blackman(self.frame_length)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            return 0
        return 1 + (n_samples - self.frame_length) // self.hop

    def frame_center(self, i: int, fs: float) -> float:
        """Time in seconds of the middle of frame ``i``."""
        return (i * self.hop + self.frame_length / 2) / fs


def extract_frames(signal: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Split into windowed frames, dropping the trailing partial frame.

    A 1-D signal gives shape (n_frames, frame_length); a (channels, samples)
    signal gives (n_frames, channels, frame_length). A signal shorter than one
    frame yields an empty array and a :class:`ShortSignalWarning`.
    """
    x = np.asarray(signal, dtype=float)
    n = spec.n_frames(x.shape[-1])
    if n == 0:
        warnings.warn(
            f"signal of {x.shape[-1]} samples is shorter than one frame ({spec.frame_length})",
            ShortSignalWarning,
            stacklevel=2,
        )
        return np.zeros((0,) + x.shape[:-1] + (spec.frame_length,))
    view = np.lib.stride_tricks.sliding_window_view(x, spec.frame_length, axis=-1)
    view = view[..., :: spec.hop, :][..., :n, :]
    frames = view * spec.taper()
    if x.ndim == 2:
        frames = np.moveaxis(frames, 1, 0)
    return np.ascontiguousarray(frames)


def _phat_spectra(frames: np.ndarray, eps_rel: float) -> np.ndarray:
    """rfft along the last axis, divided by its floored magnitude."""
    spec = np.fft.rfft(frames, axis=-1)
    mag = np.abs(spec)
    floor = eps_rel * mag.max(axis=-1, keepdims=True)
    floor = np.maximum(floor, np.finfo(float).tiny)
    return spec / np.maximum(mag, floor)


def _crop_lags(cc: np.ndarray, L: int) -> np.ndarray:
    """Reorder circular lags so lag 0 sits at index L/2; keep lags [-L/2, L/2-1]."""
    idx = np.arange(-(L // 2), L // 2) % cc.shape[-1]
    return cc[..., idx]


def _check_lags(L: int, n: int):
    if L <= 0 or L % 2:
        raise ValueError(f"lag count must be a positive even number, got {L}")
    if L > n:
        raise ValueError(f"lag count {L} exceeds frame length {n}")


def gcc_phat(xk: np.ndarray, xl: np.ndarray, L: int = DEFAULT_LAGS,
             eps_rel: float = EPS_REL) -> np.ndarray:
    """GCC-PHAT of two equal-length frames, cropped to ``L`` centred lags.

    Index ``L/2 + d`` holds lag ``d``. A positive lag means ``xk`` lags behind
    ``xl`` (``xk[n] = xl[n - d]``), matching the sign of :func:`geometry.tdoa`.
    Magnitudes are floored at ``eps_rel`` times the largest bin so silent
    input gives zeros rather than NaN.
    """
    xk = np.asarray(xk, dtype=float)
    xl = np.asarray(xl, dtype=float)
    if xk.shape != xl.shape or xk.ndim != 1:
        raise ValueError(f"frames must be 1-D with equal lengths, got {xk.shape} and {xl.shape}")
    _check_lags(L, xk.shape[0])
    pk, pl = _phat_spectra(np.stack([xk, xl]), eps_rel)
    cc = np.fft.irfft(pk * np.conj(pl), n=xk.shape[0])
    return _crop_lags(cc, L)


def gcc_phat_pairs(frames: np.ndarray, pairs: Sequence[tuple[int, int]],
                   L: int = DEFAULT_LAGS, eps_rel: float = EPS_REL) -> np.ndarray:
    """GCC-PHAT for every pair of a multichannel frame block.

    ``frames`` has shape (..., channels, n); the result has shape
    (..., n_pairs, L). Each channel is transformed once.
    """
    frames = np.asarray(frames, dtype=float)
    n = frames.shape[-1]
    _check_lags(L, n)
    phat = _phat_spectra(frames, eps_rel)
    k = np.array([p[0] for p in pairs])
    l = np.array([p[1] for p in pairs])
    cross = phat[..., k, :] * np.conj(phat[..., l, :])
    cc = np.fft.irfft(cross, n=n, axis=-1)
    return _crop_lags(cc, L)


@dataclass
class GccFrame:
    """One cropped GCC-PHAT lag vector with its provenance."""

    lags: np.ndarray
    pair: tuple[int, int]
    frame_index: int
    fs: float

    def __post_init__(self):
        self.lags = np.asarray(self.lags, dtype=float)
        if self.lags.ndim != 1:
            raise ValueError("lag vector must be 1-D")
        if not np.all(np.isfinite(self.lags)):
            raise ValueError("lag vector must be finite")

    @property
    def L(self) -> int:
        return self.lags.shape[0]


def lag_axis(L: int) -> np.ndarray:
    """Integer lag of each output index: -L/2 ... L/2-1."""
    return np.arange(-(L // 2), L // 2)


def gaussian_target(delay: float, fs: float, L: int = DEFAULT_LAGS,
                    sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian-shaped delay likelihood centred on ``delay * fs`` lags."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    shift = float(delay) * fs
    if not abs(shift) < L / 2:
        raise DelayOutOfRangeError(f"delay of {shift:.3f} samples outside +-{L // 2} lags")
    d = lag_axis(L)
    return np.exp(-((d - shift) ** 2) / (2.0 * sigma**2))


def gaussian_targets(delays: np.ndarray, fs: float, L: int = DEFAULT_LAGS,
                     sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Vectorised :func:`gaussian_target`: shape (len(delays), L)."""
    shifts = np.asarray(delays, dtype=float) * fs
    if np.any(np.abs(shifts) >= L / 2):
        raise DelayOutOfRangeError("a delay lies outside the lag window")
    d = lag_axis(L)
    return np.exp(-((d[None, :] - shifts[:, None]) ** 2) / (2.0 * sigma**2))


def resample(signal: np.ndarray, from_fs: float, to_fs: float) -> np.ndarray:
    """Polyphase windowed-sinc resampling along the last axis.

    Output length is ``round(n * to_fs / from_fs)``. Equal rates return a copy.
    """
    if from_fs <= 0 or to_fs <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(signal)
    if from_fs == to_fs:
        return x.copy()
    ratio = Fraction(to_fs / from_fs).limit_denominator(10000)
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)
    n_out = int(round(x.shape[-1] * to_fs / from_fs))
    if y.shape[-1] >= n_out:
        return y[..., :n_out]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
    return np.pad(y, pad)
