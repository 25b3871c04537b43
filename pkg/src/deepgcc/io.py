"""WAV and CSV persistence, experiment configuration and dataset partitioning."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .dsp import FrameSpec
from .geometry import Grid3D, MicArray, PhysicalConstants, Point3, max_lag_samples


class WavParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# WAV

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE
_GUID_TAIL = b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"


def _decode_pcm24(raw: bytes) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
    return np.where(v >= 1 << 23, v - (1 << 24), v)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a RIFF/WAVE file as (channels, samples) float64 in [-1, 1] plus the rate.

    Supports 16/24/32-bit PCM and 32/64-bit IEEE float, plain or
    WAVE_FORMAT_EXTENSIBLE. Malformed files raise :class:`WavParseError`
    carrying the byte offset of the problem.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavParseError("file too short for a RIFF header", len(data))
    if data[:4] != b"RIFF":
        raise WavParseError("missing RIFF magic", 0)
    if data[8:12] != b"WAVE":
        raise WavParseError("RIFF form type is not WAVE", 8)
    fmt = None
    payload = None
    pos = 12
    while pos < len(data):
        if pos + 8 > len(data):
            raise WavParseError("truncated chunk header", pos)
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + size > len(data):
            raise WavParseError(f"chunk {cid!r} declares {size} bytes but file ends", pos + 4)
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError("fmt chunk shorter than 16 bytes", pos + 4)
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", data[body:body + 16])
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavParseError("extensible fmt chunk shorter than 40 bytes", pos + 4)
                guid = data[body + 24:body + 40]
                if guid[2:] != _GUID_TAIL:
                    raise UnsupportedFormatError("unknown WAVE_FORMAT_EXTENSIBLE subformat")
                (tag,) = struct.unpack("<H", guid[:2])
            fmt = (tag, channels, rate, align, bits, pos)
        elif cid == b"data":
            payload = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("no fmt chunk", len(data))
    if payload is None:
        raise WavParseError("no data chunk", len(data))
    tag, channels, rate, align, bits, fmt_pos = fmt
    if channels == 0:
        raise WavParseError("zero channels", fmt_pos + 10)
    if align != channels * (bits // 8):
        raise WavParseError(f"block align {align} inconsistent with {channels}x{bits}-bit", fmt_pos + 20)
    body, size = payload
    if size % align:
        raise WavParseError(f"data size {size} is not a multiple of frame size {align}", body - 4)
    raw = data[body:body + size]
    if tag == _PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _PCM and bits == 24:
        x = _decode_pcm24(raw).astype(np.float64) / 8388608.0
    elif tag == _PCM and bits == 32:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    elif tag == _FLOAT and bits == 32:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif tag == _FLOAT and bits == 64:
        x = np.frombuffer(raw, dtype="<f8").copy()
    else:
        raise UnsupportedFormatError(f"unsupported WAV encoding: format tag {tag}, {bits} bits")
    return x.reshape(-1, channels).T.copy(), int(rate)


def write_wav(path, audio: np.ndarray, fs: int, subtype: str = "float32"):
    """Write (channels, samples) audio; ``subtype`` is pcm16, pcm24 or float32.

    PCM values are scaled by 2**(bits-1), rounded and clipped, so a file read
    with :func:`read_wav` and written back is unchanged. More than two channels
    or 24-bit samples use the WAVE_FORMAT_EXTENSIBLE header.
    """
    x = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    channels, n = x.shape
    inter = x.T
    if subtype == "pcm16":
        tag, bits = _PCM, 16
        raw = np.clip(np.rint(inter * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif subtype == "pcm24":
        tag, bits = _PCM, 24
        v = np.clip(np.rint(inter * 8388608.0), -8388608, 8388607).astype(np.int32).reshape(-1)
        v = np.where(v < 0, v + (1 << 24), v).astype(np.uint32)
        raw = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    elif subtype == "float32":
        tag, bits = _FLOAT, 32
        raw = inter.astype("<f4").tobytes()
    else:
        raise UnsupportedFormatError(f"unknown WAV subtype {subtype!r}")
    align = channels * bits // 8
    extensible = channels > 2 or bits > 16 and tag == _PCM
    if extensible:
        mask = (1 << channels) - 1 if channels <= 18 else 0
        fmt = struct.pack("<HHIIHH", _EXTENSIBLE, channels, fs, fs * align, align, bits)
        fmt += struct.pack("<HHI", 22, bits, mask) + struct.pack("<H", tag) + _GUID_TAIL
    else:
        fmt = struct.pack("<HHIIHH", tag, channels, fs, fs * align, align, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if tag == _FLOAT:
        chunks += b"fact" + struct.pack("<II", 4, n)
    chunks += b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        chunks += b"\x00"
    atomic_write_bytes(path, b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


# ---------------------------------------------------------------------------
# ground truth

GT_HEADER = ["time_s", "x_m", "y_m", "z_m"]


@dataclass
class GroundTruthTrack:
    times: np.ndarray
    positions: np.ndarray
    mode: str = "linear"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.times) == 0 or len(self.times) != len(self.positions):
            raise ValidationError("ground truth needs one position per time stamp")
        if np.any(np.diff(self.times) < 0):
            raise ValidationError("ground-truth times must be nondecreasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.positions))):
            raise ValidationError("ground truth contains non-finite values")
        if self.mode not in ("linear", "hold"):
            raise ValidationError(f"unknown interpolation mode {self.mode!r}")

    def query(self, t: float) -> tuple[Point3, bool]:
        """Position at ``t`` and whether ``t`` was clamped to the track's ends."""
        ts, ps = self.times, self.positions
        if t <= ts[0] or t >= ts[-1]:
            clamped = t < ts[0] or t > ts[-1]
            return Point3.of(ps[0] if t <= ts[0] else ps[-1]), clamped
        j = int(np.searchsorted(ts, t, side="right"))
        if self.mode == "hold" or ts[j] == ts[j - 1]:
            return Point3.of(ps[j - 1]), False
        w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return Point3.of((1 - w) * ps[j - 1] + w * ps[j]), False


def read_ground_truth(path, mode: str = "linear") -> GroundTruthTrack:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != GT_HEADER:
            raise ValidationError(f"ground-truth header must be {','.join(GT_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise ValidationError(f"line {lineno}: expected 4 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
    if not rows:
        raise ValidationError("ground-truth file has no rows")
    arr = np.array(rows)
    return GroundTruthTrack(arr[:, 0], arr[:, 1:], mode)


def write_ground_truth(path, track: GroundTruthTrack):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GT_HEADER)
    for t, p in zip(track.times, track.positions):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in p])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# results CSV

RESULT_HEADER = ["frame_index", "t", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "error_m"]


@dataclass
class FrameResult:
    frame_index: int
    t: float
    est: Point3
    gt: Point3
    error_m: float


def write_results(path, rows: Sequence[FrameResult]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in rows:
        w.writerow(
            [r.frame_index, repr(float(r.t))]
            + [repr(float(v)) for v in r.est]
            + [repr(float(v)) for v in r.gt]
            + [repr(float(r.error_m))]
        )
    atomic_write_text(path, buf.getvalue())


def read_results(path) -> list[FrameResult]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_HEADER:
            raise ValidationError(f"results header must be {','.join(RESULT_HEADER)}")
        return [
            FrameResult(
                int(row["frame_index"]),
                float(row["t"]),
                Point3(float(row["est_x"]), float(row["est_y"]), float(row["est_z"])),
                Point3(float(row["gt_x"]), float(row["gt_y"]), float(row["gt_z"])),
                float(row["error_m"]),
            )
            for row in reader
        ]


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class RoomConfig:
    dims: tuple[float, float, float] = (4.77, 5.94, 4.50)
    rt60: float | None = None
    absorption: float | list[float] | None = 1.0
    max_order: int = 0


@dataclass
class SourceConfig:
    trajectory: list[tuple[float, list[float]]] = field(default_factory=lambda: [(0.0, [2.0, 2.0, 1.5])])
    excitation: str = "white"
    snr_db: float | None = None
    wav: str | None = None


@dataclass
class ExperimentConfig:
    """Every constant of an experiment; unit suffixes name the units.

    Loaded from YAML with :func:`load_config`. Unknown keys are rejected.
    """

    fs: float = 96000.0
    c: float = 340.0
    frame_ms: float = 166.0
    overlap: float = 0.5
    lags: int = 400
    sigma: float = 5.0
    array: MicArray = field(default_factory=lambda: MicArray.circular((2.385, 2.97, 0.73), 0.1))
    grid_min: tuple[float, float, float] = (0.0, 0.0, 0.73)
    grid_max: tuple[float, float, float] = (4.77, 5.94, 3.23)
    grid_resolution: float | tuple[float, float, float] = 0.1
    engine: str = "gcc-phat"
    interpolation: str = "linear"
    room: RoomConfig = field(default_factory=RoomConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    duration_s: float = 2.0
    batch_size: int = 100
    patience: int = 50
    max_epochs: int = 1000
    learning_rate: float = 1e-4
    lr_decay: float = 1e-8
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(fs=self.fs, c=self.c)

    @property
    def grid(self) -> Grid3D:
        return Grid3D(self.grid_min, self.grid_max, self.grid_resolution)

    def frame_spec(self) -> FrameSpec:
        return FrameSpec.from_duration(self.fs, self.frame_ms / 1000.0, self.overlap)

    def validate(self):
        try:
            consts = self.constants
            grid = self.grid
            spec = self.frame_spec()
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        if self.lags <= 0 or self.lags % 16:
            raise ValidationError(f"lags must be a positive multiple of 16, got {self.lags}")
        if self.lags > spec.frame_length:
            raise ValidationError(f"lags ({self.lags}) exceed the frame length ({spec.frame_length})")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if self.engine not in ("gcc-phat", "deepgcc"):
            raise ValidationError(f"engine must be gcc-phat or deepgcc, got {self.engine!r}")
        if self.interpolation not in ("linear", "nearest"):
            raise ValidationError(f"interpolation must be linear or nearest, got {self.interpolation!r}")
        if max_lag_samples(self.array, consts) >= self.lags // 2:
            raise ValidationError("array aperture exceeds the lag window; increase lags")
        if any(d <= 0 for d in self.room.dims):
            raise ValidationError("room dimensions must be positive")
        if self.room.max_order < 0:
            raise ValidationError("max reflection order must be >= 0")
        if self.room.rt60 is not None and self.room.rt60 <= 0:
            raise ValidationError("rt60 must be positive")
        if not math.isfinite(self.duration_s) or self.duration_s <= 0:
            raise ValidationError(f"duration_s must be positive, got {self.duration_s}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size, patience and max_epochs must be >= 1")
        _ = grid


def _tuple3(v, name) -> tuple[float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ValidationError(f"{name} must be a list of 3 numbers")
    return tuple(float(x) for x in v)


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    """Build a validated configuration from parsed YAML; every problem is a :class:`ValidationError`."""
    try:
        return _config_from_dict(dict(d or {}))
    except ValidationError:
        raise
    except (TypeError, KeyError, ValueError) as exc:
        raise ValidationError(f"invalid configuration: {exc}") from None


def _config_from_dict(d: dict) -> ExperimentConfig:
    kwargs: dict[str, Any] = {}
    simple = {
        "fs": float, "c": float, "frame_ms": float, "overlap": float, "lags": int, "sigma": float,
        "engine": str, "interpolation": str, "duration_s": float, "seed": int,
    }
    for key, conv in simple.items():
        if key in d:
            kwargs[key] = conv(d.pop(key))
    if "array" in d:
        a = d.pop("array") or {}
        if "positions" in a:
            kwargs["array"] = MicArray(np.asarray(a["positions"], dtype=float), a.get("labels"))
        elif "circle" in a:
            c = a["circle"]
            kwargs["array"] = MicArray.circular(
                _tuple3(c["center"], "array.circle.center"), float(c.get("radius", 0.1)),
                int(c.get("n_mics", 8)), float(c.get("rotation", 0.0)),
            )
        else:
            raise ValidationError("array needs 'positions' or 'circle'")
    if "grid" in d:
        g = d.pop("grid") or {}
        if "min" in g:
            kwargs["grid_min"] = _tuple3(g["min"], "grid.min")
        if "max" in g:
            kwargs["grid_max"] = _tuple3(g["max"], "grid.max")
        if "resolution" in g:
            r = g["resolution"]
            kwargs["grid_resolution"] = _tuple3(r, "grid.resolution") if isinstance(r, list) else float(r)
    if "room" in d:
        r = d.pop("room") or {}
        kwargs["room"] = RoomConfig(
            dims=_tuple3(r.get("dims", RoomConfig.dims), "room.dims"),
            rt60=None if r.get("rt60") is None else float(r["rt60"]),
            absorption=r.get("absorption", 1.0),
            max_order=int(r.get("max_order", 0)),
        )
    if "source" in d:
        s = d.pop("source") or {}
        traj = s.get("trajectory")
        if traj is None and "position" in s:
            traj = [[0.0, s["position"]]]
        kwargs["source"] = SourceConfig(
            trajectory=[(float(t), list(_tuple3(p, "source.trajectory"))) for t, p in (traj or [])]
            or SourceConfig().trajectory,
            excitation=str(s.get("excitation", "white")),
            snr_db=None if s.get("snr_db") is None else float(s["snr_db"]),
            wav=s.get("wav"),
        )
    if "train" in d:
        t = d.pop("train") or {}
        for key, conv in (("batch_size", int), ("patience", int), ("max_epochs", int),
                          ("learning_rate", float), ("lr_decay", float)):
            if key in t:
                kwargs[key] = conv(t[key])
    if "paths" in d:
        kwargs["paths"] = {str(k): str(v) for k, v in (d.pop("paths") or {}).items()}
    if d:
        raise ValidationError(f"unknown configuration keys: {sorted(d)}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ValidationError("configuration root must be a mapping")
    return config_from_dict(data or {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    res = cfg.grid_resolution
    return {
        "fs": cfg.fs, "c": cfg.c, "frame_ms": cfg.frame_ms, "overlap": cfg.overlap,
        "lags": cfg.lags, "sigma": cfg.sigma, "engine": cfg.engine,
        "interpolation": cfg.interpolation, "duration_s": cfg.duration_s, "seed": cfg.seed,
        "array": {"positions": cfg.array.positions.tolist()},
        "grid": {
            "min": list(cfg.grid_min), "max": list(cfg.grid_max),
            "resolution": list(res) if isinstance(res, tuple) else res,
        },
        "room": {
            "dims": list(cfg.room.dims), "rt60": cfg.room.rt60,
            "absorption": cfg.room.absorption, "max_order": cfg.room.max_order,
        },
        "source": {
            "trajectory": [[t, list(p)] for t, p in cfg.source.trajectory],
            "excitation": cfg.source.excitation, "snr_db": cfg.source.snr_db, "wav": cfg.source.wav,
        },
        "train": {
            "batch_size": cfg.batch_size, "patience": cfg.patience, "max_epochs": cfg.max_epochs,
            "learning_rate": cfg.learning_rate, "lr_decay": cfg.lr_decay,
        },
        "paths": dict(cfg.paths),
    }


# ---------------------------------------------------------------------------
# partitioning


def partition(sequences: Sequence[str], split: Mapping[str, Any], seed: int = 0) -> dict[str, list[str]]:
    """Assign whole sequences to named splits.

    ``split`` maps split names either to fractions summing to 1 (sequences are
    shuffled with ``seed`` and cut in that order) or to explicit lists of
    sequence names, where at most one split may be ``"rest"``.
    """
    names = list(sequences)
    if len(set(names)) != len(names):
        raise ValidationError("duplicate sequence names in manifest")
    if not split:
        raise ValidationError("empty split specification")
    values = list(split.values())
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        fracs = np.array(values, dtype=float)
        if np.any(fracs < 0) or not math.isclose(fracs.sum(), 1.0, abs_tol=1e-9):
            raise ValidationError("split fractions must be nonnegative and sum to 1")
        n = len(names)
        raw = fracs * n
        counts = np.floor(raw + 1e-9).astype(int)
        remainder = n - counts.sum()
        for i in np.argsort(-(raw - counts), kind="stable")[:remainder]:
            counts[i] += 1
        order = np.random.default_rng(seed).permutation(n)
        out, start = {}, 0
        for key, cnt in zip(split, counts):
            out[key] = sorted(names[i] for i in order[start:start + cnt])
            start += cnt
        return out

    out: dict[str, list[str]] = {}
    seen: dict[str, str] = {}
    rest_key = None
    for key, v in split.items():
        if v == "rest":
            if rest_key is not None:
                raise ValidationError("only one split may take the remaining sequences")
            rest_key = key
            continue
        if isinstance(v, str) or not isinstance(v, Sequence):
            raise ValidationError(f"split {key!r} must be a fraction, a list of names or 'rest'")
        for name in v:
            if name not in names:
                raise ValidationError(f"split {key!r} names unknown sequence {name!r}")
            if name in seen:
                raise ValidationError(f"sequence {name!r} assigned to both {seen[name]!r} and {key!r}")
            seen[name] = key
        out[key] = list(v)
    if rest_key is not None:
        out[rest_key] = [n for n in names if n not in seen]
        out = {k: out[k] for k in split}
    return out
