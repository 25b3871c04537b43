"""DeepGCC encoder-decoder in plain numpy.

Each block is ``conv(k=4) -> max-pool/upsample(2) -> batchnorm -> ReLU``.
Tensors are channel-last, shape (batch, length, channels), matching the
``L x C`` notation used for the block sizes. The default network maps a
length-400 GCC-PHAT vector to a length-400 delay likelihood through
channels 1-2-8-32-128-32-8-2-1.

Checkpoint layout (all integers/floats little-endian)::

    b"DGCC"                       magic
    u32   format version (=1)
    u32   input length L
    u32   block count B
    f32   batchnorm momentum, f32 batchnorm epsilon
    B x   u32 in_ch, u32 out_ch, u32 kernel, u32 resample (0 halve, 1 double)
    B x   f32 arrays: weight (out, in, kernel), bias, gamma, beta,
          running_mean, running_var
    u32   optimizer flag (0/1)
    if 1: u64 step; f64 lr, decay, beta1, beta2, eps;
          B x for weight, bias, gamma, beta: first moment, second moment (f32)
"""

from __future__ import annotations

import copy
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .io import atomic_write_bytes

logger = logging.getLogger(__name__)

KERNEL = 4
PAD_LEFT, PAD_RIGHT = 2, 1
DEFAULT_CHANNELS = (1, 2, 8, 32, 128)
TRAINABLE = ("weight", "bias", "gamma", "beta")
BUFFERS = ("running_mean", "running_var")

CHECKPOINT_MAGIC = b"DGCC"
CHECKPOINT_VERSION = 1
_RESAMPLE_CODES = {"halve": 0, "double": 1}


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ConvBlock:
    """Conv1d (kernel 4, 'same' padding 2/1) + resample by 2 + batchnorm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, resample: str, rng: np.random.Generator | None = None,
                 dtype=np.float32, momentum: float = 0.99, eps: float = 1e-3):
        if resample not in _RESAMPLE_CODES:
            raise ValueError(f"resample must be 'halve' or 'double', got {resample!r}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.resample = resample
        self.momentum = momentum
        self.eps = eps
        fan_in = in_ch * KERNEL
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": rng.uniform(-bound, bound, size=(out_ch, in_ch, KERNEL)).astype(dtype),
            "bias": np.zeros(out_ch, dtype),
            "gamma": np.ones(out_ch, dtype),
            "beta": np.zeros(out_ch, dtype),
        }
        self.buffers = {
            "running_mean": np.zeros(out_ch, dtype),
            "running_var": np.ones(out_ch, dtype),
        }

    @property
    def dtype(self):
        return self.params["weight"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def out_length(self, length: int) -> int:
        return length // 2 if self.resample == "halve" else length * 2

    def forward(self, x: np.ndarray, training: bool, update_stats: bool = True):
        """Return (output, cache). ``cache`` is None unless ``training``."""
        B, L, C = x.shape
        if C != self.in_ch:
            raise ShapeError(f"block expects {self.in_ch} channels, got {C}")
        if self.resample == "halve" and L % 2:
            raise ShapeError(f"cannot max-pool odd length {L}")
        W = self.params["weight"]
        Wm = W.reshape(self.out_ch, -1)

        xp = np.pad(x, ((0, 0), (PAD_LEFT, PAD_RIGHT), (0, 0)))
        patches = np.lib.stride_tricks.sliding_window_view(xp, KERNEL, axis=1)  # (B, L, C, K)
        cols = patches.reshape(B * L, C * KERNEL)
        z = (cols @ Wm.T + self.params["bias"]).reshape(B, L, self.out_ch)

        if self.resample == "halve":
            zr = z.reshape(B, L // 2, 2, self.out_ch)
            arg = zr.argmax(axis=2)
            r = np.take_along_axis(zr, arg[:, :, None, :], axis=2)[:, :, 0, :]
        else:
            arg = None
            r = np.repeat(z, 2, axis=1)

        if training:
            mean = r.mean(axis=(0, 1))
            var = r.var(axis=(0, 1))
            if update_stats:
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm[...] = m * rm + (1 - m) * mean
                rv[...] = m * rv + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (r - mean) * inv_std
        a = self.params["gamma"] * xhat + self.params["beta"]
        y = np.maximum(a, 0)
        cache = (cols, arg, xhat, inv_std, a, x.shape) if training else None
        return y, cache

    def backward(self, dy: np.ndarray, cache):
        """Gradient w.r.t. the block input, plus parameter gradients."""
        cols, arg, xhat, inv_std, a, in_shape = cache
        B, L, C = in_shape
        gamma = self.params["gamma"]

        da = dy * (a > 0)
        grads = {
            "gamma": (da * xhat).sum(axis=(0, 1)),
            "beta": da.sum(axis=(0, 1)),
        }
        dxhat = da * gamma
        n = xhat.shape[0] * xhat.shape[1]
        dr = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
        )

        if self.resample == "halve":
            dzr = np.zeros((B, L // 2, 2, self.out_ch), dtype=dr.dtype)
            np.put_along_axis(dzr, arg[:, :, None, :], dr[:, :, None, :], axis=2)
            dz = dzr.reshape(B, L, self.out_ch)
        else:
            dz = dr.reshape(B, L, 2, self.out_ch).sum(axis=2)

        dz2 = dz.reshape(B * L, self.out_ch)
        Wm = self.params["weight"].reshape(self.out_ch, -1)
        grads["weight"] = (dz2.T @ cols).reshape(self.params["weight"].shape)
        grads["bias"] = dz2.sum(axis=0)
        dcols = (dz2 @ Wm).reshape(B, L, C, KERNEL)
        dxp = np.zeros((B, L + PAD_LEFT + PAD_RIGHT, C), dtype=dcols.dtype)
        for j in range(KERNEL):
            dxp[:, j:j + L, :] += dcols[..., j]
        return dxp[:, PAD_LEFT:PAD_LEFT + L, :], grads

    def param_count(self, include_buffers: bool = True) -> int:
        arrays = self.arrays() if include_buffers else self.params
        return int(sum(a.size for a in arrays.values()))


class EncoderDecoderNet:
    """Mirrored stack of :class:`ConvBlock`; ``channels`` lists the encoder widths.

    ``channels=(1, 2, 8, 32, 128)`` gives the 8-block default; a reduced
    network such as ``channels=(1, 2)`` has one encoder and one decoder block.
    """

    def __init__(self, L: int = 400, channels=DEFAULT_CHANNELS, seed: int = 0,
                 dtype=np.float32, momentum: float = 0.99, eps: float = 1e-3):
        channels = tuple(int(c) for c in channels)
        if len(channels) < 2:
            raise ValueError("need at least an input and one hidden width")
        depth = len(channels) - 1
        if L <= 0 or L % (2**depth):
            raise ShapeError(f"input length {L} must be divisible by {2**depth}")
        self.L = L
        self.channels = channels
        rng = np.random.default_rng(seed)
        specs = [(channels[i], channels[i + 1], "halve") for i in range(depth)]
        specs += [(channels[i + 1], channels[i], "double") for i in reversed(range(depth))]
        self.blocks = [
            ConvBlock(i, o, r, rng=rng, dtype=dtype, momentum=momentum, eps=eps) for i, o, r in specs
        ]
        self._caches = None

    @property
    def dtype(self):
        return self.blocks[0].dtype

    def astype(self, dtype) -> "EncoderDecoderNet":
        """Copy with every array cast to ``dtype`` (e.g. float64 for gradient checks)."""
        new = copy.deepcopy(self)
        for blk in new.blocks:
            for d in (blk.params, blk.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        new._caches = None
        return new

    def copy(self) -> "EncoderDecoderNet":
        new = copy.deepcopy(self)
        new._caches = None
        return new

    def _as_batch(self, x) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x)
        shape = x.shape
        if x.ndim == 1:
            x = x[None, :, None]
        elif x.ndim == 2:
            x = x[:, :, None]
        elif x.ndim != 3 or x.shape[2] != 1:
            raise ShapeError(f"unsupported input shape {shape}")
        if x.shape[1] != self.L:
            raise ShapeError(f"network expects length {self.L}, got {x.shape[1]}")
        return x.astype(self.dtype, copy=False), shape

    def forward(self, x, mode: str = "infer", return_shapes: bool = False):
        """Run the network on one vector (L,), a batch (B, L) or (B, L, 1).

        The output has the input's shape. ``mode='train'`` normalises with
        batch statistics, updates the running statistics and keeps the caches
        needed by :meth:`backward`.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        h, shape = self._as_batch(x)
        shapes = [h.shape[1:]]
        caches = []
        for blk in self.blocks:
            h, cache = blk.forward(h, training)
            caches.append(cache)
            shapes.append(h.shape[1:])
        self._caches = caches if training else None
        out = h.reshape(shape)
        return (out, shapes) if return_shapes else out

    def backward(self, dout) -> list[dict[str, np.ndarray]]:
        """Parameter gradients given d(loss)/d(output) from the last train-mode forward."""
        if self._caches is None:
            raise RuntimeError("backward needs a preceding forward(mode='train')")
        dh = np.asarray(dout, dtype=self.dtype).reshape(-1, self.L, 1)
        grads: list[dict[str, np.ndarray]] = [None] * len(self.blocks)
        for i in reversed(range(len(self.blocks))):
            dh, grads[i] = self.blocks[i].backward(dh, self._caches[i])
        return grads

    def loss_and_grads(self, x, target) -> tuple[float, list[dict[str, np.ndarray]]]:
        pred = self.forward(x, mode="train")
        target = np.asarray(target, dtype=self.dtype).reshape(pred.shape)
        diff = pred - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self.backward(2.0 * diff / diff.size)
        return loss, grads

    def param_count(self, include_buffers: bool = True) -> int:
        return sum(b.param_count(include_buffers) for b in self.blocks)

    def param_breakdown(self) -> dict[str, int]:
        conv = sum(b.params["weight"].size + b.params["bias"].size for b in self.blocks)
        bn = sum(
            b.params["gamma"].size + b.params["beta"].size + sum(v.size for v in b.buffers.values())
            for b in self.blocks
        )
        trainable = self.param_count(include_buffers=False)
        return {"conv": conv, "batchnorm": bn, "trainable": trainable, "total": conv + bn}

    def state(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in b.arrays().items()} for b in self.blocks]

    def load_state(self, state: list[dict[str, np.ndarray]]):
        for blk, saved in zip(self.blocks, state):
            for k in TRAINABLE:
                blk.params[k][...] = saved[k]
            for k in BUFFERS:
                blk.buffers[k][...] = saved[k]


def param_count(net: EncoderDecoderNet) -> int:
    """Conv weights and biases plus all four batchnorm arrays of every block."""
    return net.param_count(include_buffers=True)


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(net: EncoderDecoderNet, x, target) -> list[dict[str, np.ndarray]]:
    return net.loss_and_grads(x, target)[1]


@dataclass
class AdamState:
    lr: float = 1e-4
    decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[dict[str, np.ndarray]] | None = None
    v: list[dict[str, np.ndarray]] | None = None

    def init_for(self, net: EncoderDecoderNet):
        if self.m is None:
            self.m = [{k: np.zeros_like(b.params[k]) for k in TRAINABLE} for b in net.blocks]
            self.v = [{k: np.zeros_like(b.params[k]) for k in TRAINABLE} for b in net.blocks]

    def effective_lr(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        return self.lr / (1.0 + self.decay * t)


def adam_step(net: EncoderDecoderNet, grads, state: AdamState):
    """One bias-corrected Adam update with inverse-time learning-rate decay, in place."""
    state.init_for(net)
    state.step += 1
    t = state.step
    lr = state.effective_lr(t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for blk, g, m, v in zip(net.blocks, grads, state.m, state.v):
        for k in TRAINABLE:
            gk = g[k].astype(m[k].dtype, copy=False)
            m[k] *= state.beta1
            m[k] += (1 - state.beta1) * gk
            v[k] *= state.beta2
            v[k] += (1 - state.beta2) * (gk * gk)
            update = lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + state.eps)
            blk.params[k] -= update.astype(blk.params[k].dtype, copy=False)
    return net, state


@dataclass
class TrainConfig:
    batch_size: int = 100
    patience: int = 50
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 until the first epoch completes
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def evaluate_loss(net: EncoderDecoderNet, inputs, targets, batch_size: int = 1000) -> float:
    """Infer-mode MSE over a dataset."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    total = 0.0
    for s in range(0, len(inputs), batch_size):
        pred = net.forward(inputs[s:s + batch_size], mode="infer").astype(np.float64)
        total += float(np.sum((pred - targets[s:s + batch_size]) ** 2))
    return total / targets.size


def train(net: EncoderDecoderNet, train_set, val_set, cfg: TrainConfig | None = None,
          state: AdamState | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None):
    """Mini-batch Adam on MSE with patience-based early stopping.

    ``train_set`` and ``val_set`` are ``(inputs, targets)`` pairs of (n, L)
    arrays. Training data is reshuffled every epoch from ``cfg.seed``. On
    return the network holds the weights (and batchnorm statistics) of the
    epoch with the lowest validation loss.
    """
    cfg = cfg or TrainConfig()
    state = state or AdamState()
    x_tr, y_tr = (np.asarray(a) for a in train_set)
    x_va, y_va = (np.asarray(a) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if x_tr.shape != y_tr.shape or x_va.shape != y_va.shape:
        raise ShapeError("inputs and targets must have equal shapes")
    x_tr = x_tr.astype(net.dtype, copy=False)
    y_tr = y_tr.astype(net.dtype, copy=False)

    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_val = np.inf
    best_state = net.state()
    since_best = 0
    n = len(x_tr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = net.loss_and_grads(x_tr[idx], y_tr[idx])
            adam_step(net, grads, state)
            running += loss * len(idx)
        tr_loss = running / n
        va_loss = evaluate_loss(net, x_va, y_va)
        history.train_loss.append(tr_loss)
        history.val_loss.append(va_loss)
        if on_epoch:
            on_epoch(epoch, tr_loss, va_loss)
        logger.debug("epoch %d train %.6g val %.6g", epoch, tr_loss, va_loss)
        if va_loss < best_val:
            best_val = va_loss
            best_state = net.state()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = True
                break
    net.load_state(best_state)
    return net, history


# ---------------------------------------------------------------------------
# checkpoint I/O


def _write_f32(buf, a):
    buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def save_checkpoint(path, net: EncoderDecoderNet, state: AdamState | None = None):
    """Serialise ``net`` (and optionally optimizer state); written atomically."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    b0 = net.blocks[0]
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, net.L, len(net.blocks)))
    buf.write(struct.pack("<ff", b0.momentum, b0.eps))
    for blk in net.blocks:
        buf.write(struct.pack("<IIII", blk.in_ch, blk.out_ch, KERNEL, _RESAMPLE_CODES[blk.resample]))
    for blk in net.blocks:
        for k in TRAINABLE + BUFFERS:
            _write_f32(buf, blk.arrays()[k])
    if state is not None and state.m is not None:
        buf.write(struct.pack("<I", 1))
        buf.write(struct.pack("<Q", state.step))
        buf.write(struct.pack("<5d", state.lr, state.decay, state.beta1, state.beta2, state.eps))
        for m, v in zip(state.m, state.v):
            for k in TRAINABLE:
                _write_f32(buf, m[k])
                _write_f32(buf, v[k])
    else:
        buf.write(struct.pack("<I", 0))
    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(path) -> tuple[EncoderDecoderNet, AdamState | None]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DGCC checkpoint (bad magic)")
    version, L, n_blocks = r.unpack("<III")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    momentum, eps = r.unpack("<ff")
    descs = [r.unpack("<IIII") for _ in range(n_blocks)]
    if n_blocks % 2 or n_blocks == 0:
        raise CheckpointError(f"block count {n_blocks} is not a mirrored encoder-decoder")
    channels = [descs[0][0]] + [d[1] for d in descs[: n_blocks // 2]]
    net = EncoderDecoderNet(L=L, channels=channels, momentum=float(momentum), eps=float(eps))
    for blk, (cin, cout, kernel, code) in zip(net.blocks, descs):
        if (cin, cout, kernel, code) != (blk.in_ch, blk.out_ch, KERNEL, _RESAMPLE_CODES[blk.resample]):
            raise CheckpointError(f"unexpected block descriptor {(cin, cout, kernel, code)}")
    for blk in net.blocks:
        for k in TRAINABLE:
            blk.params[k] = r.floats(blk.params[k].shape)
        for k in BUFFERS:
            blk.buffers[k] = r.floats(blk.buffers[k].shape)
    (has_opt,) = r.unpack("<I")
    state = None
    if has_opt:
        (step,) = r.unpack("<Q")
        lr, decay, b1, b2, eps_adam = r.unpack("<5d")
        state = AdamState(lr=lr, decay=decay, beta1=b1, beta2=b2, eps=eps_adam, step=step, m=[], v=[])
        for blk in net.blocks:
            m, v = {}, {}
            for k in TRAINABLE:
                m[k] = r.floats(blk.params[k].shape)
                v[k] = r.floats(blk.params[k].shape)
            state.m.append(m)
            state.v.append(v)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after checkpoint payload")
    return net, state
