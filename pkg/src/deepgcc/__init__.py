"""Acoustic source localization with GCC-PHAT, a denoising encoder-decoder
network and steered-response-power maps."""

from .dsp import FrameSpec, GccFrame, extract_frames, gaussian_target, gcc_phat, gcc_phat_pairs, resample
from .evaluation import SequenceResult, compare, frame_error, relative_improvement
from .geometry import (
    Grid3D,
    MicArray,
    PhysicalConstants,
    Point3,
    enumerate_pairs,
    grid_points,
    max_lag_samples,
    tdoa,
)
from .net import (
    AdamState,
    EncoderDecoderNet,
    TrainConfig,
    adam_step,
    load_checkpoint,
    loss_mse,
    param_count,
    save_checkpoint,
    train,
)
from .srp import DelayTable, LagFunctionSet, PowerMap, build_apm, localize, localize_sequence, sample_lag

__version__ = "0.1.0"
