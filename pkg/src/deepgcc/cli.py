"""Command-line front end.

Every subcommand reads one YAML configuration (``--config``); flags given on
the command line override the file. Logs go to stderr, data to files.

Exit status: 0 success, 2 validation/configuration error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io as _io
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import dsp, evaluation, net as netmod, sim, srp
from .geometry import Grid3D, Point3, pair_tdoas
from .io import (
    ExperimentConfig,
    ValidationError,
    WavParseError,
    UnsupportedFormatError,
    atomic_write_bytes,
    atomic_write_text,
    load_config,
    read_ground_truth,
    read_results,
    read_wav,
    write_ground_truth,
    write_results,
    write_wav,
)

logger = logging.getLogger("deepgcc")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "engine", None) is not None:
        overrides["engine"] = args.engine
    if getattr(args, "grid_res", None) is not None:
        overrides["grid_resolution"] = args.grid_res
    if getattr(args, "max_epochs", None) is not None:
        overrides["max_epochs"] = args.max_epochs
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _prepare_out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out}")
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _room(cfg: ExperimentConfig) -> sim.RoomSpec:
    r = cfg.room
    if r.rt60 is not None:
        return sim.RoomSpec.from_rt60(r.dims, r.rt60, r.max_order, cfg.c)
    return sim.RoomSpec(r.dims, r.absorption if r.absorption is not None else 1.0, r.max_order)


def _script(cfg: ExperimentConfig) -> sim.SourceScript:
    s = cfg.source
    times = [t for t, _ in s.trajectory]
    pos = [p for _, p in s.trajectory]
    wav = None
    if s.excitation == "wav":
        if not s.wav:
            raise ValidationError("excitation 'wav' needs source.wav")
        audio, fs = read_wav(_require_file(s.wav, "source WAV"))
        wav = audio[0] if fs == cfg.fs else dsp.resample(audio[0], fs, cfg.fs)
    return sim.SourceScript(times, pos, s.excitation, s.snr_db, wav)


def _npz_bytes(**arrays) -> bytes:
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _prepare_out_dir(args.out)
    room = _room(cfg)
    script = _script(cfg)
    result = sim.synthesize(room, cfg.array, script, cfg.duration_s, cfg.fs, seed=cfg.seed,
                            c=cfg.c, frame_spec=cfg.frame_spec())
    if not np.all(np.isfinite(result.audio)):
        raise NumericFailure("simulation produced non-finite samples")
    name = args.name
    wav_path = out / f"{name}.wav"
    gt_path = out / f"{name}_gt.csv"
    write_wav(wav_path, result.audio, int(cfg.fs), subtype="float32")
    write_ground_truth(gt_path, result.ground_truth)
    manifest = {
        "sequences": [{
            "name": name,
            "audio": wav_path.name,
            "ground_truth": gt_path.name,
            "fs": int(cfg.fs),
            "channels": int(result.audio.shape[0]),
            "samples": int(result.audio.shape[1]),
            "seed": cfg.seed,
            "sha256": {"audio": _sha256(wav_path), "ground_truth": _sha256(gt_path)},
        }]
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s (%d channels x %d samples)", wav_path, *result.audio.shape)
    return EXIT_OK


def _gcc_from_recording(cfg: ExperimentConfig, audio_path, gt_path):
    audio, fs = read_wav(_require_file(audio_path, "audio"))
    if fs != cfg.fs:
        logger.info("resampling %s from %d Hz to %g Hz", audio_path, fs, cfg.fs)
        audio = dsp.resample(audio, fs, cfg.fs)
    if audio.shape[0] != cfg.array.n_mics:
        raise ValidationError(f"audio has {audio.shape[0]} channels, array has {cfg.array.n_mics}")
    track = read_ground_truth(_require_file(gt_path, "ground truth"))
    spec = cfg.frame_spec()
    pairs = cfg.array.pairs()
    frames = dsp.extract_frames(audio, spec)
    xs, ys, skipped = [], [], 0
    for i, block in enumerate(frames):
        q, clamped = track.query(spec.frame_center(i, cfg.fs))
        if clamped:
            skipped += 1
            continue
        d = pair_tdoas(q.as_array(), cfg.array, cfg.c, pairs)[:, 0]
        xs.append(dsp.gcc_phat_pairs(block, pairs, cfg.lags))
        ys.append(dsp.gaussian_targets(d, cfg.fs, cfg.lags, cfg.sigma))
    if skipped:
        logger.warning("skipped %d frames without ground truth", skipped)
    if not xs:
        raise ValidationError("no labelled frames in recording")
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.float32)


def cmd_gcc(args) -> int:
    cfg = _load(args)
    out_path = Path(args.out)
    _prepare_out_dir(out_path.parent if str(out_path.parent) else ".")
    if args.random_sources:
        ts = sim.make_dataset(_room(cfg), cfg.array, args.random_sources, seed=cfg.seed,
                              consts=cfg.constants, L=cfg.lags, sigma=cfg.sigma,
                              frame_spec=cfg.frame_spec(), excitation_kind=cfg.source.excitation,
                              snr_db=cfg.source.snr_db)
        x, y = ts.inputs, ts.targets
    else:
        if not (args.audio and args.ground_truth):
            raise ValidationError("gcc needs --audio and --ground-truth, or --random-sources N")
        x, y = _gcc_from_recording(cfg, args.audio, args.ground_truth)
    atomic_write_bytes(out_path, _npz_bytes(inputs=x, targets=y, fs=np.float64(cfg.fs),
                                            lags=np.int64(cfg.lags)))
    logger.info("wrote %d examples to %s", len(x), out_path)
    return EXIT_OK


def _load_split(paths, base: Path, L: int):
    xs, ys = [], []
    for p in paths:
        path = _require_file(base / p, "dataset")
        with np.load(path) as z:
            if int(z["lags"]) != L or z["inputs"].shape[1] != L:
                raise srp.ConfigurationError(f"{path} has {int(z['lags'])} lags, architecture uses {L}")
            xs.append(z["inputs"])
            ys.append(z["targets"])
    if not xs:
        raise ValidationError("empty dataset split")
    return np.concatenate(xs), np.concatenate(ys)


def cmd_train(args) -> int:
    cfg = _load(args)
    manifest_path = _require_file(args.data, "data manifest")
    manifest = json.loads(manifest_path.read_text())
    if "train" not in manifest or "val" not in manifest:
        raise ValidationError("data manifest needs 'train' and 'val' lists")
    out = _prepare_out_dir(args.out)
    if args.checkpoint:
        model, state = netmod.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        if model.L != cfg.lags:
            raise srp.ConfigurationError(f"checkpoint has L={model.L}, configuration L={cfg.lags}")
    else:
        model, state = netmod.EncoderDecoderNet(L=cfg.lags, seed=cfg.seed), None
    state = state or netmod.AdamState(lr=cfg.learning_rate, decay=cfg.lr_decay)
    train_set = _load_split(manifest["train"], manifest_path.parent, model.L)
    val_set = _load_split(manifest["val"], manifest_path.parent, model.L)
    tcfg = netmod.TrainConfig(batch_size=cfg.batch_size, patience=cfg.patience,
                              max_epochs=cfg.max_epochs, seed=cfg.seed)
    model, history = netmod.train(
        model, train_set, val_set, tcfg, state,
        on_epoch=lambda e, tr, va: logger.info("epoch %d train %.6g val %.6g", e, tr, va),
    )
    if not np.all(np.isfinite(history.train_loss)):
        raise NumericFailure("training diverged (non-finite loss)")
    lines = ["epoch,train_loss,val_loss,best"]
    for i, (tr, va) in enumerate(zip(history.train_loss, history.val_loss), start=1):
        lines.append(f"{i},{tr!r},{va!r},{int(i == history.best_epoch)}")
    netmod.save_checkpoint(out / "model.dgcc", model, state)
    atomic_write_text(out / "history.csv", "\n".join(lines) + "\n")
    logger.info("best epoch %d of %d (val %.6g)", history.best_epoch, history.epochs,
                history.val_loss[history.best_epoch - 1])
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _load(args)
    engine = cfg.engine
    model = None
    if engine == "deepgcc":
        if not args.checkpoint or not Path(args.checkpoint).is_file():
            raise srp.ConfigurationError(f"engine deepgcc needs an existing --checkpoint, got {args.checkpoint}")
        model, _ = netmod.load_checkpoint(args.checkpoint)
    audio_path = _require_file(args.audio, "audio")
    gt_path = _require_file(args.ground_truth, "ground truth")
    out = _prepare_out_dir(args.out)

    audio, fs = read_wav(audio_path)
    if fs != cfg.fs:
        audio = dsp.resample(audio, fs, cfg.fs)
    track = read_ground_truth(gt_path)
    grid = cfg.grid
    res = srp.localize_sequence(audio, cfg.array, grid, cfg.constants, engine=engine, model=model,
                                frame_spec=cfg.frame_spec(), L=cfg.lags, mode=cfg.interpolation,
                                keep_maps=args.dump_apm)
    rows = []
    skipped = 0
    for i, (pos, t) in enumerate(zip(res.positions, res.frame_times)):
        gt, clamped = track.query(t)
        if clamped:
            skipped += 1
            continue
        rows.append(evaluation.FrameResult(i, t, pos, gt, evaluation.frame_error(pos, gt)))
    if skipped:
        logger.warning("skipped %d frames without ground truth", skipped)
    if not all(np.isfinite(r.error_m) for r in rows):
        raise NumericFailure("non-finite localization error")

    staging = Path(tempfile.mkdtemp(dir=out, prefix=".staging-"))
    try:
        if args.dump_apm:
            (staging / "apm").mkdir()
            for i, pmap in enumerate(res.maps):
                srp.write_power_map(staging / "apm" / f"frame_{i:05d}.txt", pmap)
        write_results(staging / "results.csv", rows)
        if args.dump_apm:
            if (out / "apm").exists():
                shutil.rmtree(out / "apm")
            os.replace(staging / "apm", out / "apm")
        os.replace(staging / "results.csv", out / "results.csv")
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    mean = float(np.mean([r.error_m for r in rows])) if rows else float("nan")
    logger.info("%s: %d frames, mean error %.3f m", engine, len(rows), mean)
    return EXIT_OK


def _named(spec: str) -> tuple[str, Path]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, Path(path)
    p = Path(spec)
    return (p.parent.name if p.name == "results.csv" else p.stem), p


def cmd_eval(args) -> int:
    if len(args.baseline) != len(args.method):
        raise ValidationError("give one --method result per --baseline result")
    res_a, res_b = {}, {}
    for spec_a, spec_b in zip(args.baseline, args.method):
        name_a, path_a = _named(spec_a)
        name_b, path_b = _named(spec_b)
        if name_a != name_b:
            raise ValidationError(f"sequence names differ: {name_a!r} vs {name_b!r}")
        res_a[name_a] = evaluation.SequenceResult.from_rows(read_results(_require_file(path_a, "results")), "gcc-phat")
        res_b[name_b] = evaluation.SequenceResult.from_rows(read_results(_require_file(path_b, "results")), "deepgcc")
    rows = evaluation.compare(res_a, res_b)
    text = evaluation.format_table(rows)
    print(text)
    if args.out:
        out = _prepare_out_dir(args.out)
        atomic_write_text(out / "summary.txt", text + "\n")
        atomic_write_text(out / "summary.json", evaluation.table_json(rows) + "\n")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, state = netmod.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    _, shapes = model.forward(np.zeros(model.L), return_shapes=True)
    info = {
        "input_length": model.L,
        "channels": list(model.channels),
        "blocks": [
            {"in_channels": b.in_ch, "out_channels": b.out_ch, "resample": b.resample,
             "input_shape": list(shapes[i]), "output_shape": list(shapes[i + 1])}
            for i, b in enumerate(model.blocks)
        ],
        "parameters": model.param_breakdown(),
        "optimizer_step": None if state is None else state.step,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepgcc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, engine=False):
        p.add_argument("--config", metavar="PATH", help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if engine:
            p.add_argument("--engine", choices=srp.ENGINES, help="lag-function engine")
            p.add_argument("--checkpoint", metavar="PATH", help="DeepGCC checkpoint")

    p = sub.add_parser("simulate", help="render a labelled multichannel recording")
    common(p)
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--name", default="sim", help="sequence name (file stem)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gcc", help="build (GCC-PHAT, target) training pairs")
    common(p)
    p.add_argument("--audio", metavar="WAV")
    p.add_argument("--ground-truth", metavar="CSV")
    p.add_argument("--random-sources", type=int, metavar="N",
                   help="simulate N examples from random sources in the configured room instead")
    p.add_argument("--out", metavar="NPZ", required=True)
    p.set_defaults(func=cmd_gcc)

    p = sub.add_parser("train", help="train DeepGCC")
    common(p)
    p.add_argument("--data", metavar="JSON", required=True, help="manifest with train/val npz lists")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--out", metavar="DIR", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="per-frame source positions from a recording")
    common(p, engine=True)
    p.add_argument("--audio", metavar="WAV", required=True)
    p.add_argument("--ground-truth", metavar="CSV", required=True)
    p.add_argument("--grid-res", type=float, metavar="METERS")
    p.add_argument("--dump-apm", action="store_true", help="write one power map per frame")
    p.add_argument("--out", metavar="DIR", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="compare two engines' results files")
    p.add_argument("--baseline", nargs="+", required=True, metavar="[NAME=]CSV")
    p.add_argument("--method", nargs="+", required=True, metavar="[NAME=]CSV")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-model", help="print checkpoint architecture and parameter counts")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValidationError, srp.ConfigurationError, netmod.CheckpointError, netmod.ShapeError,
            WavParseError, UnsupportedFormatError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except (NumericFailure, FloatingPointError) as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
