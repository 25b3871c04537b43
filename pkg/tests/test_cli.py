import json

import numpy as np
import pytest
import yaml

from deepgcc.cli import main
from deepgcc.io import read_results, read_wav
from deepgcc.srp import read_power_map

SMALL = {
    "fs": 16000,
    "frame_ms": 64,
    "lags": 64,
    "duration_s": 0.3,
    "seed": 11,
    "array": {"circle": {"center": [1.5, 1.5, 0.8], "radius": 0.1}},
    "grid": {"min": [0.5, 0.5, 0.8], "max": [2.5, 2.5, 1.8], "resolution": 0.5},
    "room": {"dims": [3, 3, 2.5], "absorption": 1.0, "max_order": 0},
    "source": {"position": [2.0, 1.1, 1.3]},
    "train": {"max_epochs": 3, "batch_size": 16},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def files(d):
    return sorted(p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file())


def simulate(config, out):
    assert main(["simulate", "--config", str(config), "--out", str(out), "--name", "s1"]) == 0
    return out / "s1.wav", out / "s1_gt.csv"


class TestSimulate:
    def test_outputs_and_determinism(self, config, tmp_path):
        wav, gt = simulate(config, tmp_path / "a")
        simulate(config, tmp_path / "b")
        for name in ("s1.wav", "s1_gt.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        audio, fs = read_wav(wav)
        assert fs == 16000 and audio.shape == (8, round(0.3 * 16000))
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["sequences"][0]["samples"] == 4800

    def test_seed_override_changes_audio(self, config, tmp_path):
        simulate(config, tmp_path / "a")
        assert main(["simulate", "--config", str(config), "--seed", "12", "--out", str(tmp_path / "b"),
                     "--name", "s1"]) == 0
        assert (tmp_path / "a" / "s1.wav").read_bytes() != (tmp_path / "b" / "s1.wav").read_bytes()

    def test_zero_duration_fails_without_output(self, tmp_path):
        cfg = dict(SMALL, duration_s=0)
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == 2
        assert not (tmp_path / "out").exists()

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 3


class TestPipeline:
    def _data(self, config, tmp_path):
        wav, gt = simulate(config, tmp_path / "sim")
        assert main(["gcc", "--config", str(config), "--audio", str(wav), "--ground-truth", str(gt),
                     "--out", str(tmp_path / "rec.npz")]) == 0
        assert main(["gcc", "--config", str(config), "--random-sources", "3",
                     "--out", str(tmp_path / "rand.npz")]) == 0
        manifest = tmp_path / "data.json"
        manifest.write_text(json.dumps({"train": ["rand.npz"], "val": ["rec.npz"]}))
        return wav, gt, manifest

    def test_gcc_shapes(self, config, tmp_path):
        self._data(config, tmp_path)
        with np.load(tmp_path / "rand.npz") as z:
            assert z["inputs"].shape == z["targets"].shape == (3, 64)
        with np.load(tmp_path / "rec.npz") as z:
            assert z["inputs"].shape[0] % 28 == 0 and z["inputs"].shape[1] == 64

    def test_train_localize_eval(self, config, tmp_path, capsys):
        wav, gt, manifest = self._data(config, tmp_path)
        assert main(["train", "--config", str(config), "--data", str(manifest), "--out", str(tmp_path / "m")]) == 0
        history = (tmp_path / "m" / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,best" and len(history) == 4
        ckpt = tmp_path / "m" / "model.dgcc"

        common = ["--config", str(config), "--audio", str(wav), "--ground-truth", str(gt)]
        assert main(["localize", *common, "--out", str(tmp_path / "g"), "--dump-apm"]) == 0
        assert main(["localize", *common, "--engine", "deepgcc", "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "d")]) == 0
        rows = read_results(tmp_path / "g" / "results.csv")
        assert len(rows) > 0
        assert np.mean([r.error_m for r in rows]) <= 0.15
        maps = files(tmp_path / "g" / "apm")
        assert maps == [f"frame_{i:05d}.txt" for i in range(len(maps))]
        assert read_power_map(tmp_path / "g" / "apm" / maps[0]).values.size == 5 * 5 * 3
        assert files(tmp_path / "g") == ["apm/" + m for m in maps] + ["results.csv"]

        capsys.readouterr()
        assert main(["eval", "--baseline", f"s1={tmp_path / 'g' / 'results.csv'}",
                     "--method", f"s1={tmp_path / 'd' / 'results.csv'}", "--out", str(tmp_path / "e")]) == 0
        assert "s1" in capsys.readouterr().out
        summary = json.loads((tmp_path / "e" / "summary.json").read_text())
        assert summary["rows"][0]["frames"] == len(rows)

        assert main(["inspect-model", "--checkpoint", str(ckpt)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["input_length"] == 64 and info["optimizer_step"] is not None

    def test_grid_res_override(self, config, tmp_path):
        wav, gt = simulate(config, tmp_path / "sim")
        assert main(["localize", "--config", str(config), "--audio", str(wav), "--ground-truth", str(gt),
                     "--grid-res", "1.0", "--dump-apm", "--out", str(tmp_path / "g")]) == 0
        first = sorted((tmp_path / "g" / "apm").iterdir())[0]
        assert read_power_map(first).values.size == 3 * 3 * 2


class TestErrors:
    def test_deepgcc_without_checkpoint(self, config, tmp_path):
        wav, gt = simulate(config, tmp_path / "sim")
        for extra in ([], ["--checkpoint", str(tmp_path / "missing.dgcc")]):
            out = tmp_path / "out"
            assert main(["localize", "--config", str(config), "--engine", "deepgcc", *extra,
                         "--audio", str(wav), "--ground-truth", str(gt), "--out", str(out)]) == 2
            assert not out.exists()

    def test_lag_mismatch(self, config, tmp_path):
        from deepgcc.net import EncoderDecoderNet, save_checkpoint

        wav, gt = simulate(config, tmp_path / "sim")
        save_checkpoint(tmp_path / "m.dgcc", EncoderDecoderNet(L=128, channels=(1, 2)))
        assert main(["localize", "--config", str(config), "--engine", "deepgcc",
                     "--checkpoint", str(tmp_path / "m.dgcc"), "--audio", str(wav),
                     "--ground-truth", str(gt), "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_wav(self, config, tmp_path):
        wav, gt = simulate(config, tmp_path / "sim")
        wav.write_bytes(wav.read_bytes()[:100])
        assert main(["localize", "--config", str(config), "--audio", str(wav), "--ground-truth", str(gt),
                     "--out", str(tmp_path / "o")]) == 2

    def test_eval_mismatch(self, tmp_path):
        assert main(["eval", "--baseline", "a.csv", "b.csv", "--method", "c.csv"]) == 2
