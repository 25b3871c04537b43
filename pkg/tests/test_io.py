import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from deepgcc.geometry import Point3
from deepgcc.io import (
    ExperimentConfig,
    FrameResult,
    GroundTruthTrack,
    UnsupportedFormatError,
    ValidationError,
    WavParseError,
    config_from_dict,
    config_to_dict,
    load_config,
    partition,
    read_ground_truth,
    read_results,
    read_wav,
    write_ground_truth,
    write_results,
    write_wav,
)


def noise(channels=3, n=500, seed=0):
    return np.random.default_rng(seed).uniform(-0.9, 0.9, (channels, n))


class TestWav:
    @pytest.mark.parametrize("subtype,tol", [("pcm16", 1 / 32768), ("pcm24", 1 / 2**23), ("float32", 1e-7)])
    def test_round_trip(self, tmp_path, subtype, tol):
        x = noise()
        write_wav(tmp_path / "a.wav", x, 96000, subtype)
        y, fs = read_wav(tmp_path / "a.wav")
        assert fs == 96000 and y.shape == x.shape
        assert np.max(np.abs(y - x)) <= tol

    def test_eight_channel_float_is_exact(self, tmp_path):
        x = noise(8).astype(np.float32).astype(np.float64)
        write_wav(tmp_path / "a.wav", x, 48000)
        assert read_wav(tmp_path / "a.wav")[0].tobytes() == x.tobytes()

    def test_scipy_reads_ours(self, tmp_path):
        x = noise(2)
        write_wav(tmp_path / "a.wav", x, 16000, "pcm16")
        fs, data = wavfile.read(tmp_path / "a.wav")
        assert fs == 16000
        np.testing.assert_array_equal(data.T, np.round(x * 32768).astype(np.int16))

    @pytest.mark.parametrize("dtype,scale", [(np.int16, 32768), (np.int32, 2**31), (np.float32, 1), (np.float64, 1)])
    def test_we_read_scipy(self, tmp_path, dtype, scale):
        x = noise(4)
        data = (x.T * scale).astype(dtype) if scale != 1 else x.T.astype(dtype)
        wavfile.write(tmp_path / "a.wav", 44100, data)
        y, fs = read_wav(tmp_path / "a.wav")
        assert fs == 44100
        np.testing.assert_allclose(y, data.T.astype(np.float64) / scale, atol=0)

    def test_clipping(self, tmp_path):
        write_wav(tmp_path / "a.wav", np.array([[2.0, -2.0, 0.5]]), 8000, "pcm16")
        y, _ = read_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(y[0], [32767 / 32768, -1.0, 0.5])

    def test_truncated(self, tmp_path):
        write_wav(tmp_path / "a.wav", noise(), 96000, "pcm16")
        data = (tmp_path / "a.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(data[:-10])
        with pytest.raises(WavParseError) as info:
            read_wav(tmp_path / "t.wav")
        assert info.value.offset > 0
        (tmp_path / "h.wav").write_bytes(data[:8])
        with pytest.raises(WavParseError):
            read_wav(tmp_path / "h.wav")
        (tmp_path / "m.wav").write_bytes(b"RIFX" + data[4:])
        with pytest.raises(WavParseError) as info:
            read_wav(tmp_path / "m.wav")
        assert info.value.offset == 0

    def test_unsupported(self, tmp_path):
        wavfile.write(tmp_path / "u8.wav", 8000, np.array([1, 2, 3], dtype=np.uint8))
        with pytest.raises(UnsupportedFormatError):
            read_wav(tmp_path / "u8.wav")

    def test_bad_subtype(self, tmp_path):
        with pytest.raises(ValueError):
            write_wav(tmp_path / "a.wav", noise(), 8000, "pcm8")


class TestGroundTruth:
    track = GroundTruthTrack([0.0, 1.0, 2.0], [(0, 0, 0), (1, 2, 3), (1, 2, 5)])

    def test_linear_query(self):
        p, clamped = self.track.query(0.5)
        assert p == Point3(0.5, 1.0, 1.5) and not clamped
        assert self.track.query(1.5)[0] == Point3(1, 2, 4)
        assert self.track.query(1.0)[0] == Point3(1, 2, 3)

    def test_hold(self):
        track = GroundTruthTrack(self.track.times, self.track.positions, "hold")
        assert track.query(1.9)[0] == Point3(1, 2, 3)

    def test_clamped(self):
        assert self.track.query(-1.0) == (Point3(0, 0, 0), True)
        assert self.track.query(3.0) == (Point3(1, 2, 5), True)
        assert self.track.query(2.0) == (Point3(1, 2, 5), False)

    def test_round_trip(self, tmp_path):
        write_ground_truth(tmp_path / "gt.csv", self.track)
        back = read_ground_truth(tmp_path / "gt.csv")
        assert back.times.tobytes() == self.track.times.tobytes()
        assert back.positions.tobytes() == self.track.positions.tobytes()

    def test_bad_files(self, tmp_path):
        (tmp_path / "a.csv").write_text("t,x,y,z\n0,0,0,0\n")
        with pytest.raises(ValidationError, match="header"):
            read_ground_truth(tmp_path / "a.csv")
        (tmp_path / "b.csv").write_text("time_s,x_m,y_m,z_m\n0,0,0\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_ground_truth(tmp_path / "b.csv")
        (tmp_path / "c.csv").write_text("time_s,x_m,y_m,z_m\n1,0,0,0\n0,0,0,0\n")
        with pytest.raises(ValidationError, match="nondecreasing"):
            read_ground_truth(tmp_path / "c.csv")

    @given(st.floats(0, 2))
    def test_query_inside_segment_hull(self, t):
        p = self.track.query(t)[0].as_array()
        assert np.all(p >= -1e-12) and np.all(p <= np.array([1, 2, 5]) + 1e-12)


class TestResults:
    def test_round_trip(self, tmp_path):
        rows = [FrameResult(i, 0.083 * i, Point3(i, 0.1, 0.2), Point3(0, 0, 0.3), 0.1 * i) for i in range(4)]
        write_results(tmp_path / "r.csv", rows)
        assert read_results(tmp_path / "r.csv") == rows


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.frame_spec().frame_length == 15936
        assert cfg.array.n_mics == 8 and cfg.lags == 400

    def test_yaml_round_trip(self, tmp_path):
        cfg = config_from_dict({
            "fs": 48000, "lags": 256, "seed": 7,
            "array": {"circle": {"center": [1, 1, 1], "radius": 0.05, "n_mics": 4}},
            "grid": {"min": [0, 0, 1], "max": [2, 2, 2], "resolution": 0.2},
            "room": {"dims": [3, 3, 3], "rt60": 0.3, "max_order": 4},
            "source": {"position": [1, 2, 1], "excitation": "speech", "snr_db": 20},
            "train": {"max_epochs": 5},
        })
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(config_to_dict(cfg)))
        back = load_config(path)
        assert config_to_dict(back) == config_to_dict(cfg)
        assert back.max_epochs == 5 and back.source.snr_db == 20.0

    @pytest.mark.parametrize("bad", [
        {"lags": 100},
        {"lags": 32},
        {"engine": "music"},
        {"duration_s": 0},
        {"grid": {"min": [0, 0, 0], "max": [-1, 1, 1]}},
        {"array": {"positions": [[0, 0, 0]]}},
        {"unknown_key": 1},
        {"train": {"patience": 0}},
    ])
    def test_fail_fast(self, bad):
        with pytest.raises(ValidationError):
            config_from_dict(bad)

    def test_non_mapping(self, tmp_path):
        (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ValidationError):
            load_config(tmp_path / "c.yaml")


class TestPartition:
    names = [f"seq{i:02d}" for i in range(10)]

    def test_fractions(self):
        out = partition(self.names, {"train": 0.8, "val": 0.1, "test": 0.1}, seed=1)
        assert [len(out[k]) for k in ("train", "val", "test")] == [8, 1, 1]
        assert sorted(sum(out.values(), [])) == self.names
        assert out == partition(self.names, {"train": 0.8, "val": 0.1, "test": 0.1}, seed=1)

    def test_largest_remainder(self):
        out = partition(self.names[:7], {"a": 0.5, "b": 0.5})
        assert sorted(len(v) for v in out.values()) == [3, 4]

    def test_explicit_with_rest(self):
        out = partition(self.names, {"test": ["seq03", "seq07"], "val": ["seq00"], "train": "rest"})
        assert out["test"] == ["seq03", "seq07"] and out["val"] == ["seq00"]
        assert len(out["train"]) == 7 and "seq03" not in out["train"]
        assert list(out) == ["test", "val", "train"]

    def test_errors(self):
        with pytest.raises(ValidationError, match="both"):
            partition(self.names, {"a": ["seq01"], "b": ["seq01"]})
        with pytest.raises(ValidationError, match="unknown"):
            partition(self.names, {"a": ["nope"]})
        with pytest.raises(ValidationError, match="sum to 1"):
            partition(self.names, {"a": 0.5, "b": 0.2})
        with pytest.raises(ValidationError, match="only one"):
            partition(self.names, {"a": "rest", "b": "rest"})

    @given(st.integers(1, 40), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_fraction_split_is_a_partition(self, n, seed):
        names = [str(i) for i in range(n)]
        out = partition(names, {"a": 0.7, "b": 0.2, "c": 0.1}, seed=seed)
        flat = sum(out.values(), [])
        assert sorted(flat) == sorted(names)
