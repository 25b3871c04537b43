import numpy as np
import pytest

from deepgcc import net as netmod
from deepgcc.net import (
    AdamState,
    CheckpointError,
    ConvBlock,
    EncoderDecoderNet,
    ShapeError,
    TrainConfig,
    adam_step,
    load_checkpoint,
    loss_mse,
    param_count,
    save_checkpoint,
    train,
)

from oracles import finite_difference_check, naive_conv_same


def toy_set(n, L=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, L))
    y = np.zeros((n, L))
    y[np.arange(n), rng.integers(0, L, n)] = 1.0
    return x, y


class TestArchitecture:
    def test_default_param_count(self):
        net = EncoderDecoderNet()
        assert param_count(net) == 36025
        parts = net.param_breakdown()
        assert parts["conv"] == 35173
        assert parts["batchnorm"] == 852
        assert parts["trainable"] == 35599

    def test_single_block_count(self):
        assert ConvBlock(1, 2, "halve").param_count() == 18

    def test_shape_chain(self):
        net = EncoderDecoderNet()
        y, shapes = net.forward(np.zeros(400), return_shapes=True)
        assert y.shape == (400,)
        assert shapes == [(400, 1), (200, 2), (100, 8), (50, 32), (25, 128),
                          (50, 32), (100, 8), (200, 2), (400, 1)]

    def test_batch_shapes(self):
        net = EncoderDecoderNet()
        assert net.forward(np.zeros((3, 400))).shape == (3, 400)
        assert net.forward(np.zeros((3, 400, 1))).shape == (3, 400, 1)

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            EncoderDecoderNet().forward(np.zeros(398))
        with pytest.raises(ShapeError):
            EncoderDecoderNet(L=20, channels=(1, 2, 2, 2))

    def test_output_nonnegative(self):
        x = np.random.default_rng(0).standard_normal((5, 400))
        assert np.all(EncoderDecoderNet().forward(x) >= 0)


class TestConvBlock:
    def test_matches_naive_loops(self):
        rng = np.random.default_rng(0)
        blk = ConvBlock(3, 2, "halve", rng=rng, dtype=np.float64)
        blk.buffers["running_mean"][:] = [0.1, -0.2]
        blk.buffers["running_var"][:] = [2.0, 0.5]
        blk.params["gamma"][:] = [1.5, 0.7]
        blk.params["beta"][:] = [0.1, 0.3]
        x = rng.standard_normal((2, 8, 3))
        y, _ = blk.forward(x, training=False)
        z = naive_conv_same(x, blk.params["weight"], blk.params["bias"])
        pooled = np.maximum(z[:, 0::2], z[:, 1::2])
        ref = (pooled - blk.buffers["running_mean"]) / np.sqrt(blk.buffers["running_var"] + 1e-3)
        ref = np.maximum(blk.params["gamma"] * ref + blk.params["beta"], 0)
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_upsample_repeats(self):
        rng = np.random.default_rng(1)
        blk = ConvBlock(2, 1, "double", rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 5, 2))
        y, _ = blk.forward(x, training=False)
        z = naive_conv_same(x, blk.params["weight"], blk.params["bias"])
        ref = np.maximum(np.repeat(z, 2, axis=1) / np.sqrt(1 + 1e-3), 0)
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_running_stats_update(self):
        rng = np.random.default_rng(2)
        blk = ConvBlock(1, 2, "halve", rng=rng, dtype=np.float64)
        x = rng.standard_normal((4, 8, 1))
        blk.forward(x, training=True)
        z = naive_conv_same(x, blk.params["weight"], blk.params["bias"])
        pooled = np.maximum(z[:, 0::2], z[:, 1::2])
        np.testing.assert_allclose(blk.buffers["running_mean"], 0.01 * pooled.mean(axis=(0, 1)))
        np.testing.assert_allclose(blk.buffers["running_var"], 0.99 + 0.01 * pooled.var(axis=(0, 1)))

    def test_rejects_bad_resample(self):
        with pytest.raises(ValueError):
            ConvBlock(1, 2, "triple")


class TestGradients:
    @pytest.mark.parametrize("channels", [(1, 2), (1, 2, 3)])
    def test_finite_differences(self, channels):
        rng = np.random.default_rng(7)
        for draw in range(3):
            net = EncoderDecoderNet(L=16, channels=channels, seed=draw, dtype=np.float64)
            x = rng.standard_normal((4, 16))
            y = rng.uniform(0, 1, (4, 16))
            assert finite_difference_check(net, x, y) <= 1e-3

    def test_backward_needs_train_forward(self):
        net = EncoderDecoderNet(L=16, channels=(1, 2))
        net.forward(np.zeros(16))
        with pytest.raises(RuntimeError):
            net.backward(np.zeros(16))

    def test_loss_mse(self):
        assert loss_mse([1, 2], [0, 0]) == pytest.approx(2.5)
        with pytest.raises(ShapeError):
            loss_mse([1, 2], [0])


class TestAdam:
    def _net_and_grads(self, value):
        net = EncoderDecoderNet(L=16, channels=(1, 2), dtype=np.float64)
        grads = [{k: np.full_like(b.params[k], value) for k in netmod.TRAINABLE} for b in net.blocks]
        return net, grads

    def test_two_hand_steps(self):
        net, g_pos = self._net_and_grads(1.0)
        _, g_neg = self._net_and_grads(-1.0)
        w0 = net.blocks[0].params["weight"].copy()
        state = AdamState()
        adam_step(net, g_pos, state)
        lr1 = 1e-4 / (1 + 1e-8 * 1)
        step1 = lr1 * (0.1 / 0.1) / (np.sqrt(0.001 / 0.001) + 1e-8)
        np.testing.assert_allclose(net.blocks[0].params["weight"], w0 - step1, rtol=0, atol=1e-15)
        adam_step(net, g_neg, state)
        # m = 0.9*0.1 - 0.1 = -0.01, v = 0.999*0.001 + 0.001 = 0.001999
        lr2 = 1e-4 / (1 + 1e-8 * 2)
        m_hat = -0.01 / (1 - 0.9**2)
        v_hat = 0.001999 / (1 - 0.999**2)
        step2 = lr2 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(net.blocks[0].params["weight"], w0 - step1 - step2, rtol=0, atol=1e-15)
        assert step2 == pytest.approx(-5.2631578e-6, rel=1e-6)
        assert state.step == 2

    def test_effective_lr(self):
        assert AdamState(lr=1e-4, decay=1e-8).effective_lr(10**8) == pytest.approx(5e-5)


class TestTrain:
    def test_loss_decreases(self):
        x, y = toy_set(100)
        net = EncoderDecoderNet(L=16, channels=(1, 4, 8), seed=0)
        _, h = train(net, (x, y), (x[:20], y[:20]), TrainConfig(batch_size=20, max_epochs=40),
                     AdamState(lr=1e-2))
        assert h.train_loss[-1] < 0.5 * h.train_loss[0]

    def test_deterministic(self):
        x, y = toy_set(60)
        runs = []
        for _ in range(2):
            net = EncoderDecoderNet(L=16, channels=(1, 2), seed=3)
            _, h = train(net, (x, y), (x, y), TrainConfig(batch_size=16, max_epochs=5, seed=9))
            runs.append((h.train_loss, h.val_loss, net.state()))
        assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][2], runs[1][2]):
            for k in a:
                assert a[k].tobytes() == b[k].tobytes()

    def test_early_stopping_restores_best(self, monkeypatch):
        scripted = iter([5.0, 4.0, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0])
        monkeypatch.setattr(netmod, "evaluate_loss", lambda *a, **k: next(scripted))
        x, y = toy_set(40)
        net = EncoderDecoderNet(L=16, channels=(1, 2), seed=0)
        snapshots = []
        _, h = train(net, (x, y), (x, y), TrainConfig(batch_size=10, patience=3, max_epochs=9),
                     AdamState(lr=1e-2), on_epoch=lambda e, tr, va: snapshots.append(net.state()))
        assert h.epochs == 6 and h.stopped_early and h.best_epoch == 3
        for blk, saved in zip(net.blocks, snapshots[2]):
            for k, v in blk.arrays().items():
                assert v.tobytes() == saved[k].tobytes()

    def test_patience_one(self, monkeypatch):
        scripted = iter([2.0, 3.0, 1.0])
        monkeypatch.setattr(netmod, "evaluate_loss", lambda *a, **k: next(scripted))
        x, y = toy_set(20)
        _, h = train(EncoderDecoderNet(L=16, channels=(1, 2)), (x, y), (x, y),
                     TrainConfig(batch_size=10, patience=1, max_epochs=3))
        assert h.epochs == 2 and h.best_epoch == 1

    def test_invalid(self):
        x, y = toy_set(4)
        with pytest.raises(ValueError):
            train(EncoderDecoderNet(L=16, channels=(1, 2)), (x[:0], y[:0]), (x, y))
        with pytest.raises(ValueError):
            TrainConfig(patience=0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        x, y = toy_set(30, L=400)
        net = EncoderDecoderNet(seed=4)
        state = AdamState()
        _, grads = net.loss_and_grads(x, y)
        adam_step(net, grads, state)
        path = tmp_path / "m.dgcc"
        save_checkpoint(path, net, state)
        loaded, st = load_checkpoint(path)
        assert loaded.forward(x).tobytes() == net.forward(x).tobytes()
        assert st.step == 1 and st.lr == state.lr
        for a, b in zip(st.m, state.m):
            for k in a:
                assert a[k].tobytes() == b[k].tobytes()

    def test_without_optimizer(self, tmp_path):
        net = EncoderDecoderNet(L=16, channels=(1, 2))
        save_checkpoint(tmp_path / "m.dgcc", net)
        loaded, st = load_checkpoint(tmp_path / "m.dgcc")
        assert st is None and loaded.channels == (1, 2)

    def test_corrupt(self, tmp_path):
        net = EncoderDecoderNet(L=16, channels=(1, 2))
        save_checkpoint(tmp_path / "m.dgcc", net)
        data = (tmp_path / "m.dgcc").read_bytes()
        (tmp_path / "bad.dgcc").write_bytes(b"XXXX" + data[4:])
        (tmp_path / "short.dgcc").write_bytes(data[:-7])
        (tmp_path / "long.dgcc").write_bytes(data + b"\0")
        for name in ("bad", "short", "long"):
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / f"{name}.dgcc")
