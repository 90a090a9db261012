import numpy as np
import pytest

from bipprune.data import Dataset
from bipprune.models import (CheckpointFormatError, accuracy, build_network, forward, grad_z,
                             init_params, loss_and_grad, predict, read_checkpoint,
                             write_checkpoint)
from bipprune.oracles import gradient_check
from bipprune.tensor import NumericError, ShapeError, Tape


class TestArchitectures:
    def test_mlp_tiny_size(self):
        assert build_network("mlp-tiny").n == 2 * 8 + 8 + 8 * 2 + 2

    def test_mlp_small_size(self):
        net = build_network("mlp-small", 8, 4)
        assert net.n == 8 * 32 + 32 + 32 * 32 + 32 + 32 * 4 + 4

    def test_cnn_tiny_size(self):
        net = build_network("cnn-tiny", num_classes=10)
        assert net.n == (8 * 9 + 8) + (8 * 8 * 9 + 8) + (512 * 10 + 10)

    def test_layout_is_contiguous(self):
        net = build_network("cnn-tiny")
        off = 0
        for s in net.layout:
            assert s.offset == off
            off = s.stop
        assert off == net.n

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            build_network("resnet18")


class TestForward:
    def test_zero_params_give_uniform_loss(self):
        net = build_network("mlp-small", 8, 4)
        batch = Dataset(np.ones((5, 8)), np.arange(5) % 4, 4)
        loss, _ = loss_and_grad(net, np.zeros(net.n), batch)
        assert np.isclose(loss, np.log(4))

    def test_wrong_length_z(self):
        net = build_network("mlp-tiny")
        with pytest.raises(ShapeError):
            forward(net, np.zeros(net.n + 1), np.zeros((1, 2)), Tape())

    def test_cnn_gradient_matches_fd(self, rng):
        net = build_network("cnn-tiny", num_classes=3)
        batch = Dataset(rng.uniform(size=(2, 1, 8, 8)), np.array([0, 2]), 3)
        z = init_params(net, 0) * 0.5
        # relu kinks are measure-zero for random inputs
        assert gradient_check(net, z, batch) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_mlp_tiny_gradient(self, seed, rng):
        net = build_network("mlp-tiny")
        batch = Dataset(rng.standard_normal((8, 2)), rng.integers(0, 2, 8), 2)
        assert gradient_check(net, init_params(net, seed), batch) < 1e-5

    def test_numeric_error_names_layer(self):
        net = build_network("mlp-tiny")
        z = np.full(net.n, 1e200)
        batch = Dataset(np.full((1, 2), 1e200), np.array([0]), 2)
        with pytest.raises(NumericError) as exc:
            with np.errstate(all="ignore"):
                loss_and_grad(net, z, batch)
        assert exc.value.layer is not None

    def test_predict_ties_go_to_lowest_class(self):
        net = build_network("mlp-small", 2, 3)
        assert np.all(predict(net, np.zeros(net.n), np.ones((4, 2))) == 0)

    def test_accuracy_of_perfect_linear_net(self):
        net = build_network("mlp-tiny")
        z = np.zeros(net.n)
        w1 = net.slot(0, "weight")
        z[w1.offset] = 5.0    # hidden unit 0 follows x0
        w2 = net.slot(2, "weight")
        z[w2.offset + 1] = 1.0    # class 1 logit = tanh(5 x0)
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert accuracy(net, z, Dataset(x, np.array([1, 0]), 2)) == 1.0


class TestInit:
    def test_seeds_differ(self):
        net = build_network("mlp-small", 8, 4)
        a, b = init_params(net, 0), init_params(net, 1)
        assert np.mean(a != b) >= 0.99

    def test_seed_is_reproducible(self):
        net = build_network("mlp-small", 8, 4)
        np.testing.assert_array_equal(init_params(net, 3), init_params(net, 3))

    def test_weight_scale(self):
        net = build_network("mlp-small", 8, 4)
        theta = init_params(net, 0)
        s = net.slot(2, "weight")
        assert abs(theta[s.offset:s.stop].std() - np.sqrt(2 / 32)) < 0.03


class TestCheckpoint:
    def test_roundtrip_float32(self, tmp_path):
        net = build_network("cnn-tiny")
        theta = init_params(net, 0)
        mask = (np.arange(net.n) % 3 == 0).astype(np.int8)
        write_checkpoint(tmp_path / "a.ckpt", net, theta, mask)
        shapes, params, m = read_checkpoint(tmp_path / "a.ckpt")
        assert shapes == [s.shape for s in net.layout]
        np.testing.assert_array_equal(params, theta.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(m, mask)

    def test_without_mask(self, tmp_path):
        net = build_network("mlp-tiny")
        write_checkpoint(tmp_path / "a.ckpt", net, np.zeros(net.n))
        assert read_checkpoint(tmp_path / "a.ckpt")[2] is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 8)
        with pytest.raises(CheckpointFormatError, match="byte 0"):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        net = build_network("mlp-tiny")
        write_checkpoint(tmp_path / "a.ckpt", net, np.zeros(net.n))
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(data[:-5])
        with pytest.raises(CheckpointFormatError, match="byte"):
            read_checkpoint(tmp_path / "b.ckpt")
