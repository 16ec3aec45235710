import math

import numpy as np
import pytest

from oracles import central_difference, max_relative_error
from voxelnet import classifier as mlp
from voxelnet.classifier import FitConfig, MlpParams
from voxelnet.exceptions import DimensionError, FormatError, ParameterError


def random_net(rng, d, h, c, out_scale=0.5):
    return MlpParams(rng.uniform(-1, 1, (h, d)), rng.normal(0, 0.1, h),
                     rng.normal(0, out_scale, (c, h)), rng.normal(0, 0.1, c))


class TestInit:
    def test_output_layer_zero(self):
        for seed in range(5):
            net = mlp.init_network(10, 7, 3, seed)
            assert not net.W2.any() and not net.b2.any() and not net.b1.any()

    def test_deterministic(self):
        assert mlp.init_network(6, 4, 2, 9).W1.tobytes() == mlp.init_network(6, 4, 2, 9).W1.tobytes()

    def test_bound(self):
        W1 = mlp.init_network(300, 800, 3, 1).W1
        assert np.abs(W1).max() <= math.sqrt(6 / 1100)

    @pytest.mark.parametrize("args", [(0, 4, 3), (4, 0, 3), (4, 4, 4), (4, 4, 1)])
    def test_bad_dims(self, args):
        with pytest.raises(ParameterError):
            mlp.init_network(*args, seed=0)


class TestForward:
    def test_uniform_at_init(self):
        p = mlp.forward(mlp.init_network(5, 4, 3, 0), np.arange(5.0))
        np.testing.assert_array_equal(p, np.full(3, 1 / 3))

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, 5, 4, 3)
        x = rng.normal(size=5)
        shifted = net._replace(b2=net.b2 + 123.0)
        np.testing.assert_allclose(mlp.forward(shifted, x), mlp.forward(net, x), rtol=1e-12)

    def test_extended_precision(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 40
        rng = np.random.default_rng(1)
        net = random_net(rng, 6, 5, 3, out_scale=3.0)
        x = rng.normal(size=6)
        a = [1 / (1 + mpmath.exp(-(mpmath.fsum(mpmath.mpf(net.W1[j, i]) * x[i] for i in range(6))
                                    + net.b1[j]))) for j in range(5)]
        z = [mpmath.fsum(mpmath.mpf(net.W2[k, j]) * a[j] for j in range(5)) + net.b2[k]
             for k in range(3)]
        total = mpmath.fsum(mpmath.exp(v) for v in z)
        ref = [float(mpmath.exp(v) / total) for v in z]
        np.testing.assert_allclose(mlp.forward(net, x), ref, rtol=1e-13)

    def test_simplex(self):
        rng = np.random.default_rng(2)
        net = random_net(rng, 4, 6, 3, out_scale=50.0)
        P = mlp.forward(net, rng.normal(size=(100, 4)))
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            mlp.forward(mlp.init_network(5, 4, 3, 0), np.zeros(4))


class TestCrossEntropy:
    def test_uniform_is_log3(self):
        net = mlp.init_network(4, 3, 3, 0)
        X = np.random.default_rng(3).normal(size=(7, 4))
        assert mlp.cross_entropy(net, X, [0, 1, 2, 0, 1, 2, 2]) == pytest.approx(math.log(3), rel=1e-14)

    def test_confident_and_right(self):
        net = MlpParams(np.zeros((1, 2)), np.zeros(1), np.zeros((2, 1)), np.array([800.0, -800.0]))
        assert mlp.cross_entropy(net, np.zeros((3, 2)), [0, 0, 0]) == pytest.approx(0.0, abs=1e-300)
        # and never infinite when confidently wrong
        assert mlp.cross_entropy(net, np.zeros((1, 2)), [1]) == pytest.approx(1600.0)

    def test_direct_sum(self):
        rng = np.random.default_rng(4)
        net = random_net(rng, 5, 4, 3)
        X = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, 6)
        P = mlp.forward(net, X)
        expected = -sum(math.log(P[i, y[i]]) for i in range(6)) / 6
        assert mlp.cross_entropy(net, X, y) == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            mlp.cross_entropy(mlp.init_network(4, 3, 2, 0), np.zeros((1, 4)), [2])


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, 6, 4, 3)
        X = rng.normal(size=(5, 6))
        y = rng.integers(0, 3, 5)
        numeric = central_difference(lambda: mlp.cross_entropy(net, X, y), list(net))
        assert max_relative_error(mlp.gradient(net, X, y), numeric) < 1e-6

    def test_output_bias_identity(self):
        net = mlp.init_network(4, 5, 3, 2)
        X = np.random.default_rng(6).normal(size=(8, 4))
        y = np.array([0, 0, 1, 2, 2, 2, 1, 0])
        onehot = np.eye(3)[y].mean(axis=0)
        np.testing.assert_allclose(mlp.gradient(net, X, y).b2, 1 / 3 - onehot, atol=1e-15)

    def test_duplicated_batch(self):
        rng = np.random.default_rng(7)
        net = random_net(rng, 4, 3, 2)
        X = rng.normal(size=(5, 4))
        y = rng.integers(0, 2, 5)
        once = mlp.gradient(net, X, y)
        twice = mlp.gradient(net, np.vstack([X, X]), np.concatenate([y, y]))
        for a, b in zip(once, twice):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-16)


class TestMomentum:
    def test_mu_zero_is_plain_sgd(self):
        rng = np.random.default_rng(8)
        net = random_net(rng, 3, 2, 2)
        g = random_net(rng, 3, 2, 2)
        new, _ = mlp.sgd_momentum_step(net, g, mlp.zero_velocity(net), 0.1, 0.0)
        for p, gp, q in zip(net, g, new):
            np.testing.assert_array_equal(q, p - 0.1 * gp)

    def test_geometric_velocity(self):
        net = MlpParams(np.zeros((1, 1)), np.zeros(1), np.zeros((2, 1)), np.zeros(2))
        g = MlpParams(np.ones((1, 1)), np.ones(1), np.ones((2, 1)), np.ones(2))
        v = mlp.zero_velocity(net)
        lr, mu = 0.1, 0.5
        theta = 0.0
        for k in range(1, 8):
            net, v = mlp.sgd_momentum_step(net, g, v, lr, mu)
            closed = -lr * (1 - mu**k) / (1 - mu)
            theta += closed
            assert v.W1[0, 0] == pytest.approx(closed, rel=1e-14)
            assert net.W1[0, 0] == pytest.approx(theta, rel=1e-14)

    def test_zero_gradient_no_motion(self):
        net = random_net(np.random.default_rng(9), 3, 2, 3)
        z = mlp.zero_velocity(net)
        new, v = mlp.sgd_momentum_step(net, z, z, 0.5, 0.9)
        for a, b in zip(net, new):
            np.testing.assert_array_equal(a, b)


def blobs(seed, n=90, d=6, classes=3):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=3, size=(classes, d))
    y = np.arange(n) % classes
    return centres[y] + rng.normal(size=(n, d)), y


class TestEarlyStopping:
    def test_injected_sequence(self):
        X, y = blobs(0)
        errs = iter([0.5, 0.3, 0.4])
        best, history = mlp.train_with_early_stopping(
            mlp.init_network(6, 5, 3, 0), (X, y), (X, y), FitConfig(max_epochs=3, seed=1),
            val_error=lambda net, epoch: next(errs), keep_snapshots=True)
        assert history["best_epoch"] == 2
        snap = history["snapshots"][2]
        assert all(a.tobytes() == b.tobytes() for a, b in zip(best, snap))

    def test_ties_keep_earliest(self):
        X, y = blobs(1)
        errs = iter([0.4, 0.2, 0.2, 0.3])
        _, history = mlp.train_with_early_stopping(
            mlp.init_network(6, 5, 3, 0), (X, y), (X, y), FitConfig(max_epochs=4),
            val_error=lambda net, epoch: next(errs))
        assert history["best_epoch"] == 2

    def test_zero_epochs(self):
        X, y = blobs(2)
        start = mlp.init_network(6, 5, 3, 4)
        best, history = mlp.train_with_early_stopping(start, (X, y), (X, y),
                                                      FitConfig(max_epochs=0))
        assert history == {"records": [], "best_epoch": 0}
        assert all(a.tobytes() == b.tobytes() for a, b in zip(best, start))

    def test_replay_matches_argmin(self):
        X, y = blobs(3)
        Xv, yv = blobs(4)
        best, history = mlp.train_with_early_stopping(
            mlp.init_network(6, 8, 3, 0), (X, y), (Xv, yv),
            FitConfig(learning_rate=0.05, max_epochs=15, eval_every=2), keep_snapshots=True)
        errs = [r["val_error"] for r in history["records"]]
        assert [r["epoch"] for r in history["records"]] == list(range(2, 16, 2))
        assert history["best_epoch"] == history["records"][int(np.argmin(errs))]["epoch"]
        assert mlp.misclassification(best, Xv, yv) == min(errs)
        snap = history["snapshots"][history["best_epoch"]]
        assert all(a.tobytes() == b.tobytes() for a, b in zip(best, snap))

    def test_deterministic(self):
        X, y = blobs(5)
        runs = [mlp.train_with_early_stopping(mlp.init_network(6, 8, 3, 3), (X, y), (X, y),
                                              FitConfig(max_epochs=5, seed=11))[0]
                for _ in range(2)]
        assert mlp.dump_params(runs[0]) == mlp.dump_params(runs[1])

    def test_full_batch_descent(self):
        X, y = blobs(6, n=30)
        net = mlp.init_network(6, 8, 3, 0)
        v = mlp.zero_velocity(net)
        costs = [mlp.cross_entropy(net, X, y)]
        for _ in range(10):
            net, v = mlp.sgd_momentum_step(net, mlp.gradient(net, X, y), v, 1e-3, 0.0)
            costs.append(mlp.cross_entropy(net, X, y))
        assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_bad_config(self):
        X, y = blobs(7)
        with pytest.raises(ParameterError):
            mlp.train_with_early_stopping(mlp.init_network(6, 4, 3, 0), (X, y), (X, y),
                                          FitConfig(mu=1.0))


class TestEvaluate:
    def test_perfect(self):
        net = MlpParams(np.zeros((1, 1)), np.zeros(1), np.zeros((2, 1)), np.zeros(2))
        # W2 routes the sign of x to the right class through a steep hidden unit
        net = net._replace(W1=np.array([[100.0]]), W2=np.array([[-50.0], [50.0]]))
        X = np.array([[-1.0], [2.0], [-3.0]])
        m = mlp.evaluate(net, X, [0, 1, 0])
        assert m["accuracy"] == 1.0
        assert m["confusion_matrix"] == [[2, 0], [0, 1]]

    def test_ties_go_to_lowest_class(self):
        m = mlp.evaluate(mlp.init_network(2, 2, 3, 0), np.zeros((3, 2)), [0, 1, 2])
        assert m["confusion_matrix"] == [[1, 0, 0], [1, 0, 0], [1, 0, 0]]

    def test_format(self):
        assert mlp.format_accuracy(0.8947368421) == "89.47%"
        assert mlp.format_accuracy(0.9539473684) == "95.39%"
        assert mlp.format_accuracy(1.0) == "100.00%"

    def test_chance_level(self):
        rng = np.random.default_rng(10)
        net = random_net(rng, 5, 6, 3)
        m = mlp.evaluate(net, rng.normal(size=(30_000, 5)), rng.integers(0, 3, 30_000))
        assert abs(m["accuracy"] - 1 / 3) < 0.05
        assert m["accuracy"] == np.trace(m["confusion_matrix"]) / 30_000


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = random_net(np.random.default_rng(11), 7, 5, 3)
        path = tmp_path / "c.vxmc"
        mlp.save_params(net, path)
        loaded = mlp.load_params(path)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(net, loaded))
        assert mlp.dump_params(loaded) == path.read_bytes()

    def test_truncated(self):
        raw = mlp.dump_params(mlp.init_network(3, 2, 2, 0))
        with pytest.raises(FormatError):
            mlp.parse_params(raw[:-8])
        with pytest.raises(FormatError):
            mlp.parse_params(b"VXAE" + raw[4:])

    def test_metrics_json(self):
        import json
        report = json.loads(mlp.metrics_json("3way", {"accuracy": 0.5,
                                                      "confusion_matrix": [[1, 1], [0, 0]]},
                                             {"best_epoch": 1, "records": []}))
        assert set(report) == {"task", "accuracy", "confusion_matrix", "history"}
