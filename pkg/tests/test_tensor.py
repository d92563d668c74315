import numpy as np
import pytest

from avsep import tensor as T
from avsep.errors import InputError, UpdateRejectedError
from avsep.tensor import engine


def rel_error(a, b, floor=1e-6):
    # the floor keeps exactly-zero gradients (e.g. a conv bias cancelled by a
    # following batch norm) from turning finite-difference noise into a failure
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def finite_diff_check(build, params, h=1e-4, tol=1e-4):
    """Central finite differences against analytic gradients.

    ``build`` must be a pure function of the parameter data returning a
    scalar loss Tensor.
    """
    for p in params.values():
        p.zero_grad()
    loss = build()
    T.backward(loss)
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        err = rel_error(analytic.reshape(-1), numeric)
        assert err < tol, f"{name}: finite-difference mismatch {err:.2e}"


def seeded_params(shapes, seed):
    rng = np.random.default_rng(seed)
    return {k: T.parameter(rng.standard_normal(s)) for k, s in shapes.items()}


class TestForwardHandCases:
    def test_conv2d_hand_case(self):
        x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = T.Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
        out = T.conv2d(x, w, stride=1, pad=0)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 5.0

    def test_unit_1x1_conv_is_identity(self):
        x = T.Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 4)))
        w = T.Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(T.conv2d(x, w).data, x.data)

    def test_relu_kills_negatives(self):
        x = T.Tensor(np.array([-3.0, -0.5, 0.0, 2.0]))
        np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 0.0, 2.0])

    def test_transposed_conv_shape(self):
        x = T.Tensor(np.zeros((1, 3, 8, 8)))
        w = T.Tensor(np.zeros((3, 5, 4, 4)))
        out = T.transposed_conv2d(x, w, stride=2, pad=1)
        assert out.data.shape == (1, 5, 16, 16)

    def test_conv_shape_mismatch_message(self):
        x = T.Tensor(np.zeros((1, 3, 8, 8)))
        w = T.Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(InputError) as exc:
            T.conv2d(x, w)
        assert "(1, 3, 8, 8)" in str(exc.value) and "(4, 2, 3, 3)" in str(exc.value)

    def test_product_rule(self):
        x = T.parameter(np.array([3.0]))
        y = T.parameter(np.array([5.0]))
        T.backward(T.mean(T.multiply(x, y)))
        assert x.grad[0] == 5.0 and y.grad[0] == 3.0

    def test_relu_gradient_zero_at_negative(self):
        x = T.parameter(np.array([-2.0]))
        T.backward(T.mean(T.relu(x)))
        assert x.grad[0] == 0.0

    def test_backward_rejects_non_scalar(self):
        x = T.parameter(np.zeros((2, 2)))
        with pytest.raises(InputError):
            T.backward(T.relu(x))

    def test_repeated_backward_accumulates(self):
        x = T.parameter(np.array([2.0]))
        loss = T.mean(T.multiply(x, x))
        T.backward(loss)
        first = x.grad.copy()
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_dense_chain(self, seed):
        p = seeded_params({"w1": (4, 6), "b1": (6,), "w2": (6, 3)}, seed)
        x = np.random.default_rng(seed + 100).standard_normal((5, 4))

        def build():
            h = T.relu(T.add(T.matmul(T.Tensor(x), p["w1"]), p["b1"]))
            return T.mean(T.tanh(T.matmul(h, p["w2"])))

        finite_diff_check(build, p)

    @pytest.mark.parametrize("seed", range(3))
    def test_conv2d_stride2(self, seed):
        p = seeded_params({"w": (3, 2, 4, 4), "b": (3,)}, seed)
        x = np.random.default_rng(seed + 7).standard_normal((2, 2, 8, 8))

        def build():
            return T.mean(T.sigmoid(T.conv2d(T.Tensor(x), p["w"], p["b"], stride=2, pad=1)))

        finite_diff_check(build, p)

    def test_conv2d_input_gradient(self):
        x = T.parameter(np.random.default_rng(0).standard_normal((1, 2, 6, 6)))
        w = T.parameter(np.random.default_rng(1).standard_normal((2, 2, 3, 3)))

        def build():
            return T.mean(T.conv2d(x, w, stride=1, pad=1))

        finite_diff_check(build, {"x": x, "w": w})

    @pytest.mark.parametrize("seed", range(3))
    def test_transposed_conv2d(self, seed):
        p = seeded_params({"w": (3, 2, 4, 4), "b": (2,)}, seed)
        x = np.random.default_rng(seed + 3).standard_normal((2, 3, 4, 4))

        def build():
            return T.mean(T.leaky_relu(
                T.transposed_conv2d(T.Tensor(x), p["w"], p["b"], stride=2, pad=1)))

        finite_diff_check(build, p)

    def test_batch_norm_gradient(self):
        p = seeded_params({"gamma": (3,), "beta": (3,)}, 0)
        x = T.parameter(np.random.default_rng(5).standard_normal((4, 3, 5, 5)))
        p["x"] = x

        def build():
            return T.mean(T.tanh(T.batch_norm(x, p["gamma"], p["beta"], training=True)))

        finite_diff_check(build, p)

    def test_softmax_and_logprob_gradients(self):
        logits = T.parameter(np.random.default_rng(2).standard_normal((6, 4)))
        actions = np.random.default_rng(3).integers(0, 4, size=6)
        weights = np.random.default_rng(4).standard_normal(6)

        def build():
            lp = T.categorical_log_prob(logits, actions)
            return T.mean(T.multiply(lp, T.Tensor(weights)))

        finite_diff_check(build, {"logits": logits})

        def build_entropy():
            probs = T.softmax(logits)
            logp = T.log_softmax(logits)
            return T.mean(T.multiply(probs, logp))

        finite_diff_check(build_entropy, {"logits": logits})

    def test_concat_narrow_l1(self):
        p = seeded_params({"a": (3, 4), "b": (2, 4)}, 11)
        target = np.random.default_rng(12).standard_normal((5, 2))

        def build():
            joined = T.concat([p["a"], p["b"]], axis=0)
            part = T.narrow(joined, 1, 1, 2)
            return T.l1_loss(part, T.Tensor(target))

        finite_diff_check(build, p)

    @pytest.mark.parametrize("seed", range(3))
    def test_gru_cell_gradient(self, seed):
        rng = np.random.default_rng(seed)
        cell = T.GRUCell(4, 5, rng)
        x = np.random.default_rng(seed + 50).standard_normal((2, 4))
        h = np.random.default_rng(seed + 60).standard_normal((2, 5))
        params = cell.named_parameters()

        def build():
            return T.mean(cell(T.Tensor(x), T.Tensor(h)))

        finite_diff_check(build, params)


class TestGruSemantics:
    def test_zero_params_halve_state(self):
        rng = np.random.default_rng(0)
        cell = T.GRUCell(3, 4, rng)
        for p in cell.named_parameters().values():
            p.data[...] = 0.0
        h = np.random.default_rng(1).standard_normal((2, 4))
        out = cell(T.Tensor(np.zeros((2, 3))), T.Tensor(h))
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-12)

    def test_all_zero_gives_zero(self):
        cell = T.GRUCell(3, 4, np.random.default_rng(0))
        for p in cell.named_parameters().values():
            p.data[...] = 0.0
        out = cell(T.Tensor(np.zeros((1, 3))), T.Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_batch_mismatch_rejected(self):
        cell = T.GRUCell(3, 4, np.random.default_rng(0))
        with pytest.raises(InputError):
            cell(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 4))))


class TestBatchNormStats:
    def test_training_mode_normalizes(self):
        bn = T.BatchNorm(8)
        x = T.Tensor(np.random.default_rng(3).standard_normal((16, 8, 6, 6)) * 2.5 + 1.0)
        out = bn(x, training=True).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-6)
        assert np.all(np.abs(var - 1.0) < 1e-4)

    def test_eval_mode_uses_running_stats(self):
        bn = T.BatchNorm(4)
        rng = np.random.default_rng(9)
        for _ in range(50):
            bn(T.Tensor(rng.standard_normal((32, 4)) * 3.0 + 2.0), training=True)
        x = T.Tensor(rng.standard_normal((512, 4)) * 3.0 + 2.0)
        out = bn(x, training=False).data
        assert np.all(np.abs(out.mean(axis=0)) < 0.5)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = T.parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        state = T.AdamState(lr=1e-3)
        T.adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_gradient_skipped(self):
        p = T.parameter(np.array([1.0]))
        T.adam_step({"p": p}, T.AdamState())
        assert p.data[0] == 1.0

    def test_hand_case_first_step(self):
        p = T.parameter(np.array([0.0]))
        p.grad = np.array([1.0])
        state = T.AdamState(lr=1e-3)
        T.adam_step({"p": p}, state)
        assert abs(p.data[0] + 1e-3) < 1e-9
        assert state.step == 1

    def test_constant_gradient_monotone_drift(self):
        p = T.parameter(np.array([0.0]))
        state = T.AdamState(lr=1e-2)
        history = []
        for _ in range(10):
            p.grad = np.array([0.5])
            T.adam_step({"p": p}, state)
            history.append(p.data[0])
        assert all(b < a for a, b in zip(history, history[1:]))

    def test_non_finite_gradient_rejected_with_name(self):
        p = T.parameter(np.array([0.0]))
        p.grad = np.array([np.nan])
        with pytest.raises(UpdateRejectedError) as exc:
            T.adam_step({"layer.weight": p}, T.AdamState())
        assert exc.value.param_name == "layer.weight"


class TestDeterminismAndCheckpoints:
    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            net = T.Dense(8, 8, rng)
            x = T.Tensor(np.random.default_rng(1).standard_normal((3, 8)))
            return T.relu(net(x)).data

        np.testing.assert_array_equal(run(), run())

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        net = T.Conv2d(2, 3, 3, rng, stride=1, pad=1)
        arrays = net.state_arrays()
        path = tmp_path / "net.ckpt"
        T.save_checkpoint(path, arrays)
        loaded = T.load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_allclose(loaded[k], arrays[k].astype(np.float32), atol=0)

    def test_module_load_state(self, tmp_path):
        rng = np.random.default_rng(0)
        a = T.GRUCell(4, 4, rng)
        b = T.GRUCell(4, 4, np.random.default_rng(99))
        path = tmp_path / "cell.ckpt"
        T.save_checkpoint(path, a.state_arrays())
        b.load_state(T.load_checkpoint(path))
        for k, v in a.named_parameters().items():
            np.testing.assert_allclose(
                b.named_parameters()[k].data, v.data.astype(np.float32), atol=0
            )
