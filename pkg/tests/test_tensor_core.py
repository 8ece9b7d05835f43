import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monotts import tensor_core as tc
from monotts.errors import ContractError, DimensionError, InputError, NumericError


def _grad(fn, *params):
    tape = tc.GradTape()
    with tape:
        loss = fn()
    return tape.gradient(loss, params)


class TestMatmul:
    def test_identity(self):
        v = tc.constant([[1.0], [2.0], [3.0]])
        out = tc.matmul(tc.constant(np.eye(3)), v)
        np.testing.assert_array_equal(out.data, v.data)

    def test_hand_arithmetic(self):
        out = tc.constant([[1, 2], [3, 4]]) @ tc.constant([[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_vector_rhs(self):
        out = tc.matmul(tc.constant(np.eye(3)), tc.constant([4.0, 5.0, 6.0]))
        np.testing.assert_array_equal(out.data, [4, 5, 6])

    def test_shape_error_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(tc.constant(np.zeros((2, 3))), tc.constant(np.zeros((2, 3))))

    def test_sum_gradient_matches_ones_times_bt(self):
        rng = np.random.default_rng(0)
        with tc.precision("float64"):
            a = tc.parameter(rng.normal(size=(5, 4)))
            b = tc.parameter(rng.normal(size=(4, 3)))
            ga, gb = _grad(lambda: tc.sum(a @ b), a, b)
            np.testing.assert_allclose(ga, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
            fd = tc.numerical_gradient(lambda: tc.sum(a @ b), a)
            assert tc.relative_error(ga, fd) < 1e-4


class TestSoftplus:
    def test_zero(self):
        assert tc.softplus(tc.constant([0.0])).item() == pytest.approx(0.693147, abs=1e-6)

    def test_large_no_overflow(self):
        out = tc.softplus(tc.constant(np.array([100.0], dtype=np.float32)))
        assert out.dtype == np.float32
        assert out.item() == 100.0

    @pytest.mark.parametrize("x", [-100.0, -1e4, -3.4e38])
    def test_negative_strictly_positive(self, x):
        out = tc.softplus(tc.constant(np.array([x], dtype=np.float32)))
        assert 0.0 < out.item() < 1e-40

    @settings(max_examples=200, deadline=None)
    @given(st.floats(allow_nan=False, allow_infinity=False, width=32))
    def test_positive_everywhere(self, x):
        assert tc.softplus(tc.constant(np.array([x], dtype=np.float32))).item() > 0


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax(tc.constant([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_stable_large_logit(self):
        out = tc.softmax(tc.constant([1000.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1, 0, 0], atol=1e-7)

    def test_random_sums_to_one(self):
        x = np.random.default_rng(3).normal(size=7)
        assert abs(tc.softmax(tc.constant(x)).data.sum() - 1.0) < 1e-6

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(4).normal(scale=30, size=(6, 9))
        np.testing.assert_allclose(tc.softmax(tc.constant(x), axis=1).data.sum(axis=1), 1.0, atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            tc.softmax(tc.constant(np.zeros((2, 2))), axis=2)


class TestBackward:
    def test_sum(self):
        w = tc.parameter(np.arange(6.0).reshape(2, 3))
        (g,) = _grad(lambda: tc.sum(w), w)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_l1_subgradient(self):
        w = tc.parameter([1.0, 2.0, 3.0, 4.0])
        target = tc.constant([0.0, 2.0, 5.0, 4.0])
        (g,) = _grad(lambda: tc.l1_loss(w, target), w)
        np.testing.assert_array_equal(g, np.array([1, 0, -1, 0]) / 4)

    def test_non_scalar_loss_rejected(self):
        w = tc.parameter([1.0, 2.0])
        tape = tc.GradTape()
        with tape:
            y = w * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_tape_not_reusable(self):
        tape = tc.GradTape()
        with tape:
            pass
        with pytest.raises(ContractError):
            with tape:
                pass

    def test_shared_value_accumulates(self):
        w = tc.parameter([3.0])
        (g,) = _grad(lambda: tc.sum(w * w + w), w)
        assert g[0] == pytest.approx(7.0)

    def test_unreached_param_gets_zero(self):
        w = tc.parameter([1.0, 2.0])
        u = tc.parameter([5.0])
        gw, gu = _grad(lambda: tc.sum(w), w, u)
        np.testing.assert_array_equal(gu, [0.0])

    def test_nonfinite_surfaced(self):
        with pytest.raises(NumericError):
            tc.exp(tc.constant(np.array([1000.0], dtype=np.float32)))

    def test_deterministic_replay(self):
        def run():
            rng = np.random.default_rng(11)
            a = tc.parameter(rng.normal(size=(4, 4)))
            x = tc.constant(rng.normal(size=(3, 4)))
            return tc.tanh(tc.linear(x, a)).data

        assert run().tobytes() == run().tobytes()


class TestBroadcastRules:
    def test_bias_row(self):
        out = tc.add(tc.constant(np.zeros((2, 3))), tc.constant([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]] * 2)

    def test_scalar(self):
        np.testing.assert_array_equal((tc.constant([1.0, 2.0]) * 3.0).data, [3, 6])

    def test_general_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            tc.add(tc.constant(np.zeros((2, 1))), tc.constant(np.zeros((1, 3))))

    def test_embedding_out_of_range(self):
        with pytest.raises(InputError):
            tc.embedding(tc.constant(np.zeros((4, 2))), [0, 4])


def _unary_cases():
    return {
        "exp": lambda x: tc.exp(x),
        "tanh": lambda x: tc.tanh(x),
        "sigmoid": lambda x: tc.sigmoid(x),
        "softplus": lambda x: tc.softplus(x),
        "softmax": lambda x: tc.softmax(x, axis=-1),
        "square": lambda x: tc.square(x),
        "neg": lambda x: -x,
        "slice": lambda x: x[1:, ::2],
        "reshape": lambda x: tc.reshape(x, (-1,)),
        "abs": lambda x: tc.abs(x),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_gradients_over_seeds(name):
    op = _unary_cases()[name]
    worst = 0.0
    with tc.precision("float64"):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = tc.parameter(rng.normal(size=(3, 4)))
            w = tc.constant(rng.normal(size=op(x).shape))
            fn = lambda: tc.sum(op(x) * w)  # noqa: E731
            worst = max(worst, tc.check_gradients(fn, [x])["param0"])
    assert worst < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "concat", "stack", "l1", "bias_row"])
def test_binary_gradients_over_seeds(name):
    worst = 0.0
    with tc.precision("float64"):
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            a = tc.parameter(rng.normal(size=(3, 4)))
            b = tc.parameter(rng.normal(size=(4,) if name == "bias_row" else (3, 4)))
            m = tc.parameter(rng.normal(size=(4, 5)))
            fns = {
                "add": lambda: tc.sum(tc.tanh(a + b)),
                "sub": lambda: tc.sum(tc.tanh(a - b)),
                "mul": lambda: tc.sum(a * b),
                "matmul": lambda: tc.sum(tc.tanh(a @ m)),
                "linear": lambda: tc.sum(tc.tanh(tc.linear(a, b, tc.slice(m, (0, slice(0, 3)))))),
                "concat": lambda: tc.sum(tc.tanh(tc.concat([a, b], axis=0)) * 1.5),
                "stack": lambda: tc.sum(tc.tanh(tc.stack([a, b], axis=1)) * 0.5),
                "l1": lambda: tc.l1_loss(a, b),
                "bias_row": lambda: tc.sum(tc.tanh(a + b)),
            }
            errs = tc.check_gradients(fns[name], [a, b])
            worst = max(worst, *errs.values())
    assert worst < 1e-4


def test_embedding_gradient():
    with tc.precision("float64"):
        rng = np.random.default_rng(5)
        table = tc.parameter(rng.normal(size=(6, 3)))
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        w = tc.constant(rng.normal(size=(2, 3, 3)))
        errs = tc.check_gradients(lambda: tc.sum(tc.embedding(table, ids) * w), [table])
    assert errs["param0"] < 1e-4


class TestLSTM:
    def _params(self, rng, I=3, H=4):
        W = tc.parameter(rng.normal(scale=0.5, size=(4 * H, I + H)))
        b = tc.parameter(rng.normal(scale=0.5, size=4 * H))
        return W, b

    def test_cell_gradients(self):
        with tc.precision("float64"):
            for seed in range(10):
                rng = np.random.default_rng(seed)
                W, b = self._params(rng)
                x = tc.parameter(rng.normal(size=(2, 3)))
                h = tc.parameter(rng.normal(size=(2, 4)))
                c = tc.parameter(rng.normal(size=(2, 4)))
                wh = tc.constant(rng.normal(size=(2, 4)))
                wc = tc.constant(rng.normal(size=(2, 4)))

                def fn():
                    h2, c2 = tc.lstm_cell(x, h, c, W, b)
                    return tc.sum(h2 * wh) + tc.sum(c2 * wc)

                errs = tc.check_gradients(fn, [x, h, c, W, b])
                assert max(errs.values()) < 1e-4, errs

    @pytest.mark.parametrize("reverse", [False, True])
    def test_sequence_matches_cell_loop(self, reverse):
        with tc.precision("float64"):
            rng = np.random.default_rng(7)
            W, b = self._params(rng)
            xs = tc.constant(rng.normal(size=(2, 5, 3)))
            seq = tc.lstm_sequence(xs, W, b, reverse=reverse).data
            h = tc.constant(np.zeros((2, 4)))
            c = tc.constant(np.zeros((2, 4)))
            order = range(4, -1, -1) if reverse else range(5)
            for t in order:
                h, c = tc.lstm_cell(xs[:, t], h, c, W, b)
                np.testing.assert_allclose(seq[:, t], h.data, atol=1e-12)

    def test_sequence_gradients(self):
        with tc.precision("float64"):
            rng = np.random.default_rng(8)
            W, b = self._params(rng)
            xs = tc.parameter(rng.normal(size=(2, 4, 3)))
            w = tc.constant(rng.normal(size=(2, 4, 4)))
            errs = tc.check_gradients(lambda: tc.sum(tc.lstm_sequence(xs, W, b, reverse=True) * w), [xs, W, b])
        assert max(errs.values()) < 1e-4

    def test_bad_kernel_shape(self):
        z = tc.constant(np.zeros((1, 4)))
        with pytest.raises(DimensionError):
            tc.lstm_cell(tc.constant(np.zeros((1, 3))), z, z, tc.constant(np.zeros((16, 6))), tc.constant(np.zeros(16)))
