import numpy as np
import pytest

from diffcore import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    backward,
    check_gradients,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
)
from diffcore.checkpoint import MAGIC
from errors import FormatError, OptimizerError, ShapeError, TapeError


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar with a non-trivial upstream gradient for every output entry."""
    return (out * Tensor(weights)).sum()


def _dims(rng, count, low=1, high=4):
    return tuple(int(d) for d in rng.integers(low, high + 1, size=count))


# Each factory returns (scalar fn, inputs) for one random instance
def _case_add(rng):
    a = Tensor(rng.normal(size=_dims(rng, 2)), True)
    b = Tensor(rng.normal(size=a.shape[-1:]), True)
    w = rng.normal(size=a.shape)
    return (lambda: _weighted(ops.add(a, b), w)), [a, b]


def _case_multiply(rng):
    shape = _dims(rng, 3)
    a = Tensor(rng.normal(size=shape), True)
    b = Tensor(rng.normal(size=(1,) + shape[1:]), True)
    w = rng.normal(size=shape)
    return (lambda: _weighted(ops.multiply(a, b), w)), [a, b]


def _case_divide(rng):
    shape = _dims(rng, 2)
    a = Tensor(rng.normal(size=shape), True)
    b = Tensor(rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape), True)
    w = rng.normal(size=shape)
    return (lambda: _weighted(ops.divide(a, b), w)), [a, b]


def _case_matmul(rng):
    n, k, m = _dims(rng, 3)
    a = Tensor(rng.normal(size=(2, n, k)), True)
    b = Tensor(rng.normal(size=(k, m)), True)
    w = rng.normal(size=(2, n, m))
    return (lambda: _weighted(ops.matmul(a, b), w)), [a, b]


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), True)
    out_shape = ops.conv2d(x, k, stride=stride, padding=padding).shape
    w = rng.normal(size=out_shape)
    return (lambda: _weighted(ops.conv2d(x, k, stride=stride, padding=padding), w)), [x, k]


def _unary_case(op, make_input):
    def case(rng):
        shape = _dims(rng, 2)
        x = Tensor(make_input(rng, shape), True)
        w = rng.normal(size=shape)
        return (lambda: _weighted(op(x), w)), [x]
    return case


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _case_sum(rng):
    x = Tensor(rng.normal(size=_dims(rng, 3)), True)
    axis = int(rng.integers(0, 3))
    w = rng.normal(size=np.sum(x.data, axis=axis).shape)
    return (lambda: _weighted(ops.reduce_sum(x, axis=axis), w)), [x]


def _case_mean(rng):
    x = Tensor(rng.normal(size=_dims(rng, 3)), True)
    w = rng.normal(size=np.mean(x.data, axis=(1, 2), keepdims=True).shape)
    return (lambda: _weighted(ops.reduce_mean(x, axis=(1, 2), keepdims=True), w)), [x]


def _case_max(rng):
    x = Tensor(rng.normal(size=_dims(rng, 3, low=2)), True)
    axis = int(rng.integers(0, 3))
    w = rng.normal(size=np.max(x.data, axis=axis).shape)
    return (lambda: _weighted(ops.reduce_max(x, axis=axis), w)), [x]


def _case_softmax(rng):
    x = Tensor(rng.normal(size=_dims(rng, 3, low=2)), True)
    axis = int(rng.integers(0, 3))
    w = rng.normal(size=x.shape)
    return (lambda: _weighted(ops.softmax(x, axis=axis), w)), [x]


def _case_gap(rng):
    x = Tensor(rng.normal(size=(2,) + _dims(rng, 3)), True)
    w = rng.normal(size=x.shape[:2])
    return (lambda: _weighted(ops.gap(x), w)), [x]


def _case_broadcast(rng):
    x = Tensor(rng.normal(size=(1,) + _dims(rng, 1)), True)
    target = (3, x.shape[1])
    w = rng.normal(size=target)
    return (lambda: _weighted(ops.broadcast_to(x, target), w)), [x]


def _case_reshape(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), True)
    w = rng.normal(size=(6, 4))
    return (lambda: _weighted(ops.reshape(x, (6, 4)), w)), [x]


def _case_transpose(rng):
    x = Tensor(rng.normal(size=_dims(rng, 3)), True)
    axes = tuple(int(a) for a in rng.permutation(3))
    w = rng.normal(size=np.transpose(x.data, axes).shape)
    return (lambda: _weighted(ops.transpose(x, axes), w)), [x]


def _case_concat(rng):
    a = Tensor(rng.normal(size=(2, int(rng.integers(1, 4)))), True)
    b = Tensor(rng.normal(size=(2, int(rng.integers(1, 4)))), True)
    w = rng.normal(size=(2, a.shape[1] + b.shape[1]))
    return (lambda: _weighted(ops.concat([a, b], axis=1), w)), [a, b]


GRADIENT_CASES = {
    "add": _case_add,
    "multiply": _case_multiply,
    "divide": _case_divide,
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "relu": _unary_case(ops.relu, _away_from_zero),
    "sigmoid": _unary_case(ops.sigmoid, lambda rng, s: rng.normal(scale=3.0, size=s)),
    "softplus": _unary_case(ops.softplus, lambda rng, s: rng.normal(scale=3.0, size=s)),
    "exp": _unary_case(ops.exp, lambda rng, s: rng.normal(size=s)),
    "log": _unary_case(lambda x: ops.log(x, floor=1e-12), lambda rng, s: rng.uniform(0.2, 3.0, size=s)),
    "power": _unary_case(lambda x: ops.power(x, 2.5), lambda rng, s: rng.uniform(0.2, 2.0, size=s)),
    "scale": _unary_case(lambda x: ops.scale(x, -1.7), lambda rng, s: rng.normal(size=s)),
    "sum": _case_sum,
    "mean": _case_mean,
    "max": _case_max,
    "softmax": _case_softmax,
    "gap": _case_gap,
    "broadcast": _case_broadcast,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
}


class TestPrimitives:
    """Test forward values and shape errors of the primitive op-kinds"""

    def test_relu_values(self):
        """Test: ReLU on [-1, 0, 2] gives [0, 0, 2]"""
        out = ops.relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_identity_conv_keeps_image(self, rng):
        """Test: 1×1 convolution with an identity kernel returns the image"""
        image = rng.normal(size=(1, 1, 6, 7))
        out = ops.conv2d(Tensor(image), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, image)

    def test_softmax_symmetric(self):
        """Test: softmax over [0, 0] is [0.5, 0.5]"""
        assert ops.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_softmax_rows_sum_to_one(self, rng):
        """Test: softmax outputs are nonnegative and sum to 1 within 1e-9"""
        out = ops.softmax(Tensor(rng.normal(scale=20.0, size=(4, 7, 3))), axis=1).data
        assert out.min() >= 0.0
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_conv_stride_and_padding_shape(self):
        """Test: 3×3 stride-2 convolution with padding 1 halves the extent"""
        out = ops.conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 4, 4)

    def test_shape_error_names_op_kind(self):
        """Test: incompatible operands raise ShapeError naming the op-kind and shapes"""
        with pytest.raises(ShapeError) as exc:
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert exc.value.op_kind == "matmul"
        assert (2, 3) in exc.value.shapes and (4, 2) in exc.value.shapes
        assert exc.value.category == "shape"

    def test_add_broadcast_error(self):
        """Test: non-broadcastable add raises ShapeError"""
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_conv_channel_mismatch(self):
        """Test: kernel channel count must match the input"""
        with pytest.raises(ShapeError) as exc:
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        assert exc.value.op_kind == "conv2d"

    def test_log_floor_clamps(self):
        """Test: log with a floor never returns -inf"""
        out = ops.log(Tensor([0.0, 1.0]), floor=1e-12)
        assert np.isfinite(out.data).all()
        assert out.data[1] == 0.0


class TestBackward:
    """Test tape replay and gradient accumulation"""

    def test_square_gradient(self):
        """Test: d(x²)/dx at x = 3 is 6"""
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        tape.backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_relu_sum_gradient(self):
        """Test: grad of sum(ReLU(x)) at [-1, 2] is [0, 1]"""
        x = Tensor([-1.0, 2.0], requires_grad=True)
        with Tape():
            y = ops.relu(x).sum()
        backward(y)
        assert x.grad.tolist() == [0.0, 1.0]

    def test_gradient_accumulates_over_uses(self, rng):
        """Test: a tensor used twice receives the sum of both path gradients"""
        data = rng.normal(size=5)
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            y = (x * x + ops.sigmoid(x)).sum()
        tape.backward(y)

        a = Tensor(data, requires_grad=True)
        b = Tensor(data, requires_grad=True)
        c = Tensor(data, requires_grad=True)
        with Tape() as tape2:
            z = (a * b + ops.sigmoid(c)).sum()
        tape2.backward(z)
        np.testing.assert_allclose(x.grad, a.grad + b.grad + c.grad, rtol=1e-12)

    def test_non_scalar_root_rejected(self):
        """Test: backward from a non-scalar raises TapeError"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_consumed_tape_rejected(self):
        """Test: a tape can only be replayed once"""
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_root_from_other_tape_rejected(self):
        """Test: backward needs a root produced on the same tape"""
        x = Tensor(2.0, requires_grad=True)
        with Tape():
            y = x * x
        with Tape() as other:
            pass
        with pytest.raises(TapeError):
            other.backward(y)

    def test_no_grad_records_nothing(self):
        """Test: operations inside no_grad are not recorded"""
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            with no_grad():
                x * x
        assert len(tape) == 0

    def test_unknown_op_kind(self):
        """Test: forward_primitive rejects unknown op-kinds"""
        from diffcore import forward_primitive
        with pytest.raises(TapeError):
            forward_primitive("fft", Tensor(1.0))

    def test_determinism(self, rng):
        """Test: identical inputs give bit-identical forward and backward results"""
        data = rng.normal(size=(1, 2, 6, 6))
        kernel = rng.normal(size=(3, 2, 3, 3))
        results = []
        for _ in range(2):
            k = Tensor(kernel, requires_grad=True)
            with Tape() as tape:
                y = ops.relu(ops.conv2d(Tensor(data), k, padding=1)).mean()
            tape.backward(y)
            results.append((y.item(), k.grad.copy()))
        assert results[0][0] == results[1][0]
        assert np.array_equal(results[0][1], results[1][1])


class TestGradientSuite:
    """Test analytic gradients against central finite differences"""

    @pytest.mark.parametrize("kind", sorted(GRADIENT_CASES))
    def test_primitive_gradients(self, kind):
        """Test: every primitive matches finite differences on 20 random instances"""
        for seed in range(20):
            fn, inputs = GRADIENT_CASES[kind](np.random.default_rng([seed, len(kind)]))
            result = check_gradients(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-7)
            assert result.ok, f"{kind} seed {seed}: {result}"

    def test_conv_kernel_gradient_of_mean(self, rng):
        """Test: gradient of mean(conv output) w.r.t. the kernel on a 5×5 input"""
        x = Tensor(rng.normal(size=(1, 1, 5, 5)))
        k = Tensor(rng.normal(size=(2, 1, 3, 3)), True)
        result = check_gradients(lambda: ops.conv2d(x, k, padding=1).mean(), [k])
        assert result.ok


class TestAdam:
    """Test the Adam update rule"""

    def test_first_step_moves_by_learning_rate(self):
        """Test: w = 1, grad = 1, first step gives w ≈ 0.999"""
        w = Tensor(1.0, requires_grad=True, name="w")
        w.grad = np.array(1.0)
        state = AdamState(learning_rate=1e-3)
        adam_step([w], state)
        assert w.item() == pytest.approx(0.999, abs=1e-9)
        assert state.step == 1

    def test_zero_gradient_is_fixed_point(self):
        """Test: zero gradient and no weight decay leave the parameter unchanged"""
        w = Tensor([0.3, -0.7], requires_grad=True, name="w")
        w.grad = np.zeros(2)
        adam_step([w], AdamState())
        assert w.data.tolist() == [0.3, -0.7]

    def test_two_steps(self):
        """Test: two identical-gradient steps advance the counter and fill both moments"""
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        state = AdamState()
        for _ in range(2):
            w.grad = np.array([0.5, -0.5])
            adam_step([w], state)
        assert state.step == 2
        assert np.all(state.first_moment["w"] != 0)
        assert np.all(state.second_moment["w"] != 0)
        assert state.first_moment["w"].shape == w.shape

    def test_weight_decay_folds_into_gradient(self):
        """Test: weight decay alone acts like a gradient of wd·w"""
        w = Tensor(2.0, requires_grad=True, name="w")
        w.grad = np.array(0.0)
        adam_step([w], AdamState(learning_rate=1e-3, weight_decay=0.5))
        assert w.item() == pytest.approx(2.0 - 1e-3, abs=1e-9)

    def test_missing_gradient_names_parameter(self):
        """Test: a parameter without grad raises OptimizerError naming it"""
        a = Tensor(1.0, requires_grad=True, name="conv0.weight")
        a.grad = np.array(1.0)
        b = Tensor(1.0, requires_grad=True, name="classifier.bias")
        with pytest.raises(OptimizerError) as exc:
            adam_step([a, b], AdamState())
        assert exc.value.parameter == "classifier.bias"
        assert a.item() == 1.0  # nothing applied

    def test_moment_mismatch_leaves_state_untouched(self):
        """Test: a restored moment of the wrong shape fails before any parameter or counter changes"""
        a = Tensor(1.0, requires_grad=True, name="conv0.weight")
        a.grad = np.array(1.0)
        b = Tensor(np.ones(3), requires_grad=True, name="classifier.weight")
        b.grad = np.ones(3)
        state = AdamState(
            first_moment={"classifier.weight": np.zeros(2)},
            second_moment={"classifier.weight": np.zeros(2)},
        )
        with pytest.raises(OptimizerError) as exc:
            adam_step([a, b], state)
        assert exc.value.parameter == "classifier.weight"
        assert state.step == 0
        assert "conv0.weight" not in state.first_moment
        assert a.item() == 1.0
        np.testing.assert_array_equal(b.data, np.ones(3))


class TestCheckpoint:
    """Test the MXCM checkpoint container"""

    def test_round_trip_with_adam_and_meta(self, tmp_path, rng):
        """Test: parameters, Adam state and meta survive save/load"""
        params = {"conv0.weight": rng.normal(size=(2, 3, 3, 3)), "classifier.bias": rng.normal(size=4)}
        state = AdamState(learning_rate=2e-3, weight_decay=5e-4, step=7)
        for name, value in params.items():
            state.first_moment[name] = rng.normal(size=value.shape)
            state.second_moment[name] = rng.uniform(size=value.shape)
        path = save_checkpoint(tmp_path / "a.mxcm", params, state, {"epoch": 3, "global_step": 42})

        loaded = load_checkpoint(path)
        for name, value in params.items():
            assert np.array_equal(loaded.params[name], value)
            assert np.array_equal(loaded.adam.first_moment[name], state.first_moment[name])
            assert np.array_equal(loaded.adam.second_moment[name], state.second_moment[name])
        assert loaded.adam.step == 7
        assert loaded.adam.learning_rate == 2e-3
        assert loaded.meta == {"epoch": 3.0, "global_step": 42.0}

    def test_resave_is_byte_identical(self, tmp_path, rng):
        """Test: saving a loaded checkpoint reproduces the same bytes"""
        params = {"w": rng.normal(size=(3, 2))}
        state = AdamState(step=1, first_moment={"w": np.ones((3, 2))}, second_moment={"w": np.ones((3, 2))})
        first = save_checkpoint(tmp_path / "a.mxcm", params, state, {"epoch": 1})
        loaded = load_checkpoint(first)
        second = save_checkpoint(tmp_path / "b.mxcm", loaded.params, loaded.adam, loaded.meta)
        assert first.read_bytes() == second.read_bytes()

    def test_magic_bytes(self, tmp_path):
        """Test: files start with the MXCM magic"""
        path = save_checkpoint(tmp_path / "c.mxcm", {"w": np.zeros(2)})
        assert path.read_bytes()[:4] == MAGIC == b"MXCM"

    def test_truncated_file(self, tmp_path):
        """Test: a truncated checkpoint raises FormatError"""
        path = save_checkpoint(tmp_path / "c.mxcm", {"w": np.arange(6.0)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        """Test: wrong magic raises FormatError"""
        path = tmp_path / "bad.mxcm"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_reserved_prefix_rejected(self, tmp_path):
        """Test: parameter names may not use the adam/ or meta/ prefixes"""
        with pytest.raises(FormatError):
            save_checkpoint(tmp_path / "r.mxcm", {"adam/step": np.zeros(1)})
