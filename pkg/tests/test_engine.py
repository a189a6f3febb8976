import numpy as np
import pytest

from tsinsight.engine import EngineError, OP_KINDS, Tape, grad_check


def scalarize(tape, nid, rng):
    """Reduce any node to a scalar through a fixed random weighting."""
    weights = tape.leaf(rng.normal(size=tape.value(nid).shape))
    return tape.sum(tape.hadamard(nid, weights))


def tape_with(value, **kw):
    tape = Tape(**kw)
    return tape, tape.leaf(value, requires_grad=True)


class TestForwardExamples:
    def test_relu(self):
        tape = Tape()
        out = tape.relu(tape.leaf([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(tape.value(out), [0.0, 0.0, 2.0])

    def test_conv1d_same_padding(self):
        tape = Tape()
        out = tape.conv1d(tape.leaf(np.ones((1, 5))), tape.leaf(np.ones((1, 1, 3))))
        np.testing.assert_array_equal(tape.value(out), [[2.0, 3.0, 3.0, 3.0, 2.0]])

    def test_l1_norm(self):
        tape = Tape()
        assert tape.value(tape.l1_norm(tape.leaf([1.0, -2.0, 3.0]))) == 6.0

    def test_max_pool_halves_and_floors(self):
        tape = Tape()
        out = tape.max_pool1d(tape.leaf([[1.0, 3.0, 2.0, 2.0, 9.0]]))
        np.testing.assert_array_equal(tape.value(out), [[3.0, 2.0]])

    def test_nearest_upsample_indexing(self):
        tape = Tape()
        out = tape.nearest_upsample1d(tape.leaf([[1.0, 2.0]]), 4)
        np.testing.assert_array_equal(tape.value(out), [[1.0, 1.0, 2.0, 2.0]])

    def test_dense_flattens_trailing_axes(self):
        tape = Tape()
        x = tape.leaf(np.arange(12.0).reshape(2, 3, 2))
        w = tape.leaf(np.eye(6))
        assert tape.value(tape.dense(x, w)).shape == (2, 6)

    def test_softmax_rows_sum_to_one(self, rng):
        tape = Tape()
        out = tape.softmax(tape.leaf(rng.normal(size=(4, 7))))
        np.testing.assert_allclose(tape.value(out).sum(axis=1), np.ones(4), rtol=1e-12)

    def test_cross_entropy_uniform_logits(self):
        tape = Tape()
        loss = tape.cross_entropy(tape.leaf(np.zeros((3, 4))), np.array([0, 1, 2]))
        np.testing.assert_allclose(tape.value(loss), np.log(4.0), rtol=1e-12)


class TestErrors:
    def test_unknown_kind_rejected(self):
        tape = Tape()
        nid = tape.leaf([1.0])
        with pytest.raises(EngineError, match="unknown operation kind"):
            tape.op_apply("transpose", [nid])

    def test_conv_shape_mismatch_names_kind_and_shapes(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 5)))
        k = tape.leaf(np.ones((1, 3, 3)))
        with pytest.raises(EngineError) as err:
            tape.conv1d(x, k)
        assert "conv1d" in str(err.value)
        assert "(2, 5)" in str(err.value) and "(1, 3, 3)" in str(err.value)

    def test_even_kernel_rejected(self):
        tape = Tape()
        with pytest.raises(EngineError, match="odd"):
            tape.conv1d(tape.leaf(np.ones((1, 5))), tape.leaf(np.ones((1, 1, 4))))

    def test_backward_requires_scalar_or_seed(self, rng):
        tape, x = tape_with(rng.normal(size=(3, 3)))
        out = tape.square(x)
        with pytest.raises(EngineError, match="seed"):
            tape.backward(out)
        tape.backward(out, seed=np.ones((3, 3)))  # fine with a seed

    def test_backward_unknown_node(self):
        tape = Tape()
        tape.leaf([1.0])
        with pytest.raises(EngineError, match="not on tape"):
            tape.backward(99)

    def test_non_finite_output_rejected(self):
        tape = Tape()
        big = tape.leaf([1e308])
        with pytest.raises(EngineError, match="non-finite"):
            tape.square(big)

    def test_add_shape_mismatch(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones((4, 5)))
        with pytest.raises(EngineError, match="add"):
            tape.add(a, b)


class TestBackward:
    def test_quadratic_gradient(self):
        tape, x = tape_with([1.0, 2.0, 3.0])
        y = tape.sum(tape.hadamard(x, x))
        grads = tape.backward(y)
        np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])

    def test_guided_relu_masks_both_signs(self):
        tape, x = tape_with([-1.0, 2.0], backward_mode="guided")
        out = tape.relu(x)
        grads = tape.backward(out, seed=np.array([5.0, -5.0]))
        np.testing.assert_array_equal(grads[x], [0.0, 0.0])

    def test_guided_equals_standard_without_relu(self, rng):
        value = rng.normal(size=(3, 4))
        results = []
        for mode in ("standard", "guided"):
            tape, x = tape_with(value, backward_mode=mode)
            y = tape.mean(tape.tanh(tape.sigmoid(tape.square(x))))
            results.append(tape.backward(y)[x])
        np.testing.assert_array_equal(results[0], results[1])

    def test_three_layer_conv_net_matches_finite_differences(self, rng):
        x = rng.normal(size=(2, 6))
        kernels = {
            "k0": rng.normal(size=(3, 2, 3)),
            "k1": rng.normal(size=(4, 3, 3)),
            "k2": rng.normal(size=(2, 4, 3)),
        }
        target = rng.normal(size=(2, 6))

        def f(params):
            tape = Tape()
            h = tape.leaf(x)
            for name in ("k0", "k1", "k2"):
                h = tape.relu(tape.conv1d(h, tape.parameter(name, params[name])))
            loss = tape.mse(h, tape.leaf(target))
            grads = tape.parameter_grads(tape.backward(loss))
            return float(tape.value(loss)), grads

        report = grad_check(f, kernels, 1e-5)
        assert report.max_relative_error < 1e-4

    def test_dead_relu_region_has_zero_error(self):
        def f(params):
            tape = Tape()
            x = tape.parameter("x", params["x"])
            loss = tape.sum(tape.relu(x))
            grads = tape.parameter_grads(tape.backward(loss))
            return float(tape.value(loss)), grads

        report = grad_check(f, {"x": np.array([-3.0, -2.0])}, 1e-5)
        assert report.max_relative_error == 0.0

    def test_grad_check_quadratic_scalar(self):
        def f(params):
            tape = Tape()
            x = tape.parameter("x", params["x"])
            loss = tape.mse(x, tape.leaf(np.zeros(1)))
            grads = tape.parameter_grads(tape.backward(loss))
            return float(tape.value(loss)), grads

        report = grad_check(f, {"x": np.array([3.0])}, 1e-5)
        assert report.max_relative_error < 1e-8
        value, grads = f({"x": np.array([3.0])})
        assert value == 9.0 and grads["x"][0] == 6.0

    def test_frozen_leaf_gets_no_gradient(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=4), requires_grad=True)
        c = tape.leaf(rng.normal(size=4))  # constant
        y = tape.sum(tape.hadamard(x, c))
        grads = tape.backward(y)
        assert c not in grads and x in grads


def _avoid_kinks(arr):
    return arr + 0.2 * np.sign(arr) + 0.01


KIND_CASES = sorted(OP_KINDS)


@pytest.mark.parametrize("kind", KIND_CASES)
def test_every_primitive_matches_central_differences(kind, rng):
    """Analytic VJPs vs central differences over random conforming shapes <= 16."""

    def build(tape, params):
        if kind == "conv1d":
            x = tape.parameter("a", params["a"])
            k = tape.parameter("b", params["b"])
            return tape.conv1d(x, k)
        if kind == "dense":
            return tape.dense(tape.parameter("a", params["a"]), tape.parameter("b", params["b"]))
        if kind in ("add", "hadamard"):
            return tape.op_apply(kind, [tape.parameter("a", params["a"]), tape.parameter("b", params["b"])])
        if kind == "mse":
            return tape.mse(tape.parameter("a", params["a"]), tape.parameter("b", params["b"]))
        if kind == "concat":
            return tape.concat([tape.parameter("a", params["a"]), tape.parameter("b", params["b"])], axis=1)
        if kind == "scalar_mul":
            return tape.scalar_mul(tape.parameter("a", params["a"]), -1.7)
        if kind == "nearest_upsample1d":
            return tape.nearest_upsample1d(tape.parameter("a", params["a"]), 13)
        if kind == "slice":
            return tape.slice(tape.parameter("a", params["a"]), axis=2, start=1, stop=4)
        if kind == "cross_entropy":
            return tape.cross_entropy(tape.parameter("a", params["a"]), np.array([0, 2, 1]))
        return tape.op_apply(kind, [tape.parameter("a", params["a"])])

    if kind in ("conv1d",):
        point = {"a": rng.normal(size=(2, 3, 9)), "b": rng.normal(size=(4, 3, 3))}
    elif kind == "dense":
        point = {"a": rng.normal(size=(3, 2, 4)), "b": rng.normal(size=(8, 5))}
    elif kind in ("add", "hadamard"):
        point = {"a": rng.normal(size=(3, 1, 5)), "b": rng.normal(size=(4, 5))}
    elif kind == "mse":
        point = {"a": rng.normal(size=(3, 6)), "b": rng.normal(size=(3, 6))}
    elif kind == "concat":
        point = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 4))}
    elif kind in ("abs", "l1_norm", "relu", "max_pool1d"):
        point = {"a": _avoid_kinks(rng.normal(size=(2, 3, 8)))}
    elif kind == "cross_entropy":
        point = {"a": rng.normal(size=(3, 4))}
    else:
        point = {"a": rng.normal(size=(2, 3, 8))}

    weights = rng.normal(size=1)  # placeholder to keep rng state per kind distinct

    def f(params):
        tape = Tape()
        out = build(tape, params)
        if tape.value(out).size != 1:
            mix = tape.leaf(np.random.default_rng(99).normal(size=tape.value(out).shape))
            out = tape.sum(tape.hadamard(out, mix))
        grads = tape.parameter_grads(tape.backward(out))
        return float(tape.value(out)), grads

    report = grad_check(f, point, 1e-5)
    assert report.max_relative_error < 1e-4, (kind, report.max_relative_error)


class TestDeterminismAndReplay:
    def test_op_apply_bit_identical(self, rng):
        value = rng.normal(size=(3, 7))
        kernel = rng.normal(size=(2, 3, 3))
        outs = []
        for _ in range(2):
            tape = Tape()
            out = tape.conv1d(tape.leaf(value), tape.leaf(kernel))
            outs.append(tape.value(out))
        assert np.array_equal(outs[0], outs[1])

    def test_replay_reproduces_all_nodes(self, rng):
        tape, x = tape_with(rng.normal(size=(2, 3, 8)))
        k = tape.leaf(rng.normal(size=(4, 3, 3)))
        h = tape.relu(tape.conv1d(x, k))
        h = tape.max_pool1d(h)
        tape.mean(h)
        tape.replay()  # raises on any drift

    def test_backward_gradient_shapes_match_outputs(self, rng):
        tape, x = tape_with(rng.normal(size=(2, 3, 8)))
        k = tape.leaf(rng.normal(size=(4, 3, 3)), requires_grad=True)
        h = tape.relu(tape.conv1d(x, k))
        loss = tape.mean(h)
        grads = tape.backward(loss)
        for nid, grad in grads.items():
            assert grad.shape == tape.value(nid).shape


class TestCapture:
    def _traced(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=(2, 3, 8)), requires_grad=True)
        h = tape.relu(tape.conv1d(x, tape.leaf(rng.normal(size=(4, 3, 3)))))
        tape.set_name(h, "conv_last")
        return tape, tape.mean(h)

    def test_activation_and_gradient_after_backward(self, rng):
        tape, loss = self._traced(rng)
        tape.backward(loss)
        cap = tape.capture("conv_last")
        assert cap.activation.shape == (2, 4, 8)
        assert cap.gradient is not None and cap.gradient.shape == (2, 4, 8)

    def test_gradient_absent_before_backward(self, rng):
        tape, _ = self._traced(rng)
        cap = tape.capture("conv_last")
        assert cap.activation is not None and cap.gradient is None

    def test_unknown_name_rejected(self, rng):
        tape, _ = self._traced(rng)
        with pytest.raises(EngineError, match="nonexistent"):
            tape.capture("nonexistent")
