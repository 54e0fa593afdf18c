"""Tensor/autodiff engine tests: worked examples, finite-difference oracles,
and engine-wide gradient sweeps."""

import math

import numpy as np
import pytest

from apex import numerics as nm
from apex.errors import (DegenerateInputError, NumericDomainError, ShapeError,
                         TrainingDivergedError)
from apex.numerics import Tensor


def test_tensor_contract():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert list(t.data) == [1.0, 2.0, 3.0, 4.0]
    assert t.data.shape == (4,)
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        Tensor([float("inf")])


def test_tensor_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 5.0


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(nm.as_node(np.eye(2)), nm.as_node(a))
        assert np.array_equal(out.array, a)

    def test_projector_row_selection(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = nm.matmul(nm.as_node(p), nm.as_node(b))
        assert np.array_equal(out.array, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(11)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = nm.matmul(nm.as_node(a), nm.as_node(b))
        assert np.max(np.abs(out.array - expected)) < 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            nm.matmul(nm.as_node(np.ones((2, 3))), nm.as_node(np.ones((2, 3))))


class TestElementwise:
    def test_mul_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 3))
        out = nm.mul(nm.as_node(x), nm.as_node(np.ones((3, 3))))
        assert np.array_equal(out.array, x)

    def test_exp_of_zero(self):
        assert np.array_equal(nm.exp(nm.as_node(np.zeros(4))).array, np.ones(4))

    def test_sigmoid_at_zero(self):
        assert np.all(nm.sigmoid(nm.as_node(np.zeros((2, 2)))).array == 0.5)

    def test_log_domain_error(self):
        with pytest.raises(NumericDomainError):
            nm.log(nm.as_node(np.array([1.0, 0.0])))

    def test_binary_shape_error(self):
        with pytest.raises(ShapeError):
            nm.add(nm.as_node(np.ones(3)), nm.as_node(np.ones(4)))


class TestReduce:
    def test_sum(self):
        assert nm.reduce_sum(nm.as_node([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_of_ones(self):
        assert nm.reduce_mean(nm.as_node(np.ones((4, 4)))).item() == 1.0

    def test_sum_axis0(self):
        out = nm.reduce_sum(nm.as_node([[1.0, 2.0], [3.0, 4.0]]), axis=0)
        assert np.array_equal(out.array, [4.0, 6.0])

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            nm.reduce_sum(nm.as_node(np.ones((2, 2))), axis=5)


class TestCosine:
    def test_parallel(self):
        assert nm.cosine_similarity(nm.as_node([1.0, 0.0]), nm.as_node([1.0, 0.0])).item() == 1.0

    def test_orthogonal(self):
        assert nm.cosine_similarity(nm.as_node([1.0, 0.0]), nm.as_node([0.0, 1.0])).item() == 0.0

    def test_worked_value(self):
        v = np.array([1.0, 1.0]) / math.sqrt(2.0)
        c = nm.cosine_similarity(nm.as_node([1.0, 0.0]), nm.as_node(v))
        assert abs(c.item() - 1.0 / math.sqrt(2.0)) < 1e-9

    def test_zero_input_rejected(self):
        with pytest.raises(DegenerateInputError):
            nm.cosine_similarity(nm.as_node([0.0, 0.0]), nm.as_node([1.0, 0.0]))

    def test_near_zero_guarded(self):
        c = nm.cosine_similarity(nm.as_node([1e-300, 0.0]), nm.as_node([1.0, 0.0]))
        assert np.isfinite(c.item())

    def test_range_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            u = rng.standard_normal(4) * 10.0 ** rng.integers(-6, 6)
            v = rng.standard_normal(4) * 10.0 ** rng.integers(-6, 6)
            c = nm.cosine_similarity(nm.as_node(u), nm.as_node(v)).item()
            assert -1.0 <= c <= 1.0


class TestMlp:
    def _zero_mlp_with_bias(self, bias):
        layers = [
            (nm.parameter(np.zeros((3, 2))), nm.parameter(np.zeros(3))),
            (nm.parameter(np.zeros((2, 3))), nm.parameter(np.asarray(bias, dtype=float))),
        ]
        return nm.MlpParams(layers=layers, activations=["relu", "linear"])

    def test_zero_weights_give_bias(self):
        mlp = self._zero_mlp_with_bias([0.7, -0.2])
        for x in (np.zeros(2), np.ones(2), np.array([3.0, -4.0])):
            out = nm.mlp_forward(mlp, nm.as_node(x))
            assert np.allclose(out.array, [0.7, -0.2])

    def test_identity_layer(self):
        mlp = nm.MlpParams(layers=[(nm.parameter(np.eye(3)), nm.parameter(np.zeros(3)))],
                           activations=["linear"])
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(nm.mlp_forward(mlp, nm.as_node(x)).array, x)

    def test_four_layer_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        sizes = [5, 6, 6, 6, 3]
        proto = nm.init_mlp(sizes, rng)
        x = rng.standard_normal((2, 5))
        inputs = [p.array for p in proto.parameters()]

        def build(leaves):
            layers = [(leaves[2 * i], leaves[2 * i + 1]) for i in range(len(sizes) - 1)]
            mlp = nm.MlpParams(layers=layers, activations=proto.activations)
            out = nm.mlp_forward(mlp, nm.as_node(x))
            return nm.reduce_sum(nm.mul(out, out))

        assert nm.gradcheck(build, inputs) < 1e-4

    def test_dimension_chain_validated(self):
        with pytest.raises(ShapeError):
            nm.MlpParams(layers=[(nm.parameter(np.zeros((3, 2))), nm.parameter(np.zeros(3))),
                                 (nm.parameter(np.zeros((2, 4))), nm.parameter(np.zeros(2)))],
                         activations=["relu", "linear"])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = nm.parameter(np.array([1.0, 2.0, 3.0]))
        nm.backward(nm.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones(3))

    def test_stop_gradient_blocks(self):
        x = nm.parameter(np.array([1.0, 2.0, 3.0]))
        nm.backward(nm.reduce_sum(nm.stop_gradient(x)))
        assert np.array_equal(x.grad, np.zeros(3))

    def test_stop_gradient_preserves_value(self):
        x = nm.parameter(np.array([1.0, -2.0]))
        assert np.array_equal(nm.stop_gradient(x).array, x.array)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            nm.backward(nm.as_node(np.ones(3)))

    def test_accumulation_and_zeroing(self):
        x = nm.parameter(np.ones(2))
        nm.backward(nm.reduce_sum(x))
        nm.backward(nm.reduce_sum(x))  # fresh graph, same leaf: grads add
        assert np.array_equal(x.grad, 2.0 * np.ones(2))
        x.zero_grad()
        assert np.array_equal(x.grad, np.zeros(2))

    def test_composite_graph_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))

        def build(leaves):
            x, y = leaves
            h = nm.sigmoid(nm.matmul(x, y))
            g = nm.softplus(nm.sub(h, 0.3))
            return nm.reduce_mean(nm.mul(g, g))

        assert nm.gradcheck(build, [a, b]) < 1e-4

    def test_chain_rule_composition(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.standard_normal(4)

            def build(leaves):
                inner = nm.exp(nm.mul(leaves[0], 0.5))   # g(x)
                return nm.reduce_sum(nm.mul(inner, inner))  # f(g(x))

            leaf = nm.parameter(x)
            nm.backward(build([leaf]))
            expected = 2.0 * np.exp(0.5 * x) * np.exp(0.5 * x) * 0.5
            assert np.max(np.abs(leaf.grad - expected)) < 1e-12


class TestOrthogonalRows:
    def test_one_by_one(self):
        b = nm.orthogonal_rows(1, 1, seed=0)
        assert abs(abs(b.array[0, 0]) - 1.0) < 1e-12

    def test_two_by_two_rotation(self):
        b = nm.orthogonal_rows(2, 2, seed=1).array
        assert abs(b[0] @ b[1]) < 1e-10
        assert abs(np.linalg.norm(b[0]) - 1.0) < 1e-10
        assert abs(np.linalg.norm(b[1]) - 1.0) < 1e-10

    def test_default_size_gram(self):
        b = nm.orthogonal_rows(150, 256, seed=42).array
        gram = b @ b.T
        assert np.max(np.abs(gram - np.eye(150))) < 1e-10

    def test_j_greater_than_k_needs_flag(self):
        with pytest.raises(ShapeError):
            nm.orthogonal_rows(5, 3, seed=0)
        b = nm.orthogonal_rows(5, 3, seed=0, allow_blocks=True).array
        assert b.shape == (5, 3)
        assert np.max(np.abs(b[:3] @ b[:3].T - np.eye(3))) < 1e-10
        assert np.max(np.abs(b[3:] @ b[3:].T - np.eye(2))) < 1e-10

    def test_seed_determinism(self):
        a = nm.orthogonal_rows(8, 16, seed=3).array
        b = nm.orthogonal_rows(8, 16, seed=3).array
        assert np.array_equal(a, b)


class TestSgd:
    def test_zero_rate_is_identity(self):
        p = Tensor([1.0, 2.0])
        out = nm.sgd_step(p, Tensor([5.0, -5.0]), 0.0)
        assert np.array_equal(out.array, p.array)

    def test_basic_arithmetic(self):
        out = nm.sgd_step(Tensor([1.0]), Tensor([2.0]), 0.5)
        assert out.array[0] == 0.0

    def test_quadratic_decay(self):
        p = Tensor([1.0])
        for _ in range(10):
            p = nm.sgd_step(p, Tensor(p.array.copy()), 0.1)  # gradient of p^2/2 is p
        assert abs(p.array[0] - 0.9 ** 10) < 1e-12

    def test_nonfinite_gradient_rejected(self):
        g = np.array([1.0])
        bad = np.array([np.inf])
        with pytest.raises(TrainingDivergedError):
            nm.sgd_step([Tensor([1.0])], [bad], 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.sgd_step(Tensor([1.0, 2.0]), Tensor([1.0]), 0.1)


def _random_shape(rng):
    return tuple(int(s) for s in rng.integers(2, 5, size=int(rng.integers(1, 3))))


OP_CASES = {
    "add": lambda ls: nm.add(ls[0], ls[1]),
    "sub": lambda ls: nm.sub(ls[0], ls[1]),
    "mul": lambda ls: nm.mul(ls[0], ls[1]),
    "div": lambda ls: nm.div(ls[0], ls[1]),
    "exp": lambda ls: nm.exp(ls[0]),
    "log": lambda ls: nm.log(ls[0]),
    "sqrt": lambda ls: nm.sqrt(ls[0]),
    "sigmoid": lambda ls: nm.sigmoid(ls[0]),
    "relu": lambda ls: nm.relu(ls[0]),
    "softplus": lambda ls: nm.softplus(ls[0]),
    "sum": lambda ls: nm.reduce_sum(ls[0]),
    "mean": lambda ls: nm.reduce_mean(ls[0]),
    "max": lambda ls: nm.reduce_max(ls[0]),
    "reshape": lambda ls: nm.reshape(ls[0], (-1,)),
    "matmul": lambda ls: nm.matmul(ls[0], ls[1]),
    "transpose": lambda ls: nm.transpose(ls[0]),
    "getitem": lambda ls: nm.getitem(ls[0], 0),
    "cosine": lambda ls: nm.cosine_similarity(ls[0], ls[1]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradients_match_finite_differences(name):
    """Central-difference oracle, >= 100 randomized cases per op."""
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    build_op = OP_CASES[name]
    for trial in range(100):
        if name == "matmul":
            m, k, n = rng.integers(2, 5, size=3)
            inputs = [rng.standard_normal((m, k)), rng.standard_normal((k, n))]
        elif name in ("transpose",):
            inputs = [rng.standard_normal((3, 4))]
        elif name == "cosine":
            inputs = [rng.standard_normal(4) + 0.1, rng.standard_normal(4) + 0.1]
        elif name in ("log", "sqrt"):
            inputs = [rng.random(_random_shape(rng)) + 0.5]
        elif name == "div":
            shape = _random_shape(rng)
            inputs = [rng.standard_normal(shape),
                      rng.random(shape) + 0.5]
        elif name in ("add", "sub", "mul"):
            shape = _random_shape(rng)
            inputs = [rng.standard_normal(shape), rng.standard_normal(shape)]
        elif name == "max":
            # spread values so the maximum is unique (subgradient choice)
            inputs = [np.linspace(0.0, 1.0, 6) + rng.standard_normal(6) * 0.01]
        else:
            inputs = [rng.standard_normal(_random_shape(rng))]

        def build(leaves):
            out = build_op(leaves)
            return nm.reduce_sum(nm.mul(out, out)) if out.array.ndim else out

        assert nm.gradcheck(build, inputs) < 1e-4, f"{name} trial {trial}"


def test_scale_invariance_pow2_bit_exact():
    rng = np.random.default_rng(21)
    u, v = rng.standard_normal(8), rng.standard_normal(8)
    base = nm.cosine_similarity(nm.as_node(u), nm.as_node(v)).item()
    for c in (2.0, 0.25, 1024.0):
        scaled = nm.cosine_similarity(nm.as_node(c * u), nm.as_node(v)).item()
        assert scaled == base
