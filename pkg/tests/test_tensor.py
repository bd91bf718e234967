"""Tests for the autograd tensor: forward values, gradients, graph rules and file format.
"""
import numpy as np
import pytest
from rego.base import DimensionError, GradientError
from rego.tensor import ComputationGraph, Tensor, backward, clip, concat, conv2d, getitem
from rego.tensor import inverse_sigmoid, layer_norm, load_tensor, log, log_softmax, matmul
from rego.tensor import maximum, minimum, power, save_tensor, sigmoid, softmax, softplus
from rego.tensor import stack, swapaxes, tabs, tensor
from tests.fixtures.oracles import loop_conv2d, loop_matmul, numeric_grad, rel_error

SHAPES_PER_OP = 20


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _leaf(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _check(fn, inputs, tol=1e-4):
    """Compare analytic gradients of the scalar fn() with central differences.
    """
    for x in inputs:
        x.zero_grad()
    backward(fn())
    for x in inputs:
        assert rel_error(x.grad, numeric_grad(fn, x)) < tol


def _unary(rng, op, sample):
    shape = _shape(rng)
    x = _leaf(sample(rng, shape))
    weights = Tensor(rng.normal(size=shape))
    return (lambda: (op(x) * weights).sum()), [x]


def _binary(rng, op, sample_b=None):
    shape = _shape(rng)
    b_shape = shape[1:] if rng.random() < 0.3 else shape
    a = _leaf(rng.normal(size=shape))
    b = _leaf(sample_b(rng, b_shape) if sample_b else rng.normal(size=b_shape))
    weights = Tensor(rng.normal(size=shape))
    return (lambda: (op(a, b) * weights).sum()), [a, b]


def _case_maximum(rng, op):
    shape = _shape(rng)
    a = rng.normal(size=shape)
    b = a + _away_from_zero(rng, shape)
    x, y = _leaf(a), _leaf(b)
    weights = Tensor(rng.normal(size=shape))
    return (lambda: (op(x, y) * weights).sum()), [x, y]


def _case_matmul(rng):
    n, k, m = _shape(rng, 3)
    batch = int(rng.integers(1, 3))
    a = _leaf(rng.normal(size=(batch, n, k)) if rng.random() < 0.5 else rng.normal(size=(n, k)))
    b = _leaf(rng.normal(size=(k, m)))
    weights = Tensor(rng.normal(size=(a @ b).shape))
    return (lambda: (matmul(a, b) * weights).sum()), [a, b]


def _case_conv(rng):
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, k + 3)), int(rng.integers(k, k + 3))
    x = _leaf(rng.normal(size=(1, cin, h, w)))
    kernel = _leaf(rng.normal(size=(cout, cin, k, k)))
    bias = _leaf(rng.normal(size=cout))
    out = conv2d(x, kernel, stride, padding, bias)
    weights = Tensor(rng.normal(size=out.shape))
    return (lambda: (conv2d(x, kernel, stride, padding, bias) * weights).sum()), [x, kernel, bias]


def _case_layer_norm(rng):
    shape = _shape(rng, lo=3)
    x = _leaf(rng.normal(size=shape))
    gain = _leaf(rng.normal(size=shape[-1]))
    bias = _leaf(rng.normal(size=shape[-1]))
    weights = Tensor(rng.normal(size=shape))
    return (lambda: (layer_norm(x, gain, bias) * weights).sum()), [x, gain, bias]


def _case_getitem(rng):
    rows = int(rng.integers(2, 5))
    x = _leaf(rng.normal(size=(rows, 3)))
    index = rng.integers(0, rows, size=4)
    weights = Tensor(rng.normal(size=(4, 3)))
    return (lambda: (getitem(x, index) * weights).sum()), [x]


def _case_concat(rng):
    a = _leaf(rng.normal(size=(int(rng.integers(1, 4)), 3)))
    b = _leaf(rng.normal(size=(int(rng.integers(1, 4)), 3)))
    weights = Tensor(rng.normal(size=(a.shape[0] + b.shape[0], 3)))
    return (lambda: (concat([a, b], axis=0) * weights).sum()), [a, b]


def _case_stack(rng):
    shape = _shape(rng)
    a, b = _leaf(rng.normal(size=shape)), _leaf(rng.normal(size=shape))
    weights = Tensor(rng.normal(size=(*shape[:1], 2, *shape[1:])))
    return (lambda: (stack([a, b], axis=1) * weights).sum()), [a, b]


def _case_reduce(rng):
    shape = _shape(rng, 3)
    x = _leaf(rng.normal(size=shape))
    w = Tensor(rng.normal(size=(shape[0], shape[2])))
    return (lambda: (x.sum(axis=1) * w).sum() + x.mean()), [x]


def _case_reshape(rng):
    shape = _shape(rng, 3)
    x = _leaf(rng.normal(size=shape))
    w = Tensor(rng.normal(size=(shape[2], shape[1] * shape[0])))
    return (lambda: (swapaxes(x.reshape(shape[0] * shape[1], shape[2])) * w).sum()), [x]


CASES = {
    'add': lambda rng: _binary(rng, lambda a, b: a + b),
    'sub': lambda rng: _binary(rng, lambda a, b: a - b),
    'mul': lambda rng: _binary(rng, lambda a, b: a * b),
    'div': lambda rng: _binary(rng, lambda a, b: a / b,
                               lambda r, s: _away_from_zero(r, s, 0.5, 2.0)),
    'neg': lambda rng: _unary(rng, lambda x: -x, lambda r, s: r.normal(size=s)),
    'power': lambda rng: _unary(rng, lambda x: power(x, 2.5), lambda r, s: r.uniform(0.5, 2, s)),
    'exp': lambda rng: _unary(rng, lambda x: x.exp(), lambda r, s: r.normal(size=s)),
    'log': lambda rng: _unary(rng, log, lambda r, s: r.uniform(0.5, 2, s)),
    'abs': lambda rng: _unary(rng, tabs, _away_from_zero),
    'relu': lambda rng: _unary(rng, lambda x: x.relu(), _away_from_zero),
    'sigmoid': lambda rng: _unary(rng, sigmoid, lambda r, s: r.normal(size=s)),
    'softplus': lambda rng: _unary(rng, softplus, lambda r, s: r.normal(size=s)),
    'inverse_sigmoid': lambda rng: _unary(rng, inverse_sigmoid, lambda r, s: r.uniform(0.1, 0.9, s)),
    'clip': lambda rng: _unary(rng, lambda x: clip(x, -0.5, 0.5),
                               lambda r, s: r.choice([-1.0, -0.2, 0.2, 1.0], s) + r.uniform(-0.1, 0.1, s)),
    'maximum': lambda rng: _case_maximum(rng, maximum),
    'minimum': lambda rng: _case_maximum(rng, minimum),
    'softmax': lambda rng: _unary(rng, softmax, lambda r, s: r.normal(size=s)),
    'log_softmax': lambda rng: _unary(rng, log_softmax, lambda r, s: r.normal(size=s)),
    'matmul': _case_matmul,
    'conv2d': _case_conv,
    'layer_norm': _case_layer_norm,
    'getitem': _case_getitem,
    'concat': _case_concat,
    'stack': _case_stack,
    'sum_mean': _case_reduce,
    'reshape_transpose': _case_reshape,
    }


class TestGradients:
    """Central-difference checks of every differentiable operation.
    """

    @pytest.mark.parametrize('name', sorted(CASES))
    def test_matches_finite_differences(self, name):
        """Verify analytic gradients agree with finite differences on random shapes.
        """
        rng = np.random.default_rng(sorted(CASES).index(name))
        for _ in range(SHAPES_PER_OP):
            fn, inputs = CASES[name](rng)
            _check(fn, inputs)

    def test_square(self):
        """Verify d(x * x)/dx at 3 is 6.
        """
        x = tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_shared_subexpression_accumulates(self):
        """Verify a node used twice receives both gradient contributions.
        """
        x = tensor([1.0, 2.0], requires_grad=True)
        y = x * x
        backward((y + y).sum())
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_each_node_visited_once(self):
        """Verify backward visits every recorded node exactly once.
        """
        x = tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = sigmoid(x) * x
        z = (y * y + y).sum()
        graph = backward(z)
        assert graph.visits == len(graph.nodes)

    def test_constant_inputs_get_no_grad(self):
        """Verify tensors not requiring gradients are left untouched.
        """
        x = tensor([1.0, 2.0], requires_grad=True)
        c = tensor([5.0, 6.0])
        backward((x * c).sum())
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 6.0])

    def test_detach_blocks_gradient(self):
        """Verify nothing flows through a detached branch.
        """
        x = tensor([1.0, 2.0], requires_grad=True)
        y = (x * 2.0).detach()
        assert not y.requires_grad
        backward((x + y).sum())
        np.testing.assert_allclose(x.grad, [1.0, 1.0])


class TestBackwardRules:
    """Tests for backward preconditions.
    """

    def test_non_scalar_loss(self):
        """Verify backward refuses a non-scalar output.
        """
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError, match='scalar'):
            backward(x * 2.0)

    def test_repeat_without_reset(self):
        """Verify a second backward into populated gradients is rejected.
        """
        x = tensor(2.0, requires_grad=True)
        backward(x * x)
        with pytest.raises(GradientError, match='already populated'):
            backward(x * x)

    def test_accumulate(self):
        """Verify accumulate=True adds onto existing gradients.
        """
        x = tensor(2.0, requires_grad=True)
        backward(x * x)
        backward(x * x, accumulate=True)
        assert x.grad == 8.0

    def test_zero_grad_allows_repeat(self):
        """Verify zero_grad resets so backward can run again.
        """
        x = tensor(2.0, requires_grad=True)
        backward(x * x)
        x.zero_grad()
        backward(x * 3.0)
        assert x.grad == 3.0

    def test_no_graph(self):
        """Verify backward from a constant tensor raises.
        """
        with pytest.raises(GradientError, match='not linked'):
            backward(tensor(1.0))

    def test_first_nonfinite_op(self):
        """Verify the first op producing a non-finite value is reported.
        """
        x = tensor([1.0, -1.0], requires_grad=True)
        with np.errstate(invalid='ignore'):
            loss = (log(x) * 2.0).sum()
        assert ComputationGraph(loss).first_nonfinite_op() == 'log'


class TestForward:
    """Forward values against naive references and shape rules.
    """

    def test_matmul_matches_loops(self, rng):
        """Verify matmul equals the triple-loop product.
        """
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)

    @pytest.mark.parametrize(('stride', 'padding'), [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv2d_matches_loops(self, rng, stride, padding):
        """Verify conv2d equals the direct loop convolution.
        """
        x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride, padding)
        np.testing.assert_allclose(out.data, loop_conv2d(x, w, stride, padding), atol=1e-12)

    def test_conv2d_kernel_too_large(self):
        """Verify a kernel larger than the padded input is rejected.
        """
        with pytest.raises(DimensionError, match='larger than padded input'):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_softmax_rows_sum_to_one(self, rng):
        """Verify softmax is normalized even for large logits.
        """
        out = softmax(Tensor(rng.normal(size=(5, 7)) * 100.0))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)

    @pytest.mark.parametrize(('a', 'b'), [((2, 3), (2,)), ((2, 3), (3, 2)), ((4,), (3,))])
    def test_incompatible_shapes(self, a, b):
        """Verify only equal, scalar or suffix shapes combine.
        """
        with pytest.raises(DimensionError, match='cannot combine'):
            Tensor(np.zeros(a)) + Tensor(np.zeros(b))

    def test_suffix_broadcast(self):
        """Verify a row vector adds to every row and its gradient sums over rows.
        """
        bias = tensor([1.0, 2.0], requires_grad=True)
        out = Tensor(np.zeros((3, 2))) + bias
        np.testing.assert_allclose(out.data, [[1, 2]] * 3)
        backward(out.sum())
        np.testing.assert_allclose(bias.grad, [3.0, 3.0])

    def test_matmul_mismatch(self):
        """Verify inner dimensions must agree.
        """
        with pytest.raises(DimensionError, match='matmul'):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_sigmoid_tails(self):
        """Verify sigmoid keeps its tiny tail values instead of rounding to zero.
        """
        out = sigmoid(tensor([-40.0, -700.0, 0.0, 40.0])).data
        np.testing.assert_allclose(out[:2], [1 / (1 + np.exp(40.0)), np.exp(-700.0)], rtol=1e-12)
        assert np.all(out[:2] > 0)
        assert out[2] == 0.5
        assert out[3] == 1.0

    def test_layer_norm_statistics(self, rng):
        """Verify unit gain and zero bias give zero mean and unit variance rows.
        """
        out = layer_norm(Tensor(rng.normal(3.0, 5.0, size=(4, 16))),
                         Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=1e-5)


class TestTensorFile:
    """Tests for the binary tensor format.
    """

    def test_round_trip(self, tmp_path, rng):
        """Verify a saved tensor loads back bitwise equal.
        """
        x = rng.normal(size=(2, 3, 4))
        save_tensor(tmp_path / 'x.bin', Tensor(x))
        loaded = load_tensor(tmp_path / 'x.bin')
        assert loaded.shape == (2, 3, 4)
        assert np.array_equal(loaded.data, x)

    def test_header_layout(self, tmp_path):
        """Verify the file is u32 rank, u32 extents, then little-endian f64 values.
        """
        save_tensor(tmp_path / 'x.bin', Tensor([[1.0, 2.0, 3.0]]))
        raw = (tmp_path / 'x.bin').read_bytes()
        assert np.frombuffer(raw[:12], dtype='<u4').tolist() == [2, 1, 3]
        assert np.frombuffer(raw[12:], dtype='<f8').tolist() == [1.0, 2.0, 3.0]

    def test_truncated_payload(self, tmp_path):
        """Verify a payload that does not fill the shape is rejected.
        """
        save_tensor(tmp_path / 'x.bin', Tensor(np.ones((2, 2))))
        path = tmp_path / 'x.bin'
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DimensionError, match='does not fill'):
            load_tensor(path)
