import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreo import numerics as nx
from choreo.numerics import ops
from choreo.numerics.tensor import Tensor, graph_ops


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def check(f, wrt, **kw):
    with nx.precision(np.float64):
        report = nx.gradient_check(f, wrt, **kw)
    assert report.passed, str(report)
    return report


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = Tensor(np.array([[[1.0], [2.0], [3.0]]]))
    w = Tensor(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(ops.conv1d(x, w).data.ravel(), [1, 2, 3])


def test_conv1d_pair_average_stride2():
    x = Tensor(np.ones((1, 4, 1)))
    w = Tensor(np.full((2, 1, 1), 0.5))
    np.testing.assert_array_equal(ops.conv1d(x, w, stride=2).data.ravel(), [1, 1])


@pytest.mark.parametrize("T,k,s,p", [(9, 3, 1, 1), (16, 4, 2, 1), (7, 2, 3, 0), (5, 5, 1, 0)])
def test_conv1d_output_length(T, k, s, p):
    x = Tensor(np.zeros((2, T, 3)))
    w = Tensor(np.zeros((k, 3, 4)))
    assert ops.conv1d(x, w, stride=s, padding=p).shape == (2, (T + 2 * p - k) // s + 1, 4)


def test_conv1d_against_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 11, 3)), rng.normal(size=(4, 3, 5)), rng.normal(size=5)
    out = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    expect = np.stack(
        [np.einsum("bkc,kco->bo", xp[:, t : t + 4], w) + b for t in range(0, xp.shape[1] - 4 + 1, 2)], axis=1
    )
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv1d(Tensor(np.zeros((1, 5, 2))), Tensor(np.zeros((3, 3, 1))))


def test_conv_transpose_matches_scatter_definition():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(1, 5, 2)), rng.normal(size=(4, 2, 3))
    out = ops.conv_transpose1d(Tensor(x), Tensor(w), stride=2, padding=1).data
    # Scatter form: every input step t adds w[j] at output position 2t + j - 1 (kernel flipped).
    full = np.zeros((1, 2 * 4 + 4, 3))
    for t in range(5):
        for j in range(4):
            full[:, 2 * t + j] += x[:, t] @ w[3 - j]
    np.testing.assert_allclose(out, full[:, 1 : 1 + out.shape[1]], rtol=1e-12)
    assert out.shape[1] == (5 - 1) * 2 - 2 + 4


def test_softmax_symmetric():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_cross_entropy_uniform_is_log_classes():
    out = ops.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert out.item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_layer_norm_constant_is_zero():
    out = ops.layer_norm(Tensor(np.full((2, 6), 3.0)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_stop_gradient_forward_and_product_rule():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    np.testing.assert_array_equal(ops.stop_gradient(x).data, [1, 2])
    ops.stop_gradient(x).sum()
    y = Tensor(np.array(3.0), requires_grad=True)
    (ops.stop_gradient(y) * y).backward()
    assert y.grad == pytest.approx(3.0)


def test_stop_gradient_blocks_everything():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = ops.stop_gradient(x).sum() + (x * 0.0).sum()
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(0.1, 2.0))
def test_stop_gradient_cut_leaves_other_paths_unchanged(values, scale):
    # f = g(x) + sg(h(x)) has the same gradient as g(x) alone.
    a = Tensor(np.array(values), requires_grad=True)
    ((a * scale).sum() + ops.stop_gradient(ops.exp(a)).sum()).backward()
    b = Tensor(np.array(values), requires_grad=True)
    (b * scale).sum().backward()
    np.testing.assert_array_equal(a.grad, b.grad)


def test_straight_through_forward_is_quantized_backward_identity():
    x = Tensor(np.array([0.2, 0.7]), requires_grad=True)
    q = Tensor(np.array([0.0, 1.0]))
    y = ops.straight_through(x, q)
    np.testing.assert_array_equal(y.data, [0.0, 1.0])
    (y * Tensor(np.array([2.0, 3.0]))).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 3.0])


def test_dropout_eval_identity_and_seeded():
    x = Tensor(np.ones((4, 5)))
    assert ops.dropout(x, 0.5, training=False, rng=None) is x
    a = ops.dropout(x, 0.5, True, np.random.default_rng(3)).data
    b = ops.dropout(x, 0.5, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, True, None)


def test_upsample_nearest_repeats():
    x = Tensor(np.arange(3.0).reshape(1, 3, 1))
    np.testing.assert_array_equal(ops.upsample_nearest(x, 2).data.ravel(), [0, 0, 1, 1, 2, 2])


def test_embedding_accumulates_repeated_rows():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    ops.embedding(table, [0, 2, 0]).sum().backward()
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).__mul__(2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = (x * 2).sum()
    assert graph_ops(y) == [y.op]


# ---------------------------------------------------------------------------
# gradient checks on several random shapes
# ---------------------------------------------------------------------------

SHAPES = [(2, 5, 3), (1, 8, 4), (3, 6, 2)]


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_elementwise_and_reductions(shape):
    rng = np.random.default_rng(sum(shape))
    a = t64(rng.normal(size=shape))
    b = t64(rng.uniform(0.5, 2.0, size=shape))
    check(lambda: (ops.tanh(a) * b / (b + 1.0) - ops.exp(a * 0.3) + ops.sqrt(b) * ops.log(b)).mean(), [a, b])
    check(lambda: (ops.gelu(a) + ops.relu(a + 0.05) + ops.abs(a + 0.05) ** 1).sum(), [a])


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_shape_ops(shape):
    rng = np.random.default_rng(sum(shape) + 1)
    a, b = t64(rng.normal(size=shape)), t64(rng.normal(size=shape))
    w = t64(rng.normal(size=shape[::-1]))
    check(lambda: (ops.concat([a, b], axis=1)[:, 1:-1] * 2.0).transpose(2, 0, 1).reshape(-1).sum(), [a, b])
    check(lambda: (ops.stack([a, b], axis=0) * ops.swapaxes(ops.stack([b, a], 0), 1, 1)).mean(), [a, b])
    check(lambda: (a[:, [0, 0, -1]] * 3.0).sum() + (ops.transpose(w, (2, 1, 0)) * a).sum(), [a, w])


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_linear_softmax_layernorm(shape):
    rng = np.random.default_rng(sum(shape) + 2)
    B, T, C = shape
    x = t64(rng.normal(size=shape))
    w, bias = t64(rng.normal(size=(C, 4))), t64(rng.normal(size=4))
    g, beta = t64(rng.normal(size=C)), t64(rng.normal(size=C))
    target = rng.normal(size=(B, T, 4))
    check(lambda: ops.mse(ops.linear(x, w, bias), target), [x, w, bias])
    r1, r2 = Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))
    check(lambda: (ops.softmax(x, -1) * r1).sum(), [x])
    check(lambda: (ops.log_softmax(x, 1) * r2).sum(), [x])
    check(lambda: (ops.layer_norm(x, g, beta) ** 2).mean(), [x, g, beta])
    check(lambda: ops.l1(ops.matmul(x, w), target + 0.01), [x, w])


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_cross_entropy_embedding(shape):
    rng = np.random.default_rng(sum(shape) + 3)
    B, T, C = shape
    logits = t64(rng.normal(size=shape))
    targets = rng.integers(0, C, size=(B, T))
    table = t64(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=(B, T))
    check(lambda: ops.cross_entropy(logits, targets), [logits])
    check(lambda: ops.cross_entropy(logits, targets, reduction="sum"), [logits])
    check(lambda: (ops.embedding(table, idx) ** 2).sum(), [table])


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_convolutions(shape):
    rng = np.random.default_rng(sum(shape) + 4)
    B, T, C = shape
    x = t64(rng.normal(size=(B, T + 3, C)))
    w, b = t64(rng.normal(size=(3, C, 2))), t64(rng.normal(size=2))
    wt = t64(rng.normal(size=(4, C, 2)))
    check(lambda: (ops.conv1d(x, w, b, stride=2, padding=1) ** 2).mean(), [x, w, b])
    check(lambda: (ops.conv_transpose1d(x, wt, b, stride=2, padding=1) ** 2).mean(), [x, wt, b])
    check(lambda: (ops.conv1d(ops.upsample_nearest(x, 2), w, None, padding="same") ** 2).mean(), [x, w])


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_attention_with_mask(shape):
    rng = np.random.default_rng(sum(shape) + 5)
    B, T, C = shape
    q, k, v = (t64(rng.normal(size=(B, 2, T, C))) for _ in range(3))
    mask = np.where(np.tril(np.ones((T, T))) > 0, 0.0, -1e9)
    check(lambda: (ops.attention(q, k, v, mask) ** 2).sum(), [q, k, v])


def test_grad_dropout_replays_its_mask():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    rng = np.random.default_rng(5)
    check(lambda: (ops.dropout(x, 0.3, True, rng) ** 2).sum(), [x])


def test_gradcheck_sum_of_squares_exact():
    x = t64(np.random.default_rng(0).normal(size=5))
    with nx.precision(np.float64):
        r = nx.gradient_check(lambda: (x * x).sum(), x, eps=1e-3)
    assert r.max_rel_error < 1e-6


def test_gradcheck_reports_straight_through():
    x = t64([0.2, 0.9, -0.4])
    code = Tensor(np.array([[0.0], [1.0]]))

    def f():
        idx = ops.frozen_indices(lambda: np.abs(x.data[:, None] - code.data[:, 0][None]).argmin(1))
        q = ops.straight_through(x, ops.embedding(code, idx).reshape(3))
        return (q * q).sum()

    r = check(f, x)
    assert r.straight_through


def test_gradcheck_flags_non_finite():
    x = t64([-1.0])
    with nx.precision(np.float64), np.errstate(invalid="ignore"):
        r = nx.gradient_check(lambda: ops.log(x).sum(), x)
    assert not r.passed and r.non_finite


def test_gradcheck_catches_a_wrong_gradient():
    x = t64([0.5, 1.5])

    def bad():
        from choreo.numerics.tensor import make

        return make((x.data**2).sum(), (x,), lambda g: (g * 3 * x.data,), "bad").sum()

    with nx.precision(np.float64):
        assert not nx.gradient_check(bad, x).passed


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    nx.adam_step(p, np.zeros(2), m, v, nx.AdamConfig(lr=0.1), 1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, 1.0])
    nx.adam_step(p, np.array([3.0, -0.2]), np.zeros(2), np.zeros(2), nx.AdamConfig(lr=0.01, eps=1e-12), 1)
    np.testing.assert_allclose(p, [0.99, 1.01], rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.integers(1, 20))
def test_adam_lr_zero_is_identity(grad, step):
    p = np.linspace(-1, 1, len(grad))
    before = p.copy()
    nx.adam_step(p, np.array(grad), np.zeros(len(grad)), np.zeros(len(grad)), nx.AdamConfig(lr=0.0), step)
    np.testing.assert_array_equal(p, before)


def test_adam_quadratic_bowl():
    x = nx.parameter(np.array([1.0]))
    opt = nx.Adam({"x": x}, nx.AdamConfig(lr=0.1))
    for _ in range(200):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert abs(x.data[0]) < 0.05


def test_adam_nan_gradient_aborts_with_diagnostics():
    x = nx.parameter(np.array([1.0, 2.0]))
    opt = nx.Adam({"x": x}, nx.AdamConfig())
    x.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(nx.NumericalAbort) as err:
        opt.step()
    assert err.value.diagnostics["parameter"] == "x"
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_adam_step_counter_starts_at_one():
    with pytest.raises(ValueError):
        nx.adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), nx.AdamConfig(), 0)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class _Net(nx.Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.a = nx.Linear(3, 4, rng)
        self.blocks = [nx.Linear(4, 4, rng), nx.LayerNorm(4)]

    def forward(self, x):
        return self.blocks[1](self.blocks[0](ops.relu(self.a(x))))


def test_module_names_unique_and_state_roundtrip():
    net = _Net()
    names = list(dict(net.named_parameters()))
    assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias"]
    state = net.state_dict()
    other = _Net()
    for p in other.parameters().values():
        p.data += 1
    other.load_state_dict(state)
    x = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_array_equal(net(Tensor(x)).data, other(Tensor(x)).data)
    with pytest.raises(KeyError):
        other.load_state_dict({"a.weight": state["a.weight"]})


def test_default_dtype_is_float32():
    assert nx.parameter(np.zeros(2)).dtype == np.float32
    with nx.precision(np.float64):
        assert nx.parameter(np.zeros(2)).dtype == np.float64
