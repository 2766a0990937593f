import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmae import nn
from kmae import tensor as T
from kmae.gradcheck import check_gradients
from kmae.optim import OptimizerState, ScheduleConfig, adam_step, lr_at_step
from kmae.tensor import ContractError, DimensionError, Tensor

SEEDS = range(20)


def t64(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity_and_swap():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal((a @ Tensor([[0.0, 1.0], [1.0, 0.0]])).data, [[2, 1], [4, 3]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax / layer norm / gelu -------------------------------------------

def test_softmax_rows_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0)
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax_rows(Tensor(x[None])).data[0], direct, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, 0.0)
    np.testing.assert_allclose(
        T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data, [[1.0, -1.0]]
    )
    row = np.random.default_rng(0).standard_normal((1, 16)) * 5 + 2
    out = T.layer_norm(Tensor(row), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-6


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    big = T.gelu(Tensor([30.0, -30.0])).data
    assert big[0] == pytest.approx(30.0) and big[1] == pytest.approx(0.0, abs=1e-12)
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(phi1, abs=1e-9)


# -- attention ----------------------------------------------------------------

def naive_attention(x, w, heads):
    s, d = x.shape
    dh = d // heads
    q, k, v = x @ w["wq"] + w["bq"], x @ w["wk"] + w["bk"], x @ w["wv"] + w["bv"]
    out = np.zeros((s, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(s):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(s)])
            p = np.exp(scores - scores.max())
            p /= p.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(s))
    return out @ w["wo"] + w["bo"]


def _weights(rng, d):
    return {
        "wq": rng.standard_normal((d, d)), "bq": rng.standard_normal(d),
        "wk": rng.standard_normal((d, d)), "bk": rng.standard_normal(d),
        "wv": rng.standard_normal((d, d)), "bv": rng.standard_normal(d),
        "wo": rng.standard_normal((d, d)), "bo": rng.standard_normal(d),
    }


def _mha(x, w, heads):
    tw = {k: Tensor(v) for k, v in w.items()}
    return nn.multi_head_attention(Tensor(x), tw["wq"], tw["bq"], tw["wk"], tw["bk"], tw["wv"], tw["bv"],
                                   tw["wo"], tw["bo"], heads).data


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_naive_loops(heads):
    rng = np.random.default_rng(heads)
    x, w = rng.standard_normal((3, 4)), _weights(rng, 4)
    np.testing.assert_allclose(_mha(x, w, heads), naive_attention(x, w, heads), atol=1e-10)


def test_attention_single_token_and_duplicates():
    rng = np.random.default_rng(1)
    w = _weights(rng, 4)
    x = rng.standard_normal((1, 4))
    expected = (x @ w["wv"] + w["bv"]) @ w["wo"] + w["bo"]
    np.testing.assert_allclose(_mha(x, w, 2), expected, atol=1e-12)
    dup = np.repeat(x, 2, axis=0)
    out = _mha(dup, w, 2)
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_rejects_indivisible_heads():
    rng = np.random.default_rng(0)
    with pytest.raises(nn.ConfigError):
        _mha(rng.standard_normal((2, 6)), _weights(rng, 6), 4)


# -- backward -----------------------------------------------------------------

def test_backward_analytic_cases():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)
    A = np.arange(6.0).reshape(2, 3)
    y = Tensor(np.ones((3, 1)), requires_grad=True)
    T.matmul(Tensor(A), y).sum().backward()
    np.testing.assert_array_equal(y.grad[:, 0], A.sum(axis=0))


def test_backward_accumulates_and_rejects_nonscalar():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)
    (x * 1.0).sum().backward()
    assert x.grad[0] == pytest.approx(8.0)
    with pytest.raises(ContractError):
        T.concat([x, x], axis=0).backward()


UNARY = {
    "exp": lambda a: T.exp(a * 0.3),
    "log": lambda a: T.log(a * a + 1.0),
    "sqrt": lambda a: T.sqrt(a * a + 0.5),
    "gelu": T.gelu,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "abs": T.absolute,
    "huber": lambda a: T.huber(a * 2.0),
    "pow": lambda a: T.power(a * a + 1.0, 1.5),
    "softmax": lambda a: T.softmax_rows(a),
    "log_softmax": lambda a: T.log_softmax(a),
    "transpose": lambda a: T.transpose(a) * 1.0,
    "reshape": lambda a: a.reshape(-1) * 1.0,
    "getitem": lambda a: a[1:, ::2] * 2.0,
    "mean": lambda a: a.mean(axis=-1),
    "div": lambda a: a / (a * a + 1.0),
    "concat": lambda a: T.concat([a, a * 2.0], axis=0),
    "stack": lambda a: T.stack([a, a * a], axis=1),
}

SHAPES = [(3, 4), (2, 5), (4, 6)]


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    op = UNARY[name]
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        shape = SHAPES[seed % len(SHAPES)]
        x = t64(rng, *shape)
        w = Tensor(rng.standard_normal(op(Tensor(x.data)).shape))
        worst = max(worst, check_gradients(lambda: (op(x) * w).sum(), [x]))
    assert worst < 1e-4


def test_binary_and_fused_gradients():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(100 + seed)
        m, k, n = SHAPES[seed % 3][0], SHAPES[seed % 3][1], 3
        a, b, bias = t64(rng, m, k), t64(rng, k, n), t64(rng, n)
        gain, beta = t64(rng, k), t64(rng, k)
        w = Tensor(rng.standard_normal((m, n)))
        worst = max(worst, check_gradients(lambda: ((T.matmul(a, b) + bias) * w).sum(), [a, b, bias]))
        worst = max(worst, check_gradients(lambda: (T.layer_norm(a, gain, beta) ** 2).sum(), [a, gain, beta]))
        c = t64(rng, m, k)
        worst = max(worst, check_gradients(lambda: (a * c - a / (c * c + 1.0)).sum(), [a, c]))
        cond = rng.random((m, k)) > 0.5
        worst = max(worst, check_gradients(lambda: (T.where(cond, a, c) ** 2).sum(), [a, c]))
    assert worst < 1e-4


def test_attention_and_block_gradients():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(200 + seed)
        s, d, heads = [(3, 4, 2), (5, 8, 4), (4, 6, 3)][seed % 3]
        blk = nn.Block(rng, d, heads, dtype=np.float64)
        for p in blk.parameters():
            p.data = rng.standard_normal(p.shape) * 0.3
        x = t64(rng, s, d)
        w = Tensor(rng.standard_normal((s, d)))
        worst = max(worst, check_gradients(lambda: (blk(x) * w).sum(), [x] + blk.parameters(), max_coords=8, rng=rng))
    assert worst < 1e-4


def test_conv2d_gradients():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(300 + seed)
        stride, pad = [(1, 1), (2, 1), (2, 0)][seed % 3]
        x, wt, b = t64(rng, 2, 6, 6), t64(rng, 3, 2, 3, 3), t64(rng, 3)
        out_shape = T.conv2d(x, wt, b, stride, pad).shape
        g = Tensor(rng.standard_normal(out_shape))
        worst = max(worst, check_gradients(lambda: (T.conv2d(x, wt, b, stride, pad) * g).sum(), [x, wt, b]))
    assert worst < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    expected = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[o, i, j] = (xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


# -- optimizer and schedule -------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    st_ = OptimizerState.for_params(p)
    adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
    assert st_.step == 1


def test_adam_first_step_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    adam_step(p, {"w": g}, OptimizerState.for_params(p), lr=0.01)
    np.testing.assert_allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-6)


def test_adam_minimizes_quadratic_against_scalar_recursion():
    x = Tensor(np.array([0.0]), requires_grad=True)
    st_ = OptimizerState.for_params({"x": x})
    xs, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        adam_step({"x": x}, {"x": 2 * (x.data - 3.0)}, st_, lr=0.1)
        g = 2 * (xs - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(x.data[0] - 3.0) < 0.5
    assert x.data[0] == pytest.approx(xs, abs=1e-12)


def test_adam_is_deterministic_and_checks_shapes():
    def run():
        p = {"w": Tensor(np.linspace(-1, 1, 5), requires_grad=True)}
        s = OptimizerState.for_params(p)
        for k in range(10):
            adam_step(p, {"w": np.sin(p["w"].data * (k + 1))}, s, 0.05)
        return p["w"].data.tobytes(), s.first_moment["w"].tobytes(), s.second_moment["w"].tobytes()

    assert run() == run()
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.zeros(4)}, OptimizerState.for_params(p), 0.1)


def test_lr_schedule_shape():
    cfg = ScheduleConfig(warmup_steps=100, total_steps=1000, lr_peak=1e-4)
    assert lr_at_step(0, cfg) == 0.0
    assert lr_at_step(100, cfg) == pytest.approx(1e-4)
    assert lr_at_step(1000, cfg) == 0.0
    assert lr_at_step(5000, cfg) == 0.0
    # continuous at the warmup boundary: both one-step neighbours are within one warmup increment
    assert abs(lr_at_step(99, cfg) - 1e-4) <= 1e-6 + 1e-12
    assert abs(lr_at_step(101, cfg) - 1e-4) <= 1e-6
    assert ScheduleConfig.from_total(1000).warmup_steps == 100
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=10, total_steps=10)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.gelu(x * 2.0 + 1.0) / 3.0
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32
