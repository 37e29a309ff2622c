import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvlab.autodiff import (
    ComputationGraph,
    Tensor,
    activation_and_slope,
    backward,
    cross_entropy,
    finite_diff_grad,
    floor_probs,
    kl_divergence,
    kl_from_log_probs,
    log_softmax_temp,
    patch_pool,
    relative_error,
    softmax_temp,
)
from mvlab.errors import (
    ContractError,
    DivergenceUndefinedError,
    InvalidInputError,
    InvalidParameterError,
)

finite = st.floats(-30, 30, allow_nan=False)
logit_vectors = arrays(np.float64, st.integers(2, 8), elements=finite)


def prob_vector(draw_size=st.integers(2, 8)):
    return arrays(np.float64, draw_size, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())


# -- softmax -----------------------------------------------------------------


@given(st.floats(-100, 100), st.integers(2, 10))
def test_softmax_of_constant_logits_is_uniform(c, k):
    p = softmax_temp(np.full(k, c)).data
    assert np.allclose(p, 1.0 / k, atol=1e-15)


def test_softmax_known_values():
    p = softmax_temp([1.0, 2.0]).data
    assert p == pytest.approx([math.e / (math.e + math.e**2), math.e**2 / (math.e + math.e**2)], abs=1e-12)
    assert p == pytest.approx([0.26894, 0.73106], abs=1e-5)
    assert np.allclose(softmax_temp([2.0, 4.0], 2.0).data, p, atol=1e-15)


@given(logit_vectors, st.floats(0.05, 50))
def test_softmax_is_distribution(logits, tau):
    p = softmax_temp(logits, tau).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(np.exp(log_softmax_temp(logits, tau).data), p, atol=1e-12)


@given(logit_vectors, st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(logits, c):
    assert np.allclose(softmax_temp(logits).data, softmax_temp(logits + c).data, atol=1e-9)


def test_softmax_errors():
    with pytest.raises(InvalidParameterError):
        softmax_temp([1.0, 2.0], 0.0)
    with pytest.raises(InvalidParameterError):
        softmax_temp([1.0, 2.0], -1.0)
    with pytest.raises(InvalidInputError):
        softmax_temp([1.0, np.nan])
    with pytest.raises(InvalidInputError):
        softmax_temp([np.inf, 0.0])


def test_large_temperature_is_uniform():
    assert np.allclose(softmax_temp([1.0, 5.0, -3.0], 1e6).data, 1 / 3, atol=1e-4)


# -- KL and cross-entropy ----------------------------------------------------


def test_kl_known_values():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-15)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.143841, abs=1e-5)
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


@given(prob_vector())
def test_kl_self_is_zero(p):
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)


@given(st.integers(2, 8).flatmap(lambda n: st.tuples(prob_vector(st.just(n)), prob_vector(st.just(n)))))
def test_kl_nonnegative_and_matches_log_form(pq):
    p, q = pq
    value = kl_divergence(p, q)
    assert value >= 0
    batched = kl_from_log_probs(Tensor(np.log(p)), Tensor(np.log(q))).item()
    assert batched == pytest.approx(value, rel=1e-9, abs=1e-12)


def test_kl_undefined_and_floor():
    with pytest.raises(DivergenceUndefinedError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])
    q = floor_probs([1.0, 0.0])
    assert np.all(q > 0) and q.sum() == pytest.approx(1.0)
    assert math.isfinite(kl_divergence([0.5, 0.5], q))
    with pytest.raises(InvalidInputError):
        kl_divergence([0.6, 0.6], [0.5, 0.5])
    with pytest.raises(ContractError):
        kl_divergence([1.0], [0.5, 0.5])


def test_cross_entropy_known_values():
    assert cross_entropy([0.0, 0.0], 0).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy([50.0, 0.0], 0).item() < 1e-20
    assert cross_entropy([1.0, 2.0], 1).item() == pytest.approx(-math.log(0.7310585786300049), abs=1e-12)
    with pytest.raises(IndexError):
        cross_entropy([1.0, 2.0], 2)
    with pytest.raises(IndexError):
        cross_entropy([[1.0, 2.0]], [-1])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite), st.data())
def test_batched_cross_entropy_is_mean(logits, data):
    y = np.array(data.draw(st.lists(st.integers(0, logits.shape[1] - 1), min_size=len(logits), max_size=len(logits))))
    per = [cross_entropy(row, t).item() for row, t in zip(logits, y)]
    assert cross_entropy(logits, y).item() == pytest.approx(np.mean(per), rel=1e-12, abs=1e-12)


# -- tape --------------------------------------------------------------------


def test_square_gradient():
    w = Tensor(3.0, requires_grad=True)
    (g,) = backward(w * w, [w])
    assert g == pytest.approx(6.0)


def test_constant_gradient_is_zero():
    w = Tensor(np.ones(4), requires_grad=True)
    out = Tensor(5.0) * 2.0
    (g,) = backward(out, [w])
    assert np.array_equal(g, np.zeros(4))


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0, [w])


def test_tensors_are_immutable():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_shared_subexpression_accumulates():
    w = Tensor(2.0, requires_grad=True)
    u = w * w
    (g,) = backward(u + u * w, [w])  # d/dw (w^2 + w^3) = 2w + 3w^2
    assert g == pytest.approx(2 * 2 + 3 * 4)


def test_toposort_orders_inputs_first_and_visits_once():
    a = Tensor(np.ones(3), requires_grad=True)
    b = (a * 2.0).exp()
    out = (b * a + b).sum()
    nodes = ComputationGraph(out).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    assert len(pos) == len(nodes)
    for n in nodes:
        for parent in n._parents:
            assert pos[id(parent)] < pos[id(n)]


def test_tensor_backward_populates_grad():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ((w * w).sum()).backward()
    assert np.allclose(w.grad, [2.0, -4.0])


def _two_layer(rng):
    W1 = rng.normal(size=(3, 4))
    W2 = rng.normal(size=(2, 3))
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 2, 5)
    return W1, W2, x, y


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    W1, W2, x, y = _two_layer(rng)  # 18 weights plus 2 biases
    b = rng.normal(size=2)

    def loss_of(w1, w2, bias):
        h = (Tensor(x) @ w1.T).smooth_relu()
        return cross_entropy(h @ w2.T + bias, y)

    leaves = [Tensor(a, requires_grad=True) for a in (W1, W2, b)]
    analytic = np.concatenate([g.ravel() for g in backward(loss_of(*leaves), leaves)])
    sizes = [W1.size, W2.size, b.size]

    def f(vec):
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return loss_of(Tensor(parts[0].reshape(W1.shape)), Tensor(parts[1].reshape(W2.shape)), Tensor(parts[2])).item()

    numeric = finite_diff_grad(f, np.concatenate([W1.ravel(), W2.ravel(), b]))
    assert relative_error(analytic, numeric) <= 1e-6


OPS = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "div": lambda t: 1.0 / (t * t + 1.0),
    "pow": lambda t: (t * t + 0.5) ** 1.5,
    "sub": lambda t: 2.0 - t * 3.0,
    "mean": lambda t: t.mean(axis=0, keepdims=True) * t,
    "log_softmax": lambda t: t.log_softmax(axis=-1),
    "softmax": lambda t: t.softmax(axis=-1),
    "transpose": lambda t: t.T @ Tensor(np.ones((t.shape[0], 2))),
    "reshape": lambda t: t.reshape(-1) * 2.0,
    "smooth_relu": lambda t: (t * 2.0).smooth_relu(),
    "take_last": lambda t: t.take_last(np.zeros(t.shape[0], dtype=np.int64)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    op = OPS[name]
    rng = np.random.default_rng(sorted(OPS).index(name))
    x0 = rng.normal(size=(3, 4))
    weights = rng.normal(size=op(Tensor(x0)).shape)

    def f(x):
        return (op(Tensor(x)) * weights).sum().item()

    t = Tensor(x0, requires_grad=True)
    (g,) = backward((op(t) * weights).sum(), [t])
    assert relative_error(g, finite_diff_grad(f, x0)) <= 1e-6


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(1, 5),
       st.sampled_from(["relu", "smooth_relu"]), st.integers(0, 2**31))
def test_patch_pool_matches_unfused_ops(B, P, d, m, activation, seed):
    rng = np.random.default_rng(seed)
    X, W = rng.normal(size=(B, P, d)), rng.normal(size=(m, d))
    fused = patch_pool(X, W, activation).data
    act, _ = activation_and_slope(np.einsum("bpd,md->bpm", X, W), activation)
    assert np.allclose(fused, act.sum(axis=1), atol=1e-12)


def test_patch_pool_gradients():
    rng = np.random.default_rng(5)
    X, W = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4))
    g_out = rng.normal(size=(2, 5))
    Xt, Wt = Tensor(X, requires_grad=True), Tensor(W, requires_grad=True)
    gX, gW = backward((patch_pool(Xt, Wt, "smooth_relu") * g_out).sum(), [Xt, Wt])
    fX = finite_diff_grad(lambda x: float((patch_pool(x, W, "smooth_relu").data * g_out).sum()), X)
    fW = finite_diff_grad(lambda w: float((patch_pool(X, w, "smooth_relu").data * g_out).sum()), W)
    assert relative_error(gX, fX) <= 1e-6
    assert relative_error(gW, fW) <= 1e-6


def test_smooth_relu_values():
    z = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    act, slope = activation_and_slope(z, "smooth_relu")
    assert np.allclose(act, [0.0, 0.0, 0.125 / 3, 1 / 3, 2 - 2 / 3])
    assert np.allclose(slope, [0.0, 0.0, 0.25, 1.0, 1.0])
    with pytest.raises(InvalidParameterError):
        activation_and_slope(z, "tanh")


def test_matmul_shape_contract():
    with pytest.raises(ContractError):
        Tensor(np.ones(3)) @ Tensor(np.ones(3))


# -- finite differences ------------------------------------------------------


def test_finite_diff_examples():
    assert finite_diff_grad(lambda w: float(w[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-9)
    assert finite_diff_grad(lambda w: math.sin(w[0]), np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-8)
    assert np.array_equal(finite_diff_grad(lambda w: 7.0, np.zeros(3)), np.zeros(3))


def test_finite_diff_errors():
    with pytest.raises(InvalidInputError):
        finite_diff_grad(lambda w: float("nan"), np.zeros(2))
    with pytest.raises(InvalidParameterError):
        finite_diff_grad(lambda w: 0.0, np.zeros(2), h=0.0)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
