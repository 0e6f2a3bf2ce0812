import time

import numpy as np
import pytest

from optfs import autodiff as ad
from optfs.errors import NumericError, ShapeError

from conftest import MODELS, randomize, search_loss, toy_batch, toy_model
from optfs.gating import GateState


def grad_of(fn, *tensors):
    with ad.Tape() as tape:
        out = fn(*tensors)
    return tape.backward(out, list(tensors))


def test_sigmoid_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a)).data, a)


def test_batch_norm_zero_variance_uses_eps():
    x = np.full((4, 2), 3.0)
    w, b = np.array([2.0, 1.0]), np.array([0.5, -1.0])
    out = ad.batch_norm(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), np.zeros(2), np.ones(2), True)
    # (x - mean) / sqrt(0 + eps) * w + b with x == mean
    expected = (x - 3.0) / np.sqrt(0.0 + 1e-5) * w + b
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.data, expected)


def test_batch_norm_eval_uses_running_stats():
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 9.0])
    x = np.array([[3.0, 5.0]])
    out = ad.batch_norm(ad.Tensor(x), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), rm, rv, False)
    np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + 1e-5), rtol=0, atol=1e-15)


def test_batch_norm_running_update():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 3))
    rm, rv = np.zeros(3), np.ones(3)
    ad.batch_norm(ad.Tensor(x), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0), atol=1e-15)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1), atol=1e-15)


def test_square_gradient():
    x = ad.Tensor(3.0, requires_grad=True)
    assert grad_of(lambda a: a * a, x)[x] == 6.0


def test_sigmoid_gradient_closed_form():
    v = np.linspace(-4, 4, 9)
    x = ad.Tensor(v, requires_grad=True)
    g = grad_of(lambda a: ad.sum(ad.sigmoid(a)), x)[x]
    s = 1 / (1 + np.exp(-v))
    np.testing.assert_allclose(g, s * (1 - s), rtol=1e-14)


def test_fan_out_accumulates():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = grad_of(lambda a: ad.sum(a + a), x)[x]
    np.testing.assert_array_equal(g, [2.0, 2.0])


def test_unreached_param_gets_zero_gradient():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.sum(x)
    grads = tape.backward(out, [x, y])
    np.testing.assert_array_equal(grads[y], np.zeros(2))


def test_backward_twice_raises():
    x = ad.Tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        out = x * x
    tape.backward(out, [x])
    with pytest.raises(RuntimeError):
        tape.backward(out, [x])


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        out = x * x
    with pytest.raises(Exception):
        tape.backward(out, [x])


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="add"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))


def test_nan_trips_numeric_error():
    with pytest.raises(NumericError):
        ad.div(ad.Tensor(np.array([0.0])), ad.Tensor(np.array([0.0])))


def test_lookup_rows_scatter_add():
    table = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    idx = np.array([[0, 2], [2, 2]])
    g = grad_of(lambda t: ad.sum(ad.lookup_rows(t, idx)), table)[table]
    np.testing.assert_array_equal(g, [[1, 1], [0, 0], [3, 3]])


def test_pairwise_inner_matches_loop():
    e = np.random.default_rng(0).normal(size=(5, 4, 3))
    out = ad.pairwise_inner(ad.Tensor(e)).data
    ref = [[e[b, i] @ e[b, j] for i in range(4) for j in range(i + 1, 4)] for b in range(5)]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)


def test_determinism_serial():
    idx, labels = toy_batch()

    def run():
        model = randomize(toy_model("deepfm"))
        gates = GateState.create(12, 1e3, 10, 1e-3)
        gates.set_epoch(3)
        with ad.Tape() as tape:
            loss = search_loss(model, gates, idx, labels)
        grads = tape.backward(loss, list(model.params.values()) + [gates.g_c])
        return loss.item(), [grads[p].copy() for p in list(model.params.values()) + [gates.g_c]]

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


def finite_difference_errors(name: str, h: float = 1e-4) -> dict[str, float]:
    """Max relative error of every parameter's gradient vs central differences.

    Relative error is |a - n| / max(|a|, |n|, 1e-6); the floor keeps
    near-zero entries from turning rounding noise into huge ratios.
    """
    idx, labels = toy_batch()
    model = randomize(toy_model(name), seed=11, scale=0.4)
    gates = GateState.create(12, 1e3, 10, lam=1e-2,
                             init=np.random.default_rng(5).normal(0, 0.3, size=12))
    gates.g_c.data = gates.g_c.data + np.random.default_rng(6).normal(0, 0.1, size=12)
    gates.set_epoch(3)
    params = dict(model.params, g_c=gates.g_c)
    with ad.Tape() as tape:
        loss = search_loss(model, gates, idx, labels)
    grads = tape.backward(loss, list(params.values()))

    errors = {}
    for name_p, p in params.items():
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = search_loss(model, gates, idx, labels).item()
            flat[i] = orig - h
            down = search_loss(model, gates, idx, labels).item()
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * h)
        a = grads[p]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        errors[name_p] = float(np.max(np.abs(a - num) / denom))
    return errors


@pytest.mark.parametrize("name", MODELS)
def test_finite_differences(name):
    start = time.perf_counter()
    errors = finite_difference_errors(name)
    assert time.perf_counter() - start < 10
    assert "g_c" in errors
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])
