import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optfs import autodiff as ad
from optfs.errors import ConfigError, DataError
from optfs.gating import (BinaryGate, GateState, discretize, effective_gate, l1_penalty, limit_gate,
                          run_length_decode, run_length_encode, temperature)

mpmath.mp.dps = 50


def mp_sigmoid(x):
    return 1 / (1 + mpmath.exp(-mpmath.mpf(x)))


def test_temperature_endpoints_exact():
    assert temperature(0, 10, 1e3) == 1.0
    assert temperature(10, 10, 1e3) == 1e3
    assert temperature(7, 7, 2e2) == 2e2


def test_temperature_midpoint():
    assert temperature(5, 10, 1e4) == pytest.approx(100.0, rel=1e-15)


@pytest.mark.parametrize("gamma", [1.0, 0.5, -3.0])
def test_temperature_rejects_small_gamma(gamma):
    with pytest.raises(ConfigError):
        temperature(0, 10, gamma)


def test_temperature_rejects_out_of_range_epoch():
    with pytest.raises(ConfigError):
        temperature(11, 10, 1e3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30))
def test_start_at_one_exact(init):
    state = GateState.create(len(init), 1e3, 10, init=np.array(init))
    assert np.all(effective_gate(state).data == 1.0)


def test_gate_limit_against_high_precision():
    g = 0.01
    state = GateState.create(1, 1e4, 10, init=g)
    state.set_epoch(10)
    expected = mp_sigmoid(mpmath.mpf("0.01") * 10000) / mp_sigmoid(mpmath.mpf("0.01"))
    assert effective_gate(state).data[0] == pytest.approx(float(expected), rel=1e-14)
    assert float(expected) == pytest.approx(1 / 0.5025, rel=1e-4)
    assert limit_gate(g) == pytest.approx(float(1 / mp_sigmoid(mpmath.mpf("0.01"))), rel=1e-15)


@pytest.mark.parametrize("gamma", [1e3, 5e3, 1e4])
@pytest.mark.parametrize("g_c", [-0.05, -0.1, -1.0])
def test_negative_gate_vanishes(gamma, g_c):
    state = GateState.create(1, gamma, 10, init=0.01)
    state.g_c.data[:] = g_c
    state.set_epoch(10)
    value = effective_gate(state).data[0]
    oracle = mp_sigmoid(mpmath.mpf(g_c) * mpmath.mpf(gamma)) / mp_sigmoid(mpmath.mpf("0.01"))
    assert value == pytest.approx(float(oracle), rel=1e-12)
    assert value < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2, allow_nan=False).filter(lambda v: v != 0), st.floats(-1, 1, allow_nan=False))
def test_sign_monotonicity(g_c, init):
    state = GateState.create(1, 1e3, 10, init=init)
    state.g_c.data[:] = g_c
    values = []
    for t in range(11):
        state.set_epoch(t)
        values.append(effective_gate(state).data[0])
    diffs = np.diff(values)
    if g_c < 0:
        assert np.all(diffs <= 0)
    else:
        assert np.all(diffs >= 0)


@pytest.mark.parametrize("gamma", [200, 1e3, 1e4])
def test_dropped_gates_head_to_zero(gamma):
    init = np.linspace(-1, 1, 9)
    state = GateState.create(9, gamma, 10, init=init)
    state.g_c.data = np.linspace(-2, -0.01, 9)
    state.set_epoch(10)
    bound = 0.5 / (1 / (1 + np.exp(-init)))
    assert np.all(effective_gate(state).data < bound)
    # g_c exactly 0 sits on the bound: sigma(0) = 0.5 for every tau
    state.g_c.data = np.zeros(9)
    np.testing.assert_allclose(effective_gate(state).data, bound, rtol=1e-15)


def test_denominator_has_no_gradient_and_init_frozen():
    state = GateState.create(4, 1e3, 10, init=0.3)
    with pytest.raises(ValueError):
        state.g_c_init[0] = 1.0
    state.set_epoch(2)
    with ad.Tape() as tape:
        loss = ad.sum(effective_gate(state))
    grads = tape.backward(loss, [state.g_c])
    tau = state.tau
    s = 1 / (1 + np.exp(-0.3 * tau))
    np.testing.assert_allclose(grads[state.g_c], tau * s * (1 - s) / (1 / (1 + np.exp(-0.3))), rtol=1e-13)


def test_l1_penalty_values():
    g = ad.Tensor(np.array([1.0, 0.0, 1.0, 1.0]))
    assert l1_penalty(g, 0.0).item() == 0.0
    assert l1_penalty(g, 0.5).item() == 0.5 * 3
    with pytest.raises(ConfigError):
        l1_penalty(g, -1.0)


def test_l1_gradient_finite_differences():
    rng = np.random.default_rng(0)
    state = GateState.create(5, 1e3, 10, lam=0.7, init=rng.normal(0, 0.2, 5))
    state.g_c.data = rng.normal(0, 0.2, 5)
    state.set_epoch(4)
    with ad.Tape() as tape:
        loss = l1_penalty(effective_gate(state), state.lam)
    grad = tape.backward(loss, [state.g_c])[state.g_c]
    h = 1e-6
    num = np.zeros(5)
    for i in range(5):
        state.g_c.data[i] += h
        up = l1_penalty(effective_gate(state), state.lam).item()
        state.g_c.data[i] -= 2 * h
        down = l1_penalty(effective_gate(state), state.lam).item()
        state.g_c.data[i] += h
        num[i] = (up - down) / (2 * h)
    np.testing.assert_allclose(grad, num, rtol=1e-7)


def test_discretize_boundary():
    state = GateState.create(3, 1e3, 10)
    state.g_c.data = np.array([-0.3, 0.0, 0.2])
    mask = discretize(state)
    assert mask.bits.tolist() == [0, 0, 1]
    state.g_c.data = np.array([0.1, 0.2, 0.3])
    assert discretize(state).ratio == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
def test_binary_l0_equals_l1_and_rle_roundtrip(bits):
    arr = np.array(bits, dtype=np.float64)
    assert np.count_nonzero(arr) == np.abs(arr).sum()
    assert run_length_decode(run_length_encode(bits)).tolist() == bits
    mask = BinaryGate(np.array(bits), "h")
    assert mask.ratio == sum(bits) / len(bits)
    assert l1_penalty(mask.as_tensor(), 1.0).item() == sum(bits)


def test_mask_json_roundtrip(tmp_path):
    mask = BinaryGate(np.array([1, 1, 0, 0, 0, 1]), "abc", {"gamma": 1e3, "T": 10, "lambda": 1e-6, "seed": 0})
    mask.save(tmp_path / "mask.json")
    doc = json.loads((tmp_path / "mask.json").read_text())
    assert set(doc) == {"vocabulary_hash", "m", "bits", "ratio", "search_config"}
    assert doc["bits"] == [[1, 2], [0, 3], [1, 1]]
    back = BinaryGate.load(tmp_path / "mask.json")
    assert back.bits.tolist() == mask.bits.tolist() and back.vocab_hash == "abc"


def test_mask_json_length_mismatch():
    with pytest.raises(DataError):
        BinaryGate.from_json({"m": 3, "bits": [[1, 2]], "vocabulary_hash": ""})


def test_binary_gate_is_immutable():
    mask = BinaryGate(np.array([1, 0]))
    with pytest.raises(ValueError):
        mask.bits[0] = 0
