from dataclasses import replace

import numpy as np
import pytest

from optfs import autodiff as ad
from optfs.errors import ConfigError, HashMismatchError, NumericError
from optfs.gating import BinaryGate, GateState, effective_gate, l1_penalty
from optfs.models import CTRModel, ModelConfig
from optfs.trainer import (RANDOM_INIT_OFFSET, Adam, TrainConfig, TrainSnapshot, adam_step, early_stop,
                           fit, history_csv, retrain, search)

CFG = TrainConfig(learning_rate=1e-2, epochs=4, rewind_epoch=2, batch_size=256, lam=1e-4,
                  retrain_epochs=3)


@pytest.fixture(scope="module")
def setup(small_synthetic):
    _, prepared = small_synthetic
    mcfg = ModelConfig("deepfm", prepared.vocab.m, prepared.vocab.n, 4, mlp_dims=(8, 4),
                       vocab_hash=prepared.vocab.hash)
    return prepared, mcfg


def run_search(prepared, mcfg, cfg=CFG, capture=None):
    model = CTRModel(mcfg, cfg.seed)
    gates = GateState.create(mcfg.m, cfg.gamma, cfg.epochs, cfg.lam, cfg.gate_init)
    return search(prepared.train, prepared.valid, model, gates, cfg, capture)


@pytest.fixture(scope="module")
def searched(setup):
    prepared, mcfg = setup
    return run_search(prepared, mcfg)


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [dict(rewind_epoch=0), dict(rewind_epoch=4), dict(lam=-1.0),
                                dict(batch_size=0), dict(gamma=1.0), dict(epochs=1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        replace(CFG, **kw).validate()


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1, "bogus": 1})


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_no_move():
    p = np.array([1.0, -2.0])
    adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_single_step_closed_form():
    p, m, v = np.array([0.5]), np.zeros(1), np.zeros(1)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    adam_step(p, np.array([1.0]), m, v, 1, lr, 0.0, b1, b2, eps)
    m_hat = (1 - b1) * 1.0 / (1 - b1)
    v_hat = (1 - b2) * 1.0 / (1 - b2)
    assert p[0] == pytest.approx(0.5 - lr * m_hat / (np.sqrt(v_hat) + eps), abs=1e-15)


def test_adam_l2_skips_gates():
    w = ad.Tensor(np.ones(3), True)
    g_c = ad.Tensor(np.ones(3), True)
    opt = Adam({"w": w, "g_c": g_c}, 0.1, l2_reg=0.5)
    opt.step({w: np.zeros(3), g_c: np.zeros(3)})
    assert np.all(w.data < 1.0)
    np.testing.assert_array_equal(g_c.data, np.ones(3))


def test_l1_reaches_only_gates(setup):
    prepared, mcfg = setup
    model = CTRModel(mcfg, 0)
    gates = GateState.create(mcfg.m, 1e3, 4, lam=0.3)
    gates.set_epoch(1)
    params = list(model.params.values()) + [gates.g_c]
    with ad.Tape() as tape:
        g = effective_gate(gates)
        model.logits(prepared.train.indices[:16], g, training=True)
        loss = l1_penalty(g, gates.lam)
    grads = tape.backward(loss, params)
    for p in model.params.values():
        assert not np.any(grads[p]), p.name
    assert np.all(grads[gates.g_c] > 0)


# ---------------------------------------------------------------- early stopping

def test_early_stop_rules():
    assert early_stop([0.6, 0.7, 0.8], 1) == (False, 3)
    assert early_stop([0.7, 0.72, 0.71, 0.70], 2) == (True, 2)
    assert early_stop([0.7, 0.72, 0.71], 2) == (False, 2)
    assert early_stop([0.7, 0.72, 0.72], 1)[1] == 2


# ---------------------------------------------------------------- search

def test_start_at_one_first_forward_equals_backbone(setup):
    prepared, mcfg = setup
    model = CTRModel(mcfg, 3)
    gates = GateState.create(mcfg.m, 1e3, 4, lam=0.0, init=np.linspace(-1, 1, mcfg.m))
    idx = prepared.train.indices[:64]
    gated = model.logits(idx, effective_gate(gates), training=True).data
    plain = CTRModel(mcfg, 3).logits(idx, None, training=True).data
    np.testing.assert_array_equal(gated, plain)


def test_search_runs_full_epochs_and_reports(searched):
    h = searched.history
    assert [r.epoch for r in h] == [1, 2, 3, 4]
    for r in h:
        assert abs(r.train_loss - (r.ce_loss + r.l1_loss)) <= 1e-12
        assert 0 <= r.soft_ratio <= 1
    assert set(searched.snapshots) == {2}
    assert searched.snapshot.epoch == 2
    assert searched.mask.search_config == {"gamma": 1e3, "T": 4, "lambda": 1e-4, "seed": 0}


def test_search_determinism(setup, searched):
    prepared, mcfg = setup
    again = run_search(prepared, mcfg)
    np.testing.assert_array_equal(again.mask.bits, searched.mask.bits)
    assert history_csv(again.history) == history_csv(searched.history)


def test_search_needs_fresh_gates(setup):
    prepared, mcfg = setup
    gates = GateState.create(mcfg.m, 1e3, 4)
    gates.set_epoch(1)
    with pytest.raises(ConfigError):
        search(prepared.train, prepared.valid, CTRModel(mcfg), gates, CFG)


def test_noise_gates_driven_negative(small_synthetic):
    syn, prepared = small_synthetic
    from optfs.data import informative_indices
    mcfg = ModelConfig("fm", prepared.vocab.m, prepared.vocab.n, 4, vocab_hash=prepared.vocab.hash)
    res = run_search(prepared, mcfg, replace(CFG, epochs=6, lam=1e-3))
    info = informative_indices(syn, prepared.vocab)
    noise = np.setdiff1d(np.setdiff1d(np.arange(mcfg.m), info), prepared.vocab.oov_index)
    assert res.mask.bits[info].mean() > res.mask.bits[noise].mean()


def test_nan_abort_reports_coordinates(setup):
    prepared, mcfg = setup
    model = CTRModel(mcfg, 0)
    model.params["embedding"].data[:] = np.inf
    gates = GateState.create(mcfg.m, 1e3, 4)
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        search(prepared.train, prepared.valid, model, gates, CFG)


def test_fractional_epoch_mode_moves_tau(setup):
    prepared, mcfg = setup
    taus = []
    gates = GateState.create(mcfg.m, 1e3, 2)
    orig = gates.set_epoch

    def spy(t):
        taus.append(t)
        orig(t)
    gates.set_epoch = spy
    cfg = replace(CFG, epochs=2, rewind_epoch=1, fractional_epoch=True, batch_size=1000)
    search(prepared.train, prepared.valid, CTRModel(mcfg), gates, cfg)
    assert taus[:4] == [0, 0.0, 1 / 3, 2 / 3]


# ---------------------------------------------------------------- snapshot and retrain

def test_snapshot_roundtrip(tmp_path, searched, setup):
    prepared, _ = setup
    searched.snapshot.save(tmp_path / "s.bin")
    back = TrainSnapshot.load(tmp_path / "s.bin", prepared.vocab.hash)
    assert back.epoch == 2 and back.config_hash == searched.snapshot.config_hash
    for k, v in searched.snapshot.model_state.items():
        np.testing.assert_array_equal(back.model_state[k], v)
    assert not any(k.endswith("/g_c") for k in back.optimizer_state)
    with pytest.raises(HashMismatchError):
        TrainSnapshot.load(tmp_path / "s.bin", "0" * 64)


def test_snapshot_immutable_and_shared_start(setup, searched):
    prepared, mcfg = setup
    snap = searched.snapshot
    before = {k: v.copy() for k, v in snap.model_state.items()}
    cfg = replace(CFG, retrain_epochs=1)
    ones = BinaryGate(np.ones(mcfg.m), prepared.vocab.hash)
    retrain(prepared.train, prepared.valid, searched.mask, snap, cfg, mcfg, "co")
    retrain(prepared.train, prepared.valid, ones, snap, cfg, mcfg, "co")
    for k, v in snap.model_state.items():
        np.testing.assert_array_equal(v, before[k])
        assert not v.flags.writeable


def test_identity_mask_equals_finetune(setup, searched):
    prepared, mcfg = setup
    ones = BinaryGate(np.ones(mcfg.m), prepared.vocab.hash)
    r = retrain(prepared.train, prepared.valid, ones, searched.snapshot, CFG, mcfg, "co")

    model = CTRModel(mcfg, CFG.seed)
    model.load_state_dict(searched.snapshot.model_state)
    opt = Adam(dict(model.params), CFG.learning_rate)
    opt.load_state_dict(searched.snapshot.optimizer_state)
    fit(model, prepared.train, prepared.valid, None, CFG, opt)
    np.testing.assert_array_equal(r.model.predict(prepared.test.indices), model.predict(prepared.test.indices))


def test_snapshot_two_path_forward(setup, searched):
    """Loaded snapshot params under a gate == params with the gate folded into E and w."""
    prepared, mcfg = setup
    snap = searched.snapshot
    idx = prepared.valid.indices[:200]
    gates = GateState.create(mcfg.m, CFG.gamma, CFG.epochs, init=CFG.gate_init)
    gates.g_c.data = np.array(snap.gate_values)
    gates.set_epoch(snap.epoch - 1)  # the temperature used during epoch T_c
    for gate in (effective_gate(gates).data, searched.mask.bits.astype(float)):
        a = CTRModel(mcfg)
        a.load_state_dict(snap.model_state)
        gated = a.logits(idx, ad.Tensor(gate)).data
        b = CTRModel(mcfg)
        b.load_state_dict(snap.model_state)
        b.params["embedding"].data = b.params["embedding"].data * gate[:, None]
        b.params["linear"].data = b.params["linear"].data * gate
        assert np.max(np.abs(gated - b.logits(idx).data)) <= 1e-12


def test_retrain_arms(setup, searched):
    prepared, mcfg = setup
    cfg = replace(CFG, retrain_epochs=1)
    wo = retrain(prepared.train, prepared.valid, searched.mask, None, cfg, mcfg, "wo",
                 search_final_state=searched.final_state)
    assert wo.best_epoch == 0 and wo.history == []
    np.testing.assert_array_equal(wo.model.params["embedding"].data,
                                  searched.final_state["param/embedding"])

    init = {}
    for arm in ("ri", "lth"):
        captured = {}
        orig = CTRModel.__init__

        def spy(self, config, seed=0):
            orig(self, config, seed)
            captured.setdefault("seed", seed)
            captured.setdefault("E", self.params["embedding"].data.copy())
        CTRModel.__init__ = spy
        try:
            retrain(prepared.train, prepared.valid, searched.mask, None, cfg, mcfg, arm)
        finally:
            CTRModel.__init__ = orig
        init[arm] = captured
    assert init["lth"]["seed"] == cfg.seed
    assert init["ri"]["seed"] == cfg.seed + RANDOM_INIT_OFFSET
    np.testing.assert_array_equal(init["lth"]["E"], CTRModel(mcfg, cfg.seed).params["embedding"].data)
    assert not np.array_equal(init["ri"]["E"], init["lth"]["E"])


def test_retrain_refuses_hash_mismatch(setup, searched):
    prepared, mcfg = setup
    foreign = BinaryGate(searched.mask.bits, "f" * 64)
    with pytest.raises(HashMismatchError):
        retrain(prepared.train, prepared.valid, foreign, searched.snapshot, CFG, mcfg, "co")
    short = BinaryGate(searched.mask.bits[:-1], prepared.vocab.hash)
    with pytest.raises(HashMismatchError):
        retrain(prepared.train, prepared.valid, short, searched.snapshot, CFG, mcfg, "co")
    other = replace(mcfg, embed_dim=6)
    with pytest.raises(HashMismatchError):
        retrain(prepared.train, prepared.valid, searched.mask, searched.snapshot, CFG, other, "co")


def test_reset_optimizer_flag_changes_trajectory(setup, searched):
    prepared, mcfg = setup
    cfg = replace(CFG, retrain_epochs=1)
    a = retrain(prepared.train, prepared.valid, searched.mask, searched.snapshot, cfg, mcfg, "co")
    b = retrain(prepared.train, prepared.valid, searched.mask, searched.snapshot,
                replace(cfg, reset_optimizer=True), mcfg, "co")
    assert not np.array_equal(a.model.params["embedding"].data, b.model.params["embedding"].data)


def test_retrain_early_stop_keeps_best(setup, searched):
    prepared, mcfg = setup
    r = retrain(prepared.train, prepared.valid, searched.mask, searched.snapshot,
                replace(CFG, retrain_epochs=5), mcfg, "co", prepared.test)
    assert r.best_epoch == int(np.argmax(r.history)) + 1
    assert r.valid.auc == pytest.approx(max(r.history), abs=1e-15)
    assert r.test is not None and r.test.ratio == searched.mask.ratio
