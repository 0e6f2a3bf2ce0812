"""Search and retrain stages.

``search`` jointly trains the continuous gates, the embedding table and the
rest of the network for ``epochs`` epochs under an annealed temperature and
an L1 penalty on the effective gate, snapshots everything at the rewind
epoch, and finally thresholds the gates.  ``retrain`` fixes the binary gate
and trains E and W again from the snapshot (or from one of the ablation
initializations) with early stopping on validation AUC.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays, save_arrays
from .data import EncodedDataset
from .errors import ConfigError, HashMismatchError, NumericError
from .gating import BinaryGate, GateState, discretize, effective_gate, l1_penalty
from .metrics import EvalReport, evaluate
from .models import CTRModel, ModelConfig

log = logging.getLogger(__name__)

GATE_PARAM = "g_c"
RETRAIN_INITS = ("co", "wo", "ri", "lth")
# seed offset for the random-initialization ablation arm
RANDOM_INIT_OFFSET = 7919


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    l2_reg: float = 0.0
    lam: float = 1e-6
    epochs: int = 10
    rewind_epoch: int = 1
    gamma: float = 1e3
    batch_size: int = 1024
    seed: int = 0
    patience: int = 1
    retrain_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_init: float = 0.01
    fractional_epoch: bool = False
    reset_optimizer: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 2:
            raise ConfigError("epochs must be >= 2 so that a rewind epoch exists")
        if not 1 <= self.rewind_epoch <= self.epochs - 1:
            raise ConfigError(f"rewind_epoch must be in [1, {self.epochs - 1}], got {self.rewind_epoch}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.gamma <= 1:
            raise ConfigError("gamma must be > 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.l2_reg < 0:
            raise ConfigError("learning_rate must be > 0 and l2_reg >= 0")
        if self.patience < 1 or self.retrain_epochs < 1:
            raise ConfigError("patience and retrain_epochs must be >= 1")
        return self

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, l2_reg: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction; ``t`` is the 1-based step.

    ``l2_reg * param`` is added to the gradient first.
    """
    if l2_reg:
        grad = grad + l2_reg * param
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8, l2_reg=0.0, no_decay: Iterable[str] = (GATE_PARAM,)):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.l2_reg = l2_reg
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[ad.Tensor, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            decay = 0.0 if name in self.no_decay else self.l2_reg
            adam_step(p.data, g, self.m[name], self.v[name], self.t, self.lr, decay,
                      self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"adam_m/{k}": v.copy() for k, v in self.m.items()}
        state.update({f"adam_v/{k}": v.copy() for k, v in self.v.items()})
        state["adam_t"] = np.asarray(float(self.t))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam_t"])
        for k in self.m:
            if f"adam_m/{k}" in state:
                self.m[k] = np.array(state[f"adam_m/{k}"])
                self.v[k] = np.array(state[f"adam_v/{k}"])


# --------------------------------------------------------------------------
# snapshots and results
# --------------------------------------------------------------------------

def _frozen(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in arrays.items():
        a = np.array(v, dtype=np.float64)
        a.setflags(write=False)
        out[k] = a
    return out


@dataclass(frozen=True)
class TrainSnapshot:
    """Model parameters, batch-norm buffers and optimizer moments after one epoch."""

    epoch: int
    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    gate_values: np.ndarray
    config_hash: str
    model_config: dict

    @classmethod
    def capture(cls, epoch: int, model: CTRModel, opt: Adam, gates: GateState) -> "TrainSnapshot":
        opt_state = {k: v for k, v in opt.state_dict().items() if f"/{GATE_PARAM}" not in k}
        return cls(epoch, _frozen(model.state_dict()), _frozen(opt_state),
                   _frozen({"g": gates.g_c.data})["g"], model.config.hash, model.config.to_json())

    def save(self, path) -> None:
        arrays = dict(self.model_state)
        arrays.update(self.optimizer_state)
        arrays["gate/g_c"] = self.gate_values
        meta = {"kind": "snapshot", "epoch": self.epoch, "config_hash": self.config_hash,
                "model_config": self.model_config}
        save_arrays(path, arrays, self.model_config.get("vocab_hash", ""), meta)

    @classmethod
    def load(cls, path, expected_vocab_hash: str | None = None) -> "TrainSnapshot":
        arrays, header = load_arrays(path, expected_vocab_hash)
        meta = header["metadata"]
        model_state = {k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
        opt_state = {k: v for k, v in arrays.items() if k.startswith("adam")}
        return cls(meta["epoch"], _frozen(model_state), _frozen(opt_state),
                   _frozen({"g": arrays["gate/g_c"]})["g"], meta["config_hash"], meta["model_config"])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    ce_loss: float
    l1_loss: float
    valid_auc: float
    soft_ratio: float


HISTORY_COLUMNS = ["epoch", "train_loss", "ce_loss", "l1_loss", "valid_auc", "soft_ratio"]


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


@dataclass
class SearchResult:
    mask: BinaryGate
    snapshots: dict[int, TrainSnapshot]
    history: list[EpochRecord]
    gates: GateState
    final_state: dict[str, np.ndarray]

    @property
    def snapshot(self) -> TrainSnapshot:
        return self.snapshots[min(self.snapshots)]


@dataclass
class RetrainResult:
    model: CTRModel
    history: list[float]
    best_epoch: int
    valid: EvalReport
    test: EvalReport | None = None
    init: str = "co"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def early_stop(aucs: list[float], patience: int) -> tuple[bool, int]:
    """``(stop, best_epoch)`` with 1-based epochs; ties go to the earliest epoch."""
    if not aucs:
        raise ValueError("early_stop needs at least one validation score")
    best = int(np.argmax(aucs))
    return len(aucs) - best - 1 >= patience, best + 1


def evaluate_model(model: CTRModel, data: EncodedDataset, gate: ad.Tensor | None = None,
                   kept_ratio: float = 1.0) -> EvalReport:
    return evaluate(model.predict(data.indices, gate), data.labels, kept_ratio)


def _check_batch(model: CTRModel, data: EncodedDataset) -> None:
    vh = model.config.vocab_hash
    if vh and data.vocab_hash and vh != data.vocab_hash:
        raise HashMismatchError("dataset and model were built from different vocabularies")


def _train_epoch(model: CTRModel, opt: Adam, data: EncodedDataset, config: TrainConfig,
                 rng: np.random.Generator, epoch: int, gate_fn, lam: float = 0.0,
                 on_batch=None) -> tuple[float, float]:
    params = list(opt.params.values())
    ce_sum = l1_sum = 0.0
    count = 0
    for b, batch in enumerate(data.batches(config.batch_size, rng)):
        if on_batch is not None:
            on_batch(b)
        try:
            with ad.Tape() as tape:
                g = gate_fn()
                logits = model.logits(batch.indices, g, training=True)
                ce = ad.bce_with_logits(logits, batch.labels)
                if lam and g is not None and g.requires_grad:
                    l1 = l1_penalty(g, lam)
                    loss = ad.add(ce, l1)
                    l1_val = float(l1.data)
                else:
                    loss, l1_val = ce, 0.0
            grads = tape.backward(loss, params)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
        opt.step(grads)
        ce_sum += float(ce.data)
        l1_sum += l1_val
        count += 1
    return ce_sum / count, l1_sum / count


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------

def search(train: EncodedDataset, valid: EncodedDataset, model: CTRModel, gates: GateState,
           config: TrainConfig, capture_epochs: Iterable[int] | None = None) -> SearchResult:
    """Run the full search stage; never stops early.

    Snapshots are taken at the end of ``config.rewind_epoch`` and of any extra
    ``capture_epochs`` (useful for sweeping the rewind epoch in one run).
    """
    config.validate()
    _check_batch(model, train)
    if gates.m != model.config.m:
        raise HashMismatchError(f"gate length {gates.m} != model m {model.config.m}")
    if gates.current_epoch != 0:
        raise ConfigError("search needs a fresh gate state (t = 0)")
    gates.total_epochs = config.epochs
    gates.gamma = config.gamma
    gates.lam = config.lam

    params = dict(model.params)
    params[GATE_PARAM] = gates.g_c
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps, config.l2_reg)
    rng = np.random.default_rng(config.seed)
    capture = {config.rewind_epoch, *(capture_epochs or ())}
    snapshots: dict[int, TrainSnapshot] = {}
    history: list[EpochRecord] = []
    n_batches = -(-len(train) // config.batch_size)

    for epoch in range(1, config.epochs + 1):
        t = epoch - 1
        gates.set_epoch(t)
        on_batch = None
        if config.fractional_epoch:
            def on_batch(b, t=t):
                gates.set_epoch(t + b / n_batches)
        ce, l1 = _train_epoch(model, opt, train, config, rng, epoch,
                              lambda: effective_gate(gates), config.lam, on_batch)
        g_eval = effective_gate(gates)
        report = evaluate_model(model, valid, g_eval)
        soft_ratio = float(np.mean(gates.g_c.data > 0))
        history.append(EpochRecord(epoch, ce + l1, ce, l1, report.auc, soft_ratio))
        log.info("search epoch %d: loss=%.5f ce=%.5f l1=%.5f valid_auc=%.5f soft_ratio=%.4f",
                 epoch, ce + l1, ce, l1, report.auc, soft_ratio)
        if epoch in capture and epoch < config.epochs:
            snapshots[epoch] = TrainSnapshot.capture(epoch, model, opt, gates)

    gates.set_epoch(config.epochs)
    search_cfg = {"gamma": config.gamma, "T": config.epochs, "lambda": config.lam, "seed": config.seed}
    mask = discretize(gates, model.config.vocab_hash, search_cfg)
    return SearchResult(mask, snapshots, history, gates, copy.deepcopy(model.state_dict()))


# --------------------------------------------------------------------------
# retrain
# --------------------------------------------------------------------------

def fit(model: CTRModel, train: EncodedDataset, valid: EncodedDataset, gate: ad.Tensor | None,
        config: TrainConfig, opt: Adam | None = None, seed: int | None = None) -> tuple[list[float], int]:
    """Train E and W with a fixed gate, keeping the best validation-AUC state."""
    if opt is None:
        opt = Adam(dict(model.params), config.learning_rate, config.beta1, config.beta2,
                   config.eps, config.l2_reg)
    rng = np.random.default_rng(config.seed + 1 if seed is None else seed)
    aucs: list[float] = []
    best_state = None
    for epoch in range(1, config.retrain_epochs + 1):
        _train_epoch(model, opt, train, config, rng, epoch, lambda: gate)
        score = evaluate_model(model, valid, gate).auc
        aucs.append(score)
        log.info("retrain epoch %d: valid_auc=%.5f", epoch, score)
        stop, best = early_stop(aucs, config.patience)
        if best == epoch:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    return aucs, early_stop(aucs, config.patience)[1]


def retrain(train: EncodedDataset, valid: EncodedDataset, mask: BinaryGate,
            snapshot: TrainSnapshot | None, config: TrainConfig, model_config: ModelConfig,
            init: str = "co", test: EncodedDataset | None = None,
            search_final_state: dict[str, np.ndarray] | None = None) -> RetrainResult:
    """Retrain under a fixed binary gate.

    ``init`` picks the starting point: ``co`` the rewind snapshot, ``lth`` the
    search-stage initialization (same seed), ``ri`` a fresh random
    initialization, ``wo`` no retraining at all (the final search parameters
    evaluated under the binary gate).
    """
    if init not in RETRAIN_INITS:
        raise ConfigError(f"retrain init must be one of {RETRAIN_INITS}, got {init!r}")
    if mask.m != model_config.m:
        raise HashMismatchError(f"mask has {mask.m} bits, model vocabulary has m={model_config.m}")
    if mask.vocab_hash and model_config.vocab_hash and mask.vocab_hash != model_config.vocab_hash:
        raise HashMismatchError("mask was searched on a different vocabulary")

    gate = mask.as_tensor()
    if init in ("co", "wo"):
        state = snapshot.model_state if init == "co" else search_final_state
        if state is None:
            raise ConfigError(f"retrain init {init!r} needs {'a snapshot' if init == 'co' else 'the final search state'}")
        if init == "co" and snapshot.config_hash != model_config.hash:
            raise HashMismatchError("snapshot was taken from a differently configured model")
        model = CTRModel(model_config, config.seed)
        model.load_state_dict(state)
    else:
        seed = config.seed if init == "lth" else config.seed + RANDOM_INIT_OFFSET
        model = CTRModel(model_config, seed)
    _check_batch(model, train)

    if init == "wo":
        aucs, best = [], 0
    else:
        opt = Adam(dict(model.params), config.learning_rate, config.beta1, config.beta2,
                   config.eps, config.l2_reg)
        if init == "co" and not config.reset_optimizer:
            opt.load_state_dict(snapshot.optimizer_state)
        aucs, best = fit(model, train, valid, gate, config, opt)

    valid_report = evaluate_model(model, valid, gate, mask.ratio)
    test_report = evaluate_model(model, test, gate, mask.ratio) if test is not None else None
    return RetrainResult(model, aucs, best, valid_report, test_report, init)


def train_backbone(train: EncodedDataset, valid: EncodedDataset, model_config: ModelConfig,
                   config: TrainConfig, test: EncodedDataset | None = None) -> RetrainResult:
    """Plain backbone on the full feature set, same early-stopping protocol."""
    model = CTRModel(model_config, config.seed)
    aucs, best = fit(model, train, valid, None, config)
    valid_report = evaluate_model(model, valid)
    test_report = evaluate_model(model, test) if test is not None else None
    return RetrainResult(model, aucs, best, valid_report, test_report, "backbone")
