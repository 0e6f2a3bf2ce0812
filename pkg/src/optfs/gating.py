"""Per-feature gates: annealed continuous gates during search, bits afterwards."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError

DEFAULT_GATE_INIT = 0.01


def temperature(t: float, total: int, gamma: float) -> float:
    """Annealing multiplier ``gamma ** (t / total)``."""
    if gamma <= 1:
        raise ConfigError(f"gamma must be > 1, got {gamma}")
    if total <= 0:
        raise ConfigError(f"total epochs must be positive, got {total}")
    if not 0 <= t <= total:
        raise ConfigError(f"epoch {t} outside [0, {total}]")
    if t == 0:
        return 1.0
    if t == total:
        return float(gamma)
    return float(gamma) ** (t / total)


def sigmoid(x):
    return ad._sigmoid(np.atleast_1d(np.asarray(x, dtype=np.float64)))


@dataclass
class GateState:
    """Continuous gate parameters plus the annealing schedule.

    ``g_c`` is trainable; ``g_c_init`` is the frozen initial copy whose sigmoid
    normalizes the effective gate so that it starts at exactly one.
    """

    g_c: ad.Tensor
    g_c_init: np.ndarray
    gamma: float
    total_epochs: int
    lam: float = 0.0
    current_epoch: float = 0.0

    def __post_init__(self):
        if self.gamma <= 1:
            raise ConfigError(f"gamma must be > 1, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        self.g_c_init = np.array(self.g_c_init, dtype=np.float64)
        self.g_c_init.setflags(write=False)
        self._denominator = sigmoid(self.g_c_init)
        self._denominator.setflags(write=False)

    @classmethod
    def create(cls, m: int, gamma: float, total_epochs: int, lam: float = 0.0,
               init: float | np.ndarray = DEFAULT_GATE_INIT) -> "GateState":
        values = np.broadcast_to(np.asarray(init, dtype=np.float64), (m,)).copy()
        return cls(
            g_c=ad.Tensor(values.copy(), requires_grad=True, name="g_c"),
            g_c_init=values,
            gamma=gamma,
            total_epochs=total_epochs,
            lam=lam,
        )

    @property
    def m(self) -> int:
        return self.g_c.shape[0]

    @property
    def tau(self) -> float:
        return temperature(self.current_epoch, self.total_epochs, self.gamma)

    def set_epoch(self, t: float) -> None:
        temperature(t, self.total_epochs, self.gamma)
        self.current_epoch = t


def effective_gate(state: GateState) -> ad.Tensor:
    """``sigmoid(g_c * tau) / sigmoid(g_c_init)``, differentiable in ``g_c``."""
    scaled = ad.scale(state.g_c, state.tau)
    return ad.div(ad.sigmoid(scaled), ad.Tensor(state._denominator))


def l1_penalty(g: ad.Tensor, lam: float) -> ad.Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return ad.scale(ad.sum(g), lam)


@dataclass(frozen=True)
class BinaryGate:
    bits: np.ndarray
    vocab_hash: str = ""
    search_config: dict = field(default_factory=dict)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or np.any(bits > 1):
            raise DataError("gate bits must be a 1-d 0/1 vector")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def m(self) -> int:
        return self.bits.shape[0]

    @property
    def ratio(self) -> float:
        return float(self.bits.sum()) / self.m

    def as_tensor(self) -> ad.Tensor:
        return ad.Tensor(self.bits.astype(np.float64))

    def to_json(self) -> dict:
        return {
            "vocabulary_hash": self.vocab_hash,
            "m": self.m,
            "bits": run_length_encode(self.bits),
            "ratio": self.ratio,
            "search_config": self.search_config,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BinaryGate":
        bits = run_length_decode(obj["bits"])
        if len(bits) != obj["m"]:
            raise DataError(f"mask declares m={obj['m']} but encodes {len(bits)} bits")
        return cls(bits, obj.get("vocabulary_hash", ""), obj.get("search_config", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "BinaryGate":
        return cls.from_json(json.loads(Path(path).read_text()))


def discretize(state: GateState, vocab_hash: str = "", search_config: dict | None = None) -> BinaryGate:
    """Unit step on ``g_c``: a gate at or below zero is dropped."""
    bits = (state.g_c.data > 0).astype(np.uint8)
    return BinaryGate(bits, vocab_hash, dict(search_config or {}))


def run_length_encode(bits) -> list[list[int]]:
    """``[[bit, run], ...]`` for consecutive equal bits."""
    out: list[list[int]] = []
    for b in np.asarray(bits).tolist():
        if out and out[-1][0] == b:
            out[-1][1] += 1
        else:
            out.append([int(b), 1])
    return out


def run_length_decode(runs) -> np.ndarray:
    parts = [np.full(int(n), int(b), dtype=np.uint8) for b, n in runs]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)


def limit_gate(g_c_init: float) -> float:
    """Value a positive gate tends to as tau grows: ``1 / sigmoid(g_c_init)``."""
    return 1.0 + math.exp(-g_c_init)
