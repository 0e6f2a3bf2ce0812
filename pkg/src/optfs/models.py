"""Gated embeddings and the CTR backbones: FM, DeepFM, DCN and IPNN.

Every backbone is described by three slots: a transform of the embedding
stack (``g_fn``), a pairwise interaction operator (``o_fn``) and a
prediction head (``h_fn``).  The feature gate is applied once, to the
looked-up embedding rows and first-order weights; for the inner product this
is the same as scaling each pair by the product of its two gates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, HashMismatchError

DESK_MLP_DIMS = (64, 32, 16)
FULL_SCALE_MLP_DIMS = (1024, 512, 256)
_P_MIN, _P_MAX = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class InteractionSpec:
    g_fn: str
    o_fn: str
    h_fn: str


MODEL_SPECS = {
    "fm": InteractionSpec("null", "inner_product", "null"),
    "deepfm": InteractionSpec("mlp", "inner_product", "average"),
    "dcn": InteractionSpec("mlp", "cross_network", "average"),
    "ipnn": InteractionSpec("null", "inner_product", "mlp"),
}


def spec_for(name: str) -> InteractionSpec:
    try:
        return MODEL_SPECS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(MODEL_SPECS)}") from None


@dataclass
class ModelConfig:
    name: str
    m: int
    n: int
    embed_dim: int = 16
    mlp_dims: tuple[int, ...] = DESK_MLP_DIMS
    cross_depth: int = 3
    vocab_hash: str = ""

    def __post_init__(self):
        spec_for(self.name)
        self.mlp_dims = tuple(int(d) for d in self.mlp_dims)
        if self.m < 1 or self.n < 1 or self.embed_dim < 1:
            raise ConfigError("model: m, n and embed_dim must be positive")
        if self.cross_depth < 1:
            raise ConfigError("model: cross_depth must be >= 1")

    @property
    def spec(self) -> InteractionSpec:
        return spec_for(self.name)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp_dims"] = list(self.mlp_dims)
        d["interaction"] = asdict(self.spec)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = {k: v for k, v in obj.items() if k != "interaction"}
        return cls(**obj)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def embed_gated(indices: np.ndarray, table: ad.Tensor, linear: ad.Tensor,
                gate: ad.Tensor | None) -> tuple[ad.Tensor, ad.Tensor]:
    """Gated embedding stack (B, n, D) and gated first-order weights (B, n)."""
    m = table.shape[0]
    if indices.size and int(indices.max()) >= m:
        raise HashMismatchError(
            f"feature index {int(indices.max())} >= m={m}; data and model vocabularies differ"
        )
    if gate is not None and gate.shape != (m,):
        raise HashMismatchError(f"gate has length {gate.shape[0]}, embedding table has {m} rows")
    e = ad.lookup_rows(table, indices)
    w = ad.lookup_rows(linear, indices)
    if gate is None:
        return e, w
    g = ad.lookup_rows(gate, indices)
    b, n, d = e.shape
    g3 = ad.broadcast_to(ad.reshape(g, (b, n, 1)), (b, n, d))
    return ad.mul(e, g3), ad.mul(w, g)


def interact_inner(e: ad.Tensor) -> ad.Tensor:
    """(B, n(n-1)/2) inner products over field pairs i < j."""
    return ad.pairwise_inner(e)


def interact_cross(x0: ad.Tensor, weights: list[ad.Tensor], biases: list[ad.Tensor]) -> ad.Tensor:
    """Cross network ``x_{l+1} = x0 * (x_l . w_l) + b_l + x_l`` on a flat (B, F) input."""
    if not weights:
        raise ConfigError("cross network needs depth >= 1")
    x = x0
    for w, b in zip(weights, biases):
        xw = ad.matmul(x, w)
        x = ad.add(ad.add(ad.mul(x0, ad.broadcast_to(xw, x0.shape)), b), x)
    return x


class MLP:
    """Linear -> BatchNorm -> ReLU stack followed by a scalar output layer."""

    def __init__(self, prefix: str, in_dim: int, hidden: tuple[int, ...], rng: np.random.Generator):
        self.prefix = prefix
        self.layers = []
        self.params: dict[str, ad.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        dims = (in_dim,) + tuple(hidden)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            names = (f"{prefix}.{i}.weight", f"{prefix}.{i}.bias",
                     f"{prefix}.{i}.bn_weight", f"{prefix}.{i}.bn_bias")
            self.params[names[0]] = ad.Tensor(xavier_uniform(rng, (a, b), a, b), True, names[0])
            self.params[names[1]] = ad.Tensor(np.zeros(b), True, names[1])
            self.params[names[2]] = ad.Tensor(np.ones(b), True, names[2])
            self.params[names[3]] = ad.Tensor(np.zeros(b), True, names[3])
            self.buffers[f"{prefix}.{i}.running_mean"] = np.zeros(b)
            self.buffers[f"{prefix}.{i}.running_var"] = np.ones(b)
            self.layers.append(i)
        last = dims[-1]
        self.params[f"{prefix}.out.weight"] = ad.Tensor(xavier_uniform(rng, (last, 1), last, 1), True)
        self.params[f"{prefix}.out.bias"] = ad.Tensor(np.zeros(1), True)

    def __call__(self, x: ad.Tensor, training: bool) -> ad.Tensor:
        p, buf = self.params, self.buffers
        for i in self.layers:
            pre = f"{self.prefix}.{i}"
            x = ad.add(ad.matmul(x, p[f"{pre}.weight"]), p[f"{pre}.bias"])
            x = ad.batch_norm(x, p[f"{pre}.bn_weight"], p[f"{pre}.bn_bias"],
                              buf[f"{pre}.running_mean"], buf[f"{pre}.running_var"], training)
            x = ad.relu(x)
        out = ad.add(ad.matmul(x, p[f"{self.prefix}.out.weight"]), p[f"{self.prefix}.out.bias"])
        return ad.reshape(out, (x.shape[0],))


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------

class CTRModel:
    """One backbone from :data:`MODEL_SPECS` with its parameters and buffers.

    ``params`` holds every trainable tensor; ``"embedding"`` is the table E and
    everything else (first-order weights included) belongs to W.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.spec = config.spec
        rng = np.random.default_rng(seed)
        m, n, d = config.m, config.n, config.embed_dim
        self.params: dict[str, ad.Tensor] = {
            "embedding": ad.Tensor(xavier_uniform(rng, (m, d), 1, d), True, "embedding"),
            "linear": ad.Tensor(np.zeros(m), True, "linear"),
            "bias": ad.Tensor(np.zeros(()), True, "bias"),
        }
        self.buffers: dict[str, np.ndarray] = {}
        flat = n * d
        n_pairs = n * (n - 1) // 2
        self.mlp = None
        if self.spec.g_fn == "mlp":
            self.mlp = MLP("mlp", flat, config.mlp_dims, rng)
        elif self.spec.h_fn == "mlp":
            self.mlp = MLP("mlp", flat + n_pairs, config.mlp_dims, rng)
        if self.mlp is not None:
            self.params.update(self.mlp.params)
            self.buffers.update(self.mlp.buffers)
        if self.spec.o_fn == "cross_network":
            for layer in range(config.cross_depth):
                self.params[f"cross.{layer}.weight"] = ad.Tensor(
                    xavier_uniform(rng, (flat, 1), flat, 1), True)
                self.params[f"cross.{layer}.bias"] = ad.Tensor(np.zeros(flat), True)
            self.params["cross.out.weight"] = ad.Tensor(xavier_uniform(rng, (flat, 1), flat, 1), True)
            self.params["cross.out.bias"] = ad.Tensor(np.zeros(1), True)
        for name, t in self.params.items():
            t.name = name

    # forward --------------------------------------------------------------

    def logits(self, indices: np.ndarray, gate: ad.Tensor | None = None,
               training: bool = False) -> ad.Tensor:
        indices = np.asarray(indices)
        if indices.ndim != 2 or indices.shape[1] != self.config.n:
            raise HashMismatchError(f"batch has shape {indices.shape}, model expects (B, {self.config.n})")
        p = self.params
        e, w = embed_gated(indices, p["embedding"], p["linear"], gate)
        b, n, d = e.shape
        name = self.config.name

        if name == "fm":
            return self._fm_logit(e, w)
        flat = ad.reshape(e, (b, n * d))
        if name == "deepfm":
            return ad.scale(ad.add(self._fm_logit(e, w), self.mlp(flat, training)), 0.5)
        if name == "dcn":
            weights = [p[f"cross.{i}.weight"] for i in range(self.config.cross_depth)]
            biases = [p[f"cross.{i}.bias"] for i in range(self.config.cross_depth)]
            x = interact_cross(flat, weights, biases)
            cross = ad.add(ad.matmul(x, p["cross.out.weight"]), p["cross.out.bias"])
            cross = ad.reshape(cross, (b,))
            return ad.scale(ad.add(cross, self.mlp(flat, training)), 0.5)
        # ipnn
        h = ad.concat([flat, interact_inner(e)], axis=1)
        return self.mlp(h, training)

    def _fm_logit(self, e: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
        first = ad.sum(w, axis=1)
        out = ad.add(first, self.params["bias"])
        if e.shape[1] > 1:
            out = ad.add(out, ad.sum(interact_inner(e), axis=1))
        return out

    def predict(self, indices: np.ndarray, gate: ad.Tensor | None = None,
                batch_size: int = 8192) -> np.ndarray:
        """Probabilities in eval mode (running batch-norm statistics)."""
        indices = np.asarray(indices)
        out = np.empty(indices.shape[0])
        for start in range(0, indices.shape[0], batch_size):
            z = self.logits(indices[start:start + batch_size], gate, training=False).data
            out[start:start + batch_size] = ad._sigmoid(np.atleast_1d(z))
        # keep saturated logits strictly inside (0, 1)
        return np.clip(out, _P_MIN, _P_MAX)

    # state ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data.copy() for k, v in self.params.items()}
        state.update({f"buffer/{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = state[f"param/{k}"]
            if arr.shape != t.shape:
                raise HashMismatchError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=np.float64)
        for k, buf in self.buffers.items():
            buf[...] = state[f"buffer/{k}"]

    def zero_feature(self, k: int) -> None:
        """Zero feature ``k``'s embedding row and first-order weight in place."""
        self.params["embedding"].data[k] = 0.0
        self.params["linear"].data[k] = 0.0


def build_model(name: str, m: int, n: int, embed_dim: int = 16,
                mlp_dims=DESK_MLP_DIMS, cross_depth: int = 3, seed: int = 0,
                vocab_hash: str = "") -> CTRModel:
    return CTRModel(ModelConfig(name, m, n, embed_dim, tuple(mlp_dims), cross_depth, vocab_hash), seed)
