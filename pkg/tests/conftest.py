import numpy as np
import pytest

from optfs import autodiff as ad
from optfs.data import SyntheticSpec, generate_synthetic, prepare_synthetic
from optfs.gating import GateState, effective_gate, l1_penalty
from optfs.models import CTRModel, ModelConfig

MODELS = ("fm", "deepfm", "dcn", "ipnn")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def toy_model(name: str, m: int = 12, n: int = 3, d: int = 4, seed: int = 0, **kw) -> CTRModel:
    kw.setdefault("mlp_dims", (6, 5))
    kw.setdefault("cross_depth", 2)
    return CTRModel(ModelConfig(name, m, n, d, **kw), seed)


def toy_batch(m: int = 12, n: int = 3, b: int = 8, seed: int = 0):
    """Indices respecting the field blocks of a vocabulary with m/n features per field."""
    rng = np.random.default_rng(seed)
    per = m // n
    idx = np.stack([rng.integers(0, per, size=b) + i * per for i in range(n)], axis=1)
    labels = rng.integers(0, 2, size=b)
    return idx, labels


def randomize(model: CTRModel, seed: int = 1, scale: float = 0.5) -> CTRModel:
    """Give every parameter a non-trivial value (zero-initialized ones included)."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = rng.normal(0.0, scale, size=p.shape)
    return model


def search_loss(model: CTRModel, gates: GateState, idx, labels) -> ad.Tensor:
    g = effective_gate(gates)
    logits = model.logits(idx, g, training=True)
    return ad.add(ad.bce_with_logits(logits, labels), l1_penalty(g, gates.lam))


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(n_fields=3, features_per_field=12, informative_per_field=3,
                         n_train=3000, n_valid=1000, n_test=1000)
    syn = generate_synthetic(spec, 3)
    return syn, prepare_synthetic(syn)
