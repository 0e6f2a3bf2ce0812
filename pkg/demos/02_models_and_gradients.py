"""
The model zoo and its gradients
===============================

FM, DeepFM, DCN and IPNN share one gated embedding layer.  This script builds
each of them on a toy vocabulary, checks the reverse-mode gradient of the
search loss against central differences, and shows that a zero gate is the
same as deleting the feature.
"""
import numpy as np

from optfs import autodiff as ad
from optfs.gating import GateState, effective_gate, l1_penalty
from optfs.models import CTRModel, ModelConfig

rng = np.random.default_rng(0)
m, n, d = 12, 3, 4
idx = np.stack([rng.integers(0, 4, 8) + 4 * i for i in range(n)], axis=1)
labels = rng.integers(0, 2, 8)


def loss_fn(model, gates):
    g = effective_gate(gates)
    z = model.logits(idx, g, training=True)
    return ad.add(ad.bce_with_logits(z, labels), l1_penalty(g, gates.lam))


for name in ("fm", "deepfm", "dcn", "ipnn"):
    model = CTRModel(ModelConfig(name, m, n, d, mlp_dims=(6, 5), cross_depth=2), seed=1)
    gates = GateState.create(m, 1e3, 10, lam=1e-2)
    gates.g_c.data = rng.normal(0, 0.3, m)
    gates.set_epoch(3)

    with ad.Tape() as tape:
        loss = loss_fn(model, gates)
    grad = tape.backward(loss, [gates.g_c])[gates.g_c]

    # central difference on the first gate only, to keep the demo short
    h = 1e-5
    gates.g_c.data[0] += h
    up = loss_fn(model, gates).item()
    gates.g_c.data[0] -= 2 * h
    down = loss_fn(model, gates).item()
    gates.g_c.data[0] += h
    print(f"{name:7s} dL/dg_c[0] analytic {grad[0]: .8f}  numeric {(up - down) / (2 * h): .8f}")

# masking feature 5 equals zeroing its embedding row and first-order weight
model = CTRModel(ModelConfig("deepfm", m, n, d, mlp_dims=(6, 5)), seed=2)
gate = np.ones(m)
gate[5] = 0.0
masked = model.predict(idx, ad.Tensor(gate))
model.zero_feature(5)
print("max |masked - removed| =", np.abs(masked - model.predict(idx)).max())
