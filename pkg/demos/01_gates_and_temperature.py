"""
Gates, temperature and discretization
=====================================

Every feature k owns a continuous gate parameter g_c[k].  The gate that
multiplies its embedding is sigma(g_c * tau) / sigma(g_c_init), with the
temperature tau growing from 1 to gamma over the search epochs.
"""
import numpy as np

from optfs.gating import GateState, discretize, effective_gate, limit_gate, temperature

# the temperature schedule for T=10 epochs and gamma=1000
T, gamma = 10, 1e3
print("tau per epoch:", np.round([temperature(t, T, gamma) for t in range(T + 1)], 2))

# five features, all starting at the default g_c = 0.01
state = GateState.create(5, gamma, T)
print("gate at t=0:", effective_gate(state).data)      # exactly one

# pretend training pushed two gates below zero and left three above
state.g_c.data = np.array([-0.2, -0.01, 0.0, 0.05, 0.3])
for t in (0, 5, 10):
    state.set_epoch(t)
    print(f"t={t:2d}  g =", np.round(effective_gate(state).data, 4))

# positive gates head to 1 / sigma(0.01), slightly above one
print("limit for positive gates:", limit_gate(0.01))

# the unit step drops everything at or below zero, including the exact zero
mask = discretize(state)
print("bits:", mask.bits, "ratio:", mask.ratio)
