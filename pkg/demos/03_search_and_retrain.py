"""
Searching a feature set on planted data
=======================================

A synthetic dataset plants a handful of informative feature values in each
field; everything else is noise.  The search stage learns gates jointly with
the model, the mask keeps the features whose gates stayed positive, and the
retraining stage starts again from the snapshot taken at epoch T_c.
"""
import logging
from dataclasses import replace

import numpy as np

from optfs.benchmark import BENCH_CONFIG, MaskScore, model_config_for, prepare_benchmark
from optfs.data import SyntheticSpec
from optfs.gating import GateState
from optfs.models import CTRModel
from optfs.trainer import retrain, search, train_backbone

logging.basicConfig(level=logging.INFO, format="%(message)s")

# a smaller version of the benchmark so the script finishes in under a minute
spec = SyntheticSpec(n_fields=4, features_per_field=30, informative_per_field=4,
                     n_train=20_000, n_valid=10_000, n_test=10_000)
data, informative, candidates = prepare_benchmark(seed=0, spec=spec)
mcfg = model_config_for(data, "deepfm", embed_dim=8)
cfg = replace(BENCH_CONFIG, lam=1e-5, rewind_epoch=5)

gates = GateState.create(mcfg.m, cfg.gamma, cfg.epochs, cfg.lam)
result = search(data.train, data.valid, CTRModel(mcfg, cfg.seed), gates, cfg)
print(MaskScore.of(result.mask, informative, candidates))

# where did the informative gates end up compared with the noise?
noise = np.setdiff1d(candidates, informative)
print("median g_c informative %.3f, noise %.3f"
      % (np.median(gates.g_c.data[informative]), np.median(gates.g_c.data[noise])))

optfs = retrain(data.train, data.valid, result.mask, result.snapshot, cfg, mcfg, "co", data.test)
full = train_backbone(data.train, data.valid, mcfg, cfg, data.test)
print(f"OptFS    test AUC {optfs.test.auc:.4f} at ratio {optfs.test.ratio:.3f}")
print(f"backbone test AUC {full.test.auc:.4f} at ratio 1.000")
