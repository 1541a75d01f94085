"""
Learning one dynamical regime and forecasting it
=================================================

Train a deep state-space model on one synthetic regime (a damped rotation
driven by a control input). Then let it forecast the held-out segment in
free-running mode.
"""

# %%
# ``synth_regimes`` returns standardized tasks. Each task has a few training windows
# of length T and a test segment that follows them in time.
import numpy as np

from cldssm.data import synth_regimes
from cldssm.enkf import EmissionModel
from cldssm.nets import DSSM, ModelConfig
from cldssm.training import TrainConfig, evaluate_task, predict_task, train_task

task = synth_regimes(2, d_x=2, seed=0)[0]
print(f"{len(task.windows)} windows of length {task.window_len}, forecast horizon {task.horizon}")

# %%
# A small model: a 4-d latent state of which the first two coordinates are observed.
cfg = TrainConfig(epochs=60, ensemble=50, seed=0, model=ModelConfig(d_z=4))
model = DSSM.build(task.d_x, task.d_u, cfg.model, np.random.default_rng(0))
em = EmissionModel.selector(task.d_x, cfg.model.d_z, cfg.model.r_var)

before = evaluate_task(task, model, em, cfg.ensemble, seed=1)
result = train_task(task, model, em, cfg)
after = evaluate_task(task, model, em, cfg.ensemble, seed=1)

# %%
# The training loss is the negative ensemble log-likelihood plus the KL term of the
# initial-state encoder, averaged over windows.
for epoch in range(0, cfg.epochs, 10):
    print(f"epoch {epoch:>3}: loss {result.losses[epoch]:9.3f}")
print(f"test MSE before training {before:.3f}, after {after:.3f}")

# %%
# The forecast filters the last training window, then runs the transition forward
# over the test controls without seeing any further observations.
pred = predict_task(task, model, em, cfg.ensemble, seed=1)
print(" t   truth_1   pred_1")
for t in range(0, task.horizon, 5):
    print(f"{t:>2} {task.test_x[t, 0]:9.3f} {pred[t, 0]:8.3f}")
