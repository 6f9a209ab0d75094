"""
Training a speech model and post-processing its output
======================================================

A tiny speech model learns arousal from raw audio.  A chain of median
filtering, centring, scaling and time shifting is then fitted on the
validation predictions and replayed on held-out recordings.
"""

# %%
import numpy as np

from affect_e2e import postprocess, synth
from affect_e2e.metrics import ccc
from affect_e2e.trainer import TrainConfig, evaluate, pretrain_speech

data = synth.generate_dataset(seed=1, n_train=8, n_validation=2, n_test=2, duration_s=6)
config = TrainConfig(learning_rate=3e-4, audio_batch=2, epochs=20, augment=False, eval_every=5)
result = pretrain_speech(data, config)
print(result.metrics_csv())

# %%
# Fit one chain per dimension on validation, apply it to the test split.
_, val_pred = evaluate(result.model, data.split_recordings("validation"))
_, test_pred = evaluate(result.model, data.split_recordings("test"))
val_ids, test_ids = data.split.validation, data.split.test
chain = postprocess.fit_chain([val_pred[i][:, 0] for i in val_ids], [data[i].trajectory.arousal for i in val_ids])
print("kept steps:", [(s.name, s.parameter) for s in chain.kept()])

gold = np.concatenate([data[i].trajectory.arousal for i in test_ids])
raw = [test_pred[i][:, 0] for i in test_ids]
print("test arousal rho_c", round(ccc(np.concatenate(raw), gold), 3),
      "-> post-processed", round(ccc(np.concatenate(postprocess.apply_chain(chain, raw)), gold), 3))
