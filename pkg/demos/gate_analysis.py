"""
What the recurrent cells listen to
==================================

After training, individual LSTM cells are correlated with acoustic
descriptors of a recording the model has not seen.
"""

# %%
from affect_e2e import synth
from affect_e2e.analysis import gate_correlation
from affect_e2e.trainer import TrainConfig, pretrain_speech

data = synth.generate_dataset(seed=2, n_train=8, n_validation=0, n_test=1, duration_s=6)
config = TrainConfig(learning_rate=3e-4, audio_batch=2, epochs=20, augment=False,
                     eval_splits=("train",), eval_every=5, target_rho=0.9)
model = pretrain_speech(data, config).model

# %%
report = gate_correlation(model, data.split_recordings("test")[0])
for name in ("rms_energy", "rms_range", "loudness", "f0"):
    best = report.top(name, 1)[0]
    print(f"{name:>10}: layer {best.layer} cell {best.cell:3d} rho {best.rho:+.3f}")

# %%
# ``report.write(directory)`` stores the full table and one plot-ready CSV
# per descriptor with the top cells rescaled to [0, 1] for overlay.
print(report.plot_csv("rms_energy", k=2).splitlines()[:3])
