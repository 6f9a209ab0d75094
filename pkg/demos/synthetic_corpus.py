"""
A synthetic audiovisual corpus
==============================

Arousal drives the level and pitch of a voice-like tone; valence drives
face brightness and mouth curvature.  Everything is seeded.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from affect_e2e import synth
from affect_e2e.analysis import compute_descriptors

rec = synth.generate_recording("demo", seed=3, duration_s=12)
print(rec.audio.shape, rec.frames.shape, rec.trajectory.gold.shape)

# %%
# Frame-level RMS and F0 follow the arousal track closely.
d = compute_descriptors(rec.audio)
arousal = rec.trajectory.arousal
print("corr(rms, arousal)", round(np.corrcoef(d.rms_energy, arousal)[0, 1], 3))
print("max |f0 - target|", round(np.nanmax(np.abs(d.f0 - synth.tone_f0(arousal))), 2), "Hz")

# %%
# Brightness of the face region tracks valence.
cheek = rec.frames[:, 48, 30:40].mean(axis=(1, 2))
print("corr(brightness, valence)", round(np.corrcoef(cheek, rec.trajectory.valence)[0, 1], 3))

# %%
# A dataset is written as WAVE audio, FRMS frame containers and label CSVs,
# and reads back with the same splits.
ds = synth.generate_dataset(seed=0, n_train=2, n_validation=1, n_test=1, duration_s=6)
with tempfile.TemporaryDirectory() as tmp:
    synth.write_dataset(ds, tmp)
    print(sorted(p.name for p in Path(tmp).iterdir()))
    back = synth.read_dataset(tmp)
    print(back.split)
