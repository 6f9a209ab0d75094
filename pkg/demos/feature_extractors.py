"""
Raw-waveform and face-frame feature extractors
==============================================

The speech front-end turns 6 s of normalised audio into 150 frames of
learned features.  The visual network is a residual stack of bottleneck
blocks; the tiny configuration keeps the same topology at desk scale.
"""

# %%
import numpy as np

from affect_e2e.speech import SpeechNet, SpeechNetConfig, normalize_segment

cfg = SpeechNetConfig()
print("kernels", cfg.kernel_1, cfg.kernel_2, "features per frame", cfg.features_per_frame)
net = SpeechNet(cfg, np.random.default_rng(0))
segment = normalize_segment(np.random.default_rng(1).normal(size=cfg.segment_length))
frames, pooled = net.forward(segment, return_intermediate=True)
print("pooled", pooled.shape, "-> frames", frames.shape)

# %%
# The full residual network reports its stage layout from its own weights.
from affect_e2e.visual import VisualNet, VisualNetConfig

full = VisualNet(VisualNetConfig.full(), np.random.default_rng(0))
for replication, maps in full.stage_audit():
    print(f"{replication} x {maps}")

# %%
# The tiny network maps frames to the same 640 features per frame.
tiny = VisualNet(VisualNetConfig.tiny(), np.random.default_rng(0))
faces = np.random.default_rng(2).random((4, 96, 96, 3))
print("tiny features", tiny.forward(faces).shape)

# %%
# Concatenating both streams gives the fusion model its 1920-wide input.
from affect_e2e.trainer import build_model

print("fusion input width", build_model("fusion", SpeechNetConfig(), hidden_size=8).input_width)
