"""
Training a small classifier with NGL and with cross-entropy
===========================================================

Same data, same split, same initial weights.  Only the loss differs.
"""
import numpy as np

from lossforge.data import split, synth_blobs
from lossforge.losses import builtin
from lossforge.nn import ClassifierModel, TrainConfig, train

data = synth_blobs(class_count=3, samples_per_class=200, dims=2, spread=3.0, seed=42)
parts = split(data, seed=42)
config = TrainConfig(epochs=30, seed=42)
print(len(parts.train), "train /", len(parts.val), "val /", len(parts.test), "test samples")

confidence = {}
for name in ("ce", "ngl"):
    model = ClassifierModel(data.dims, data.class_count, config.hidden, seed=42)
    rep = train(model, data, parts, builtin(name), config)
    probs = model.forward(data.features[parts.test])
    confidence[name] = probs.max(axis=1)
    print(f"{name:>4}: test error {rep.test_error:.4f}, final lr {rep.lr[-1]:.5f}, "
          f"{rep.wall_clock:.1f}s")

# NGL penalizes predictions that approach certainty, which shows up as
# softer output probabilities
for name, conf in confidence.items():
    print(f"{name:>4}: mean max-probability {conf.mean():.3f}, "
          f"share above 0.99: {np.mean(conf > 0.99):.2f}")
