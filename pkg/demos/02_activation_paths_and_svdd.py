"""From activation traces to a one-class score for a single neuron path.

Shows the substrate the detector is built on: per-layer activation readouts,
the feature matrix a path induces over a sample set, and an SVDD trained on
those features, with its threshold calibrated so 95% of normal samples pass.
"""

import numpy as np

from pathdetect import data, nn
from pathdetect.pathsearch import compute_threshold, compute_tpr, path_features
from pathdetect.svdd import median_heuristic, svdd_score_batch, train_svdd

CENTERS = ((0.1, 0.1), (0.9, 0.1), (0.5, 0.95))
train = data.make_blobs(100, CENTERS, std=0.06, seed=1, split="train")
test = data.make_blobs(300, CENTERS, std=0.06, seed=1001, split="test")
net, _ = nn.train_toy(train, nn.mlp_arch([2, 24, 24, 3]), 200, 1.0, seed=1)

print("== activation traces ==")
trace = nn.forward_trace(net, train.inputs[0])
print("traced layer widths:", [len(v) for v in trace.layers])
print("hidden-1 readouts (first 6):", np.round(trace.layers[0][:6], 3))
print("output logits:", np.round(trace.layers[-1], 3))

print("\n== path features for class 0 ==")
class0 = train.inputs[train.labels == 0]
traces = nn.trace_dataset(net, class0)
path = (3, 17, 0)  # one neuron per traced layer: (hidden1, hidden2, logit)
feats = path_features(traces, path)
print(f"path {path} over {len(class0)} samples -> feature matrix {feats.shape}")
print("per-column mean/std:", np.round(feats.mean(0), 3), np.round(feats.std(0), 3))

print("\n== SVDD on the path ==")
model = train_svdd(feats, nu=0.1)
print(f"kernel width (median heuristic): {model.kernel_width:.3f}")
print(f"support vectors: {len(model.alphas)} of {model.n_train}, "
      f"R^2 = {model.radius_sq:.4f}, converged = {model.converged}")

print("\n== scoring normals vs anomalies ==")
normal_feats = path_features(nn.trace_dataset(net, test.inputs[test.labels == 0][:80]), path)
noise = data.gen_uniform_noise((2,), 80, seed=3, low=0.3, high=0.7)
noise_feats = path_features(nn.trace_dataset(net, noise.inputs), path)
s_normal = svdd_score_batch(model, normal_feats)
s_noise = svdd_score_batch(model, noise_feats)
print("normal scores: median %.4f, min %.4f" % (np.median(s_normal), s_normal.min()))
print("noise  scores: median %.4f, max %.4f" % (np.median(s_noise), s_noise.max()))

tau = compute_threshold(s_normal, retention=0.95)
scores = np.concatenate([s_normal, s_noise])
labels = np.concatenate([np.zeros(len(s_normal), int), np.ones(len(s_noise), int)])
print(f"tau at 95% normal retention: {tau:.4f}")
print(f"TPR of this single path on the noise: {compute_tpr(scores, labels, tau):.3f}")
