"""Train a small blob classifier, save it as MDLW, and attack it.

Walks through the data/model plumbing: synthetic 3-class Gaussian blobs in the
unit square, a dense ReLU network trained by full-batch gradient descent, the
MDLW weight file round trip, and the two gradient-sign attacks plus the noise
generators used as anomaly sources elsewhere.
"""

import tempfile
from pathlib import Path

import numpy as np

from pathdetect import data, nn

CENTERS = ((0.1, 0.1), (0.9, 0.1), (0.5, 0.95))

print("== datasets ==")
train = data.make_blobs(100, CENTERS, std=0.06, seed=1, split="train")
test = data.make_blobs(300, CENTERS, std=0.06, seed=1001, split="test")
print(f"train: {len(train)} points, test: {len(test)} points, "
      f"range [{train.inputs.min():.2f}, {train.inputs.max():.2f}]")

print("\n== training ==")
net, accuracy = nn.train_toy(train, nn.mlp_arch([2, 24, 24, 3]),
                             epochs=200, lr=1.0, seed=1)
print(f"2-24-24-3 MLP, 200 epochs: train accuracy {accuracy:.4f}")
test_acc = np.mean(nn.predict(net, test.inputs) == test.labels)
print(f"test accuracy {test_acc:.4f}")

print("\n== MDLW round trip ==")
with tempfile.TemporaryDirectory() as td:
    model_path = Path(td) / "toy.mdlw"
    fingerprint = nn.save_model(net, model_path)
    loaded = nn.load_model(model_path)
    x = test.inputs[0]
    diff = np.max(np.abs(nn.forward(net, x)[0] - nn.forward(loaded, x)[0]))
    print(f"wrote {model_path.stat().st_size} bytes, sha256 {fingerprint[:16]}...")
    print(f"loaded-model logit difference: {diff} (exact round trip)")

print("\n== adversarial attacks ==")
for name, aset in [
    ("fgsm eps=0.3", data.attack_dataset(net, test, "fgsm", 0.3)),
    ("pgd  eps=0.3", data.attack_dataset(net, test, "pgd", 0.3, step=0.075, iters=10)),
]:
    acc = np.mean(nn.predict(net, aset.inputs) == test.labels)
    linf = np.max(np.abs(aset.inputs - test.inputs))
    print(f"{name}: accuracy {test_acc:.3f} -> {acc:.3f}, max Linf {linf:.3f}")

print("\n== noise sources ==")
gauss = data.gen_gaussian_noise((2,), 240, mean=0.5, std=0.08, seed=1)
box = data.gen_uniform_noise((2,), 240, seed=1, low=0.3, high=0.7)
for aset in (gauss, box):
    preds = nn.predict(net, aset.inputs)
    print(f"{aset.source}: {len(aset)} samples, predicted class histogram "
          f"{np.bincount(preds, minlength=3)}")
