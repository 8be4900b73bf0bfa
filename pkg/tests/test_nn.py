import struct

import numpy as np
import pytest

from pathdetect import nn
from pathdetect.errors import (
    BadMagic,
    DimensionMismatch,
    ModelFormatError,
    NonFiniteWeights,
    ShapeMismatch,
    TrainingDiverged,
    TruncatedWeights,
)

from helpers import central_difference_gradient, naive_forward_trace, random_convnet, random_mlp


def identity_net():
    return nn.Network([nn.Dense(np.eye(3), np.zeros(3))])


def test_forward_identity_weights():
    logits, cls = nn.forward(identity_net(), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(logits, [1.0, 2.0, 3.0])
    assert cls == 2


def test_forward_deterministic(rng):
    net = random_mlp(rng, sizes=[4, 8, 3])
    x = rng.random(4)
    l1, c1 = nn.forward(net, x)
    l2, c2 = nn.forward(net, x)
    assert np.array_equal(l1, l2)
    assert c1 == c2


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.forward(identity_net(), np.array([1.0, 2.0]))


def test_forward_trained_model_recovers_labels(toy_net, blob_train):
    preds = nn.predict(toy_net, blob_train.inputs)
    assert np.mean(preds == blob_train.labels) >= 0.99


def test_trace_dense_relu_readout():
    # pre-activation [-1, 2] via bias, zero weights
    net = nn.Network([nn.Dense(np.zeros((1, 2)), np.array([-1.0, 2.0])), nn.Relu()])
    trace = nn.forward_trace(net, np.array([0.7]))
    assert np.allclose(trace.layers[0], [0.0, 2.0])


def test_trace_conv_constant_channel(rng):
    # zero kernel + bias c: every spatial position equals c, so the readout is c
    conv = nn.Conv2d(np.zeros((2, 1, 3, 3)), np.array([0.5, -1.0]), stride=1, pad=0)
    net = nn.Network([conv, nn.Flatten(), nn.Dense(np.ones((2 * 2 * 2, 2)), np.zeros(2))])
    trace = nn.forward_trace(net, rng.random((4, 4, 1)))
    assert np.allclose(trace.layers[0], [0.5, -1.0])


def test_conv_readout_is_spatial_mean(rng):
    net = random_convnet(rng)
    x = rng.random((6, 6, 1))
    conv = net.layers[0]
    fmap = conv.forward(x[None, ...])[0]
    fmap = np.maximum(fmap, 0.0)  # relu follows in this arch
    trace = nn.forward_trace(net, x)
    assert np.allclose(trace.layers[0], fmap.mean(axis=(0, 1)), atol=1e-5)


@pytest.mark.parametrize("kind", ["mlp", "conv"])
def test_trace_matches_naive_oracle(rng, kind):
    for _ in range(5):
        if kind == "mlp":
            net = random_mlp(rng, sizes=[3, 5, 4, 3])
            x = rng.random(3)
        else:
            net = random_convnet(rng)
            x = rng.random((6, 6, 1))
        got = nn.forward_trace(net, x)
        want = naive_forward_trace(net, x)
        assert len(got.layers) == len(want)
        for a, b in zip(got.layers, want):
            assert np.allclose(a, b, atol=1e-5)


def test_trace_softmax_readout_mode(rng):
    net = random_mlp(rng, sizes=[3, 6, 4])
    net.output_readout = "softmax"
    x = rng.random(3)
    trace = nn.forward_trace(net, x)
    logits, cls = nn.forward(net, x)
    assert np.isclose(trace.layers[-1].sum(), 1.0, atol=1e-6)
    assert int(np.argmax(trace.layers[-1])) == cls


def test_trace_forward_consistency(rng):
    # the output-layer entry of the trace reproduces the predicted class
    for _ in range(10):
        net = random_mlp(rng)
        x = rng.random(net.layers[0].in_dim)
        _, cls = nn.forward(net, x)
        trace = nn.forward_trace(net, x)
        assert int(np.argmax(trace.layers[-1])) == cls


def test_trace_input_flag(rng):
    net = random_mlp(rng, sizes=[4, 5, 3])
    net.trace_input = True
    x = rng.random(4)
    trace = nn.forward_trace(net, x)
    assert len(trace.layers) == 3
    assert np.allclose(trace.layers[0], x.astype(np.float32))


def test_trace_dataset_matches_single(rng):
    net = random_mlp(rng, sizes=[3, 7, 3])
    xs = rng.random((11, 3))
    ts = nn.trace_dataset(net, xs)
    single = nn.forward_trace(net, xs[4])
    for mat, vec in zip(ts.layers, single.layers):
        assert np.array_equal(mat[4], vec)


def test_input_gradient_matches_central_differences(rng):
    worst = 0.0
    for _ in range(8):
        net = random_mlp(rng)
        x = rng.random(net.layers[0].in_dim)
        label = int(rng.integers(net.num_classes))
        analytic = nn.input_gradient(net, x, label)
        numeric = central_difference_gradient(net, x, label)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))))
    assert worst <= 1e-3


def test_input_gradient_conv(rng):
    net = random_convnet(rng)
    x = rng.random((6, 6, 1))
    analytic = nn.input_gradient(net, x, 1)
    numeric = central_difference_gradient(net, x, 1)
    assert analytic.shape == x.shape
    assert np.max(np.abs(analytic - numeric)) <= 1e-3


def test_zero_weight_network_zero_gradient():
    net = nn.Network([nn.Dense(np.zeros((3, 2)), np.zeros(2))])
    g = nn.input_gradient(net, np.array([0.2, 0.4, 0.6]), 0)
    assert np.allclose(g, 0.0)


def test_gradient_label_out_of_range(rng):
    net = random_mlp(rng, sizes=[2, 4, 3])
    with pytest.raises(ShapeMismatch):
        nn.input_gradient(net, np.zeros(2), 3)


def test_loss_decreases_along_negative_true_logit(toy_net, blob_train):
    # at a confidently-correct point, d loss / d true-class logit is negative:
    # nudging the true logit's bias up must reduce the loss (finite differences)
    x = blob_train.inputs[0]
    label = int(blob_train.labels[0])
    assert nn.forward(toy_net, x)[1] == label

    def loss_with_bias_bump(bump):
        import copy
        net2 = copy.deepcopy(toy_net)
        out_layer = [l for l in net2.layers if isinstance(l, nn.Dense)][-1]
        out_layer.bias = out_layer.bias.copy()
        out_layer.bias[label] += np.float32(bump)
        logits, _ = nn.forward(net2, x)
        z = logits - logits.max()
        return float(np.log(np.exp(z).sum()) - z[label])

    h = 1e-3
    d_loss = (loss_with_bias_bump(h) - loss_with_bias_bump(-h)) / (2 * h)
    assert d_loss < 0.0


# --- MDLW files ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path, rng):
    net = random_mlp(rng, sizes=[3, 6, 4], softmax=True)
    path = tmp_path / "model.mdlw"
    fp = nn.save_model(net, path)
    loaded = nn.load_model(path)
    assert loaded.fingerprint == fp
    for a, b in zip(net.layers, loaded.layers):
        assert type(a) is type(b)
        if isinstance(a, nn.Dense):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
    x = rng.random(3)
    la, _ = nn.forward(net, x)
    lb, _ = nn.forward(loaded, x)
    assert np.max(np.abs(la - lb)) == 0.0


def test_save_load_conv_round_trip(tmp_path, rng):
    net = random_convnet(rng)
    path = tmp_path / "conv.mdlw"
    nn.save_model(net, path)
    loaded = nn.load_model(path)
    x = rng.random((6, 6, 1))
    assert np.max(np.abs(nn.forward(net, x)[0] - nn.forward(loaded, x)[0])) == 0.0


def test_load_bad_magic(tmp_path):
    path = tmp_path / "bad.mdlw"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(BadMagic):
        nn.load_model(path)


def test_load_truncated_weights(tmp_path):
    # dense 4x3 declared, but only 11 of the 12 weight floats present
    blob = b"MDLW" + struct.pack("<II", 1, 1)
    blob += struct.pack("<B", 0) + struct.pack("<II", 4, 3)
    blob += b"\x00" * (4 * 11)
    (tmp_path / "trunc.mdlw").write_bytes(blob)
    with pytest.raises(TruncatedWeights) as exc:
        nn.load_model(tmp_path / "trunc.mdlw")
    assert exc.value.layer == 0


def test_load_dimension_mismatch(tmp_path):
    # dense 2x3 followed by dense 5x2: 3 != 5
    blob = b"MDLW" + struct.pack("<II", 1, 2)
    blob += struct.pack("<B", 0) + struct.pack("<II", 2, 3)
    blob += struct.pack("<6f", *range(6)) + struct.pack("<3f", 0, 0, 0)
    blob += struct.pack("<B", 0) + struct.pack("<II", 5, 2)
    blob += struct.pack("<10f", *range(10)) + struct.pack("<2f", 0, 0)
    (tmp_path / "dim.mdlw").write_bytes(blob)
    with pytest.raises(DimensionMismatch) as exc:
        nn.load_model(tmp_path / "dim.mdlw")
    assert exc.value.layer == 1


def test_load_non_finite_weights(tmp_path):
    blob = b"MDLW" + struct.pack("<II", 1, 1)
    blob += struct.pack("<B", 0) + struct.pack("<II", 1, 2)
    blob += struct.pack("<2f", np.nan, 1.0) + struct.pack("<2f", 0, 0)
    (tmp_path / "nan.mdlw").write_bytes(blob)
    with pytest.raises(NonFiniteWeights) as exc:
        nn.load_model(tmp_path / "nan.mdlw")
    assert exc.value.layer == 0


def test_load_trailing_garbage(tmp_path, rng):
    net = random_mlp(rng, sizes=[2, 3])
    path = tmp_path / "t.mdlw"
    nn.save_model(net, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ModelFormatError):
        nn.load_model(path)


def test_load_unsupported_version(tmp_path):
    (tmp_path / "v9.mdlw").write_bytes(b"MDLW" + struct.pack("<II", 9, 0))
    with pytest.raises(ModelFormatError):
        nn.load_model(tmp_path / "v9.mdlw")


# --- toy trainer ----------------------------------------------------------------


def test_train_zero_epochs_returns_initial(blob_train):
    arch = nn.mlp_arch([2, 8, 3])
    trained, _ = nn.train_toy(blob_train, arch, epochs=0, lr=0.5, seed=3)
    fresh = nn.build_network(arch, seed=3)
    for a, b in zip(trained.layers, fresh.layers):
        if isinstance(a, nn.Dense):
            assert np.array_equal(a.weight, b.weight)


def test_train_same_seed_bit_identical(blob_train):
    arch = nn.mlp_arch([2, 8, 3])
    n1, _ = nn.train_toy(blob_train, arch, epochs=30, lr=0.5, seed=11)
    n2, _ = nn.train_toy(blob_train, arch, epochs=30, lr=0.5, seed=11)
    for a, b in zip(n1.layers, n2.layers):
        if isinstance(a, nn.Dense):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)


def test_train_blobs_to_high_accuracy(toy_net, blob_train):
    assert np.mean(nn.predict(toy_net, blob_train.inputs) == blob_train.labels) >= 0.99


def test_train_divergence_raises(blob_train):
    # linear chain (no relu to go dead): a huge step size oscillates and blows up
    arch = [("dense", 2, 8), ("dense", 8, 3)]
    with pytest.raises(TrainingDiverged):
        nn.train_toy(blob_train, arch, epochs=500, lr=1e6, seed=0)


def test_network_requires_traced_output():
    layers = [nn.Dense(np.eye(2), np.zeros(2), traced=False)]
    with pytest.raises(ModelFormatError):
        nn.Network(layers)
