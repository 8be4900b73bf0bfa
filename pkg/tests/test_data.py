import struct

import numpy as np
import pytest
from scipy.stats import norm

from pathdetect import data, nn
from pathdetect.errors import CountMismatch, DataFormatError, EmptyClass


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.tobytes())


def test_load_idx_scales_and_shapes(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 1, 1] = 128
    write_idx_images(tmp_path / "im.idx", images)
    write_idx_labels(tmp_path / "lb.idx", [7, 1, 0])
    ds = data.load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
    assert ds.inputs.shape == (3, 2, 2, 1)
    assert ds.inputs[0, 0, 0, 0] == 1.0
    assert np.isclose(ds.inputs[1, 1, 1, 0], 128 / 255)
    assert list(ds.labels) == [7, 1, 0]


def test_load_idx_count_mismatch(tmp_path):
    write_idx_images(tmp_path / "im.idx", np.zeros((10, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "lb.idx", np.zeros(9, dtype=np.uint8))
    with pytest.raises(CountMismatch):
        data.load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_load_idx_bad_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2))
    write_idx_labels(tmp_path / "lb.idx", [0])
    with pytest.raises(DataFormatError):
        data.load_idx(tmp_path / "bad.idx", tmp_path / "lb.idx")


def test_load_idx_truncated_payload(tmp_path):
    with open(tmp_path / "short.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, 2, 2, 2))
        f.write(b"\x00" * 7)  # needs 8
    write_idx_labels(tmp_path / "lb.idx", [0, 1])
    with pytest.raises(DataFormatError):
        data.load_idx(tmp_path / "short.idx", tmp_path / "lb.idx")


def test_load_csv_single_row(tmp_path):
    (tmp_path / "d.csv").write_text("2,0.5,0.5\n")
    ds = data.load_csv(tmp_path / "d.csv", [2])
    assert len(ds) == 1
    assert ds.labels[0] == 2
    assert np.allclose(ds.inputs[0], [0.5, 0.5])


def test_load_csv_ragged_row(tmp_path):
    (tmp_path / "d.csv").write_text("2,0.5,0.5\n1,0.25\n")
    with pytest.raises(DataFormatError):
        data.load_csv(tmp_path / "d.csv", [2])


def test_load_csv_empty_file(tmp_path):
    (tmp_path / "d.csv").write_text("")
    ds = data.load_csv(tmp_path / "d.csv", [2])
    assert len(ds) == 0
    assert ds.inputs.shape == (0, 2)


def test_csv_round_trip(tmp_path, blob_train):
    data.save_csv(blob_train, tmp_path / "blobs.csv")
    back = data.load_csv(tmp_path / "blobs.csv", [2])
    assert np.array_equal(back.inputs, blob_train.inputs)
    assert np.array_equal(back.labels, blob_train.labels)


def test_gaussian_noise_zero_std_is_constant():
    aset = data.gen_gaussian_noise((3, 3), 5, mean=0.5, std=0.0, seed=1)
    assert np.all(aset.inputs == 0.5)


def test_gaussian_noise_deterministic():
    a = data.gen_gaussian_noise((4,), 20, seed=9)
    b = data.gen_gaussian_noise((4,), 20, seed=9)
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, data.gen_gaussian_noise((4,), 20, seed=10).inputs)


def test_gaussian_noise_clipped_mass_matches_normal_cdf():
    # P(clip) = P(X <= 0) + P(X >= 1) for X ~ N(0.5, 1)
    aset = data.gen_gaussian_noise((10,), 1000, mean=0.5, std=1.0, seed=3)
    clipped = np.mean((aset.inputs == 0.0) | (aset.inputs == 1.0))
    expected = norm.cdf(-0.5) + (1.0 - norm.cdf(0.5))
    assert abs(clipped - expected) < 0.02


def test_uniform_noise_bounds_and_mean():
    aset = data.gen_uniform_noise((100,), 100, seed=5)
    assert aset.inputs.min() >= 0.0 and aset.inputs.max() <= 1.0
    assert 0.48 <= aset.inputs.mean() <= 0.52
    again = data.gen_uniform_noise((100,), 100, seed=5)
    assert np.array_equal(aset.inputs, again.inputs)


def test_fgsm_linf_bound(toy_net, blob_test):
    x = blob_test.inputs[0]
    adv = data.fgsm(toy_net, x, int(blob_test.labels[0]), epsilon=0.3)
    assert np.max(np.abs(adv - x)) <= 0.3 + 1e-7
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_fgsm_zero_gradient_identity():
    net = nn.Network([nn.Dense(np.zeros((2, 3)), np.zeros(3))])
    x = np.array([0.25, 0.5], dtype=np.float32)
    adv = data.fgsm(net, x, 0, epsilon=0.3)
    assert np.array_equal(adv, np.clip(x, 0, 1))


def test_fgsm_degrades_accuracy(toy_net, blob_test):
    clean = np.mean(nn.predict(toy_net, blob_test.inputs) == blob_test.labels)
    adv = data.attack_dataset(toy_net, blob_test, "fgsm", 0.3)
    attacked = np.mean(nn.predict(toy_net, adv.inputs) == blob_test.labels)
    assert attacked < clean


def test_pgd_single_step_equals_fgsm(toy_net, blob_test):
    x = blob_test.inputs[3]
    label = int(blob_test.labels[3])
    one = data.pgd(toy_net, x, label, epsilon=0.3, step=0.3, iters=1)
    ref = data.fgsm(toy_net, x, label, epsilon=0.3)
    assert np.array_equal(one, ref)


@pytest.mark.parametrize("iters", [1, 2, 5])
def test_pgd_projection_holds(toy_net, blob_test, iters):
    x = blob_test.inputs[7]
    adv = data.pgd(toy_net, x, int(blob_test.labels[7]), 0.2, 0.1, iters)
    assert np.max(np.abs(adv - x)) <= 0.2 + 1e-7
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_at_least_as_strong_as_fgsm(toy_net, blob_test):
    sub = data.LabeledDataset(blob_test.inputs[:60], blob_test.labels[:60], "test")
    fg = data.attack_dataset(toy_net, sub, "fgsm", 0.3)
    pg = data.attack_dataset(toy_net, sub, "pgd", 0.3, step=0.075, iters=10)
    acc_fg = np.mean(nn.predict(toy_net, fg.inputs) == sub.labels)
    acc_pg = np.mean(nn.predict(toy_net, pg.inputs) == sub.labels)
    assert acc_pg <= acc_fg  # success rate >= fgsm's


def test_mixed_set_membership_and_caps(toy_net, blob_test):
    noise = data.gen_uniform_noise((2,), 300, seed=2)
    adv = data.attack_dataset(toy_net, blob_test, "fgsm", 0.3)
    mixed = data.build_mixed_set(toy_net, blob_test, [noise, adv], k=0,
                                 per_source_cap=40, seed=5)
    # every member predicted as class 0, both sides present
    preds = nn.predict(toy_net, mixed.inputs)
    assert np.all(preds == 0)
    assert mixed.n_normal > 0
    assert 0 < mixed.n_anomaly <= 2 * 40
    assert mixed.inputs.min() >= 0.0 and mixed.inputs.max() <= 1.0


def test_mixed_set_cap_larger_than_available(toy_net, blob_test):
    adv = data.attack_dataset(
        toy_net, data.LabeledDataset(blob_test.inputs[:30], blob_test.labels[:30]),
        "fgsm", 0.3)
    mixed = data.build_mixed_set(toy_net, blob_test, [adv], k=1,
                                 per_source_cap=10_000, seed=0)
    predicted_k = nn.predict(toy_net, adv.inputs) == 1
    assert mixed.n_anomaly == int(predicted_k.sum())  # all included, no duplicates


def test_mixed_set_deterministic(toy_net, blob_test):
    noise = data.gen_uniform_noise((2,), 200, seed=2)
    a = data.build_mixed_set(toy_net, blob_test, [noise], 2, 20, seed=3)
    b = data.build_mixed_set(toy_net, blob_test, [noise], 2, 20, seed=3)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)


def test_mixed_set_empty_class_raises(toy_net, blob_test):
    empty = data.AnomalySet(np.zeros((0, 2), dtype=np.float32), "uniform")
    with pytest.raises(EmptyClass):
        data.build_mixed_set(toy_net, blob_test, [empty], 0, 50, seed=0)


def test_anomaly_set_round_trip(tmp_path):
    aset = data.gen_gaussian_noise((3, 2), 7, seed=4)
    data.save_anomaly_set(aset, tmp_path / "noise.bin", seed=4)
    back = data.load_anomaly_set(tmp_path / "noise.bin")
    assert back.source == "gaussian"
    assert np.array_equal(back.inputs, aset.inputs)


def test_fit_input_shape_crop_pad_broadcast():
    xs = np.ones((2, 4, 4, 1), dtype=np.float32)
    cropped = data.fit_input_shape(xs, (2, 2, 1))
    assert cropped.shape == (2, 2, 2, 1)
    padded = data.fit_input_shape(xs, (6, 6, 1))
    assert padded.shape == (2, 6, 6, 1)
    assert padded[0, 0, 0, 0] == 0.0  # zero pad
    assert padded[0, 2, 2, 0] == 1.0  # original content centered
    rgb = data.fit_input_shape(xs, (4, 4, 3))
    assert rgb.shape == (2, 4, 4, 3)
    assert np.all(rgb == 1.0)
    flat = data.fit_input_shape(xs, (16,))
    assert flat.shape == (2, 16)


def test_make_blobs_in_unit_box():
    ds = data.make_blobs(50, ((0.1, 0.1), (0.9, 0.9)), 0.3, seed=0)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    assert set(np.unique(ds.labels)) == {0, 1}
