import json
import struct

import numpy as np
import pytest

from amlab.attacks import HarvestedDataset
from amlab.data import (
    IDX_IMAGES_MAGIC,
    LabeledDataset,
    SyntheticTaskSpec,
    generate_outliers,
    generate_surrogate,
    generate_synthetic,
    load_dataset,
    load_idx_images,
    save_dataset,
    separable_preset,
    split,
    surrogate_shift,
    synthetic_bundle,
    write_idx_images,
    write_idx_labels,
)
from amlab.defense import msp, ood_detect
from amlab.errors import ConfigurationError, DimensionError, FormatError
from amlab.evaluation import accuracy, ks_statistic
from amlab.nncore import TrainConfig, dense_net, train


def test_dataset_invariants():
    with pytest.raises(DimensionError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], "defender-train")
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 2)), [0, 5], "defender-train", num_classes=3)
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 2)), [0, 1], "validation")
    ds = LabeledDataset(np.zeros((2, 2)), [0, 1], "seed")
    with pytest.raises(ValueError):
        ds.inputs[0, 0] = 1.0
    with pytest.raises(AttributeError):
        ds.role = "defender-train"


def test_separable_preset_keeps_clusters_apart():
    for seed in range(5):
        spec = separable_preset(rng_seed=seed)
        assert spec.min_center_distance() > 4 * spec.cluster_std


def test_two_class_preset_is_learnable():
    spec = separable_preset(num_classes=2, rng_seed=3)
    train_ds = generate_synthetic(spec)
    test = generate_synthetic(SyntheticTaskSpec(2, spec.input_dim, spec.cluster_centers, spec.cluster_std, 50, 77), "defender-test")
    model, _ = train(dense_net(spec.input_dim, 2, seed=0), train_ds, TrainConfig(epochs=50))
    assert accuracy(model, test) >= 0.99


def test_generators_are_deterministic():
    spec = separable_preset(rng_seed=4)
    for make in (
        lambda: generate_synthetic(spec),
        lambda: generate_surrogate(spec, surrogate_shift(spec), 1.0),
        lambda: generate_outliers(spec),
    ):
        a, b = make(), make()
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_zero_spread_puts_samples_on_centers():
    centers = np.array([[0.0, 1.0], [3.0, 4.0]])
    ds = generate_synthetic(SyntheticTaskSpec(2, 2, centers, 0.0, 5, 0))
    np.testing.assert_array_equal(ds.inputs, centers[ds.labels])


def test_surrogate_has_dummy_labels_and_role():
    spec = separable_preset(rng_seed=0)
    sur = generate_surrogate(spec, surrogate_shift(spec), 1.0)
    assert sur.role == "surrogate"
    assert not sur.labels.any()
    shift = surrogate_shift(spec, 4.0)
    np.testing.assert_allclose(np.abs(shift), 4.0 * spec.cluster_std)


def test_shifted_surrogate_lowers_defender_msp(ctx0):
    f, b = ctx0.defender, ctx0.bundle
    gap = msp(f(b.test.inputs)).mean() - msp(f(b.surrogate.inputs)).mean()
    assert gap >= 0.15


def test_unshifted_surrogate_is_indistinguishable(ctx0):
    f, b = ctx0.defender, ctx0.bundle
    spec = separable_preset(rng_seed=0)
    same = generate_surrogate(spec, 0.0, 1.0)
    tau = 0.9
    fpr = np.mean([ood_detect(p, tau).value == "OOD" for p in f(b.test.inputs)])
    tpr = np.mean([ood_detect(p, tau).value == "OOD" for p in f(same.inputs)])
    assert abs(tpr - fpr) < 0.05
    assert ks_statistic(msp(f(b.test.inputs)), msp(f(same.inputs))) < 0.1


def test_wider_surrogate_shifts_msp_left(ctx0):
    f, b = ctx0.defender, ctx0.bundle
    wide = generate_surrogate(separable_preset(rng_seed=0), 0.0, 3.0)
    benign, broad = msp(f(b.test.inputs)), msp(f(wide.inputs))
    assert np.median(broad) < np.median(benign)
    assert broad.mean() < benign.mean()


def test_split_contract():
    ds = LabeledDataset(np.arange(100.0)[:, None], np.zeros(100), "defender-train")
    a, b = split(ds, 0.8, rng_seed=3)
    assert (len(a), len(b)) == (80, 20)
    assert sorted(np.concatenate([a.inputs[:, 0], b.inputs[:, 0]])) == list(np.arange(100.0))
    a2, _ = split(ds, 0.8, rng_seed=3)
    np.testing.assert_array_equal(a.inputs, a2.inputs)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigurationError):
            split(ds, bad)


def test_bundle_roles_and_manifest(tmp_path):
    bundle = synthetic_bundle(separable_preset(rng_seed=1))
    assert bundle.train.role == "defender-train"
    assert bundle.val.role == bundle.test.role == "defender-test"
    assert bundle.surrogate.role == "surrogate"
    assert bundle.outliers.role == "outlier"
    assert bundle.seed_pool.role == "seed"
    manifest = json.loads(bundle.write_manifest(tmp_path / "m.json").read_text())
    assert set(manifest) == {"train", "val", "test", "seed_pool", "surrogate", "outliers"}
    with pytest.raises(ConfigurationError):
        train(dense_net(20, 10), bundle.test, TrainConfig(epochs=1))


# -- IDX ---------------------------------------------------------------------


@pytest.fixture
def idx_pair(tmp_path):
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 5, 7] = 128
    images[2] = 17
    labels = np.array([3, 0, 9], dtype=np.uint8)
    return (
        write_idx_images(tmp_path / "img.idx3-ubyte", images),
        write_idx_labels(tmp_path / "lbl.idx1-ubyte", labels),
        images,
        labels,
    )


def test_idx_round_trip(idx_pair):
    img_path, lbl_path, images, labels = idx_pair
    ds = load_idx_images(img_path, lbl_path)
    assert len(ds) == 3
    assert ds.input_shape == (1, 28, 28)
    assert ds.inputs[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(ds.inputs[:, 0], images / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert img_path.read_bytes()[:4] == struct.pack(">I", IDX_IMAGES_MAGIC)


def test_idx_unlabelled_roles(idx_pair):
    img_path, lbl_path, _, _ = idx_pair
    assert not load_idx_images(img_path, None, "surrogate").labels.any()
    assert not load_idx_images(img_path, lbl_path, "outlier").labels.any()
    with pytest.raises(ConfigurationError):
        load_idx_images(img_path, None, "defender-train")


def test_idx_errors(idx_pair, tmp_path):
    img_path, lbl_path, images, _ = idx_pair
    short_labels = write_idx_labels(tmp_path / "short", np.array([1, 2], dtype=np.uint8))
    with pytest.raises(FormatError, match="labels"):
        load_idx_images(img_path, short_labels)
    raw = img_path.read_bytes()
    bad_magic = tmp_path / "bad"
    bad_magic.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_idx_images(bad_magic, lbl_path)
    truncated = tmp_path / "trunc"
    truncated.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_idx_images(truncated, lbl_path)
    with pytest.raises(FormatError, match="trailing"):
        trailing = tmp_path / "trail"
        trailing.write_bytes(raw + b"\0")
        load_idx_images(trailing, lbl_path)


# -- dataset files -----------------------------------------------------------


def test_dataset_file_round_trip(tmp_path):
    ds = LabeledDataset(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 1, 0, 1], "seed", "pool", 2)
    header, back = load_dataset(save_dataset(ds, tmp_path / "d.amld", {"origin": "test"}))
    assert header["provenance"] == {"origin": "test"}
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert (back.role, back.name, back.num_classes) == ("seed", "pool", 2)


def test_harvest_file_keeps_provenance(tmp_path):
    h = HarvestedDataset(np.ones((2, 3)), np.array([[0.2, 0.8], [0.6, 0.4]]), {"kind": "knockoff", "budget": 2})
    header, arrays = load_dataset(save_dataset(h, tmp_path / "h.amld", h.source_attack))
    assert header["role"] == "harvest"
    assert header["provenance"]["budget"] == 2
    np.testing.assert_array_equal(arrays["targets"], h.targets)
