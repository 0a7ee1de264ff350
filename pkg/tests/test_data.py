import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from branch_distill.data import (
    AugmentPolicy,
    Dataset,
    augment,
    data_root,
    iterate_batches,
    load_cifar_binary,
    load_dataset,
    load_idx,
    parse_dataset_id,
    pipelines,
    save_cifar_binary,
    save_idx,
    synth_blobs,
)
from branch_distill.errors import ConfigError, DataError

from conftest import MNIST_ROOT


def _idx_fixture(tmp_path, n=2, h=3, w=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, h, w), dtype=np.uint8)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    save_idx(images, labels, ip, lp)
    return images, labels, ip, lp


# -- IDX -----------------------------------------------------------------------


def test_idx_hand_built_fixture(tmp_path):
    pixels = bytes(range(12)) + bytes(range(255, 243, -1))
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 2, 3, 4) + pixels)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 1]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 1, 3, 4) and ds.labels.tolist() == [7, 1]
    assert ds.images.tobytes() == pixels
    x = ds.float_images()
    assert x[0, 0, 0, 1] == 1 / 255 and x[1, 0, 0, 0] == 1.0


def test_idx_round_trip(tmp_path):
    images, labels, ip, lp = _idx_fixture(tmp_path, n=5)
    ds = load_idx(ip, lp)
    assert np.array_equal(ds.images[:, 0], images) and np.array_equal(ds.labels, labels)
    save_idx(ds.images, ds.labels, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i2").read_bytes() == ip.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lp.read_bytes()


def test_idx_gzip(tmp_path):
    images, labels, ip, lp = _idx_fixture(tmp_path)
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert np.array_equal(load_idx(gz, lp).images[:, 0], images)


def test_idx_limit(tmp_path):
    _, labels, ip, lp = _idx_fixture(tmp_path, n=6)
    assert np.array_equal(load_idx(ip, lp, limit=4).labels, labels[:4])


def test_idx_labels_magic_as_images(tmp_path):
    _, _, ip, lp = _idx_fixture(tmp_path)
    with pytest.raises(DataError, match=r"0x00000803"):
        load_idx(lp, lp)


def test_idx_truncated_payload(tmp_path):
    _, _, ip, lp = _idx_fixture(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(DataError, match=r"byte 16"):
        load_idx(ip, lp)


def test_idx_truncated_header(tmp_path):
    p = tmp_path / "short"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(DataError, match="byte 0"):
        load_idx(p, p)


def test_idx_count_mismatch(tmp_path):
    images, labels, ip, lp = _idx_fixture(tmp_path, n=3)
    save_idx(images, labels[:2], tmp_path / "x", lp)
    with pytest.raises(DataError, match="3 images but .* 2 labels"):
        load_idx(ip, lp)


def test_idx_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


@pytest.mark.skipif(not Path(MNIST_ROOT, "mnist").is_dir(), reason="MNIST files not available")
def test_standard_mnist_train_size():
    train, test = load_dataset("mnist", MNIST_ROOT)
    assert train.images.shape == (60000, 1, 28, 28) and len(test) == 10000
    assert set(np.unique(train.labels)) == set(range(10))


# -- CIFAR ---------------------------------------------------------------------


def test_cifar10_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (1, 3, 32, 32), dtype=np.uint8)
    path = tmp_path / "batch.bin"
    save_cifar_binary(img, [6], path)
    raw = path.read_bytes()
    assert len(raw) == 3073 and raw[0] == 6 and raw[1:1025] == img[0, 0].tobytes()
    ds = load_cifar_binary(path)
    assert np.array_equal(ds.images, img) and ds.labels.tolist() == [6] and ds.class_count == 10


def test_cifar100_fine_and_coarse(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (3, 3, 32, 32), dtype=np.uint8)
    path = tmp_path / "train.bin"
    save_cifar_binary(img, [50, 99, 3], path, coarse_labels=[10, 19, 0])
    fine = load_cifar_binary(path, variant="cifar100")
    coarse = load_cifar_binary(path, coarse=True, variant="cifar100")
    assert fine.labels.tolist() == [50, 99, 3] and fine.class_count == 100
    assert coarse.labels.tolist() == [10, 19, 0] and coarse.class_count == 20
    assert np.array_equal(fine.images, img)


def test_cifar_truncated_reports_byte_counts(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3073 + 100))
    with pytest.raises(DataError, match=r"3173 bytes.*expected 3073 or 6146"):
        load_cifar_binary(path)


def test_cifar_multiple_files_concatenate(tmp_path):
    for i in range(2):
        save_cifar_binary(np.full((2, 3, 32, 32), i, np.uint8), [i, i], tmp_path / f"b{i}.bin")
    ds = load_cifar_binary([tmp_path / "b0.bin", tmp_path / "b1.bin"])
    assert ds.labels.tolist() == [0, 0, 1, 1]


def test_cifar10_dataset_id(tmp_path):
    base = tmp_path / "cifar-10-batches-bin"
    base.mkdir()
    for i in range(1, 6):
        save_cifar_binary(np.zeros((2, 3, 32, 32), np.uint8), [i, 0], base / f"data_batch_{i}.bin")
    save_cifar_binary(np.zeros((1, 3, 32, 32), np.uint8), [9], base / "test_batch.bin")
    tr, te = load_dataset("cifar10", tmp_path)
    assert len(tr) == 10 and len(te) == 1
    tr, _ = load_dataset("cifar10:3", tmp_path)
    assert len(tr) == 3


# -- datasets and ids --------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 1]), 3)


def test_synth_blobs_construction():
    ds = synth_blobs(4, 8)
    assert len(ds) == 32 and np.bincount(ds.labels).tolist() == [8, 8, 8, 8]
    assert synth_blobs(4, 8, seed=9).checksum() == synth_blobs(4, 8, seed=9).checksum()
    assert synth_blobs(4, 8, seed=9).checksum() != synth_blobs(4, 8, seed=10).checksum()
    with pytest.raises(ConfigError):
        synth_blobs(1, 8)


def test_synth_splits_share_patterns():
    tr, te = load_dataset("synth:64", classes=3)
    assert len(tr) == 64 and len(te) > 0 and tr.class_count == 3
    means = {c: tr.images[tr.labels == c].mean(axis=0) for c in range(3)}
    for x, y in zip(te.images[:10], te.labels[:10]):
        nearest = min(means, key=lambda c: ((x - means[c]) ** 2).sum())
        assert nearest == y


def test_parse_dataset_id():
    assert parse_dataset_id("mnist") == ("mnist", None)
    assert parse_dataset_id("mnist:10000") == ("mnist", 10000)
    for bad in ("mnist:x", "mnist:0"):
        with pytest.raises(ConfigError):
            parse_dataset_id(bad)
    with pytest.raises(ConfigError):
        load_dataset("imagenet")


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("BRANCH_DISTILL_DATA", str(tmp_path))
    assert data_root() == tmp_path
    assert data_root("elsewhere") == Path("elsewhere")


def test_missing_dataset_files(tmp_path):
    with pytest.raises(DataError):
        load_dataset("mnist", tmp_path)


def test_normalization_cached_from_training_split():
    ds = synth_blobs(3, 10, image_shape=(2, 4, 4))
    mean, std = ds.normalization
    x = ds.float_images()
    assert np.allclose(mean, x.mean(axis=(0, 2, 3))) and np.allclose(std, x.std(axis=(0, 2, 3)))
    assert ds.normalization is ds.normalization


def test_iterate_batches_cover():
    batches = list(iterate_batches(10, 4))
    assert [len(b) for b in batches] == [4, 4, 2]
    shuffled = np.concatenate(list(iterate_batches(10, 3, np.random.default_rng(0))))
    assert sorted(shuffled.tolist()) == list(range(10))


# -- augmentation ------------------------------------------------------------------


def test_normalize_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = augment(x, AugmentPolicy(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)))
    assert np.array_equal(out, x)


def test_normalize_per_channel(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    out = augment(x, AugmentPolicy(mean=(1.0, -2.0), std=(2.0, 0.5)))
    assert np.allclose(out[:, 0], (x[:, 0] - 1) / 2) and np.allclose(out[:, 1], (x[:, 1] + 2) / 0.5)


def test_hflip_twice_identity(rng):
    x = rng.standard_normal((3, 2, 4, 5))
    p = AugmentPolicy(hflip=True, force_flip=True)
    once = augment(x, p)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment(once, p), x)


def test_crop_forced_offset():
    x = np.arange(1 * 1 * 6 * 6, dtype=np.float64).reshape(1, 1, 6, 6) + 1
    same = augment(x, AugmentPolicy(crop_pad=4, force_offset=(4, 4)))
    assert np.array_equal(same, x)
    shifted = augment(x, AugmentPolicy(crop_pad=4, force_offset=(5, 3)))
    expect = np.zeros_like(x)
    expect[0, 0, :5, 1:] = x[0, 0, 1:, :5]
    assert np.array_equal(shifted, expect)


def test_crop_random_offsets_preserve_shape_and_zero_pad(rng):
    x = np.ones((16, 1, 5, 5))
    out = augment(x, AugmentPolicy(crop_pad=4), np.random.default_rng(0))
    assert out.shape == x.shape and set(np.unique(out)) <= {0.0, 1.0}


def test_augment_order_crop_flip_normalize():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    p = AugmentPolicy(crop_pad=1, hflip=True, mean=(1.0,), std=(2.0,), force_offset=(1, 0), force_flip=True)
    padded = np.zeros((6, 6))
    padded[1:5, 1:5] = x[0, 0]
    expect = (padded[1:5, 0:4][:, ::-1] - 1.0) / 2.0
    assert np.array_equal(augment(x, p)[0, 0], expect)


def test_augment_does_not_modify_input(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    before = x.copy()
    augment(x, AugmentPolicy(crop_pad=2, hflip=True, mean=(0.5,), std=(2.0,)), rng)
    assert np.array_equal(x, before)


def test_pipelines_differ(tmp_path):
    cifar = Dataset(np.zeros((2, 3, 32, 32), np.uint8), np.array([0, 1]), 10, name="cifar10", scale=1 / 255)
    train_p, eval_p = pipelines(cifar)
    assert train_p != eval_p
    assert train_p.crop_pad == 4 and train_p.hflip
    assert eval_p.crop_pad == 0 and not eval_p.hflip and eval_p.normalizes
    mnist_train, mnist_eval = pipelines(synth_blobs(2, 3))
    assert not mnist_eval.hflip and mnist_eval.crop_pad == 0
