"""Dataset tests: format decoding against a per-byte oracle, subset
stratification, error reporting, and synthetic-generator properties."""

import numpy as np
import pytest

from enctransfer import data


def write_batch(path, labels, images_hwc):
    """Independent encoder: label byte + channel-planar pixel bytes."""
    with open(path, "wb") as f:
        for lab, img in zip(labels, images_hwc):
            f.write(bytes([lab]))
            f.write(img[:, :, 0].tobytes())
            f.write(img[:, :, 1].tobytes())
            f.write(img[:, :, 2].tobytes())


class TestBinaryFormat:
    def test_roundtrip_against_reference_encoder(self, tmp_path):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 10, 7).astype(np.uint8)
        images = rng.integers(0, 256, (7, 32, 32, 3)).astype(np.uint8)
        p = tmp_path / "batch.bin"
        write_batch(p, labels, images)
        got = data.read_cifar_file(str(p))
        assert np.array_equal(got.labels, labels)
        assert np.array_equal(got.images, images)

    def test_truncated_file_names_offset(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes(data.RECORD_LEN + 100))  # one record + partial
        with pytest.raises(data.DatasetFormatError) as e:
            data.read_cifar_file(str(p))
        assert str(data.RECORD_LEN) in str(e.value)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "bad.bin"
        rec = bytearray(data.RECORD_LEN)
        rec[0] = 11
        p.write_bytes(bytes(rec))
        with pytest.raises(data.DatasetFormatError):
            data.read_cifar_file(str(p))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        with pytest.raises(data.DatasetFormatError):
            data.read_cifar_file(str(p))


class TestStratifiedSubset:
    def test_exact_class_balance(self):
        train, _ = data.make_synthetic(400, 100, seed=1)
        sub = data.stratified_subset(train, 100, seed=2)
        counts = np.bincount(sub.labels, minlength=10)
        assert (counts == 10).all()

    def test_deterministic(self):
        train, _ = data.make_synthetic(400, 100, seed=1)
        a = data.stratified_subset(train, 100, seed=2)
        b = data.stratified_subset(train, 100, seed=2)
        assert np.array_equal(a.images, b.images)

    def test_rejects_non_multiple_of_ten(self):
        train, _ = data.make_synthetic(100, 100, seed=1)
        with pytest.raises(ValueError):
            data.stratified_subset(train, 55, seed=0)


class TestSynthetic:
    def test_shapes_types_and_balance(self):
        train, test = data.make_synthetic(200, 100, seed=3)
        assert train.images.shape == (200, 32, 32, 3)
        assert train.images.dtype == np.uint8
        assert (np.bincount(train.labels, minlength=10) == 20).all()
        assert len(test) == 100

    def test_deterministic_and_split_disjoint(self):
        a_train, a_test = data.make_synthetic(100, 50, seed=4)
        b_train, b_test = data.make_synthetic(100, 50, seed=4)
        assert np.array_equal(a_train.images, b_train.images)
        assert np.array_equal(a_test.images, b_test.images)
        # train and test come from different streams
        assert not np.array_equal(a_train.images[:50], a_test.images)

    def test_values_near_palette_lattice(self):
        # every pixel is a lattice level plus the class tilt plus bounded noise
        train, _ = data.make_synthetic(50, 50, seed=5)
        bound = data.NOISE_AMPLITUDE + data.TILT_AMPLITUDE
        v = train.images.astype(np.int64)
        offset = (v - data.PALETTE_OFFSET) % data.PALETTE_STEP
        dist = np.minimum(offset, data.PALETTE_STEP - offset)
        # clipping at 0/255 can exceed the bound only at the extremes
        interior = (v > bound) & (v < 255 - bound)
        assert dist[interior].max() <= bound

    def test_class_tilt_encodes_pair_polarity(self):
        for cls in range(0, data.NUM_CLASSES, 2):
            even, odd = data.class_tilt(cls), data.class_tilt(cls + 1)
            assert np.all(even == data.TILT_AMPLITUDE)
            assert np.array_equal(odd, -even)

    def test_palette_residual_encodes_the_pair_member(self):
        # each pixel is lattice + polarity + noise, so the centered
        # "mod 32" residual isolates polarity + noise; its image mean
        # recovers the pair member almost exactly
        train, _ = data.make_synthetic(200, 50, seed=6)
        v = train.images.astype(np.int64)
        res = ((v - data.PALETTE_OFFSET + 16) % data.PALETTE_STEP) - 16
        member = (res.reshape(len(v), -1).mean(axis=1) < 0).astype(np.int64)
        acc = np.mean(member == train.labels % 2)
        assert acc > 0.95

    def test_load_cifar10_falls_back_to_synthetic(self, tmp_path):
        train, test = data.load_cifar10(str(tmp_path), 100, 50, seed=0)
        assert len(train) == 100 and len(test) == 50

    def test_load_cifar10_reads_real_binaries(self, tmp_path):
        rng = np.random.default_rng(1)
        for name in data.TRAIN_FILES + [data.TEST_FILE]:
            labels = np.tile(np.arange(10), 4).astype(np.uint8)
            images = rng.integers(0, 256, (40, 32, 32, 3)).astype(np.uint8)
            write_batch(tmp_path / name, labels, images)
        train, test = data.load_cifar10(str(tmp_path), 100, 20, seed=0)
        assert len(train) == 100 and len(test) == 20
        assert (np.bincount(train.labels, minlength=10) == 10).all()
