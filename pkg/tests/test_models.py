"""Model tests: forward shapes, the encryption front-end equivalence,
gradient chain rules through the front-end, persistence, and training.

The front-end quantizer is straight-through, so finite differences do
not apply to keyed models; instead the input gradient of a keyed model
is checked algebraically against the plain-model gradient evaluated at
the encrypted input (inverse permutation for SHF, sign flips for NP).
"""

import numpy as np
import pytest

import enctransfer.autodiff as ad
from enctransfer import crypto, data, models


def plain_model(arch="cnn_small", seed=0):
    spec = models.ModelSpec(arch)
    return models.Classifier(spec, models.init_params(spec, seed))


def keyed_model(transform, block_size, arch="cnn_small", seed=0, key_seed=42):
    spec = models.ModelSpec(arch)
    key = crypto.EncryptionKey(key_seed, transform, block_size)
    return models.Classifier(spec, models.init_params(spec, seed), key=key)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 32, 32, 3)).astype(np.float32)


class TestForward:
    @pytest.mark.parametrize("arch", models.ARCHITECTURES)
    def test_logit_shape_and_determinism(self, arch):
        m = plain_model(arch)
        x = images(3)
        z = m.logits(x)
        assert z.shape == (3, 10)
        assert np.array_equal(z, m.logits(x))

    def test_param_init_deterministic(self):
        a = models.init_params(models.ModelSpec("vit_tiny"), 7)
        b = models.init_params(models.ModelSpec("vit_tiny"), 7)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValueError):
            models.ModelSpec("resnet50")

    def test_predict_batch_is_argmax(self):
        m = plain_model()
        x = images(5)
        labels, z = m.predict_batch(x)
        assert np.array_equal(labels, z.argmax(axis=1))

    def test_out_of_range_input_warns_and_clamps(self):
        m = plain_model()
        x = images(2) + 2.0
        models._warned_clamp = False
        with pytest.warns(UserWarning):
            z = m.logits(x)
        assert np.array_equal(z, m.logits(np.clip(x, 0, 1)))


class TestEncryptionFrontend:
    def test_quantize_u8(self):
        x = np.array([-0.1, 0.0, 0.5, 1.0, 1.7], dtype=np.float32)
        assert np.array_equal(models.quantize_u8(x), [0, 0, 128, 255, 255])

    @pytest.mark.parametrize("transform,m", [("SHF", 4), ("NP", 8), ("FFX", 4)])
    def test_keyed_forward_equals_plain_on_encrypted(self, transform, m):
        km = keyed_model(transform, m)
        pm = models.Classifier(km.spec, km.params)  # same weights, no key
        x = images(2, seed=1)
        enc = crypto.encrypt_batch(models.quantize_u8(x), km.key, km._tables)
        want = pm.logits(enc.astype(np.float32) / 255.0)
        assert np.allclose(km.logits(x), want, atol=1e-6)

    def test_shf_gradient_is_inverse_permutation(self):
        km = keyed_model("SHF", 4)
        pm = models.Classifier(km.spec, km.params)
        x = images(2, seed=2)
        y = np.array([3, 7])
        enc = crypto.encrypt_batch(models.quantize_u8(x), km.key, km._tables)
        g_enc = pm.input_gradient(enc.astype(np.float32) / 255.0, "cross_entropy", labels=y)
        got = km.input_gradient(x, "cross_entropy", labels=y)
        # scatter the encrypted-domain gradient back through the permutation
        blocks = crypto.partition_blocks(g_enc[0], 4)
        back = np.empty_like(blocks)
        back[:, km._tables.permutation] = blocks
        want = crypto.merge_blocks(back, 32, 32, 3, 4)
        assert np.allclose(got[0], want, atol=1e-6)

    def test_np_gradient_is_sign_flip(self):
        km = keyed_model("NP", 4)
        pm = models.Classifier(km.spec, km.params)
        x = images(2, seed=3)
        y = np.array([0, 1])
        enc = crypto.encrypt_batch(models.quantize_u8(x), km.key, km._tables)
        g_enc = pm.input_gradient(enc.astype(np.float32) / 255.0, "cross_entropy", labels=y)
        got = km.input_gradient(x, "cross_entropy", labels=y)
        flips = np.broadcast_to(km._tables.flip.astype(bool),
                                crypto.partition_blocks(g_enc[0], 4).shape)
        sign = crypto.merge_blocks(np.where(flips, -1.0, 1.0), 32, 32, 3, 4)
        assert np.allclose(got[0], g_enc[0] * sign, atol=1e-6)

    def test_ffx_gradient_raises(self):
        km = keyed_model("FFX", 4)
        with pytest.raises(models.GradientUnavailableError):
            km.input_gradient(images(1), "cross_entropy", labels=np.array([0]))

    def test_plain_input_gradient_matches_manual_graph(self):
        # layer-level gradient correctness is pinned against float64
        # finite differences elsewhere; this checks the Classifier
        # wrapper wiring (layout transpose, loss assembly) exactly
        m = plain_model()
        x = images(2, seed=4)
        y = np.array([5, 1])
        got = m.input_gradient(x, "cross_entropy", labels=y)

        t = ad.Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        t.requires_grad = True
        z = models.forward_net(m.spec, m.params, t)
        ad.backward(ad.tsum(ad.cross_entropy(z, y)))
        want = t.grad.transpose(0, 2, 3, 1)
        assert np.array_equal(got, want)


class TestPersistence:
    def test_roundtrip_preserves_logits_and_key(self, tmp_path):
        km = keyed_model("NP", 8)
        km.metrics["test_accuracy"] = 0.5
        p = str(tmp_path / "m.ckpt")
        km.save(p)
        back = models.Classifier.load(p)
        x = images(2, seed=5)
        assert np.array_equal(back.logits(x), km.logits(x))
        assert back.key == km.key
        assert back.metrics["test_accuracy"] == 0.5

    def test_truncated_checkpoint(self, tmp_path):
        m = plain_model()
        p = str(tmp_path / "m.ckpt")
        m.save(p)
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:-100])
        with pytest.raises(models.CheckpointError):
            models.Classifier.load(p)

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "m.ckpt")
        open(p, "wb").write(b"NOPE" + bytes(100))
        with pytest.raises(models.CheckpointError):
            models.Classifier.load(p)

    def test_wrong_version(self, tmp_path):
        import struct
        m = plain_model()
        p = str(tmp_path / "m.ckpt")
        m.save(p)
        raw = bytearray(open(p, "rb").read())
        raw[4:8] = struct.pack("<I", 99)
        open(p, "wb").write(bytes(raw))
        with pytest.raises(models.CheckpointVersionError):
            models.Classifier.load(p)


class TestTraining:
    def test_zero_epochs_keeps_init(self):
        train, _ = data.make_synthetic(50, 50, seed=0)
        cfg = models.TrainConfig(epochs=0, seed=3)
        m = models.train(models.ModelSpec("cnn_small"), train, cfg)
        init = models.init_params(models.ModelSpec("cnn_small"), 3)
        assert all(np.array_equal(m.params[k].data, init[k].data) for k in init)

    def test_training_is_deterministic(self):
        train, _ = data.make_synthetic(60, 50, seed=0)
        cfg = models.TrainConfig(epochs=1, batch_size=32, seed=4)
        a = models.train(models.ModelSpec("cnn_small"), train, cfg)
        b = models.train(models.ModelSpec("cnn_small"), train, cfg)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_learns_above_chance(self):
        train, _ = data.make_synthetic(200, 50, seed=0)
        cfg = models.TrainConfig(epochs=30, batch_size=64, lr=0.05, cosine_decay=False,
                                 augment_crop=False, augment_flip=False, seed=1)
        m = models.train(models.ModelSpec("cnn_small"), train, cfg)
        assert m.metrics["final_train_accuracy"] > 0.3

    def test_empty_training_set_rejected(self):
        empty = data.LabeledImages(np.zeros((0, 32, 32, 3), np.uint8),
                                   np.zeros(0, np.int64))
        with pytest.raises(ValueError):
            models.train(models.ModelSpec("cnn_small"), empty, models.TrainConfig(epochs=1))

    def test_indivisible_block_size_rejected(self):
        train, _ = data.make_synthetic(50, 50, seed=0)
        key = crypto.EncryptionKey(1, "SHF", 5)
        with pytest.raises(crypto.BlockSizeError):
            models.train(models.ModelSpec("cnn_small"), train,
                         models.TrainConfig(epochs=1), key=key)

    def test_augment_shapes_and_identity(self):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (4, 32, 32, 3)).astype(np.uint8)
        out = models._augment(imgs, rng, crop=True, flip=True)
        assert out.shape == imgs.shape and out.dtype == np.uint8
        same = models._augment(imgs, rng, crop=False, flip=False)
        assert np.array_equal(same, imgs)
