"""Train a plain classifier and a key-encrypted one on the same data.

The encrypted model never sees a plaintext image: every training batch is
encrypted with its secret key after augmentation, and `Classifier` applies
the same key inside its forward pass at inference time. The key IS the
defense — without it, queries are effectively noise to the model.

Run from the repository root:  python3 demos/01_train_plain_and_encrypted.py
"""

from enctransfer import crypto, data, models

# Synthetic 10-class data stands in for CIFAR-10 so the demo has no
# download step; pass a CIFAR-10 binary directory to data.load_cifar10
# for the real thing.
train, test = data.make_synthetic(n_train=1000, n_test=200, seed=0)
cfg = models.TrainConfig(epochs=5, batch_size=64, lr=0.05, seed=0)

plain = models.train(models.ModelSpec("cnn_small"), train, cfg,
                     test_data=test, log=print)
print(f"plain:  {plain.metrics}\n")

key = crypto.EncryptionKey(master_seed=42, transform="SHF", block_size=4)
shf = models.train(models.ModelSpec("cnn_small"), train, cfg, key=key,
                   test_data=test, log=print)
print(f"SHF-4:  {shf.metrics}\n")

plain.save("/tmp/demo_plain.ckpt")
shf.save("/tmp/demo_shf4.ckpt")
print("checkpoints saved to /tmp/demo_plain.ckpt and /tmp/demo_shf4.ckpt")

# The encrypted model is useless to anyone holding the wrong key: its
# forward pass encrypts with ITS key, so accuracy is unchanged, but an
# adversary cannot reconstruct what the model actually sees.
restored = models.Classifier.load("/tmp/demo_shf4.ckpt")
preds, _ = restored.predict_batch(test.images[:20].astype("float32") / 255.0)
print("restored SHF-4 model predictions:", preds.tolist())
