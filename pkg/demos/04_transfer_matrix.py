"""Measure how well adversarial examples transfer between models.

AEs crafted against a plain model are replayed against an SHF-encrypted
model (and vice versa is blocked for FFX, which exposes no gradients).
Two numbers per cell:

  Acc — percent of AEs the target still classifies correctly (higher =
        more robust), and
  ASR — among images both models got right on clean input, the percent
        whose AE fools the target (lower = less transferable).

Run from the repository root:  python3 demos/04_transfer_matrix.py
"""

import numpy as np

from enctransfer import attacks, crypto, data, harness, metrics, models

train, test = data.make_synthetic(n_train=1000, n_test=200, seed=0)
cfg = models.TrainConfig(epochs=5, batch_size=64, lr=0.05, seed=0)

zoo = {
    "plain": models.train(models.ModelSpec("cnn_small"), train, cfg,
                          test_data=test),
    "shf4": models.train(
        models.ModelSpec("cnn_small"), train, cfg, test_data=test,
        key=crypto.EncryptionKey(master_seed=11, transform="SHF", block_size=4)),
}
for name, m in zoo.items():
    print(f"{name}: {m.metrics}")

images = test.images[:60].astype(np.float32) / 255.0
labels = test.labels[:60]
acfg = attacks.default_configs(seed=0, n_iter=25)["APGD_CE"]
batch = attacks.apgd(zoo["plain"], images, labels, acfg)

entries = [("plain", "APGD_CE", batch.originals, batch.adversarials,
            batch.labels, zoo["plain"].logits(batch.originals).argmax(axis=1))]
report = metrics.transfer_matrix(
    entries, zoo, lambda m, x: m.logits(x).argmax(axis=1))

print()
print(harness.format_table(report))
print("the self-cell (plain -> plain) is the white-box row; the encrypted")
print("target sees the same AEs but through its keyed transform")
