"""Generate adversarial examples with the four-attack suite.

APGD-ce (gradient ascent on cross-entropy), APGD-t (targeted DLR loss),
FAB-t (minimal-norm boundary projection) and Square (black-box random
search) all run under the same l-infinity budget eps = 8/255. Every AE is
checked against the bound |x_adv - x| <= eps and x_adv in [0,1].

Run from the repository root:  python3 demos/03_attack_suite.py
"""

import numpy as np

from enctransfer import attacks, data, models

train, test = data.make_synthetic(n_train=1000, n_test=100, seed=0)
cfg = models.TrainConfig(epochs=5, batch_size=64, lr=0.05, seed=0)
model = models.train(models.ModelSpec("cnn_small"), train, cfg, test_data=test)
print(f"victim: {model.metrics}\n")

images = test.images[:40].astype(np.float32) / 255.0
labels = test.labels[:40]

configs = attacks.default_configs(seed=0, n_iter=25, square_queries=300)
result = attacks.run_attack_suite(model, images, labels, configs, log=print)

print()
for kind, batch in result.batches.items():
    attacks.check_bounds(batch)
    linf = np.abs(batch.adversarials - batch.originals).max()
    print(f"{kind:8s} fooled {int(batch.success.sum()):2d}/{len(batch)}  "
          f"max|delta| = {linf:.4f} (eps = {batch.epsilon:.4f})")

# Batches persist as a directory of .npy arrays plus a manifest, so a
# separate process can evaluate transfer without re-attacking.
attacks.save_batch(result.batches["APGD_CE"], "/tmp/demo_apgd_batch")
reloaded = attacks.load_batch("/tmp/demo_apgd_batch")
assert np.array_equal(reloaded.adversarials,
                      result.batches["APGD_CE"].adversarials)
print("\nAPGD_CE batch saved to /tmp/demo_apgd_batch and reloaded intact")
