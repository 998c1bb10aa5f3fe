"""Visualize the three block-wise encryption transforms.

Writes side-by-side PNGs (plain | encrypted) for SHF, NP and FFX at block
sizes 4 and 16. SHF shuffles pixels inside each MxM block, NP flips
selected values v -> 255-v, and FFX replaces each value with a keyed
format-preserving cipher of it — increasingly unrecognizable to a human,
which is the point of the defense.

Run from the repository root:  python3 demos/02_encryption_preview.py
"""

import numpy as np
from PIL import Image

from enctransfer import crypto, data

_, test = data.make_synthetic(n_train=10, n_test=10, seed=3)
img = test.images[0]

panels = [img]
labels = ["plain"]
for transform in crypto.TRANSFORMS:
    for m in (4, 16):
        key = crypto.EncryptionKey(master_seed=7, transform=transform, block_size=m)
        panels.append(crypto.encrypt_batch(img[None], key)[0])
        labels.append(f"{transform}-{m}")

gap = np.full((32, 2, 3), 255, np.uint8)
row = panels[0]
for p in panels[1:]:
    row = np.concatenate([row, gap, p], axis=1)
Image.fromarray(row).resize((row.shape[1] * 4, row.shape[0] * 4),
                            Image.NEAREST).save("/tmp/encryption_preview.png")
print("panels:", " | ".join(labels))
print("wrote /tmp/encryption_preview.png")

# Every transform is invertible with the key: decrypt(encrypt(x)) == x.
for transform in crypto.TRANSFORMS:
    key = crypto.EncryptionKey(master_seed=7, transform=transform, block_size=4)
    enc = crypto.encrypt_image(img, key)
    dec = crypto.decrypt_image(enc, key)
    assert np.array_equal(dec, img), transform
print("decrypt(encrypt(x)) == x for all transforms")
