"""Small classifiers, optionally wrapped with a keyed encryption front-end.

Three architectures, all at native 32x32x3:

  cnn_small  4 conv blocks (32/64/128/128), max-pool between, GAP head
  cnn_deep   8 conv blocks in 4 stages (48/96/128/128 doubled), GAP head
  vit_tiny   patch 4, width 96, 4 heads, 4 transformer blocks, mean-pool

No batch normalization anywhere: attack-time input gradients then need no
train/eval mode switching. Convolutions use He init; ViT uses layer-norm.

A classifier with an EncryptionKey applies quantize -> encrypt -> rescale
in front of the network on every forward pass (training and inference),
so callers always supply plain [0,1] images. The front-end is
differentiable for SHF (inverse permutation) and NP (sign flip at flipped
positions) with a straight-through quantizer; FFX has no usable input
gradient and raises.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import crypto

ARCHITECTURES = ("cnn_small", "cnn_deep", "vit_tiny")

CHECKPOINT_MAGIC = b"ENCM"
CHECKPOINT_VERSION = 1


class GradientUnavailableError(RuntimeError):
    """Input gradients are not defined through this model (FFX front-end)."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    num_classes: int = 10

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    augment_crop: bool = True
    augment_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# -- parameter initialization ---------------------------------------------

_CNN_SMALL_CHANNELS = [32, 64, 128, 128]
_CNN_DEEP_CHANNELS = [48, 96, 96, 128, 128, 128, 128, 128]
_CNN_SMALL_POOL_AFTER = {0, 1, 2}
_CNN_DEEP_POOL_AFTER = {0, 2, 5}

_VIT_DIM = 96
_VIT_HEADS = 4
_VIT_DEPTH = 4
_VIT_PATCH = 4
_VIT_MLP = 384


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _init_cnn(rng, channels, pool_after, num_classes):
    params = {}
    c_in = 6  # 3 raw + 3 sine value planes, see _featurize
    for i, c_out in enumerate(channels):
        params[f"conv{i}.w"] = ad.Tensor(_he(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True)
        params[f"conv{i}.b"] = ad.Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        c_in = c_out
    params["head.w"] = ad.Tensor(_he(rng, (c_in, num_classes), c_in), requires_grad=True)
    params["head.b"] = ad.Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    return params


def _init_vit(rng, num_classes):
    d, mlp = _VIT_DIM, _VIT_MLP
    patch_dim = _VIT_PATCH * _VIT_PATCH * 6  # raw + sine planes
    n_tokens = (32 // _VIT_PATCH) ** 2
    params = {
        "embed.w": ad.Tensor(_he(rng, (patch_dim, d), patch_dim), requires_grad=True),
        "embed.b": ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
        "pos": ad.Tensor((rng.standard_normal((n_tokens, d)) * 0.02).astype(np.float32), requires_grad=True),
    }
    for i in range(_VIT_DEPTH):
        p = f"block{i}."
        for name in ("q", "k", "v", "proj"):
            params[p + f"attn.{name}.w"] = ad.Tensor(
                (rng.standard_normal((d, d)) * np.sqrt(1.0 / d)).astype(np.float32), requires_grad=True)
            params[p + f"attn.{name}.b"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        params[p + "ln1.g"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[p + "ln1.b"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        params[p + "ln2.g"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[p + "ln2.b"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        params[p + "mlp.w1"] = ad.Tensor(_he(rng, (d, mlp), d), requires_grad=True)
        params[p + "mlp.b1"] = ad.Tensor(np.zeros(mlp, dtype=np.float32), requires_grad=True)
        params[p + "mlp.w2"] = ad.Tensor(_he(rng, (mlp, d), mlp), requires_grad=True)
        params[p + "mlp.b2"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params["ln_f.g"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["ln_f.b"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params["head.w"] = ad.Tensor(_he(rng, (d, num_classes), d), requires_grad=True)
    params["head.b"] = ad.Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    return params


def init_params(spec: ModelSpec, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    if spec.architecture == "cnn_small":
        return _init_cnn(rng, _CNN_SMALL_CHANNELS, _CNN_SMALL_POOL_AFTER, spec.num_classes)
    if spec.architecture == "cnn_deep":
        return _init_cnn(rng, _CNN_DEEP_CHANNELS, _CNN_DEEP_POOL_AFTER, spec.num_classes)
    return _init_vit(rng, spec.num_classes)


def param_count(params: dict) -> int:
    return sum(int(p.data.size) for p in params.values())


# -- forward passes --------------------------------------------------------

def _forward_cnn(params, x, channels, pool_after):
    h = x
    for i in range(len(channels)):
        h = ad.relu(ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], pad=1))
        if i in pool_after:
            h = ad.maxpool2d(h)
    h = ad.global_avg_pool(h)
    return ad.linear(h, params["head.w"], params["head.b"])


def _forward_vit(params, x):
    n, c = x.data.shape[:2]
    g = 32 // _VIT_PATCH
    # (N,C,32,32) -> (N, tokens, patch pixels)
    h = ad.reshape(x, (n, c, g, _VIT_PATCH, g, _VIT_PATCH))
    h = ad.transpose(h, (0, 2, 4, 3, 5, 1))
    h = ad.reshape(h, (n, g * g, _VIT_PATCH * _VIT_PATCH * c))
    h = ad.add(ad.linear(h, params["embed.w"], params["embed.b"]), params["pos"])
    t, d = g * g, _VIT_DIM
    dh = d // _VIT_HEADS
    for i in range(_VIT_DEPTH):
        p = f"block{i}."
        hn = ad.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])

        def heads(w, b):
            y = ad.linear(hn, w, b)
            return ad.transpose(ad.reshape(y, (n, t, _VIT_HEADS, dh)), (0, 2, 1, 3))

        q = heads(params[p + "attn.q.w"], params[p + "attn.q.b"])
        k = heads(params[p + "attn.k.w"], params[p + "attn.k.b"])
        v = heads(params[p + "attn.v.w"], params[p + "attn.v.b"])
        att = ad.scaled_dot_product_attention(q, k, v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (n, t, d))
        h = ad.add(h, ad.linear(att, params[p + "attn.proj.w"], params[p + "attn.proj.b"]))
        hn = ad.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        m = ad.relu(ad.linear(hn, params[p + "mlp.w1"], params[p + "mlp.b1"]))
        h = ad.add(h, ad.linear(m, params[p + "mlp.w2"], params[p + "mlp.b2"]))
    h = ad.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    h = ad.tmean(h, axis=1)
    return ad.linear(h, params["head.w"], params["head.b"])


# Alongside the raw RGB planes, every network sees sin(2*pi*v/32) of the
# 0..255 pixel values: a Fourier feature of the value channel. Dataset
# pixel values sit on a step-32 lattice plus a small residual, and the
# sine planes expose that residual linearly (the lattice term vanishes);
# small networks never discover such modular structure from raw values
# alone. For off-lattice images the planes are just a smooth extra value
# encoding.
_VALUE_FREQ = 2.0 * np.pi * 255.0 / 32.0
# The sine planes carry pixel noise at full scale; damping them keeps the
# first layer's activations dominated by the raw planes (shapes) while the
# residual signal stays linearly recoverable.
_VALUE_GAIN = 0.25


def _featurize(x: ad.Tensor) -> ad.Tensor:
    sines = ad.mul(ad.sin(ad.mul(x, _VALUE_FREQ)), _VALUE_GAIN)
    return ad.concat([x, sines], axis=1)


def forward_net(spec: ModelSpec, params: dict, x: ad.Tensor) -> ad.Tensor:
    """Network logits from NCHW float input (no encryption front-end)."""
    x = _featurize(x)
    if spec.architecture == "cnn_small":
        return _forward_cnn(params, x, _CNN_SMALL_CHANNELS, _CNN_SMALL_POOL_AFTER)
    if spec.architecture == "cnn_deep":
        return _forward_cnn(params, x, _CNN_DEEP_CHANNELS, _CNN_DEEP_POOL_AFTER)
    return _forward_vit(params, x)


# -- encryption front-end ---------------------------------------------------

def quantize_u8(x01: np.ndarray) -> np.ndarray:
    """round(clamp(x,0,1)*255) as uint8."""
    return np.round(np.clip(x01, 0.0, 1.0) * 255.0).astype(np.uint8)


def encrypt_frontend(x: ad.Tensor, key: crypto.EncryptionKey,
                     tables: crypto.TransformTables) -> ad.Tensor:
    """quantize -> encrypt -> rescale, differentiable for SHF/NP.

    x: (N,C,H,W) float in [0,1]. The quantizer uses a straight-through
    gradient; SHF backprop is the inverse block permutation, NP backprop
    flips the gradient sign at flipped positions, FFX raises on backward.
    """
    nchw = x.data
    hwc = quantize_u8(nchw.transpose(0, 2, 3, 1))
    enc = crypto.encrypt_batch(hwc, key, tables)
    data = (enc.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data, dtype=ad.get_dtype())

    n, c, h, w = nchw.shape
    m = key.block_size

    def bwd(out):
        if not x.requires_grad:
            return
        g = out.grad.transpose(0, 2, 3, 1)  # NHWC
        if tables.transform == "FFX":
            raise GradientUnavailableError(
                "FFX front-end has no input gradient; use the black-box Square attack")
        blocks = g.reshape(n, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
        blocks = np.ascontiguousarray(blocks).reshape(n, -1, m * m * c)
        if tables.transform == "SHF":
            gb = np.empty_like(blocks)
            gb[..., tables.permutation] = blocks
        else:  # NP
            sign = np.where(tables.flip.astype(bool), -1.0, 1.0).astype(np.float32)
            gb = blocks * sign
        gb = gb.reshape(n, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
        gx = np.ascontiguousarray(gb).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        x.grad = gx if x.grad is None else x.grad + gx

    return ad._make(data, (x,), bwd, "encrypt_frontend")


# -- the classifier object --------------------------------------------------

_warned_clamp = False


@dataclass
class Classifier:
    spec: ModelSpec
    params: dict
    key: crypto.EncryptionKey | None = None
    train_seed: int = 0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        self._tables = crypto.derive_tables(self.key, 3) if self.key else None

    # images: (N,32,32,3) float in [0,1], NHWC
    def _to_tensor(self, images, requires_grad=False):
        global _warned_clamp
        images = np.asarray(images, dtype=np.float32)
        if images.min() < 0.0 or images.max() > 1.0:
            if not _warned_clamp:
                warnings.warn("input values outside [0,1]; clamping", stacklevel=3)
                _warned_clamp = True
            images = np.clip(images, 0.0, 1.0)
        x = ad.Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        x.requires_grad = requires_grad
        return x

    def _forward(self, x: ad.Tensor) -> ad.Tensor:
        if self.key is not None:
            x = encrypt_frontend(x, self.key, self._tables)
        return forward_net(self.spec, self.params, x)

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append(self._forward(self._to_tensor(images[i:i + batch_size])).data)
        return np.concatenate(outs)

    def predict_batch(self, images: np.ndarray):
        """Returns (labels, logits). Deterministic; encrypts internally."""
        z = self.logits(images)
        return z.argmax(axis=1), z

    def loss_gradient(self, images: np.ndarray, loss_fn) -> tuple:
        """Gradient of loss_fn(logits) w.r.t. the [0,1] input.

        loss_fn maps the logits Tensor to a scalar Tensor. Returns
        (grad NHWC, logits array). Raises for FFX-encrypted models.
        """
        if self.key is not None and self.key.transform == "FFX":
            raise GradientUnavailableError(
                "FFX front-end has no input gradient; use the black-box Square attack")
        x = self._to_tensor(images, requires_grad=True)
        z = self._forward(x)
        ad.backward(loss_fn(z))
        return x.grad.transpose(0, 2, 3, 1).copy(), z.data

    def input_gradient(self, images: np.ndarray, loss_kind: str, labels=None, targets=None):
        """Per-image input gradient for a named loss.

        loss_kind: 'cross_entropy' (needs labels) or 'logit_diff'
        (needs labels and targets; gradient of z_target - z_label).
        """
        if loss_kind == "cross_entropy":
            fn = lambda z: ad.tsum(ad.cross_entropy(z, labels))
        elif loss_kind == "logit_diff":
            fn = lambda z: ad.tsum(ad.sub(ad.take_per_row(z, targets), ad.take_per_row(z, labels)))
        else:
            raise ValueError(f"unknown loss_kind {loss_kind!r}")
        grad, _ = self.loss_gradient(images, fn)
        return grad

    # -- persistence --------------------------------------------------------

    def save(self, path: str):
        names = sorted(self.params)
        manifest = [{"name": k, "shape": list(self.params[k].data.shape)} for k in names]
        header = {
            "architecture": self.spec.architecture,
            "num_classes": self.spec.num_classes,
            "train_seed": self.train_seed,
            "metrics": self.metrics,
            "key": None if self.key is None else {
                "master_seed": f"{self.key.master_seed:032x}",
                "transform": self.key.transform,
                "block_size": self.key.block_size,
            },
            "params": manifest,
        }
        hj = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hj)))
        buf.write(hj)
        for k in names:
            buf.write(self.params[k].data.astype("<f4").tobytes())
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path: str) -> "Classifier":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
        try:
            header = json.loads(raw[12:12 + hlen])
        except (ValueError, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header ({e})") from None
        params = {}
        off = 12 + hlen
        for entry in header["params"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            end = off + 4 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated parameter blob {entry['name']}")
            arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(entry["shape"])
            params[entry["name"]] = ad.Tensor(arr.copy(), requires_grad=True)
            off = end
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
        key = None
        if header["key"] is not None:
            k = header["key"]
            key = crypto.EncryptionKey(int(k["master_seed"], 16), k["transform"], k["block_size"])
        return cls(ModelSpec(header["architecture"], header["num_classes"]),
                   params, key, header["train_seed"], header.get("metrics", {}))


# -- training ----------------------------------------------------------------

def _augment(images: np.ndarray, rng, crop: bool, flip: bool) -> np.ndarray:
    """Pad-4 random crop and horizontal flip on a uint8 NHWC batch."""
    out = images
    if crop:
        n, h, w, c = images.shape
        padded = np.zeros((n, h + 8, w + 8, c), dtype=np.uint8)
        padded[:, 4:4 + h, 4:4 + w] = images
        oy = rng.integers(0, 9, size=n)
        ox = rng.integers(0, 9, size=n)
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    if flip:
        do = rng.random(len(out)) < 0.5
        out = out.copy()
        out[do] = out[do, :, ::-1]
    return out


def evaluate_accuracy(model: Classifier, images_u8: np.ndarray, labels: np.ndarray) -> float:
    preds, _ = model.predict_batch(images_u8.astype(np.float32) / 255.0)
    return float(np.mean(preds == labels))


def train(spec: ModelSpec, train_data, cfg: TrainConfig,
          key: crypto.EncryptionKey | None = None, test_data=None,
          log=None) -> Classifier:
    """Train a classifier; fully deterministic given cfg.seed and data.

    train_data / test_data: LabeledImages (uint8 HWC). When a key is
    given every batch is encrypted after augmentation, before the
    forward pass, mirroring deployment where the query is encrypted last.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if key is not None and (32 % key.block_size):
        raise crypto.BlockSizeError(f"block size {key.block_size} does not divide 32")

    params = init_params(spec, cfg.seed)
    model = Classifier(spec, params, key=key, train_seed=cfg.seed)
    tables = model._tables
    opt = ad.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 0x7A31)

    n = len(train_data)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    last_acc = 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        correct = 0
        seen = 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = _augment(train_data.images[idx], rng, cfg.augment_crop, cfg.augment_flip)
            if key is not None:
                batch = crypto.encrypt_batch(batch, key, tables)
            x = ad.Tensor(np.ascontiguousarray(
                (batch.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)))
            labels = train_data.labels[idx]
            logits = forward_net(spec, params, x)
            loss = ad.tmean(ad.cross_entropy(logits, labels))
            opt.zero_grad()
            ad.backward(loss)
            if cfg.cosine_decay and total_steps > 0:
                opt.lr = 0.5 * cfg.lr * (1 + np.cos(np.pi * step / total_steps))
            opt.step()
            step += 1
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(idx)
        last_acc = correct / seen
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: train acc {last_acc:.3f}, loss {float(loss.data):.3f}")

    model.metrics["final_train_accuracy"] = last_acc
    if test_data is not None and cfg.epochs > 0:
        model.metrics["test_accuracy"] = evaluate_accuracy(model, test_data.images, test_data.labels)
    return model
