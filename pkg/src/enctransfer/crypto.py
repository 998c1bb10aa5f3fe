"""Keyed block-wise image transforms: pixel shuffling (SHF), negative-
positive flipping (NP), and a Feistel-based format-preserving cipher (FFX).

All key material expands through a counter-based keyed PRF (BLAKE2b with
the 128-bit master seed as MAC key and a domain-separation tag in the
message), so a key always derives the same tables on any platform and no
global RNG state is involved.

Images are 8-bit HWC arrays. An image is split into M x M blocks
(raster order), every block is flattened row-major to M*M*C values, and
the same key-derived tables are applied to every block:

  SHF  out[i] = in[perm[i]]                    (one permutation of M*M*C)
  NP   out[i] = 255 - in[i] where flip[i]=1    (involution)
  FFX  out[i] = table_i[in[i]]                 (one bijection on [0,255]
                                                per intra-block position)

The FFX bijections come from an 8-round balanced Feistel network on two
4-bit halves; the round functions are PRF-derived nibble tables keyed by
(seed, block size, intra-block position, round), so the block size
genuinely changes the cipher.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

TRANSFORMS = ("SHF", "NP", "FFX")

FEISTEL_ROUNDS = 8


class BlockSizeError(ValueError):
    """Block size does not divide the image dimensions."""


@dataclass(frozen=True)
class EncryptionKey:
    """Secret key: 128-bit master seed, transform kind, block size M."""

    master_seed: int
    transform: str
    block_size: int

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}, expected one of {TRANSFORMS}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not 0 <= self.master_seed < 2 ** 128:
            raise ValueError("master_seed must fit in 128 bits")

    def seed_bytes(self):
        return self.master_seed.to_bytes(16, "big")


@dataclass(frozen=True)
class TransformTables:
    """Key-derived lookup tables, immutable after derivation.

    permutation: (M*M*C,) int for SHF, else None
    flip:        (M*M*C,) uint8 in {0,1} for NP, else None
    ffx_enc/dec: (M*M*C, 256) uint8 bijections for FFX, else None
    """

    transform: str
    block_size: int
    channels: int
    permutation: np.ndarray | None = None
    flip: np.ndarray | None = None
    ffx_enc: np.ndarray | None = None
    ffx_dec: np.ndarray | None = None


def _prf_stream(seed: bytes, tag: bytes, n: int) -> bytes:
    """n pseudorandom bytes from BLAKE2b(key=seed, msg=tag||counter)."""
    out = bytearray()
    counter = 0
    while len(out) < n:
        h = hashlib.blake2b(tag + b"\x00" + counter.to_bytes(8, "big"), key=seed)
        out += h.digest()
        counter += 1
    return bytes(out[:n])


class _KeyedStream:
    """Sequential uniform draws backed by the keyed PRF."""

    def __init__(self, seed: bytes, tag: bytes):
        self.seed = seed
        self.tag = tag
        self.counter = 0
        self.buf = b""
        self.pos = 0

    def _refill(self):
        h = hashlib.blake2b(self.tag + b"\x00" + self.counter.to_bytes(8, "big"), key=self.seed)
        self.buf = h.digest()
        self.pos = 0
        self.counter += 1

    def _next_u32(self) -> int:
        if self.pos + 4 > len(self.buf):
            self._refill()
        v = int.from_bytes(self.buf[self.pos:self.pos + 4], "big")
        self.pos += 4
        return v

    def randbelow(self, bound: int) -> int:
        """Uniform int in [0, bound) via rejection sampling."""
        limit = (2 ** 32 // bound) * bound
        while True:
            v = self._next_u32()
            if v < limit:
                return v % bound


def derive_tables(key: EncryptionKey, channels: int) -> TransformTables:
    """Expand a key into the transform tables for images with `channels`."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    m = key.block_size
    size = m * m * channels
    seed = key.seed_bytes()
    ctx = f"M={m};C={channels}".encode()

    if key.transform == "SHF":
        perm = np.arange(size, dtype=np.int64)
        stream = _KeyedStream(seed, b"shf;" + ctx)
        for i in range(size - 1, 0, -1):  # Fisher-Yates
            j = stream.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return TransformTables("SHF", m, channels, permutation=perm)

    if key.transform == "NP":
        raw = np.frombuffer(_prf_stream(seed, b"np;" + ctx, size), dtype=np.uint8)
        return TransformTables("NP", m, channels, flip=(raw & 1).astype(np.uint8))

    # FFX: per-position round tables, 8 rounds x 16 nibble entries
    raw = np.frombuffer(_prf_stream(seed, b"ffx;" + ctx, size * FEISTEL_ROUNDS * 16), dtype=np.uint8)
    round_f = (raw & 0x0F).reshape(size, FEISTEL_ROUNDS, 16)
    vals = np.arange(256, dtype=np.uint8)
    left = np.broadcast_to(vals >> 4, (size, 256)).copy()
    right = np.broadcast_to(vals & 0x0F, (size, 256)).copy()
    pos = np.arange(size)[:, None]
    for r in range(FEISTEL_ROUNDS):
        left, right = right, left ^ round_f[:, r, :][pos, right]
    enc = ((left << 4) | right).astype(np.uint8)
    dec = np.argsort(enc, axis=1).astype(np.uint8)
    return TransformTables("FFX", m, channels, ffx_enc=enc, ffx_dec=dec)


def partition_blocks(img: np.ndarray, m: int) -> np.ndarray:
    """Split an HWC image into raster-ordered flat blocks.

    Returns (n_blocks, M*M*C); each block is flattened row-major over
    (row, col, channel). Exact inverse of merge_blocks.
    """
    h, w, c = img.shape
    if h % m or w % m:
        raise BlockSizeError(f"block size {m} does not divide image {h}x{w}")
    blocks = img.reshape(h // m, m, w // m, m, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks).reshape(-1, m * m * c)


def merge_blocks(blocks: np.ndarray, h: int, w: int, c: int, m: int) -> np.ndarray:
    """Inverse of partition_blocks."""
    g = blocks.reshape(h // m, w // m, m, m, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(g).reshape(h, w, c)


def _apply_tables(blocks: np.ndarray, tables: TransformTables, decrypt: bool) -> np.ndarray:
    """Transform flat blocks (..., M*M*C) with the shared per-key tables."""
    if tables.transform == "SHF":
        perm = tables.permutation
        if decrypt:
            out = np.empty_like(blocks)
            out[..., perm] = blocks
            return out
        return blocks[..., perm]
    if tables.transform == "NP":
        flipped = (255 - blocks).astype(np.uint8)
        return np.where(tables.flip.astype(bool), flipped, blocks)
    table = tables.ffx_dec if decrypt else tables.ffx_enc
    size = blocks.shape[-1]
    return table[np.arange(size), blocks]


def _code_image(img: np.ndarray, key: EncryptionKey, tables, decrypt: bool) -> np.ndarray:
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {img.dtype}")
    h, w, c = img.shape
    if tables is None:
        tables = derive_tables(key, c)
    blocks = partition_blocks(img, key.block_size)
    return merge_blocks(_apply_tables(blocks, tables, decrypt), h, w, c, key.block_size)


def encrypt_image(img: np.ndarray, key: EncryptionKey, tables: TransformTables | None = None) -> np.ndarray:
    """Encrypt an HWC uint8 image block-wise. Shape-preserving, pure."""
    return _code_image(img, key, tables, decrypt=False)


def decrypt_image(img: np.ndarray, key: EncryptionKey, tables: TransformTables | None = None) -> np.ndarray:
    """Exact inverse of encrypt_image (test support)."""
    return _code_image(img, key, tables, decrypt=True)


def encrypt_batch(imgs: np.ndarray, key: EncryptionKey, tables: TransformTables | None = None) -> np.ndarray:
    """Encrypt a batch (N,H,W,C) of uint8 images with shared tables."""
    if imgs.dtype != np.uint8:
        raise TypeError(f"expected uint8 batch, got {imgs.dtype}")
    n, h, w, c = imgs.shape
    m = key.block_size
    if h % m or w % m:
        raise BlockSizeError(f"block size {m} does not divide image {h}x{w}")
    if tables is None:
        tables = derive_tables(key, c)
    blocks = imgs.reshape(n, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
    blocks = np.ascontiguousarray(blocks).reshape(n, -1, m * m * c)
    out = _apply_tables(blocks, tables, decrypt=False)
    out = out.reshape(n, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out).reshape(n, h, w, c)
