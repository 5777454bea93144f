"""Synthetic desk-scale datasets with ground-truth important regions.

Images: 16x16 grayscale with one 4x4 textured patch whose texture (not its
location) determines the class. Sequences: length-32 token streams whose
label is decided by a majority vote between two small key-token vocabularies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numcore import RngStream

IMG_SIZE = 16
PATCH = 4
SEQ_LEN = 32
VOCAB = 64
UNK_ID = 0
POS_IDS = (1, 2, 3, 4, 5)
NEG_IDS = (6, 7, 8, 9, 10)

MAGIC = b"PIBA"
VERSION = 1


class FormatError(ValueError):
    pass


class MagicMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


@dataclass(frozen=True)
class BBox:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if not (0 <= self.top and 0 <= self.left
                and self.top + self.height <= IMG_SIZE
                and self.left + self.width <= IMG_SIZE):
            raise ValueError("bbox outside image bounds")
        if self.height * self.width >= 0.33 * IMG_SIZE * IMG_SIZE:
            raise ValueError("bbox covers >= 33% of the image")

    def mask(self, shape=(IMG_SIZE, IMG_SIZE)):
        m = np.zeros(shape, dtype=bool)
        m[self.top:self.top + self.height, self.left:self.left + self.width] = True
        return m


@dataclass
class PatchImageSet:
    images: np.ndarray  # (N,1,16,16) float64 in [0,1]
    labels: np.ndarray  # (N,) int
    bboxes: list[BBox]
    split: str


@dataclass
class TokenSeqSet:
    sequences: np.ndarray      # (N,L) int
    labels: np.ndarray         # (N,) int
    key_positions: np.ndarray  # (N,L) bool mask of label-determining tokens
    split: str


@dataclass
class Dataset:
    kind: str  # "image" | "token"
    splits: dict = field(default_factory=dict)  # name -> PatchImageSet | TokenSeqSet

    def __getitem__(self, split):
        return self.splits[split]


# ---------------------------------------------------------------------------
# generation

_TEXTURES = None


def _patch_textures():
    global _TEXTURES
    if _TEXTURES is None:
        ij = np.indices((PATCH, PATCH))
        cross = (ij[0] == ij[1]) | (ij[0] + ij[1] == PATCH - 1)
        solid = np.ones((PATCH, PATCH), dtype=bool)
        stripes = (ij[0] + ij[1]) % 2 == 0
        _TEXTURES = [cross, solid, stripes]
    return _TEXTURES


def gen_patch_split(stream, n, split):
    textures = _patch_textures()
    labels = np.array([i % 3 for i in range(n)])
    labels = labels[stream.permutation(n)]
    images = stream.uniform((n, 1, IMG_SIZE, IMG_SIZE), 0.0, 0.3)
    bboxes = []
    for i in range(n):
        top = int(stream.integers(0, IMG_SIZE - PATCH + 1))
        left = int(stream.integers(0, IMG_SIZE - PATCH + 1))
        tex = textures[labels[i]]
        patch = images[i, 0, top:top + PATCH, left:left + PATCH]
        patch[tex] = 1.0
        bboxes.append(BBox(top, left, PATCH, PATCH))
    return PatchImageSet(images, labels, bboxes, split)


def gen_patch_dataset(seed, n_per_split):
    """Deterministic three-split image dataset; one textured patch per image."""
    if n_per_split < 1:
        raise ValueError("n_per_split must be >= 1")
    root = RngStream(seed, stream=101)
    ds = Dataset("image")
    for i, split in enumerate(("train", "val", "test")):
        ds.splits[split] = gen_patch_split(root.child(i), n_per_split, split)
    return ds


def _gen_sequence(stream, label):
    seq = stream.integers(11, VOCAB, (SEQ_LEN,)).astype(np.int64)
    n_key = int(stream.integers(1, 5))
    # majority of key tokens decides the label; never a tie
    options = [(p, n_key - p) for p in range(n_key + 1)
               if (p > n_key - p) == (label == 0) and p != n_key - p]
    pos_count, neg_count = options[int(stream.integers(0, len(options)))]
    positions = stream.choice(SEQ_LEN, size=n_key, replace=False)
    ids = ([POS_IDS[int(stream.integers(0, 5))] for _ in range(pos_count)]
           + [NEG_IDS[int(stream.integers(0, 5))] for _ in range(neg_count)])
    for p, t in zip(positions, ids):
        seq[p] = t
    mask = np.zeros(SEQ_LEN, dtype=bool)
    mask[positions] = True
    return seq, mask


def gen_token_split(stream, n, split):
    labels = np.array([i % 2 for i in range(n)])
    labels = labels[stream.permutation(n)]
    seqs = np.zeros((n, SEQ_LEN), dtype=np.int64)
    keys = np.zeros((n, SEQ_LEN), dtype=bool)
    for i in range(n):
        seqs[i], keys[i] = _gen_sequence(stream, labels[i])
    return TokenSeqSet(seqs, labels, keys, split)


def gen_token_dataset(seed, n_per_split):
    """Deterministic three-split token dataset; labels from key-token majority."""
    if n_per_split < 1:
        raise ValueError("n_per_split must be >= 1")
    root = RngStream(seed, stream=202)
    ds = Dataset("token")
    for i, split in enumerate(("train", "val", "test")):
        ds.splits[split] = gen_token_split(root.child(i), n_per_split, split)
    return ds


# ---------------------------------------------------------------------------
# persistence: magic "PIBA", u16 version, tagged sections
# section = 4-byte tag, u32 payload length, payload
# integers are little-endian u32, floats little-endian f32

_SPLIT_CODES = {"train": "0", "val": "1", "test": "2"}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def _pack_u32(arr):
    return np.ascontiguousarray(arr, dtype="<u4").tobytes()


def _pack_f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _sections_for_split(kind, split_set, code):
    if kind == "image":
        n = split_set.images.shape[0]
        bb = np.array([[b.top, b.left, b.height, b.width] for b in split_set.bboxes])
        yield b"IMG" + code.encode(), _pack_u32([n]) + _pack_f32(split_set.images)
        yield b"LAB" + code.encode(), _pack_u32(split_set.labels)
        yield b"BBX" + code.encode(), _pack_u32(bb)
    else:
        n = split_set.sequences.shape[0]
        yield b"SEQ" + code.encode(), _pack_u32([n]) + _pack_u32(split_set.sequences)
        yield b"LAB" + code.encode(), _pack_u32(split_set.labels)
        yield b"KEY" + code.encode(), _pack_u32(split_set.key_positions.astype(np.uint32))


def save_dataset(ds, path):
    blob = [MAGIC, struct.pack("<H", VERSION),
            struct.pack("<H", 0 if ds.kind == "image" else 1)]
    sections = []
    for split, split_set in ds.splits.items():
        sections.extend(_sections_for_split(ds.kind, split_set, _SPLIT_CODES[split]))
    blob.append(struct.pack("<I", len(sections)))
    for tag, payload in sections:
        blob.append(tag)
        blob.append(struct.pack("<I", len(payload)))
        blob.append(payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def _take(buf, offset, n):
    if offset + n > len(buf):
        raise TruncatedPayload("dataset file truncated")
    return buf[offset:offset + n], offset + n


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    head, off = _take(buf, 0, 4)
    if head != MAGIC:
        raise MagicMismatch(f"bad magic {head!r}")
    raw, off = _take(buf, off, 2)
    version = struct.unpack("<H", raw)[0]
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    raw, off = _take(buf, off, 2)
    kind = "image" if struct.unpack("<H", raw)[0] == 0 else "token"
    raw, off = _take(buf, off, 4)
    n_sections = struct.unpack("<I", raw)[0]

    sections = {}
    for _ in range(n_sections):
        tag, off = _take(buf, off, 4)
        raw, off = _take(buf, off, 4)
        length = struct.unpack("<I", raw)[0]
        payload, off = _take(buf, off, length)
        sections[tag] = payload

    ds = Dataset(kind)
    for code, split in _SPLIT_NAMES.items():
        c = code.encode()
        if kind == "image":
            if b"IMG" + c not in sections:
                continue
            raw = sections[b"IMG" + c]
            n = struct.unpack("<I", raw[:4])[0]
            images = np.frombuffer(raw[4:], dtype="<f4").astype(np.float64)
            images = images.reshape(n, 1, IMG_SIZE, IMG_SIZE)
            labels = np.frombuffer(sections[b"LAB" + c], dtype="<u4").astype(np.int64)
            bb = np.frombuffer(sections[b"BBX" + c], dtype="<u4").reshape(-1, 4)
            bboxes = [BBox(*map(int, row)) for row in bb]
            ds.splits[split] = PatchImageSet(images, labels, bboxes, split)
        else:
            if b"SEQ" + c not in sections:
                continue
            raw = sections[b"SEQ" + c]
            n = struct.unpack("<I", raw[:4])[0]
            seqs = np.frombuffer(raw[4:], dtype="<u4").astype(np.int64).reshape(n, SEQ_LEN)
            labels = np.frombuffer(sections[b"LAB" + c], dtype="<u4").astype(np.int64)
            keys = np.frombuffer(sections[b"KEY" + c], dtype="<u4").reshape(n, SEQ_LEN).astype(bool)
            ds.splits[split] = TokenSeqSet(seqs, labels, keys, split)
    return ds


# ---------------------------------------------------------------------------
# Gaussian blur (insertion baseline)


def _gauss_kernel(kernel_size, sigma):
    half = kernel_size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    if sigma <= 0:
        w = (xs == 0).astype(np.float64)
    else:
        w = np.exp(-0.5 * (xs / sigma) ** 2)
    return w / w.sum()


def blur_image(img, kernel_size=5, sigma=2.0):
    """Separable Gaussian blur with reflect padding. Accepts (H,W), (1,H,W) or
    (N,1,H,W) arrays; returns the same shape."""
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    arr = np.asarray(img, dtype=np.float64)
    orig_shape = arr.shape
    arr = arr.reshape(-1, orig_shape[-2], orig_shape[-1])
    w = _gauss_kernel(kernel_size, sigma)
    half = kernel_size // 2
    out = np.empty_like(arr)
    for i, im in enumerate(arr):
        p = np.pad(im, ((half, half), (0, 0)), mode="reflect")
        rows = sum(w[k] * p[k:k + im.shape[0], :] for k in range(kernel_size))
        p = np.pad(rows, ((0, 0), (half, half)), mode="reflect")
        out[i] = sum(w[k] * p[:, k:k + im.shape[1]] for k in range(kernel_size))
    return out.reshape(orig_shape)
