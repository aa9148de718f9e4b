"""Patch-pair containers, the PPDB binary format, importers, synthesis, batching.

PPDB layout (all little-endian):
    magic  "PPDB" | version u8=1 | count u32 | H u16 | W u16 | channels u8 |
    flags u8 (bit0: labels present)
    then per pair: patch_a bytes row-major, patch_b bytes, label u8 if flagged
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFile, FormatError, InvalidArgument

PPDB_MAGIC = b"PPDB"
PPDB_VERSION = 1
_HEADER = struct.Struct("<4sBIHHBB")

LABEL_NONMATCH = 0
LABEL_MATCH = 1


@dataclass
class PatchPairSet:
    """Two aligned banks of u8 patches plus optional match labels."""

    a: np.ndarray                 # (n, H, W, C) u8
    b: np.ndarray                 # (n, H, W, C) u8
    labels: np.ndarray = None     # (n,) u8 of {0, 1}, or None when unlabeled

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise InvalidArgument("patch banks must have identical shapes")
        if self.a.ndim != 4 or self.a.dtype != np.uint8:
            raise InvalidArgument("patches must be (n, H, W, C) uint8")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, np.uint8)
            if self.labels.shape != (len(self.a),):
                raise InvalidArgument("label count does not match pair count")

    def __len__(self):
        return self.a.shape[0]

    @property
    def height(self):
        return self.a.shape[1]

    @property
    def width(self):
        return self.a.shape[2]

    @property
    def channels(self):
        return self.a.shape[3]

    def matching_only(self):
        if self.labels is None:
            return self
        keep = self.labels == LABEL_MATCH
        return PatchPairSet(self.a[keep].copy(), self.b[keep].copy(),
                            self.labels[keep].copy())


def write_ppdb(path, pairs):
    flags = 0 if pairs.labels is None else 1
    n = len(pairs)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PPDB_MAGIC, PPDB_VERSION, n, pairs.height,
                              pairs.width, pairs.channels, flags))
        for i in range(n):
            fh.write(np.ascontiguousarray(pairs.a[i]).tobytes())
            fh.write(np.ascontiguousarray(pairs.b[i]).tobytes())
            if flags:
                fh.write(bytes([int(pairs.labels[i])]))


def read_ppdb(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptFile(f"{path}: shorter than a PPDB header")
    magic, version, n, h, w, c, flags = _HEADER.unpack_from(blob)
    if magic != PPDB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PPDB_VERSION:
        raise FormatError(f"{path}: unsupported PPDB version {version}")
    labeled = bool(flags & 1)
    patch_bytes = h * w * c
    expect = _HEADER.size + n * (2 * patch_bytes + (1 if labeled else 0))
    if len(blob) != expect:
        raise CorruptFile(f"{path}: expected {expect} bytes, found {len(blob)}")
    a = np.empty((n, h, w, c), np.uint8)
    b = np.empty((n, h, w, c), np.uint8)
    labels = np.empty(n, np.uint8) if labeled else None
    off = _HEADER.size
    for i in range(n):
        a[i] = np.frombuffer(blob, np.uint8, patch_bytes, off).reshape(h, w, c)
        off += patch_bytes
        b[i] = np.frombuffer(blob, np.uint8, patch_bytes, off).reshape(h, w, c)
        off += patch_bytes
        if labeled:
            labels[i] = blob[off]
            off += 1
    return PatchPairSet(a, b, labels)


def import_strip(path, layout="horizontal-pair", labels_path=None):
    """Slice a tall strip image of side-by-side 64x64 patch pairs.

    Supported layout: width 128 (left half modality A, right half B),
    height a multiple of 64. Labels come from a sidecar text file of one
    0/1 line per row ("<path>.labels" by default) when present.
    """
    if layout != "horizontal-pair":
        raise InvalidArgument(f"unsupported strip layout {layout!r}")
    from PIL import Image

    img = np.asarray(Image.open(path))
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if w != 128:
        raise InvalidArgument(f"{path}: strip width must be 128, got {w}")
    if h % 64:
        raise InvalidArgument(f"{path}: strip height must be a multiple of 64, got {h}")
    n = h // 64
    rows = img.reshape(n, 64, 128, c).astype(np.uint8)
    pairs = PatchPairSet(np.ascontiguousarray(rows[:, :, :64]),
                         np.ascontiguousarray(rows[:, :, 64:]))
    sidecar = labels_path or f"{path}.labels"
    try:
        with open(sidecar) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError:
        return pairs
    if len(lines) != n:
        raise InvalidArgument(f"{sidecar}: {len(lines)} labels for {n} pairs")
    if any(ln not in ("0", "1") for ln in lines):
        raise InvalidArgument(f"{sidecar}: labels must be 0 or 1")
    pairs.labels = np.array([int(ln) for ln in lines], np.uint8)
    return pairs


# ---------------------------------------------------------------------------
# synthetic pseudo-multimodal pairs


def _smooth(img, passes=2):
    """Cheap separable 3-tap blur, reflect padded."""
    k = np.array([0.25, 0.5, 0.25])
    out = img.astype(np.float64)
    for _ in range(passes):
        p = np.pad(out, 1, mode="edge")
        out = k[0] * p[:-2, 1:-1] + k[1] * p[1:-1, 1:-1] + k[2] * p[2:, 1:-1]
        p = np.pad(out, 1, mode="edge")
        out = k[0] * p[1:-1, :-2] + k[1] * p[1:-1, 1:-1] + k[2] * p[1:-1, 2:]
    return out


def _base_patch(rng, size=64):
    """Smoothed noise plus a few random rectangles and discs, in [0, 1]."""
    coarse = rng.normal(0.0, 1.0, (8, 8))
    grid = np.linspace(0, 7, size)
    yi = np.clip(grid.astype(int), 0, 6)
    fy = grid - yi
    rows = coarse[yi] * (1 - fy)[:, None] + coarse[np.minimum(yi + 1, 7)] * fy[:, None]
    xi = yi
    fx = fy
    img = rows[:, xi] * (1 - fx)[None, :] + rows[:, np.minimum(xi + 1, 7)] * fx[None, :]
    img = (img - img.min()) / max(np.ptp(img), 1e-9)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        val = rng.uniform(-0.9, 0.9)
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size - 8, 2)
            wdt, hgt = rng.integers(8, 32, 2)
            img[y0:y0 + hgt, x0:x0 + wdt] += val
        else:
            cx, cy = rng.integers(8, size - 8, 2)
            r = rng.integers(4, 16)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] += val
    img = _smooth(img, passes=1)
    img = (img - img.min()) / max(np.ptp(img), 1e-9)
    return img


def _other_modality(base01, rng):
    """Inverting gamma remap + mild blur + noise; structure kept, intensity flipped."""
    gamma = rng.uniform(0.7, 1.4)
    out = 1.0 - np.power(base01, gamma)
    out = _smooth(out, passes=1)
    out = out + rng.normal(0.0, 0.02, out.shape)
    return out


def _to_u8(img01):
    return np.clip(np.round(img01 * 255.0), 0, 255).astype(np.uint8)


def gen_synthetic(n_pairs, seed, negative_fraction=0.0):
    """Deterministic pseudo-multimodal pair set; matches share a base patch."""
    if n_pairs < 1:
        raise InvalidArgument("need at least one pair")
    if not 0.0 <= negative_fraction <= 1.0:
        raise InvalidArgument("negative_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_neg = int(round(n_pairs * negative_fraction))
    a = np.empty((n_pairs, 64, 64, 1), np.uint8)
    b = np.empty((n_pairs, 64, 64, 1), np.uint8)
    labels = np.ones(n_pairs, np.uint8)
    order = rng.permutation(n_pairs)
    neg_rows = set(order[:n_neg].tolist())
    for i in range(n_pairs):
        base = _base_patch(rng)
        if i in neg_rows:
            other = _base_patch(rng)
            labels[i] = LABEL_NONMATCH
            b_src = _other_modality(other, rng)
        else:
            b_src = _other_modality(base, rng)
        a[i, :, :, 0] = _to_u8(base)
        b[i, :, :, 0] = _to_u8(b_src)
    return PatchPairSet(a, b, labels)


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchSpec:
    batch_size: int
    seed: int = 0
    c_in: int = 1
    hflip: bool = False
    rot90: bool = False
    shuffle: bool = False
    drop_last: bool = False
    normalization: str = "per_patch"      # per_patch | dataset
    dataset_stats: tuple = None           # (mean, std) when normalization == dataset

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.normalization not in ("per_patch", "dataset"):
            raise InvalidArgument("normalization must be per_patch or dataset")
        if self.normalization == "dataset" and self.dataset_stats is None:
            raise InvalidArgument("dataset normalization needs precomputed stats")


def dataset_stats(pairs):
    """Scalar mean/std over every pixel of both banks."""
    joint = np.concatenate([pairs.a.reshape(-1), pairs.b.reshape(-1)]).astype(np.float64)
    return float(joint.mean()), float(max(joint.std(), 1e-6))


def _convert_channels(batch, c_in):
    """(n, H, W, C) u8 -> (n, c_in, H, W) f32."""
    c = batch.shape[3]
    x = batch.astype(np.float32)
    if c == c_in:
        pass
    elif c == 3 and c_in == 1:
        x = (x * np.array([0.299, 0.587, 0.114], np.float32)).sum(axis=3, keepdims=True)
    elif c == 1 and c_in == 3:
        x = np.repeat(x, 3, axis=3)
    else:
        raise InvalidArgument(f"cannot feed {c}-channel patches to a {c_in}-channel model")
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _standardize(x, spec):
    if spec.normalization == "dataset":
        mean, std = spec.dataset_stats
        return (x - np.float32(mean)) / np.float32(std)
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1, dtype=np.float64).astype(np.float32)
    std = np.maximum(flat.std(axis=1, dtype=np.float64), 1e-6).astype(np.float32)
    return (x - mean[:, None, None, None]) / std[:, None, None, None]


def make_batches(pairs, spec):
    """Yield (X, Y) float32 batches of shape (b, c_in, H, W).

    Shuffling, pair-coupled augmentation (hflip and 90-degree rotations) and
    standardization are all driven by spec.seed, so a given (set, spec)
    yields an identical stream every time.
    """
    n = len(pairs)
    if n == 0:
        raise InvalidArgument("cannot batch an empty pair set")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n) if spec.shuffle else np.arange(n)
    for start in range(0, n, spec.batch_size):
        idx = order[start:start + spec.batch_size]
        if spec.drop_last and len(idx) < spec.batch_size:
            return
        a = pairs.a[idx].copy()
        b = pairs.b[idx].copy()
        for row in range(len(idx)):
            if spec.hflip and rng.random() < 0.5:
                a[row] = a[row, :, ::-1]
                b[row] = b[row, :, ::-1]
            if spec.rot90:
                k = int(rng.integers(0, 4))
                if k:
                    a[row] = np.rot90(a[row], k, axes=(0, 1))
                    b[row] = np.rot90(b[row], k, axes=(0, 1))
        x = _standardize(_convert_channels(a, spec.c_in), spec)
        y = _standardize(_convert_channels(b, spec.c_in), spec)
        yield x, y
