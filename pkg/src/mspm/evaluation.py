"""FPR-at-recall metric, labeled-set evaluation, attention heatmap export."""

from dataclasses import dataclass

import numpy as np

from .data import BatchSpec, make_batches
from .errors import InvalidArgument

HIST_BINS = 20
HIST_RANGE = (0.0, 2.0)   # unit-norm descriptors keep distances in [0, 2]


def fpr_at_recall(pos_d, neg_d, recall):
    """False-positive rate at the smallest threshold reaching the recall.

    The threshold is the smallest observed positive distance t with
    fraction(pos <= t) >= recall; ties count inclusively on both sides.
    Returns (fpr, threshold).
    """
    pos = np.asarray(pos_d, np.float64)
    neg = np.asarray(neg_d, np.float64)
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgument("fpr_at_recall needs non-empty distance lists")
    if not 0.0 < recall <= 1.0:
        raise InvalidArgument("recall must lie in (0, 1]")
    k = int(np.ceil(recall * pos.size))
    threshold = float(np.sort(pos)[k - 1])
    fpr = float(np.mean(neg <= threshold))
    return fpr, threshold


@dataclass
class EvalReport:
    fpr95: float
    fpr99: float
    threshold_at_95: float
    n_pos: int
    n_neg: int
    hist_edges: np.ndarray
    hist_pos: np.ndarray
    hist_neg: np.ndarray

    def to_text(self):
        lines = [
            f"fpr95={self.fpr95:.6f}",
            f"fpr99={self.fpr99:.6f}",
            f"threshold_at_95={self.threshold_at_95:.6f}",
            f"n_pos={self.n_pos}",
            f"n_neg={self.n_neg}",
            "hist_edges=" + ",".join(f"{e:.4f}" for e in self.hist_edges),
            "hist_pos=" + ",".join(str(int(v)) for v in self.hist_pos),
            "hist_neg=" + ",".join(str(int(v)) for v in self.hist_neg),
        ]
        return "\n".join(lines) + "\n"


def pair_distances(embedder, pairs, batch_size=64, normalization="per_patch",
                   dataset_stats=None):
    """Per-pair descriptor distances in set order (eval mode, no shuffling)."""
    spec = BatchSpec(batch_size=batch_size, seed=0, c_in=embedder.cfg.c_in,
                     normalization=normalization, dataset_stats=dataset_stats)
    dists = []
    for x, y in make_batches(pairs, spec):
        da, _ = embedder.embed(x, training=False)
        db, _ = embedder.embed(y, training=False)
        diff = da.data.astype(np.float64) - db.data.astype(np.float64)
        dists.append(np.sqrt((diff * diff).sum(axis=1)))
    return np.concatenate(dists)


def evaluate(embedder, pairs, batch_size=64, normalization="per_patch",
             dataset_stats=None):
    """Embed a labeled pair set and report FPR95/FPR99 over pair distances."""
    if pairs.labels is None:
        raise InvalidArgument("evaluation needs a labeled pair set")
    labels = pairs.labels.astype(bool)
    if not labels.any() or labels.all():
        raise InvalidArgument("evaluation needs at least one match and one non-match")
    d = pair_distances(embedder, pairs, batch_size, normalization, dataset_stats)
    pos, neg = d[labels], d[~labels]
    fpr95, thr = fpr_at_recall(pos, neg, 0.95)
    fpr99, _ = fpr_at_recall(pos, neg, 0.99)
    hp, edges = np.histogram(pos, bins=HIST_BINS, range=HIST_RANGE)
    hn, _ = np.histogram(neg, bins=HIST_BINS, range=HIST_RANGE)
    return EvalReport(fpr95=fpr95, fpr99=fpr99, threshold_at_95=thr,
                      n_pos=int(pos.size), n_neg=int(neg.size),
                      hist_edges=edges, hist_pos=hp, hist_neg=hn)


# ---------------------------------------------------------------------------
# attention heatmaps


def token_attention_map(record, level=8, sample=0):
    """8x8 map of the token's last-layer attention, averaged over heads.

    The token's own self-attention entry is dropped before min-max
    normalization; a degenerate range (< 1e-12) yields an all-zero map.
    """
    w = record.last_layer(level)
    if w.ndim == 3:           # unbatched capture
        w = w[None]
    row = w[sample, :, 0, 1:].mean(axis=0)
    grid = row.reshape(level, level).astype(np.float64)
    rng_ = grid.max() - grid.min()
    if rng_ < 1e-12:
        return np.zeros((level, level), np.float64)
    return (grid - grid.min()) / rng_


def bilinear_upsample(grid, size):
    """Align-corner bilinear upsample of a square map to size x size."""
    h, w = grid.shape
    out_coords_y = np.linspace(0.0, h - 1.0, size)
    out_coords_x = np.linspace(0.0, w - 1.0, size)
    y0 = np.clip(np.floor(out_coords_y).astype(int), 0, h - 2) if h > 1 else np.zeros(size, int)
    x0 = np.clip(np.floor(out_coords_x).astype(int), 0, w - 2) if w > 1 else np.zeros(size, int)
    fy = (out_coords_y - y0) if h > 1 else np.zeros(size)
    fx = (out_coords_x - x0) if w > 1 else np.zeros(size)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = grid[y0][:, x0] * (1 - fx)[None, :] + grid[y0][:, x1] * fx[None, :]
    bot = grid[y1][:, x0] * (1 - fx)[None, :] + grid[y1][:, x1] * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def write_pgm(path, img_u8):
    if img_u8.ndim != 2 or img_u8.dtype != np.uint8:
        raise InvalidArgument("PGM writer expects a 2-d uint8 image")
    h, w = img_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img_u8.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InvalidArgument(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4][:w * h]
    return np.frombuffer(data, np.uint8).reshape(h, w)


def _heat_rgb(norm):
    """Simple blue->red colormap for a [0, 1] map."""
    r = np.clip(norm * 2.0 - 0.5, 0, 1)
    g = np.clip(1.0 - np.abs(norm * 2.0 - 1.0), 0, 1)
    b = np.clip(1.5 - norm * 2.0, 0, 1)
    return np.stack([r, g, b], axis=-1)


def export_heatmap(record, patch, path, overlay_path=None, level=8, sample=0):
    """Write the upsampled token-attention heatmap for one patch.

    patch is the original (H, W) or (H, W, C) u8 image; the PGM output is
    the grayscale map at patch resolution, and overlay_path (optional)
    gets a PNG blending the colored map 0.5/0.5 with the patch.
    """
    patch = np.asarray(patch)
    if patch.ndim == 3 and patch.shape[2] == 1:
        patch = patch[:, :, 0]
    size = patch.shape[0]
    grid = token_attention_map(record, level=level, sample=sample)
    up = bilinear_upsample(grid, size)
    write_pgm(path, np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8))
    if overlay_path:
        from PIL import Image

        rgb = _heat_rgb(up) * 255.0
        gray = patch if patch.ndim == 3 else np.repeat(patch[:, :, None], 3, axis=2)
        blend = np.clip(0.5 * rgb + 0.5 * gray.astype(np.float64), 0, 255).astype(np.uint8)
        Image.fromarray(blend).save(overlay_path)
    return up
