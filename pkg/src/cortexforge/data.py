"""Image ingestion, whitening, eval-set assembly and distortion stimuli."""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from cortexforge.rng import substream

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``(N, H, W, C)`` float32 plus integer labels (-1 = unlabeled)."""

    images: np.ndarray
    labels: np.ndarray = None
    paths: list = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        n = len(self.images)
        if self.labels is None:
            self.labels = np.full(n, -1, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.paths is None:
            self.paths = [""] * n
        if len(self.labels) != n or len(self.paths) != n:
            raise DataError("images, labels and paths must have equal length")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        label = int(self.labels[i])
        return {"image": self.images[i], "label": None if label < 0 else label,
                "source_path": self.paths[i]}

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx])

    @classmethod
    def concat(cls, parts):
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   [path for p in parts for path in p.paths])


# ---------------------------------------------------------------------------
# cubic interpolation


def _keys_kernel(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def cubic_matrix(coords, n):
    """Row-stochastic (len(coords), n) matrix of cubic-convolution weights.

    Taps falling outside ``[0, n)`` are clamped to the nearest edge pixel.
    """
    coords = np.asarray(coords, dtype=np.float64)
    m = np.zeros((len(coords), n))
    base = np.floor(coords).astype(np.int64)
    rows = np.arange(len(coords))
    for k in range(-1, 3):
        idx = base + k
        w = _keys_kernel(coords - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n - 1)), w)
    return m


def _apply_separable(img, my, mx):
    img = np.asarray(img, dtype=np.float64)
    return np.einsum("yi,ijc,xj->yxc", my, img, mx)


def resize_cubic(img, size):
    """Resize ``(H, W, C)`` to ``size = (h, w)`` with pixel-centre aligned cubic convolution."""
    H, W = img.shape[:2]
    h, w = size
    ys = (np.arange(h) + 0.5) * (H / h) - 0.5
    xs = (np.arange(w) + 0.5) * (W / w) - 0.5
    return _apply_separable(img, cubic_matrix(ys, H), cubic_matrix(xs, W))


def make_distortions(image, scale_factors, translations):
    """One distorted copy per (scale, translation) pair, scale-major order.

    Scaling is about the image centre; a translation ``(dx, dy)`` moves the
    content right/down by that many pixels.  Output pixels whose source falls
    outside the frame take the mean of the input image.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    fill = float(np.mean(img, dtype=np.float64))
    out = []
    for s in scale_factors:
        if not s > 0:
            raise DataError(f"scale factors must be positive, got {s}")
        if s * min(H, W) < 1.0:
            raise DataError(f"scale {s} leaves an empty crop of a {H}x{W} image")
        for dx, dy in translations:
            ys = (H - 1) / 2.0 + (np.arange(H) - (H - 1) / 2.0 - dy) / s
            xs = (W - 1) / 2.0 + (np.arange(W) - (W - 1) / 2.0 - dx) / s
            res = _apply_separable(img, cubic_matrix(ys, H), cubic_matrix(xs, W))
            tol = 1e-9
            inside = (((ys >= -tol) & (ys <= H - 1 + tol))[:, None]
                      & ((xs >= -tol) & (xs <= W - 1 + tol))[None, :])
            res = np.where(inside[..., None], res, fill)
            out.append(res.astype(img.dtype if img.dtype.kind == "f" else np.float32))
    return out


# ---------------------------------------------------------------------------
# decoding and ingestion


def decode_image(path, channels):
    """Decode PNG / PPM / PGM to float32 ``(H, W, channels)`` in [0, 1]."""
    if not path.lower().endswith(IMAGE_SUFFIXES):
        raise DataError(f"unsupported image type: {path}")
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            arr = arr[..., None]
        else:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
            if arr.ndim == 2:
                arr = arr[..., None]
    if arr.shape[2] != channels:
        if arr.shape[2] == 1:
            arr = np.repeat(arr, channels, axis=2)
        else:
            raise DataError(f"cannot map {arr.shape[2]} channels onto {channels}")
    return arr.astype(np.float32)


def read_index(index_file):
    """Parse ``path<TAB>label`` lines; '#' comments and blank lines skipped."""
    entries = []
    with open(index_file, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            path, _, label = line.partition("\t")
            label = label.strip()
            entries.append((path, int(label) if label else None))
    return entries


def _load_one(root, rel, target_size, channels):
    img = decode_image(os.path.join(root, rel), channels)
    if target_size is not None and img.shape[:2] != tuple(target_size):
        img = np.clip(resize_cubic(img, target_size), 0.0, 1.0)
    return img.astype(np.float32)


def ingest(dir_path, index_file=None, target_size=None, channels=1, n_classes=None,
           workers=None):
    """Load the images listed in ``index_file`` (or every image in ``dir_path``).

    Files that fail to decode are skipped with a warning; an empty result is an
    error.  Item order follows the index file.
    """
    if index_file is not None:
        entries = read_index(index_file)
    else:
        entries = [(name, None) for name in sorted(os.listdir(dir_path))
                   if name.lower().endswith(IMAGE_SUFFIXES)]
    if not entries:
        raise DataError("empty dataset")

    def load(entry):
        try:
            return _load_one(dir_path, entry[0], target_size, channels)
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the file
            log.warning("skipping %s: %s", entry[0], exc)
            return None

    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        decoded = list(pool.map(load, entries))

    images, labels, paths = [], [], []
    for (rel, label), img in zip(entries, decoded):
        if img is None:
            continue
        if images and img.shape != images[0].shape:
            log.warning("skipping %s: shape %s differs from %s", rel, img.shape, images[0].shape)
            continue
        if label is not None and n_classes is not None and not 0 <= label < n_classes:
            raise DataError(f"label {label} of {rel} outside [0, {n_classes})")
        images.append(img)
        labels.append(-1 if label is None else label)
        paths.append(os.path.join(dir_path, rel))
    skipped = len(entries) - len(images)
    if skipped:
        log.warning("ingest: %d of %d files skipped", skipped, len(entries))
    if not images:
        raise DataError("empty dataset")
    return Dataset(np.stack(images), np.array(labels), paths)


def load_rotation_sequences(dir_path, channels=3, target_size=None):
    """One sequence per subdirectory, frames in lexicographic filename order.

    Grayscale frames are replicated across ``channels``.
    """
    sequences = []
    for sub in sorted(os.listdir(dir_path)):
        full = os.path.join(dir_path, sub)
        if not os.path.isdir(full):
            continue
        names = sorted(n for n in os.listdir(full) if n.lower().endswith(IMAGE_SUFFIXES))
        if not names:
            log.warning("skipping empty rotation sequence %s", full)
            continue
        sequences.append(np.stack([_load_one(full, n, target_size, channels) for n in names]))
    return sequences


def write_pnm(path, img):
    """Write a [0, 1] image as binary PGM (1 channel) or PPM (3 channels)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    arr8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr8).save(path, format="PPM")


def rescale_for_display(img):
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# whitening


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    transform: np.ndarray

    def apply(self, images):
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(len(x), -1) - self.mean.astype(np.float64).reshape(-1)
        return (flat @ self.transform.astype(np.float64)).reshape(x.shape).astype(np.float32)


def fit_whitening(dataset, floor=1e-2, max_fit=10_000, seed=0):
    """Zero-phase whitening with eigenvalues floored at ``floor`` x the largest."""
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset)
    if len(images) < 2:
        raise DataError("whitening needs at least 2 examples")
    if len(images) > max_fit:
        idx = np.sort(substream(seed, "whiten.subsample").choice(len(images), max_fit,
                                                                  replace=False))
        images = images[idx]
    x = images.reshape(len(images), -1).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    top = max(float(evals[-1]), 0.0)
    floored = np.maximum(evals, floor * top) if top > 0 else np.ones_like(evals)
    transform = (evecs / np.sqrt(floored)) @ evecs.T
    return WhiteningTransform(mean.astype(np.float32), transform.astype(np.float32))


def apply_whitening(dataset, t):
    return Dataset(t.apply(dataset.images), dataset.labels.copy(), list(dataset.paths))


# ---------------------------------------------------------------------------
# eval set assembly


def assemble_eval_set(positives, negatives, ratio_pos, total=None, seed=0):
    """Seeded subsample with ``floor(ratio_pos * total)`` positives (label 1), rest negatives (0).

    Without ``total`` the largest set the two pools can support is drawn.
    """
    if not 0.0 <= ratio_pos <= 1.0:
        raise DataError(f"ratio_pos must lie in [0, 1], got {ratio_pos}")
    if total is None:
        limits = []
        if ratio_pos > 0:
            limits.append(len(positives) / ratio_pos)
        if ratio_pos < 1:
            limits.append(len(negatives) / (1.0 - ratio_pos))
        total = int(math.floor(min(limits) + 1e-9))
    n_pos = int(math.floor(ratio_pos * total + 1e-9))
    n_neg = total - n_pos
    if n_pos > len(positives) or n_neg > len(negatives):
        raise DataError(f"insufficient pool: need {n_pos} positives / {n_neg} negatives, "
                        f"have {len(positives)} / {len(negatives)}")
    rng = substream(seed, "eval.assemble")
    pos_idx = np.sort(rng.choice(len(positives), n_pos, replace=False))
    neg_idx = np.sort(rng.choice(len(negatives), n_neg, replace=False))
    parts = []
    if n_pos:
        p = positives.subset(pos_idx)
        p.labels[:] = 1
        parts.append(p)
    if n_neg:
        q = negatives.subset(neg_idx)
        q.labels[:] = 0
        parts.append(q)
    return Dataset.concat(parts)
