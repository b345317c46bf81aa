"""Procedural stand-in corpus: cartoon face crops, distractors, rotation sequences.

Everything here is seeded; the same arguments always produce the same pixels.
Images are single-channel floats in [0, 1].
"""

import os

import numpy as np

from cortexforge.data import Dataset, write_pnm
from cortexforge.rng import substream

CLASS_NAMES = ("face", "stripes", "boxes", "blobs")


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def _soft_ellipse(y, x, cy, cx, ry, rx, edge=0.6):
    d = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) / (edge / max(ry, rx))))


def _background(rng, size):
    y, x = _grid(size)
    base = rng.uniform(0.15, 0.6)
    angle = rng.uniform(0, 2 * np.pi)
    slope = rng.uniform(0.0, 0.15) / size
    return base + slope * ((x - size / 2) * np.cos(angle) + (y - size / 2) * np.sin(angle))


def _finish(rng, img, noise=0.04):
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)[..., None].astype(np.float32)


def face_image(rng, size=16, yaw=0.0):
    """A non-aligned cartoon face; ``yaw`` in radians turns it out of plane.

    Position (+-2.5 px at 16x16), scale (70-100 %) and lighting vary per
    draw; the face is lighter than its surroundings, eyes and mouth darker.
    """
    y, x = _grid(size)
    u = size / 16.0
    scale = u * rng.uniform(0.7, 1.0)
    cy = (size - 1) / 2 + rng.uniform(-2.5, 2.5) * u
    cx = (size - 1) / 2 + rng.uniform(-2.5, 2.5) * u
    ry = rng.uniform(5.6, 6.8) * scale
    rx = rng.uniform(4.4, 5.4) * scale * (0.75 + 0.25 * np.cos(yaw))
    img = _background(rng, size)
    skin = img.mean() + rng.uniform(0.15, 0.35)
    oval = _soft_ellipse(y, x, cy, cx, ry, rx)
    img = img * (1 - oval) + skin * oval
    shift = 0.45 * rx * np.sin(yaw)
    dark = skin - rng.uniform(0.3, 0.45)
    eye_r = rng.uniform(0.9, 1.3) * scale
    for side in (-1, 1):
        ex = cx + side * 0.42 * rx * np.cos(yaw) + shift
        eye = _soft_ellipse(y, x, cy - 0.28 * ry, ex, eye_r, eye_r * 1.2, edge=0.4)
        img = img * (1 - eye) + dark * eye
    mouth = _soft_ellipse(y, x, cy + 0.45 * ry, cx + shift, 0.55 * scale, 0.38 * rx, edge=0.4)
    img = img * (1 - mouth) + (dark + 0.1) * mouth
    return _finish(rng, img)


def stripes_image(rng, size=16):
    y, x = _grid(size)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 8.0) * size / 16.0
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (x * np.cos(angle) + y * np.sin(angle)) / period + phase)
    img = _background(rng, size) + rng.uniform(0.15, 0.35) * wave
    return _finish(rng, img)


def boxes_image(rng, size=16):
    img = _background(rng, size)
    for _ in range(rng.integers(1, 4)):
        h, w = rng.integers(3, size // 2 + 3, size=2)
        top, left = rng.integers(0, size - 2, size=2)
        img[top:top + h, left:left + w] = rng.uniform(0.0, 1.0)
    return _finish(rng, img)


def blobs_image(rng, size=16):
    y, x = _grid(size)
    img = _background(rng, size)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(1.5, size / 2.5, size=2)
        blob = _soft_ellipse(y, x, cy, cx, ry, rx)
        img = img * (1 - blob) + rng.uniform(0.0, 1.0) * blob
    return _finish(rng, img)


def texture_image(rng, size=16):
    coarse = rng.uniform(0, 1, (size // 4 + 1, size // 4 + 1))
    img = np.kron(coarse, np.ones((4, 4)))[:size, :size]
    return _finish(rng, 0.3 + 0.4 * img)


_DISTRACTORS = (stripes_image, boxes_image, blobs_image, texture_image)


def distractor_image(rng, size=16):
    return _DISTRACTORS[rng.integers(len(_DISTRACTORS))](rng, size)


def make_face_dataset(n_faces, n_distractors, size=16, seed=0):
    """Faces labelled 1 followed by distractors labelled 0."""
    rng = substream(seed, "toy.faces")
    faces = [face_image(rng, size) for _ in range(n_faces)]
    rng = substream(seed, "toy.distractors")
    others = [distractor_image(rng, size) for _ in range(n_distractors)]
    images = np.stack(faces + others)
    labels = np.array([1] * n_faces + [0] * n_distractors)
    return Dataset(images, labels)


def make_class_dataset(n_per_class, size=16, seed=0):
    """Balanced 4-class set (face, stripes, boxes, blobs), interleaved by class."""
    makers = (face_image, stripes_image, boxes_image, blobs_image)
    rng = substream(seed, "toy.classes")
    images, labels = [], []
    for _ in range(n_per_class):
        for label, make in enumerate(makers):
            images.append(make(rng, size))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels))


def make_rotation_sequence(rng, size=16, n_frames=9):
    """Frames of one face turning from -60 to +60 degrees of yaw."""
    state = rng.bit_generator.state
    frames = []
    for yaw in np.linspace(-np.pi / 3, np.pi / 3, n_frames):
        rng.bit_generator.state = state  # same identity in every frame
        frames.append(face_image(rng, size, yaw=yaw))
    return np.stack(frames)


def write_corpus(out_dir, n_faces=500, n_distractors=900, n_unlabeled=2000, size=16,
                 n_sequences=10, seed=0):
    """Write pos/, neg/, train/ (with index.tsv files) and rotations/ under ``out_dir``."""
    layout = {
        "pos": make_face_dataset(n_faces, 0, size, seed),
        "neg": make_face_dataset(0, n_distractors, size, seed + 1),
    }
    n_train_faces = int(round(0.3 * n_unlabeled))
    train = make_face_dataset(n_train_faces, n_unlabeled - n_train_faces, size, seed + 2)
    order = substream(seed, "toy.train.order").permutation(len(train))
    layout["train"] = train.subset(order)
    for name, ds in layout.items():
        folder = os.path.join(out_dir, name)
        os.makedirs(folder, exist_ok=True)
        with open(os.path.join(folder, "index.tsv"), "w", encoding="utf-8") as fh:
            fh.write("# path\tlabel\n")
            for i, img in enumerate(ds.images):
                fname = f"{name}_{i:05d}.pgm"
                write_pnm(os.path.join(folder, fname), img)
                label = "" if name == "train" else str(int(ds.labels[i]))
                fh.write(f"{fname}\t{label}\n")
    rng = substream(seed, "toy.rotations")
    for k in range(n_sequences):
        folder = os.path.join(out_dir, "rotations", f"seq{k:02d}")
        os.makedirs(folder, exist_ok=True)
        for f, frame in enumerate(make_rotation_sequence(rng, size)):
            write_pnm(os.path.join(folder, f"frame{f:02d}.pgm"), frame)
    return out_dir
