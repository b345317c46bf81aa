"""Figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FACE_COLOR = "tab:red"
OTHER_COLOR = "tab:blue"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_histogram(path, edges, pos, neg, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    widths = np.diff(edges)
    ax.bar(edges[:-1], neg, width=widths, align="edge", color=OTHER_COLOR, alpha=0.6,
           label="distractors")
    ax.bar(edges[:-1], pos, width=widths, align="edge", color=FACE_COLOR, alpha=0.6,
           label="faces")
    ax.set_xlabel("activation")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_curve(path, curve, xlabel=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.values, curve.mean_response, "o-", color="k")
    ax.set_xlabel(xlabel or curve.parameter)
    ax.set_ylabel(f"mean response ({curve.n_stimuli} stimuli)")
    return _save(fig, path)


def plot_trace(path, trace):
    steps = [t[-3] for t in trace]
    values = [t[-2] for t in trace]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, values, ".", ms=2, color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("minibatch objective")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_sweep(path, axis, rows):
    xs = [v for v, a in rows if a is not None]
    ys = [a for v, a in rows if a is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, "o-", color="k")
    ax.set_xlabel(axis)
    ax.set_ylabel("best-neuron accuracy")
    return _save(fig, path)


def image_grid(path, images, ncols=8):
    images = [np.asarray(im, dtype=np.float64) for im in images]
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.9, nrows * 0.9), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, im in zip(axes.ravel(), images):
        if im.ndim == 3 and im.shape[2] == 1:
            im = im[..., 0]
        ax.imshow(np.clip(im, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    return _save(fig, path)


def plot_arms(path, results):
    """Grouped train/val accuracy bars per arm of an init comparison."""
    arms = list(results)
    x = np.arange(len(arms))
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(x - 0.2, [results[a][0] for a in arms], width=0.4, color="0.6", label="train")
    ax.bar(x + 0.2, [results[a][1] for a in arms], width=0.4, color="k", label="validation")
    ax.set_xticks(x)
    ax.set_xticklabels(arms)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False)
    return _save(fig, path)
