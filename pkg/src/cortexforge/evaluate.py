"""Neuron selectivity measurements: threshold sweeps, histograms, invariance, baselines."""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from cortexforge.data import Dataset, make_distortions, resize_cubic
from cortexforge.netcore import ConfigError, GeometryError, feature_backward, top_features
from cortexforge.optim import LineSearchConfig, maximize_on_sphere
from cortexforge.rng import substream

log = logging.getLogger(__name__)

N_THRESHOLDS = 20


@dataclass
class NeuronEval:
    neuron_index: int
    best_threshold: float
    polarity: int
    accuracy: float
    activation_min: float
    activation_max: float
    constant: str = None  # "all-negative" / "all-positive" when a constant classifier won

    def predict(self, activations):
        a = np.asarray(activations, dtype=np.float64)
        if self.constant == "all-negative":
            return np.zeros(a.shape, dtype=bool)
        if self.constant == "all-positive":
            return np.ones(a.shape, dtype=bool)
        return a > self.best_threshold if self.polarity > 0 else a < self.best_threshold


@dataclass
class EvalReport:
    neurons: list
    histograms: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)

    @property
    def best(self):
        return self.neurons[0]


@dataclass
class InvarianceCurve:
    parameter: str
    values: list
    mean_response: list
    n_stimuli: int


def neuron_thresholds(lo, hi):
    """Twenty equally spaced thresholds strictly inside [lo, hi]."""
    if hi < lo:
        raise ValueError(f"max {hi} is below min {lo}")
    i = np.arange(1, N_THRESHOLDS + 1, dtype=np.float64)
    return lo + i * (hi - lo) / (N_THRESHOLDS + 1)


def _check_labels(activations, labels):
    a = np.asarray(activations, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if a.shape != y.shape:
        raise ValueError(f"{a.size} activations but {y.size} labels")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return a, y


def best_neuron_accuracy(activations, labels, neuron_index=0):
    """Best accuracy over 20 thresholds x two polarities plus the constant classifiers.

    Ties go to the earliest candidate: thresholds ascending, ``>`` before
    ``<``, then all-negative, then all-positive.
    """
    a, y = _check_labels(activations, labels)
    lo, hi = float(a.min()), float(a.max())
    t = neuron_thresholds(lo, hi)
    above = a[None, :] > t[:, None]
    below = a[None, :] < t[:, None]
    n = a.size
    acc_above = (above == y).sum(axis=1) / n
    acc_below = (below == y).sum(axis=1) / n
    best = NeuronEval(neuron_index, float(t[0]), 1, -1.0, lo, hi)
    for k in range(N_THRESHOLDS):
        for polarity, acc in ((1, acc_above[k]), (-1, acc_below[k])):
            if acc > best.accuracy:
                best = NeuronEval(neuron_index, float(t[k]), polarity, float(acc), lo, hi)
    n_pos = int(y.sum())
    for name, acc, thr, pol in (("all-negative", (n - n_pos) / n, hi, 1),
                                ("all-positive", n_pos / n, lo, -1)):
        if acc > best.accuracy:
            best = NeuronEval(neuron_index, thr, pol, float(acc), lo, hi, constant=name)
    return best


def activation_histogram(activations, labels, n_bins=50):
    """Positive- and negative-class counts on shared edges spanning all activations."""
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    a = np.asarray(activations, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    edges = np.histogram_bin_edges(a, bins=n_bins)
    pos, _ = np.histogram(a[y], bins=edges)
    neg, _ = np.histogram(a[~y], bins=edges)
    return edges, pos, neg


def scan_all_neurons(activations, labels, n_bins=50, hist_neurons=1):
    """Score every column of ``activations`` (examples x neurons); best first.

    Ranking is by accuracy descending with ties kept in neuron order.
    Histograms are attached for the ``hist_neurons`` best neurons.
    """
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 2 or acts.size == 0:
        raise ValueError("activation matrix must be a nonempty (examples, neurons) array")
    evals = [best_neuron_accuracy(acts[:, j], labels, j) for j in range(acts.shape[1])]
    order = sorted(range(len(evals)), key=lambda j: -evals[j].accuracy)
    ranked = [evals[j] for j in order]
    y = np.asarray(labels).astype(bool)
    report = EvalReport(ranked, baselines={"all_negative": float(1.0 - y.mean())})
    for ev in ranked[:hist_neurons]:
        report.histograms[ev.neuron_index] = activation_histogram(acts[:, ev.neuron_index],
                                                                  labels, n_bins)
    return report


def neuron_responses(net, images, neuron):
    """Top-layer response of one neuron (flat index) for every raw image.

    The network's whitening transform, when it has one, is applied first.
    """
    images = np.asarray(images)
    if net.whitening is not None:
        images = net.whitening.apply(images)
    return top_features(images, net)[:, neuron].astype(np.float64)


def invariance_curve(net, neuron, stimuli, axis, values):
    """Mean response of ``neuron`` over the stimuli as one distortion parameter varies.

    ``axis`` is ``scale``, ``translate-x``, ``translate-y`` or
    ``rotation-frame``; for the last one ``stimuli`` is a list of frame
    sequences and ``values`` are frame indices.
    """
    if len(stimuli) == 0:
        raise ValueError("empty stimulus set")
    means = []
    for v in values:
        if axis == "rotation-frame":
            batch = np.stack([seq[int(v)] for seq in stimuli])
        else:
            if axis == "scale":
                scales, shifts = [float(v)], [(0.0, 0.0)]
            elif axis == "translate-x":
                scales, shifts = [1.0], [(float(v), 0.0)]
            elif axis == "translate-y":
                scales, shifts = [1.0], [(0.0, float(v))]
            else:
                raise ValueError(f"unknown invariance axis {axis!r}")
            batch = np.stack([make_distortions(img, scales, shifts)[0] for img in stimuli])
        means.append(float(np.mean(neuron_responses(net, batch, neuron))))
    return InvarianceCurve(axis, list(values), means, len(stimuli))


def top_stimuli(net, neuron, eval_set, k):
    """Indices and responses of the ``k`` most exciting images, ties by dataset order."""
    images = getattr(eval_set, "images", eval_set)
    if k > len(images):
        raise ValueError(f"k={k} exceeds eval-set size {len(images)}")
    resp = neuron_responses(net, images, neuron)
    order = np.argsort(-resp, kind="stable")[:k]
    return order, resp[order]


def neuron_objective(net, neuron):
    """``x -> (response, gradient)`` of one top neuron w.r.t. the network input."""
    shape = net.config.input_shape

    def fun_and_grad(x):
        x = np.asarray(x, dtype=np.float64).reshape(shape)
        feats = top_features(x, net)
        d_top = np.zeros(feats.shape)
        d_top[0, neuron] = 1.0
        _, grad = feature_backward(x, net, d_top, need_input_grad=True)
        return float(feats[0, neuron]), grad[0]

    return fun_and_grad


def optimal_stimulus(net, neuron, ls_cfg=LineSearchConfig(), seed=0):
    """Unit-norm network input maximizing ``neuron``; returns ``(x_star, trace)``."""
    x0 = substream(seed, "visualize.x0").normal(size=net.config.input_shape)
    return maximize_on_sphere(neuron_objective(net, neuron), x0, ls_cfg)


def cosine_features(filters, images):
    """(n_filters, n_images) cosine similarities; zero-norm pairs give 0."""
    f = np.asarray(filters, dtype=np.float64).reshape(len(filters), -1)
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    fn = np.linalg.norm(f, axis=1)
    xn = np.linalg.norm(x, axis=1)
    fs = np.divide(f, fn[:, None], out=np.zeros_like(f), where=fn[:, None] > 0)
    xs = np.divide(x, xn[:, None], out=np.zeros_like(x), where=xn[:, None] > 0)
    return fs @ xs.T


def sample_patches(train_pool, shape, n_filters, seed):
    """Random crops (with replacement) of ``shape`` from the pool, resized up if needed."""
    images = getattr(train_pool, "images", train_pool)
    if len(images) == 0:
        raise ValueError("empty training pool")
    rng = substream(seed, "baseline.patches")
    h, w = shape[:2]
    out = np.empty((n_filters,) + tuple(shape), dtype=np.float64)
    for i in range(n_filters):
        src = images[rng.integers(len(images))]
        if src.shape[0] < h or src.shape[1] < w:
            src = resize_cubic(src, (max(h, src.shape[0]), max(w, src.shape[1])))
        top = rng.integers(src.shape[0] - h + 1)
        left = rng.integers(src.shape[1] - w + 1)
        out[i] = src[top:top + h, left:left + w]
    return out


def linear_filter_baseline(train_pool, eval_set, n_filters=1000, seed=0, filters=None):
    """Best 20-threshold accuracy of cosine-similarity-to-a-training-patch features.

    Returns ``(NeuronEval, best_filter)``; the eval's ``neuron_index`` is the
    index of the winning filter.
    """
    images, labels = eval_set.images, eval_set.labels
    if filters is None:
        filters = sample_patches(train_pool, images.shape[1:], n_filters, seed)
    sims = cosine_features(filters, images)
    best, best_k = None, 0
    for k in range(len(filters)):
        ev = best_neuron_accuracy(sims[k], labels, k)
        if best is None or ev.accuracy > best.accuracy:
            best, best_k = ev, k
    return best, filters[best_k]


def sensitivity_sweep(axis, values, train_and_eval):
    """Rows ``(value, accuracy)``; ``accuracy`` is None for values with invalid geometry.

    ``train_and_eval(axis, value)`` trains a fresh seeded network with that
    setting and returns its best-neuron accuracy.
    """
    if axis not in ("rf_size", "num_maps"):
        raise ValueError(f"sweep axis must be rf_size or num_maps, got {axis!r}")
    rows = []
    for v in values:
        try:
            rows.append((v, float(train_and_eval(axis, v))))
        except (GeometryError, ConfigError) as exc:
            log.warning("sweep %s=%s skipped: %s", axis, v, exc)
            rows.append((v, None))
    return rows


# ---------------------------------------------------------------------------
# report files


def write_eval_report(out_dir, report):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron_index", "accuracy", "threshold", "polarity", "act_min", "act_max"])
        for ev in report.neurons:
            w.writerow([ev.neuron_index, repr(ev.accuracy), repr(ev.best_threshold), ev.polarity,
                        repr(ev.activation_min), repr(ev.activation_max)])
    for neuron, (edges, pos, neg) in report.histograms.items():
        write_histogram(os.path.join(out_dir, f"hist_{neuron}.csv"), edges, pos, neg)


def write_histogram(path, edges, pos, neg):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "pos_count", "neg_count"])
        for lo, hi, p, n in zip(edges[:-1], edges[1:], pos, neg):
            w.writerow([repr(float(lo)), repr(float(hi)), int(p), int(n)])


def write_invariance(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param_value", "mean_response"])
        for v, m in zip(curve.values, curve.mean_response):
            w.writerow([v, repr(m)])


def write_sweep(path, axis, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "accuracy"])
        for v, acc in rows:
            w.writerow([v, "" if acc is None else repr(acc)])


def eval_features(net, dataset):
    """Top-layer features of a dataset after the checkpoint's whitening, if any."""
    images = dataset.images
    if net.whitening is not None:
        images = net.whitening.apply(images)
    return top_features(images, net)


def evaluate_network(net, dataset, n_bins=50, hist_neurons=1):
    if not isinstance(dataset, Dataset):
        raise TypeError("evaluate_network needs a labelled Dataset")
    return scan_all_neurons(eval_features(net, dataset), dataset.labels, n_bins, hist_neurons)
