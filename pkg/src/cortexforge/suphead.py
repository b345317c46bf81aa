"""One-vs-all logistic head on top-layer features, plus whole-network fine-tuning."""

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from cortexforge.data import fit_whitening
from cortexforge.netcore import feature_backward, init_network, top_features
from cortexforge.optim import MinibatchStream, SgdConfig, apply_update, train_local
from cortexforge.rng import substream


@dataclass
class LogisticHead:
    weights: np.ndarray  # (n_classes, feature_dim)
    biases: np.ndarray  # (n_classes,)

    @classmethod
    def zeros(cls, n_classes, dim):
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes))

    def scores(self, features):
        return 1.0 / (1.0 + np.exp(-(np.asarray(features, dtype=np.float64) @ self.weights.T
                                     + self.biases)))

    def predict(self, features):
        # np.argmax returns the lowest index among ties
        return np.argmax(self.scores(features), axis=1)


@dataclass(frozen=True)
class HeadConfig:
    learning_rate: float = 0.5
    steps: int = 500
    minibatch_size: int = 32
    seed: int = 0


def _one_hot(labels, n_classes):
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def head_loss_and_grad(head, features, labels):
    """Mean over examples of the summed per-class binary log-losses.

    Returns ``(loss, grad_w, grad_b, grad_features)``.
    """
    x = np.asarray(features, dtype=np.float64)
    z = x @ head.weights.T + head.biases
    y = _one_hot(labels, len(head.biases))
    # log(1 + e^z) - y z, written to stay finite for large |z|
    loss = np.sum(np.logaddexp(0.0, z) - y * z) / len(x)
    dz = (1.0 / (1.0 + np.exp(-z)) - y) / len(x)
    return loss, dz.T @ x, dz.sum(axis=0), dz @ head.weights


def _check_classes(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def train_head(features, labels, cfg=HeadConfig(), n_classes=None):
    """Zero-initialized one-vs-all head trained by minibatch SGD; features stay frozen."""
    x = np.asarray(features, dtype=np.float64)
    n_classes = n_classes or int(np.max(labels)) + 1
    labels = _check_classes(labels, n_classes)
    head = LogisticHead.zeros(n_classes, x.shape[1])
    stream = MinibatchStream(len(x), min(cfg.minibatch_size, len(x)), cfg.seed, "head.shuffle")
    for _ in range(cfg.steps):
        idx = stream.next()
        _, gw, gb, _ = head_loss_and_grad(head, x[idx], labels[idx])
        head = LogisticHead(head.weights - cfg.learning_rate * gw,
                            head.biases - cfg.learning_rate * gb)
        if not (np.all(np.isfinite(head.weights)) and np.all(np.isfinite(head.biases))):
            raise FloatingPointError("head parameters became non-finite")
    return head


def fine_tune_loss_and_grad(net, head, images, labels):
    """Classification loss and its gradients w.r.t. every stage's W1 and the head."""
    feats = top_features(images, net).astype(np.float64)
    loss, gw, gb, gf = head_loss_and_grad(head, feats, labels)
    grads_w1, _ = feature_backward(images, net, gf)
    return loss, grads_w1, gw, gb


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 1e-2
    steps: int = 100
    minibatch_size: int = 0  # 0 = full batch
    seed: int = 0


def fine_tune(net, head, images, labels, cfg=FineTuneConfig()):
    """Joint SGD of the head and every W1 on the classification loss.

    W2, H and the LCN windows are left alone.  Returns ``(net, head, losses)``.
    """
    images = np.asarray(getattr(images, "images", images))
    labels = _check_classes(labels, len(head.biases))
    full = cfg.minibatch_size <= 0 or cfg.minibatch_size >= len(images)
    stream = None if full else MinibatchStream(len(images), cfg.minibatch_size, cfg.seed,
                                                "finetune.shuffle")
    net = net.copy()
    losses = []
    for _ in range(cfg.steps):
        idx = np.arange(len(images)) if full else stream.next()
        loss, grads_w1, gw, gb = fine_tune_loss_and_grad(net, head, images[idx], labels[idx])
        losses.append(loss)
        for p, g in zip(net.stages, grads_w1):
            p.w1_encode = apply_update(p.w1_encode, g, cfg.learning_rate)
        head = LogisticHead(head.weights - cfg.learning_rate * gw,
                            head.biases - cfg.learning_rate * gb)
    return net, head, losses


def params_checksum(net):
    h = hashlib.sha256()
    for name, arr in sorted(net.named_tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def split_halves(n, seed):
    order = substream(seed, "suphead.split").permutation(n)
    return np.sort(order[:n // 2]), np.sort(order[n // 2:])


@dataclass(frozen=True)
class CompareBudgets:
    pretrain: SgdConfig = SgdConfig(learning_rate=1e-3, minibatch_size=50, max_steps=300)
    head: HeadConfig = HeadConfig()
    finetune: FineTuneConfig = FineTuneConfig()


def _supervised_arm(net, train_x, train_y, val_x, val_y, budgets, n_classes):
    split = hashlib.sha256(train_x.tobytes() + val_x.tobytes()).hexdigest()
    head = train_head(top_features(train_x, net), train_y, budgets.head, n_classes)
    net, head, _ = fine_tune(net, head, train_x, train_y, budgets.finetune)
    train_acc = float(np.mean(head.predict(top_features(train_x, net)) == train_y))
    val_acc = float(np.mean(head.predict(top_features(val_x, net)) == val_y))
    return train_acc, val_acc, split


def compare_init(dataset, net_cfg, budgets=CompareBudgets(), seed=0, pretrain_images=None,
                 initial=None, whiten=True):
    """Validation accuracy of an unsupervised-pretrained arm vs a random-init arm.

    Returns ``{"pretrained": (train_acc, val_acc, split_checksum), "random": ...}``.

    Both arms start from the same seeded weights and get the same supervised
    budgets on the same half/half split; only the pretrained arm first runs
    the unsupervised objective (on ``pretrain_images`` or the training half).
    With ``whiten`` a whitening transform fit on the training half is applied
    to every image first.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    train_idx, val_idx = split_halves(len(images), seed)
    if whiten:
        white = fit_whitening(images[train_idx])
        images = white.apply(images)
        if pretrain_images is not None:
            pretrain_images = white.apply(pretrain_images)
    train_x, train_y = images[train_idx], labels[train_idx]
    val_x, val_y = images[val_idx], labels[val_idx]
    start = initial if initial is not None else init_network(net_cfg, seed)

    results = {}
    pre_x = train_x if pretrain_images is None else pretrain_images
    pretrained, _ = train_local(pre_x, start, budgets.pretrain)
    results["pretrained"] = _supervised_arm(pretrained, train_x, train_y, val_x, val_y,
                                            budgets, n_classes)
    results["random"] = _supervised_arm(start.copy(), train_x, train_y, val_x, val_y,
                                        budgets, n_classes)
    if results["pretrained"][2] != results["random"][2]:
        raise RuntimeError("arms were evaluated on different splits")
    return results


def append_supervised_report(path, arm, train_acc, val_acc, steps, seed):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["arm", "train_acc", "val_acc", "steps", "seed"])
        w.writerow([arm, repr(train_acc), repr(val_acc), steps, seed])
