"""Minibatch SGD for the stage objectives and projected gradient ascent on the unit sphere."""

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from cortexforge.netcore import GeometryError, joint_objective_and_gradient
from cortexforge.rng import substream

log = logging.getLogger(__name__)


class OptimizationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 100
    max_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")


@dataclass(frozen=True)
class LineSearchConfig:
    initial_step: float = 1.0
    shrink_factor: float = 0.5
    max_iters: int = 500
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.shrink_factor < 1.0:
            raise ValueError("shrink_factor must lie strictly between 0 and 1")
        if self.initial_step <= 0 or self.max_iters < 1 or self.convergence_tol <= 0:
            raise ValueError("initial_step, max_iters and convergence_tol must be positive")


def apply_update(value, grad, lr):
    """value - lr * grad in the value's own precision.

    Shared by the local trainer and the parameter shards so both produce the
    same bits for the same inputs.
    """
    value = np.asarray(value)
    return value - value.dtype.type(lr) * np.asarray(grad, dtype=value.dtype)


def sgd_step(params, grads, lr):
    """New params with W1 -= lr * gW1 and W2 -= lr * gW2 for every stage."""
    if len(grads) != len(params.stages):
        raise GeometryError(f"{len(grads)} gradient pairs for {len(params.stages)} stages")
    new = params.copy()
    for n, (p, (g1, g2)) in enumerate(zip(new.stages, grads), start=1):
        if np.shape(g1) != p.w1_encode.shape or np.shape(g2) != p.w2_decode.shape:
            raise GeometryError(f"stage {n} gradient shapes {np.shape(g1)}/{np.shape(g2)} "
                                f"do not match {p.w1_encode.shape}")
        p.w1_encode = apply_update(p.w1_encode, g1, lr)
        p.w2_decode = apply_update(p.w2_decode, g2, lr)
    return new


class MinibatchStream:
    """Seeded epoch-wise shuffling; each epoch yields full minibatches only."""

    def __init__(self, n_examples, batch_size, seed, purpose="sgd.shuffle.0"):
        if n_examples == 0:
            raise ValueError("empty dataset")
        if batch_size > n_examples:
            raise ValueError(f"minibatch_size {batch_size} exceeds dataset size {n_examples}")
        self.n = n_examples
        self.batch_size = batch_size
        self.rng = substream(seed, purpose)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


class MetricsWriter:
    """Incremental ``step,objective,wall_ms`` CSV."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        self._w.writerow(["step", "objective", "wall_ms"])
        self._fh.flush()

    def write(self, step, objective, wall_ms):
        self._w.writerow([step, repr(float(objective)), f"{wall_ms:.3f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _images(dataset):
    return getattr(dataset, "images", dataset)


def train_local(dataset, net, sgd_cfg, metrics_path=None, progress_every=0):
    """Synchronous single-process reference trainer.

    Returns ``(params, trace)`` where ``trace`` is a list of
    ``(step, objective, wall_ms)``; the objective is the minibatch value
    before that step's update.
    """
    images = _images(dataset)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if sgd_cfg.max_steps == 0:
        return net.copy(), []
    stream = MinibatchStream(len(images), sgd_cfg.minibatch_size, sgd_cfg.seed)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    trace = []
    t0 = time.perf_counter()
    try:
        for step in range(sgd_cfg.max_steps):
            batch = images[stream.next()]
            value, grads = joint_objective_and_gradient(batch, net)
            if not np.isfinite(value):
                raise OptimizationError(f"objective became non-finite at step {step}")
            net = sgd_step(net, grads, sgd_cfg.learning_rate)
            wall = (time.perf_counter() - t0) * 1000.0
            trace.append((step, value, wall))
            if writer:
                writer.write(step, value, wall)
            if progress_every and step % progress_every == 0:
                log.info("step %d objective %.6g", step, value)
    finally:
        if writer:
            writer.close()
    return net, trace


def _normalize(x):
    return x / np.linalg.norm(x)


def maximize_on_sphere(fun_and_grad, x0, ls_cfg=LineSearchConfig()):
    """Maximize ``f`` subject to ||x||_2 = 1 by projected gradient ascent.

    ``fun_and_grad(x)`` returns ``(f(x), grad f(x))``.  Each trial step moves
    along the tangent component of the gradient, is projected back to the
    sphere, and is accepted only if ``f`` does not decrease; otherwise the step
    shrinks.  Returns ``(x_star, trace)`` with ``trace`` the accepted f-values.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    norm0 = np.linalg.norm(x0)
    if not norm0 > 0:
        raise ValueError("x0 must be nonzero")

    def evaluate(x):
        value, grad = fun_and_grad(x)
        value = float(value)
        grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite objective or gradient (f={value}) "
                                    f"at |x|={np.linalg.norm(x):.6g}")
        return value, grad

    x = x0 / norm0
    fx, gx = evaluate(x)
    trace = [fx]
    step = ls_cfg.initial_step
    for _ in range(ls_cfg.max_iters):
        tangent = gx - np.vdot(gx, x) * x
        tnorm = np.linalg.norm(tangent)
        if tnorm <= ls_cfg.convergence_tol * max(1.0, np.linalg.norm(gx)):
            break
        accepted = False
        trial_step = step
        while trial_step * tnorm > 1e-15:
            cand = _normalize(x + trial_step * tangent)
            fc, gc = evaluate(cand)
            if fc >= fx:
                accepted = True
                break
            trial_step *= ls_cfg.shrink_factor
        if not accepted:
            break
        moved = np.linalg.norm(cand - x)
        x, fx, gx = cand, fc, gc
        trace.append(fx)
        step = trial_step / ls_cfg.shrink_factor
        if moved <= ls_cfg.convergence_tol:
            break
    return x, trace
