"""Locally-connected filtering, L2 pooling, LCN and the reconstruction-TICA objective.

Array layout conventions (all row-major):

* images / activations: ``(height, width, maps)``, optionally with a leading
  batch axis ``(batch, height, width, maps)``
* encode / decode weights: ``(out_h, out_w, num_maps, rf, rf, input_maps)``;
  one unshared filter per simple unit
* pooling weights: ``(pool_h, pool_w, num_maps, pool, pool)``
* LCN window: ``(lcn_window, lcn_window, num_maps)``

Storage is float32; every reduction runs in float64.  Outputs come back in
float32 unless one of the inputs was already float64, which lets the gradient
checks run entirely in double precision.
"""

from dataclasses import dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cortexforge.rng import substream


class GeometryError(ValueError):
    """Raised when tensor shapes do not match the configured geometry."""


class ConfigError(ValueError):
    """Raised for an invalid stage or network configuration."""


@dataclass(frozen=True)
class StageConfig:
    input_height: int
    input_width: int
    input_maps: int
    rf_size: int = 18
    stride: int = 9
    num_maps: int = 8
    pool_size: int = 5
    lcn_window: int = 5
    lcn_floor_c: float = 0.01
    sparsity_lambda: float = 0.1
    sparsity_epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("input_height", "input_width", "input_maps", "rf_size",
                     "stride", "num_maps", "pool_size", "lcn_window"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.lcn_window % 2 == 0:
            raise ConfigError(f"lcn_window must be odd, got {self.lcn_window}")
        if self.lcn_floor_c <= 0:
            raise ConfigError("lcn_floor_c must be positive")
        if self.sparsity_lambda < 0:
            raise ConfigError("sparsity_lambda must be nonnegative")
        if self.sparsity_epsilon < 0:
            raise ConfigError("sparsity_epsilon must be nonnegative")
        if self.rf_size > min(self.input_height, self.input_width):
            raise GeometryError(
                f"rf_size {self.rf_size} exceeds input {self.input_height}x{self.input_width}")
        for extent, axis in ((self.input_height, "height"), (self.input_width, "width")):
            if (extent - self.rf_size) % self.stride:
                raise GeometryError(
                    f"input {axis} {extent} minus rf_size {self.rf_size} "
                    f"is not divisible by stride {self.stride}")
        if self.pool_size > min(self.out_height, self.out_width):
            raise GeometryError(
                f"pool_size {self.pool_size} exceeds simple-layer extent "
                f"{self.out_height}x{self.out_width}")

    @property
    def out_height(self):
        return (self.input_height - self.rf_size) // self.stride + 1

    @property
    def out_width(self):
        return (self.input_width - self.rf_size) // self.stride + 1

    @property
    def pool_height(self):
        return self.out_height - self.pool_size + 1

    @property
    def pool_width(self):
        return self.out_width - self.pool_size + 1

    @property
    def input_shape(self):
        return (self.input_height, self.input_width, self.input_maps)

    @property
    def simple_shape(self):
        return (self.out_height, self.out_width, self.num_maps)

    @property
    def output_shape(self):
        return (self.pool_height, self.pool_width, self.num_maps)

    @property
    def weight_shape(self):
        return (self.out_height, self.out_width, self.num_maps,
                self.rf_size, self.rf_size, self.input_maps)

    @property
    def fan_in(self):
        return self.rf_size * self.rf_size * self.input_maps

    @property
    def n_pooling_units(self):
        return self.pool_height * self.pool_width * self.num_maps


@dataclass(frozen=True)
class NetworkConfig:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not 1 <= len(stages) <= 3:
            raise ConfigError(f"a network has 1 to 3 stages, got {len(stages)}")
        for n, (lower, upper) in enumerate(zip(stages, stages[1:]), start=1):
            if lower.output_shape != upper.input_shape:
                raise GeometryError(
                    f"stage {n} output {lower.output_shape} does not feed "
                    f"stage {n + 1} input {upper.input_shape}")

    @classmethod
    def chain(cls, input_height, input_width, input_maps, stage_kwargs):
        """Build a chained config, deriving each stage's input from the one below."""
        stages = []
        shape = (input_height, input_width, input_maps)
        for kwargs in stage_kwargs:
            cfg = StageConfig(input_height=shape[0], input_width=shape[1],
                              input_maps=shape[2], **kwargs)
            stages.append(cfg)
            shape = cfg.output_shape
        return cls(tuple(stages))

    @property
    def input_shape(self):
        return self.stages[0].input_shape

    @property
    def output_shape(self):
        return self.stages[-1].output_shape


STAGE_FIELDS = tuple(f.name for f in fields(StageConfig))


@dataclass
class StageParams:
    w1_encode: np.ndarray
    w2_decode: np.ndarray
    h_pool: np.ndarray
    g_window: np.ndarray

    def copy(self):
        return StageParams(self.w1_encode.copy(), self.w2_decode.copy(),
                           self.h_pool.copy(), self.g_window.copy())


@dataclass
class NetworkParams:
    config: NetworkConfig
    stages: list
    seed: int = 0
    whitening: object = field(default=None)

    def __post_init__(self):
        if len(self.stages) != len(self.config.stages):
            raise ConfigError("one StageParams per configured stage is required")
        for n, (cfg, p) in enumerate(zip(self.config.stages, self.stages), start=1):
            if p.w1_encode.shape != cfg.weight_shape or p.w2_decode.shape != cfg.weight_shape:
                raise GeometryError(
                    f"stage {n} weights {p.w1_encode.shape}/{p.w2_decode.shape} "
                    f"do not match {cfg.weight_shape}")
            if p.w1_encode is p.w2_decode or np.shares_memory(p.w1_encode, p.w2_decode):
                raise ConfigError(f"stage {n}: encode and decode weights must not share storage")

    def copy(self):
        return NetworkParams(self.config, [s.copy() for s in self.stages], self.seed,
                             self.whitening)

    def named_tensors(self):
        out = {}
        for n, p in enumerate(self.stages, start=1):
            out[f"s{n}.w1"] = p.w1_encode
            out[f"s{n}.w2"] = p.w2_decode
            out[f"s{n}.h"] = p.h_pool
            out[f"s{n}.g"] = p.g_window
        return out

    def learnable(self):
        """Mapping of learnable tensor names (W1, W2 of each stage) to arrays."""
        return {k: v for k, v in self.named_tensors().items()
                if k.endswith(".w1") or k.endswith(".w2")}

    def with_learnable(self, values):
        """Copy of these params with the W1/W2 tensors replaced from ``values``."""
        new = self.copy()
        for n, p in enumerate(new.stages, start=1):
            if f"s{n}.w1" in values:
                p.w1_encode = np.array(values[f"s{n}.w1"], dtype=np.float32)
            if f"s{n}.w2" in values:
                p.w2_decode = np.array(values[f"s{n}.w2"], dtype=np.float32)
        return new


def pooling_weights(cfg):
    """Fixed uniform pooling weights, 1 / pool_size**2 everywhere."""
    shape = (cfg.pool_height, cfg.pool_width, cfg.num_maps, cfg.pool_size, cfg.pool_size)
    return np.full(shape, 1.0 / cfg.pool_size ** 2, dtype=np.float32)


def gaussian_window(cfg):
    """Gaussian LCN window over lcn_window x lcn_window x num_maps, summing to 1."""
    n = cfg.lcn_window
    sigma = n / 4.0
    r = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    g = np.repeat(g[:, :, None], cfg.num_maps, axis=2)
    g /= g.sum()
    return g.astype(np.float32)


def init_stage(cfg, rng):
    bound = 1.0 / np.sqrt(cfg.fan_in)
    w1 = rng.uniform(-bound, bound, size=cfg.weight_shape).astype(np.float32)
    w2 = rng.uniform(-bound, bound, size=cfg.weight_shape).astype(np.float32)
    return StageParams(w1, w2, pooling_weights(cfg), gaussian_window(cfg))


def init_network(config, seed):
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of every stage."""
    stages = [init_stage(cfg, substream(seed, f"init.s{n}"))
              for n, cfg in enumerate(config.stages, start=1)]
    return NetworkParams(config, stages, seed=int(seed))


# ---------------------------------------------------------------------------
# dtype helpers


def _out_dtype(*arrays):
    return np.float64 if any(np.asarray(a).dtype == np.float64 for a in arrays) else np.float32


def _batched(x, shape, what="input"):
    x = np.asarray(x)
    if x.shape == tuple(shape):
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == tuple(shape):
        return x, False
    raise GeometryError(f"{what} shape {x.shape} does not match expected {tuple(shape)}")


def _finish(y, single, dtype):
    y = y[0] if single else y
    return y.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# locally-connected filtering


def extract_patches(x, cfg):
    """(B, H, W, C) -> (B, out_h, out_w, rf, rf, C), a strided view."""
    win = sliding_window_view(x, (cfg.rf_size, cfg.rf_size), axis=(1, 2))
    win = win[:, ::cfg.stride, ::cfg.stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def fold_patches(patches, cfg):
    """Adjoint of :func:`extract_patches`; overlapping contributions are summed."""
    b = patches.shape[0]
    out = np.zeros((b,) + cfg.input_shape, dtype=patches.dtype)
    rf, s = cfg.rf_size, cfg.stride
    for i in range(cfg.out_height):
        for j in range(cfg.out_width):
            out[:, i * s:i * s + rf, j * s:j * s + rf, :] += patches[:, i, j]
    return out


def _location_major(patches, cfg):
    # (B, oh, ow, rf, rf, C) -> (L, B, D)
    b = patches.shape[0]
    L = cfg.out_height * cfg.out_width
    return np.ascontiguousarray(patches.reshape(b, L, cfg.fan_in).transpose(1, 0, 2))


def _weights_lkd(w, cfg):
    return w.reshape(cfg.out_height * cfg.out_width, cfg.num_maps, cfg.fan_in)


def _filter64(x, cfg, w1):
    """float64 batched filtering; returns (simple (B, oh, ow, K), patches (L, B, D))."""
    P = _location_major(extract_patches(x, cfg), cfg)
    W = _weights_lkd(w1.astype(np.float64, copy=False), cfg)
    s = np.matmul(P, W.transpose(0, 2, 1))  # (L, B, K)
    b = x.shape[0]
    simple = s.transpose(1, 0, 2).reshape(b, cfg.out_height, cfg.out_width, cfg.num_maps)
    return simple, P


def lc_filter_forward(x, cfg, w1):
    """Responses of the unshared local filters, shape (out_h, out_w, num_maps).

    Each unit dots its own filter with the rf x rf x input_maps patch under it.
    Accepts a single image or a leading batch axis.
    """
    xb, single = _batched(x, cfg.input_shape)
    w1 = np.asarray(w1)
    if w1.shape != cfg.weight_shape:
        raise GeometryError(f"filter shape {w1.shape} does not match {cfg.weight_shape}")
    simple, _ = _filter64(xb.astype(np.float64, copy=False), cfg, w1)
    return _finish(simple, single, _out_dtype(x, w1))


def lc_decode(simple, cfg, w2):
    """Map simple responses back to pixels through the transposed connectivity."""
    sb, single = _batched(simple, cfg.simple_shape, "simple layer")
    b = sb.shape[0]
    L = cfg.out_height * cfg.out_width
    s = sb.astype(np.float64, copy=False).reshape(b, L, cfg.num_maps).transpose(1, 0, 2)
    W = _weights_lkd(np.asarray(w2, dtype=np.float64), cfg)
    patches = np.matmul(s, W)  # (L, B, D)
    patches = patches.transpose(1, 0, 2).reshape(
        (b, cfg.out_height, cfg.out_width, cfg.rf_size, cfg.rf_size, cfg.input_maps))
    return _finish(fold_patches(patches, cfg), single, _out_dtype(simple, w2))


# ---------------------------------------------------------------------------
# L2 pooling


def _pool_energy(sq, cfg, h):
    """sum_u H_u * s_u^2 for every pooling unit; ``sq`` is the squared simple layer."""
    p = cfg.pool_size
    ph, pw = cfg.pool_height, cfg.pool_width
    out = np.zeros((sq.shape[0], ph, pw, cfg.num_maps))
    for du in range(p):
        for dv in range(p):
            out += h[:, :, :, du, dv] * sq[:, du:du + ph, dv:dv + pw, :]
    return out


def _pool_energy_adjoint(d_energy, cfg, h):
    """Adjoint of :func:`_pool_energy` with respect to the squared input."""
    p = cfg.pool_size
    ph, pw = cfg.pool_height, cfg.pool_width
    out = np.zeros((d_energy.shape[0],) + cfg.simple_shape)
    for du in range(p):
        for dv in range(p):
            out[:, du:du + ph, dv:dv + pw, :] += h[:, :, :, du, dv] * d_energy
    return out


def _check_pool(cfg, h):
    h = np.asarray(h)
    expected = (cfg.pool_height, cfg.pool_width, cfg.num_maps, cfg.pool_size, cfg.pool_size)
    if h.shape != expected:
        raise GeometryError(f"pooling weights {h.shape} do not match {expected}")
    return h.astype(np.float64)


def l2_pool_forward(simple, cfg, h_pool):
    """sqrt(sum_u H_u s_u^2) over overlapping pool x pool neighborhoods within one map."""
    sb, single = _batched(simple, cfg.simple_shape, "simple layer")
    h = _check_pool(cfg, h_pool)
    s = sb.astype(np.float64, copy=False)
    pooled = np.sqrt(_pool_energy(s * s, cfg, h))
    return _finish(pooled, single, _out_dtype(simple, h_pool))


# ---------------------------------------------------------------------------
# local contrast normalization


def _window_sum(a, g):
    """sum_{u,v,k} G[u,v,k] a[i+u-r, j+v-r, k] with zeros outside; (B,H,W,K) -> (B,H,W)."""
    n = g.shape[0]
    r = n // 2
    pad = np.pad(a, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(pad, (n, n), axis=(1, 2))  # (B, H, W, K, n, n)
    return np.einsum("bijkuv,uvk->bij", win, g)


def _window_sum_adjoint(d, g):
    """Adjoint of :func:`_window_sum`; (B,H,W) -> (B,H,W,K)."""
    n = g.shape[0]
    r = n // 2
    pad = np.pad(d, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(pad, (n, n), axis=(1, 2))  # (B, H, W, n, n)
    return np.einsum("bijuv,uvk->bijk", win, g[::-1, ::-1, :])


def _check_window(cfg, g):
    g = np.asarray(g)
    expected = (cfg.lcn_window, cfg.lcn_window, cfg.num_maps)
    if g.shape != expected:
        raise GeometryError(f"LCN window {g.shape} does not match {expected}")
    return g.astype(np.float64)


def _lcn64(h, cfg, g):
    """float64 LCN; returns output and the intermediates needed by the backward pass."""
    norm = _window_sum(np.ones((1,) + h.shape[1:]), g)  # truncated-window mass, (1, H, W)
    # offsetting by one sample per example keeps constant inputs exactly zero after
    # centring; the offset cancels analytically so the backward pass ignores it
    ref = h.reshape(h.shape[0], -1)[:, :1, None, None]
    mean = ref[..., 0] + _window_sum(h - ref, g) / norm
    centred = h - mean[..., None]
    energy = _window_sum(centred * centred, g) / norm
    sigma = np.sqrt(energy)
    divisor = np.maximum(cfg.lcn_floor_c, sigma)
    y = centred / divisor[..., None]
    return y, (norm, centred, sigma, divisor)


def lcn_forward(pooled, cfg, g_window):
    """Subtractive then divisive normalization with a Gaussian window across all maps.

    Near the borders the truncated window is renormalized to unit mass, so a
    constant input maps to exactly zero everywhere.
    """
    if cfg.lcn_window % 2 == 0:
        raise ConfigError(f"lcn_window must be odd, got {cfg.lcn_window}")
    hb, single = _batched(pooled, cfg.output_shape, "pooled layer")
    g = _check_window(cfg, g_window)
    y, _ = _lcn64(hb.astype(np.float64, copy=False), cfg, g)
    return _finish(y, single, _out_dtype(pooled, g_window))


# ---------------------------------------------------------------------------
# stage / network forward


def _stage64(x, cfg, params):
    simple, P = _filter64(x, cfg, params.w1_encode)
    h = _check_pool(cfg, params.h_pool)
    energy = _pool_energy(simple * simple, cfg, h)
    pooled = np.sqrt(energy)
    normalized, lcn_cache = _lcn64(pooled, cfg, _check_window(cfg, params.g_window))
    return simple, pooled, normalized, (P, energy, lcn_cache)


def stage_forward(x, cfg, params):
    """Return ``(simple, pooled, normalized)`` for one stage."""
    xb, single = _batched(x, cfg.input_shape)
    dtype = _out_dtype(x, params.w1_encode)
    simple, pooled, normalized, _ = _stage64(xb.astype(np.float64, copy=False), cfg, params)
    return tuple(_finish(a, single, dtype) for a in (simple, pooled, normalized))


def network_forward(x, net):
    """Per-stage ``(simple, pooled, normalized)`` bundles, bottom stage first."""
    bundles = []
    for cfg, params in zip(net.config.stages, net.stages):
        bundle = stage_forward(x, cfg, params)
        bundles.append(bundle)
        x = bundle[2]
    return bundles


def top_features(x, net):
    """Flattened top-layer LCN outputs, shape (batch, n_top_neurons)."""
    xb, _ = _batched(x, net.config.input_shape)
    top = network_forward(xb, net)[-1][2]
    return top.reshape(top.shape[0], -1)


# ---------------------------------------------------------------------------
# reconstruction TICA objective


def _as_batch(batch, cfg):
    if isinstance(batch, (list, tuple)):
        if len(batch) == 0:
            raise ValueError("batch must be nonempty")
        batch = np.stack([np.asarray(b) for b in batch])
    batch = np.asarray(batch)
    if batch.ndim == len(cfg.input_shape):
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if batch.shape[1:] != cfg.input_shape:
        raise GeometryError(f"batch examples {batch.shape[1:]} do not match {cfg.input_shape}")
    return batch


def _rica(batch, cfg, params, want_grad):
    x = batch.astype(np.float64, copy=False)
    b = x.shape[0]
    simple, P = _filter64(x, cfg, params.w1_encode)
    L = cfg.out_height * cfg.out_width
    s = simple.reshape(b, L, cfg.num_maps).transpose(1, 0, 2)  # (L, B, K)
    W2 = _weights_lkd(params.w2_decode.astype(np.float64), cfg)
    recon_patches = np.matmul(s, W2).transpose(1, 0, 2).reshape(
        (b, cfg.out_height, cfg.out_width, cfg.rf_size, cfg.rf_size, cfg.input_maps))
    residual = fold_patches(recon_patches, cfg) - x
    h = _check_pool(cfg, params.h_pool)
    pool_term = np.sqrt(cfg.sparsity_epsilon + _pool_energy(simple * simple, cfg, h))
    value = float(np.sum(residual * residual)) + cfg.sparsity_lambda * float(np.sum(pool_term))
    if not want_grad:
        return value, None, None

    R = _location_major(extract_patches(residual, cfg), cfg)  # (L, B, D)
    grad_w2 = 2.0 * np.matmul(s.transpose(0, 2, 1), R)  # (L, K, D)
    d_simple = _pool_energy_adjoint(1.0 / pool_term, cfg, h) * simple * cfg.sparsity_lambda
    ds = 2.0 * np.matmul(R, W2.transpose(0, 2, 1))  # (L, B, K)
    ds += d_simple.reshape(b, L, cfg.num_maps).transpose(1, 0, 2)
    grad_w1 = np.matmul(ds.transpose(0, 2, 1), P)  # (L, K, D)
    return value, grad_w1.reshape(cfg.weight_shape), grad_w2.reshape(cfg.weight_shape)


def rica_stage_objective(batch, cfg, params):
    """Sum over examples of ||W2 W1^T x - x||^2 + lambda * sum_j sqrt(eps + H_j (W1^T x)^2)."""
    return _rica(_as_batch(batch, cfg), cfg, params, want_grad=False)[0]


def rica_stage_gradient(batch, cfg, params):
    """Analytic gradients ``(grad_w1, grad_w2)`` of :func:`rica_stage_objective`.

    H and the LCN window are fixed and get no gradient.  Requires a strictly
    positive epsilon so the sparsity term is differentiable at zero response.
    """
    if cfg.sparsity_epsilon <= 0:
        raise ConfigError("rica_stage_gradient needs sparsity_epsilon > 0")
    _, g1, g2 = _rica(_as_batch(batch, cfg), cfg, params, want_grad=True)
    dtype = _out_dtype(params.w1_encode, params.w2_decode)
    return g1.astype(dtype), g2.astype(dtype)


def joint_objective_and_gradient(batch, net, want_grad=True):
    """Sum of the per-stage objectives; stage n consumes stage n-1's normalized output.

    Each stage's gradient is taken against its own objective with its input
    held fixed; all stages are meant to be updated in the same step.
    Returns ``(total, [(grad_w1, grad_w2), ...])``.
    """
    x = _as_batch(batch, net.config.stages[0])
    total = 0.0
    grads = []
    for cfg, params in zip(net.config.stages, net.stages):
        if want_grad and cfg.sparsity_epsilon <= 0:
            raise ConfigError("joint gradient needs sparsity_epsilon > 0 in every stage")
        value, g1, g2 = _rica(x, cfg, params, want_grad)
        total += value
        if want_grad:
            dtype = _out_dtype(params.w1_encode, params.w2_decode)
            grads.append((g1.astype(dtype), g2.astype(dtype)))
        x = _stage64(x.astype(np.float64, copy=False), cfg, params)[2]
        if np.asarray(params.w1_encode).dtype != np.float64:
            # next stage sees what a stored float32 activation would hold
            x = x.astype(np.float32)
    return total, grads


def joint_objective(batch, net):
    return joint_objective_and_gradient(batch, net, want_grad=False)[0]


# ---------------------------------------------------------------------------
# backpropagation through the feature path (used by fine-tuning and visualization)


def _lcn_backward(dy, cfg, g, cache):
    norm, centred, sigma, divisor = cache
    d_centred = dy / divisor[..., None]
    d_div = -np.sum(dy * centred, axis=-1) / (divisor * divisor)
    active = sigma > cfg.lcn_floor_c
    d_sigma = np.where(active, d_div, 0.0)
    safe = np.where(sigma > 0, sigma, 1.0)
    d_energy = np.where(active, d_sigma / (2.0 * safe), 0.0) / norm
    d_centred += 2.0 * centred * _window_sum_adjoint(d_energy, g)
    d_mean = -np.sum(d_centred, axis=-1) / norm
    return d_centred + _window_sum_adjoint(d_mean, g)


def feature_backward(x, net, d_top, need_input_grad=False):
    """Backpropagate ``d_top`` (gradient w.r.t. the top LCN output) through the network.

    Returns ``(grad_w1 per stage, grad_input or None)``.  Pooling units with
    zero energy pass no gradient (the square root is not differentiable there).
    """
    xb, _ = _batched(x, net.config.input_shape)
    acts = [xb.astype(np.float64)]
    caches = []
    for cfg, params in zip(net.config.stages, net.stages):
        simple, pooled, normalized, cache = _stage64(acts[-1], cfg, params)
        caches.append((simple, pooled, cache))
        acts.append(normalized)
    d = np.asarray(d_top, dtype=np.float64).reshape(acts[-1].shape)
    grads_w1 = [None] * len(net.stages)
    for n in reversed(range(len(net.stages))):
        cfg, params = net.config.stages[n], net.stages[n]
        simple, pooled, (P, energy, lcn_cache) = caches[n]
        g = _check_window(cfg, params.g_window)
        h = _check_pool(cfg, params.h_pool)
        d_pooled = _lcn_backward(d, cfg, g, lcn_cache)
        d_energy = np.where(pooled > 0, d_pooled / (2.0 * np.where(pooled > 0, pooled, 1.0)), 0.0)
        d_simple = 2.0 * simple * _pool_energy_adjoint(d_energy, cfg, h)
        b = d_simple.shape[0]
        L = cfg.out_height * cfg.out_width
        ds = d_simple.reshape(b, L, cfg.num_maps).transpose(1, 0, 2)
        grads_w1[n] = np.matmul(ds.transpose(0, 2, 1), P).reshape(cfg.weight_shape)
        if n > 0 or need_input_grad:
            W1 = _weights_lkd(params.w1_encode.astype(np.float64), cfg)
            dP = np.matmul(ds, W1).transpose(1, 0, 2).reshape(
                (b, cfg.out_height, cfg.out_width, cfg.rf_size, cfg.rf_size, cfg.input_maps))
            d = fold_patches(dP, cfg)
    return grads_w1, (d if need_input_grad else None)
