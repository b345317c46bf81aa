import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexforge.netcore import (
    ConfigError,
    GeometryError,
    NetworkConfig,
    NetworkParams,
    StageConfig,
    StageParams,
    gaussian_window,
    init_network,
    joint_objective,
    joint_objective_and_gradient,
    l2_pool_forward,
    lc_decode,
    lc_filter_forward,
    lcn_forward,
    network_forward,
    pooling_weights,
    rica_stage_gradient,
    rica_stage_objective,
    stage_forward,
)
from oracles import (
    central_difference,
    decode_oracle,
    filter_oracle,
    lcn_oracle,
    pool_oracle,
    random_stage_config,
    rel_error,
    rica_oracle,
    stage_oracle,
)


def scalar_stage(w1=1.0, w2=1.0, eps=1e-3, lam=0.1):
    cfg = StageConfig(1, 1, 1, rf_size=1, stride=1, num_maps=1, pool_size=1, lcn_window=1,
                      sparsity_lambda=lam, sparsity_epsilon=eps)
    p = StageParams(np.full(cfg.weight_shape, w1), np.full(cfg.weight_shape, w2),
                    np.ones((1, 1, 1, 1, 1)), np.ones((1, 1, 1)))
    return cfg, p


def random_params(cfg, rng, dtype=np.float64):
    return StageParams(rng.normal(size=cfg.weight_shape).astype(dtype),
                       rng.normal(size=cfg.weight_shape).astype(dtype),
                       pooling_weights(cfg).astype(dtype), gaussian_window(cfg).astype(dtype))


# ---------------------------------------------------------------------------
# configuration


class TestStageConfig:
    def test_reference_defaults(self):
        cfg = StageConfig(54, 54, 3)
        assert (cfg.rf_size, cfg.pool_size, cfg.lcn_floor_c, cfg.sparsity_lambda) == (18, 5, 0.01, 0.1)

    def test_geometry(self):
        cfg = StageConfig(8, 8, 1, rf_size=4, stride=4, num_maps=2, pool_size=1, lcn_window=3)
        assert cfg.simple_shape == (2, 2, 2)
        assert cfg.weight_shape == (2, 2, 2, 4, 4, 1)

    @pytest.mark.parametrize("kw", [
        dict(rf_size=10),
        dict(rf_size=4, stride=3),
        dict(rf_size=4, stride=4, pool_size=3),
    ])
    def test_geometry_errors(self, kw):
        with pytest.raises(GeometryError):
            StageConfig(8, 8, 1, **kw)

    def test_even_lcn_window_rejected(self):
        with pytest.raises(ConfigError):
            StageConfig(8, 8, 1, rf_size=4, stride=4, pool_size=1, lcn_window=4)

    def test_chain_mismatch(self):
        a = StageConfig(8, 8, 1, rf_size=4, stride=4, num_maps=2, pool_size=1, lcn_window=1)
        b = StageConfig(3, 3, 2, rf_size=1, stride=1, num_maps=2, pool_size=1, lcn_window=1)
        with pytest.raises(GeometryError):
            NetworkConfig((a, b))

    def test_decode_storage_independent(self):
        cfg, p = scalar_stage()
        w = np.ones(cfg.weight_shape)
        bad = StageParams(w, w, p.h_pool, p.g_window)
        net_cfg = NetworkConfig((cfg,))
        with pytest.raises(ValueError):
            NetworkParams(net_cfg, [bad])

    def test_fixed_tensors(self):
        cfg = StageConfig(20, 20, 2, rf_size=6, stride=2, num_maps=3, pool_size=3, lcn_window=5)
        h = pooling_weights(cfg)
        assert np.all(h == np.float32(1 / 9))
        assert abs(float(gaussian_window(cfg).astype(np.float64).sum()) - 1.0) < 1e-6

    def test_init_scale_and_seed(self):
        cfg = NetworkConfig.chain(16, 16, 1, [dict(rf_size=6, stride=5, num_maps=4, pool_size=1,
                                                   lcn_window=3)])
        a, b = init_network(cfg, 3), init_network(cfg, 3)
        w = a.stages[0].w1_encode
        assert w.dtype == np.float32
        assert np.abs(w).max() <= 1 / np.sqrt(36)
        assert np.array_equal(w, b.stages[0].w1_encode)
        assert not np.array_equal(w, init_network(cfg, 4).stages[0].w1_encode)
        assert not np.array_equal(w, a.stages[0].w2_decode)


# ---------------------------------------------------------------------------
# sublayers


class TestFiltering:
    def test_identity_filter(self):
        cfg = StageConfig(6, 6, 2, rf_size=3, stride=3, num_maps=1, pool_size=1, lcn_window=1)
        w = np.zeros(cfg.weight_shape)
        w[:, :, 0, 1, 2, 1] = 1.0
        x = np.random.default_rng(0).normal(size=cfg.input_shape)
        out = lc_filter_forward(x, cfg, w)
        for i in range(2):
            for j in range(2):
                assert out[i, j, 0] == x[3 * i + 1, 3 * j + 2, 1]

    def test_zero_input(self):
        cfg = StageConfig(8, 8, 1, rf_size=4, stride=4, num_maps=2, pool_size=1, lcn_window=1)
        w = np.random.default_rng(1).normal(size=cfg.weight_shape)
        assert np.all(lc_filter_forward(np.zeros(cfg.input_shape), cfg, w) == 0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        cfg = StageConfig(8, 8, 1, rf_size=4, stride=4, num_maps=2, pool_size=1, lcn_window=1)
        x = rng.normal(size=cfg.input_shape)
        w = rng.normal(size=cfg.weight_shape)
        np.testing.assert_allclose(lc_filter_forward(x, cfg, w), filter_oracle(x, w, 4, 4),
                                   atol=1e-12)

    def test_unshared(self):
        cfg = StageConfig(4, 4, 1, rf_size=2, stride=2, num_maps=1, pool_size=1, lcn_window=1)
        w = np.zeros(cfg.weight_shape)
        w[0, 0] = 1.0
        out = lc_filter_forward(np.ones(cfg.input_shape), cfg, w)
        assert out[0, 0, 0] == 4 and out[1, 1, 0] == 0

    def test_shape_mismatch(self):
        cfg = StageConfig(8, 8, 1, rf_size=4, stride=4, pool_size=1, lcn_window=1)
        with pytest.raises(GeometryError, match="does not match"):
            lc_filter_forward(np.zeros((7, 8, 1)), cfg, np.zeros(cfg.weight_shape))

    def test_decode_is_adjoint(self):
        rng = np.random.default_rng(3)
        cfg = StageConfig(7, 7, 2, rf_size=3, stride=2, num_maps=3, pool_size=1, lcn_window=1)
        w = rng.normal(size=cfg.weight_shape)
        x = rng.normal(size=cfg.input_shape)
        s = rng.normal(size=cfg.simple_shape)
        lhs = np.vdot(lc_filter_forward(x, cfg, w), s)
        rhs = np.vdot(x, lc_decode(s, cfg, w))
        assert lhs == pytest.approx(rhs, rel=1e-12)
        np.testing.assert_allclose(lc_decode(s, cfg, w), decode_oracle(s, w, 3, 2, x.shape),
                                   atol=1e-12)


class TestPooling:
    def test_pythagorean(self):
        cfg = StageConfig(2, 2, 1, rf_size=1, stride=1, num_maps=1, pool_size=2, lcn_window=1)
        s = np.array([[3.0, 4.0], [0.0, 0.0]])[..., None]
        assert l2_pool_forward(s, cfg, np.ones((1, 1, 1, 2, 2)))[0, 0, 0] == 5.0

    def test_zero(self):
        cfg = StageConfig(6, 6, 1, rf_size=2, stride=1, num_maps=2, pool_size=3, lcn_window=1)
        out = l2_pool_forward(np.zeros(cfg.simple_shape), cfg, pooling_weights(cfg))
        assert np.all(out == 0)

    def test_matches_oracle_and_symmetries(self):
        rng = np.random.default_rng(4)
        cfg = StageConfig(9, 9, 1, rf_size=3, stride=1, num_maps=3, pool_size=3, lcn_window=1)
        s = rng.normal(size=cfg.simple_shape)
        h = rng.uniform(0, 1, size=pooling_weights(cfg).shape)
        out = l2_pool_forward(s, cfg, h)
        np.testing.assert_allclose(out, pool_oracle(s, h, 3), atol=1e-12)
        assert np.array_equal(out, l2_pool_forward(-s, cfg, h))
        np.testing.assert_allclose(l2_pool_forward(2.5 * s, cfg, h), 2.5 * out, rtol=1e-5)

    def test_pool_larger_than_layer(self):
        cfg = StageConfig(4, 4, 1, rf_size=2, stride=2, pool_size=2, lcn_window=1)
        with pytest.raises(GeometryError):
            l2_pool_forward(np.zeros(cfg.simple_shape), cfg, np.zeros((2, 2, 8, 2, 2)))


class TestLCN:
    def cfg(self, maps=2, window=3, size=6):
        return StageConfig(size, size, 1, rf_size=1, stride=1, num_maps=maps, pool_size=1,
                           lcn_window=window)

    @pytest.mark.parametrize("v", [0.0, 0.3, 1.0, 7.25, -2.0, 1e3])
    def test_constant_input_is_exactly_zero(self, v):
        cfg = self.cfg(maps=3, window=5, size=7)
        out = lcn_forward(np.full(cfg.output_shape, v), cfg, gaussian_window(cfg))
        assert np.all(out == 0.0)

    def test_small_energy_divides_by_floor(self):
        cfg = self.cfg()
        x = np.random.default_rng(5).normal(scale=1e-4, size=cfg.output_shape)
        g = gaussian_window(cfg).astype(np.float64)
        out = lcn_forward(x, cfg, g)
        # a floor of 1 far exceeds the local energy, so the oracle returns the centred input
        centred = lcn_oracle(x, g, c=1.0)
        np.testing.assert_allclose(out, centred / 0.01, rtol=1e-10)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(6)
        cfg = self.cfg(maps=2, window=3, size=5)
        x = rng.normal(size=cfg.output_shape)
        g = gaussian_window(cfg).astype(np.float64)
        np.testing.assert_allclose(lcn_forward(x, cfg, g), lcn_oracle(x, g, 0.01), atol=1e-12)

    def test_zero_maps_to_zero(self):
        cfg = self.cfg()
        assert np.all(lcn_forward(np.zeros(cfg.output_shape), cfg, gaussian_window(cfg)) == 0)


def test_stage_forward_composes_oracles():
    rng = np.random.default_rng(7)
    cfg = StageConfig(9, 9, 2, rf_size=3, stride=2, num_maps=2, pool_size=2, lcn_window=3)
    p = random_params(cfg, rng)
    x = rng.normal(size=cfg.input_shape)
    for got, want in zip(stage_forward(x, cfg, p), stage_oracle(x, cfg, p)):
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_stage_forward_is_sequential_composition():
    rng = np.random.default_rng(8)
    cfg = StageConfig(9, 9, 2, rf_size=3, stride=2, num_maps=2, pool_size=2, lcn_window=3)
    p = random_params(cfg, rng)
    x = rng.normal(size=cfg.input_shape)
    s, pooled, y = stage_forward(x, cfg, p)
    assert np.array_equal(s, lc_filter_forward(x, cfg, p.w1_encode))
    assert np.array_equal(pooled, l2_pool_forward(s, cfg, p.h_pool))
    np.testing.assert_allclose(y, lcn_forward(pooled, cfg, p.g_window), atol=1e-12)


def as_float64(net, **replace):
    stages = []
    for n, p in enumerate(net.stages, start=1):
        stages.append(StageParams(np.array(replace.get(f"s{n}.w1", p.w1_encode), dtype=np.float64),
                                  np.array(replace.get(f"s{n}.w2", p.w2_decode), dtype=np.float64),
                                  p.h_pool.astype(np.float64), p.g_window.astype(np.float64)))
    return NetworkParams(net.config, stages, seed=net.seed)


def three_stage_config():
    return NetworkConfig.chain(20, 20, 1, [
        dict(rf_size=4, stride=2, num_maps=2, pool_size=2, lcn_window=3),
        dict(rf_size=4, stride=2, num_maps=2, pool_size=2, lcn_window=3),
        dict(rf_size=2, stride=1, num_maps=2, pool_size=1, lcn_window=1),
    ])


def test_network_forward_zero_and_shapes():
    net = init_network(three_stage_config(), 0)
    bundles = network_forward(np.zeros(net.config.input_shape, dtype=np.float32), net)
    assert len(bundles) == 3
    for cfg, bundle in zip(net.config.stages, bundles):
        assert [b.shape for b in bundle] == [cfg.simple_shape, cfg.output_shape, cfg.output_shape]
        assert all(np.all(b == 0) for b in bundle)
        assert all(b.dtype == np.float32 for b in bundle)


def test_network_forward_matches_single_stage_oracle_chain():
    net = init_network(three_stage_config(), 1)
    x = np.random.default_rng(9).uniform(size=net.config.input_shape)
    bundles = network_forward(x, net)
    h = x
    for cfg, p, bundle in zip(net.config.stages, net.stages, bundles):
        want = stage_oracle(h, cfg, p)
        np.testing.assert_allclose(bundle[2], want[2], atol=1e-9)
        h = bundle[2]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_network_shapes_property(seed):
    rng = np.random.default_rng(seed)
    first = random_stage_config(rng, max_input=10)
    second = random_stage_config(rng, max_input=first.pool_height, input_maps=first.num_maps)
    if (second.input_height, second.input_width) != (first.pool_height, first.pool_width):
        second = None
    stages = [first] if second is None else [first, second]
    net = init_network(NetworkConfig(tuple(stages)), seed)
    x = rng.normal(size=first.input_shape)
    bundles = network_forward(x, net)
    for cfg, (s, p, y) in zip(stages, bundles):
        assert s.shape == ((cfg.input_height - cfg.rf_size) // cfg.stride + 1,
                           (cfg.input_width - cfg.rf_size) // cfg.stride + 1, cfg.num_maps)
        assert p.shape == y.shape == (s.shape[0] - cfg.pool_size + 1,
                                      s.shape[1] - cfg.pool_size + 1, cfg.num_maps)
        assert np.all(np.isfinite(y))


# ---------------------------------------------------------------------------
# objective and gradients


class TestObjective:
    def test_scalar_sparsity_only(self):
        cfg, p = scalar_stage(eps=0.0)
        assert rica_stage_objective([np.ones((1, 1, 1))], cfg, p) == pytest.approx(0.1, abs=1e-15)

    def test_scalar_hand_value(self):
        cfg, p = scalar_stage(w2=0.0, eps=0.0)
        assert rica_stage_objective([np.ones((1, 1, 1))], cfg, p) == pytest.approx(1.1, abs=1e-15)

    def test_scalar_hand_gradient(self):
        cfg, p = scalar_stage(w2=0.0, eps=1e-12)
        _, g2 = rica_stage_gradient([np.ones((1, 1, 1))], cfg, p)
        assert g2.ravel()[0] == pytest.approx(-2.0)

    def test_zero_batch(self):
        cfg = StageConfig(8, 8, 2, rf_size=4, stride=2, num_maps=3, pool_size=2, lcn_window=3)
        p = random_params(cfg, np.random.default_rng(10))
        m = 4
        val = rica_stage_objective(np.zeros((m,) + cfg.input_shape), cfg, p)
        k = cfg.n_pooling_units
        assert val == pytest.approx(m * k * cfg.sparsity_lambda * np.sqrt(cfg.sparsity_epsilon))
        g1, g2 = rica_stage_gradient(np.zeros((m,) + cfg.input_shape), cfg, p)
        assert np.all(g1 == 0) and np.all(g2 == 0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        cfg = StageConfig(7, 7, 2, rf_size=3, stride=2, num_maps=2, pool_size=2, lcn_window=1)
        p = random_params(cfg, rng)
        batch = rng.normal(size=(3,) + cfg.input_shape)
        assert rica_stage_objective(batch, cfg, p) == pytest.approx(rica_oracle(batch, cfg, p),
                                                                    rel=1e-12)

    def test_empty_batch(self):
        cfg, p = scalar_stage()
        with pytest.raises(ValueError):
            rica_stage_objective([], cfg, p)

    def test_zero_epsilon_gradient_rejected(self):
        cfg, p = scalar_stage(eps=0.0)
        with pytest.raises(ConfigError):
            rica_stage_gradient([np.ones((1, 1, 1))], cfg, p)

    def test_nonnegative(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            cfg = random_stage_config(rng)
            p = random_params(cfg, rng)
            assert rica_stage_objective(rng.normal(size=(2,) + cfg.input_shape), cfg, p) >= 0


@pytest.mark.parametrize("seed", range(5))
def test_stage_gradient_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = random_stage_config(rng, max_input=8)
    p = random_params(cfg, rng)
    batch = rng.normal(size=(2,) + cfg.input_shape)
    g1, g2 = rica_stage_gradient(batch, cfg, p)

    def f_w1(w):
        return rica_stage_objective(batch, cfg, StageParams(w, p.w2_decode, p.h_pool, p.g_window))

    def f_w2(w):
        return rica_stage_objective(batch, cfg, StageParams(p.w1_encode, w, p.h_pool, p.g_window))

    assert rel_error(g1, central_difference(f_w1, p.w1_encode)) < 1e-4
    assert rel_error(g2, central_difference(f_w2, p.w2_decode)) < 1e-4


def test_joint_objective_is_sum_of_independent_scalar_stages():
    stages, params = [], []
    for lam, (w1, w2) in zip((0.1, 0.2, 0.3), ((1.0, 0.0), (2.0, 0.5), (0.5, 1.0))):
        cfg, p = scalar_stage(w1, w2, eps=0.0, lam=lam)
        stages.append(cfg)
        params.append(p)
    net = NetworkParams(NetworkConfig(tuple(stages)), params)
    # a 1x1 single-map LCN centres its lone input to exactly zero
    x = np.full((1, 1, 1), 1.0)
    want = (0.0 - 1.0) ** 2 + 0.1 * 1.0  # stage 1
    want += 0.0 + 0.0  # stages 2-3 see zero input and have eps = 0
    assert joint_objective([x], net) == pytest.approx(want)


def test_joint_gradient_is_greedy_local():
    net = as_float64(init_network(three_stage_config(), 5))
    batch = np.random.default_rng(13).uniform(size=(2,) + net.config.input_shape)
    total, grads = joint_objective_and_gradient(batch, net)
    x = batch
    parts = 0.0
    for n, (cfg, p) in enumerate(zip(net.config.stages, net.stages)):
        parts += rica_stage_objective(x, cfg, p)
        g1, g2 = rica_stage_gradient(x, cfg, p)
        np.testing.assert_allclose(grads[n][0], g1, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(grads[n][1], g2, rtol=1e-12, atol=1e-12)
        x = stage_forward(x, cfg, p)[2]
    assert total == pytest.approx(parts, rel=1e-12)


def test_joint_gradient_finite_differences_top_stage():
    # with inputs fixed, the top stage's W1 gradient is the true gradient of the sum
    net = as_float64(init_network(three_stage_config(), 6))
    batch = np.random.default_rng(14).uniform(size=(1,) + net.config.input_shape)
    _, grads = joint_objective_and_gradient(batch, net)

    def f(w):
        return joint_objective(batch, as_float64(net, **{"s3.w1": w}))

    fd = central_difference(f, net.stages[2].w1_encode)
    assert rel_error(grads[2][0], fd) < 1e-4
