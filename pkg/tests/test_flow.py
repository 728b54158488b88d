import numpy as np
import pytest
from hypothesis import given, strategies as st

from occ4d import backbone as B
from occ4d import flow as Fl
from occ4d import tensor as T
from occ4d.diagnostics import randomize_params
from occ4d.errors import HorizonOutOfRange, NumericalFailure, ShapeMismatch
from occ4d.text import stub_encode


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# ---------------------------------------------------------------- path / replacement / loss

def test_make_path_endpoints(rng):
    x0, x1 = rand(rng, 2, 3, 4, 2, 2), rand(rng, 2, 3, 4, 2, 2)
    np.testing.assert_array_equal(Fl.make_path(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(Fl.make_path(x0, x1, 1.0), x1)
    np.testing.assert_allclose(Fl.make_path(x0, x1, 0.5), (x0 + x1) / 2, atol=1e-7)
    with pytest.raises(ShapeMismatch):
        Fl.make_path(x0, x1[:1], 0.5)


def test_make_path_per_row_times(rng):
    x0, x1 = rand(rng, 3, 1, 2, 2, 2), rand(rng, 3, 1, 2, 2, 2)
    t = np.array([0.0, 0.5, 1.0])
    out = Fl.make_path(x0, x1, t)
    np.testing.assert_array_equal(out[0], x0[0])
    np.testing.assert_array_equal(out[2], x1[2])


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(0, 1))
def test_make_path_is_affine(seed, a, t):
    rng = np.random.default_rng(seed)
    x0, x1 = rand(rng, 2, 3, 2, 2), rand(rng, 2, 3, 2, 2)
    np.testing.assert_allclose(Fl.make_path(a * x0, a * x1, t), a * Fl.make_path(x0, x1, t), atol=1e-5)


def test_replace_history_cases(rng):
    xt, x0 = rand(rng, 2, 3, 2, 2), rand(rng, 2, 3, 2, 2)
    np.testing.assert_array_equal(Fl.replace_history(xt, x0, 0), xt)
    np.testing.assert_array_equal(Fl.replace_history(xt, x0, 3), x0)
    out = Fl.replace_history(xt, x0, 1)
    np.testing.assert_array_equal(out[:, 0], x0[:, 0])
    np.testing.assert_array_equal(out[:, 1:], xt[:, 1:])
    before = xt.copy()
    Fl.replace_history(xt, x0, 2)
    np.testing.assert_array_equal(xt, before)
    with pytest.raises(HorizonOutOfRange):
        Fl.replace_history(xt, x0, 4)


def test_replace_history_per_row_and_prefix(rng):
    xt, x0 = rand(rng, 2, 1, 4, 2, 2), rand(rng, 2, 1, 4, 2, 2)
    out = Fl.replace_history(xt, x0, np.array([1, 3]))
    np.testing.assert_array_equal(out[0, :, :1], x0[0, :, :1])
    np.testing.assert_array_equal(out[0, :, 1:], xt[0, :, 1:])
    np.testing.assert_array_equal(out[1, :, :3], x0[1, :, :3])
    prefix = x0[:, :, :2]
    np.testing.assert_array_equal(Fl.replace_history(xt, prefix, 2), Fl.replace_history(xt, x0, 2))
    with pytest.raises(HorizonOutOfRange):
        Fl.replace_history(xt, prefix, 3)


def test_anchored_loss_hand_value():
    x0 = np.zeros((1, 2, 1, 1), np.float32)
    x1 = np.array([1, 3], np.float32).reshape(1, 2, 1, 1)
    v = np.array([9, 2], np.float32).reshape(1, 2, 1, 1)
    assert float(Fl.anchored_loss(v, x0, x1, 1).data) == pytest.approx(1.0)
    assert float(Fl.anchored_loss(x1 - x0, x0, x1, 0).data) == 0.0
    assert float(Fl.anchored_loss(v, x0, x1, 2).data) == 0.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_anchored_loss_ignores_history_frames(seed, h):
    rng = np.random.default_rng(seed)
    x0, x1, v = rand(rng, 2, 5, 2, 2), rand(rng, 2, 5, 2, 2), rand(rng, 2, 5, 2, 2)
    v2 = v.copy()
    v2[:, :h] += 100 * rand(rng, 2, h, 2, 2)
    a = float(Fl.anchored_loss(v, x0, x1, h).data)
    assert a == float(Fl.anchored_loss(v2, x0, x1, h).data)


def test_anchored_loss_is_differentiable(rng):
    x0, x1 = rand(rng, 1, 2, 3, 2, 2), rand(rng, 1, 2, 3, 2, 2)
    f = lambda v: Fl.anchored_loss(v, x0, x1, np.array([1]))
    assert T.grad_check(f, rand(rng, 1, 2, 3, 2, 2)) < 1e-4


# ---------------------------------------------------------------- guidance

def test_cfg_velocity_cases(rng):
    vc, vu = rand(rng, 3, 4), rand(rng, 3, 4)
    np.testing.assert_array_equal(Fl.cfg_velocity(vc, vu, 1), vc)
    np.testing.assert_array_equal(Fl.cfg_velocity(vc, vu, 0), vu)
    assert Fl.cfg_velocity(np.ones(1), np.zeros(1), 7.5)[0] == 7.5
    np.testing.assert_allclose(Fl.cfg_velocity(vc, vu, 3.0), vu + 3.0 * (vc - vu), atol=1e-5)


@given(st.integers(0, 2**32 - 1), st.floats(0, 20))
def test_cfg_of_equal_branches_is_identity(seed, s):
    v = np.random.default_rng(seed).standard_normal(6).astype(np.float32)
    np.testing.assert_allclose(Fl.cfg_velocity(v, v, s), v, rtol=1e-5, atol=1e-5)


# ---------------------------------------------------------------- sampler

def test_one_step_with_constant_oracle_field_recovers_x0(rng):
    shape = (2, 3, 4, 2, 2)
    x0 = rand(rng, *shape)
    x1 = np.random.default_rng(7).standard_normal(shape).astype(np.float32)
    field = lambda x, t: x1 - x0
    out = Fl.euler_sample(field, field, shape, Fl.SamplerConfig(steps=1, cfg_scale=1.0),
                          np.random.default_rng(7))
    np.testing.assert_array_equal(out, x1 - np.float32(1.0) * (x1 - x0))
    np.testing.assert_allclose(out, x0, atol=1e-6)


@pytest.mark.parametrize("steps", [1, 2, 5, 20])
def test_linear_oracle_field_exact_for_any_step_count(steps):
    # the true field along straight paths: v(x, t) = (x - x0) / t
    shape = (1, 2, 3, 2, 2)
    x0 = np.random.default_rng(1).standard_normal(shape)
    field = lambda x, t: ((x - x0) / t).astype(np.float32)
    out = Fl.euler_sample(field, field, shape, Fl.SamplerConfig(steps=steps, cfg_scale=1.0),
                          np.random.default_rng(2))
    np.testing.assert_allclose(out, x0, atol=1e-5)


def _hand_rolled(v, shape, steps, seed, history, h):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    for k in range(steps):
        t = np.float32(1.0 - k / steps)
        x[:, :, :h] = history[:, :, :h]
        x = (x - np.float32(1.0 / steps) * v(x, t)).astype(np.float32)
        x[:, :, :h] = history[:, :, :h]
    return x


@pytest.mark.parametrize("h", [0, 2])
def test_sampler_matches_hand_rolled_loop(h):
    w = np.random.default_rng(3).standard_normal((2, 2)).astype(np.float32) * 0.3
    toy = lambda x, t: (np.einsum("ij,bjfhw->bifhw", w, x) * t + np.sin(x)).astype(np.float32)
    shape = (2, 2, 4, 3, 3)
    hist = np.random.default_rng(4).standard_normal(shape).astype(np.float32)
    got = Fl.euler_sample(toy, None, shape, Fl.SamplerConfig(steps=7, cfg_scale=1.0),
                          np.random.default_rng(11), history=hist if h else None, h=h)
    want = _hand_rolled(toy, shape, 7, 11, hist, h)
    np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("h", [1, 2, 3])
def test_history_frames_never_change(h, rng):
    shape = (1, 2, 4, 2, 2)
    hist = rand(rng, 1, 2, h, 2, 2)
    field = lambda x, t: np.full_like(x, 5.0)
    seen = []

    def audit(k, x):
        seen.append(np.array_equal(x[:, :, :h], hist))

    out = Fl.euler_sample(field, lambda x, t: -field(x, t), shape, Fl.SamplerConfig(steps=5), rng,
                          history=hist, h=h, on_step=audit)
    assert all(seen) and len(seen) == 5
    assert out[:, :, :h].tobytes() == hist.tobytes()


def test_full_history_returns_it(rng):
    hist = rand(rng, 1, 2, 3, 2, 2)
    out = Fl.euler_sample(None, None, hist.shape, Fl.SamplerConfig(), rng, history=hist, h=3)
    np.testing.assert_array_equal(out, hist)


def test_sampler_horizon_errors(rng):
    with pytest.raises(HorizonOutOfRange):
        Fl.euler_sample(None, None, (1, 1, 3, 2, 2), Fl.SamplerConfig(), rng, h=4)
    with pytest.raises(HorizonOutOfRange):
        Fl.euler_sample(None, None, (1, 1, 3, 2, 2), Fl.SamplerConfig(), rng, h=1)


def test_model_sampler_is_reproducible_and_anchored():
    cfg = B.ModelConfig.desk(depth=1)
    params = randomize_params(B.init_params(cfg, 0), 0)
    feats = [stub_encode("a car", cfg.d_text)]
    hist = np.random.default_rng(0).standard_normal((4, 2, 8, 8)).astype(np.float32)
    scfg = Fl.SamplerConfig(steps=3, cfg_scale=2.0)
    a = Fl.sample(params, cfg, feats, 4, scfg, np.random.default_rng(9), history=hist, h=2)
    b = Fl.sample(params, cfg, feats, 4, scfg, np.random.default_rng(9), history=hist, h=2)
    assert a.tobytes() == b.tobytes()
    assert a[0, :, :2].tobytes() == hist.tobytes()


def test_sampler_config_validation():
    for bad in (dict(steps=0), dict(cfg_scale=-1), dict(p_anchor=1.5), dict(p_cfg=-0.1)):
        with pytest.raises(ValueError):
            Fl.SamplerConfig(**bad)
    assert Fl.SamplerConfig() == Fl.SamplerConfig(20, 7.5, 0.5, 0.15)


# ---------------------------------------------------------------- training dynamics

def test_flag_rates_monte_carlo():
    rng = np.random.default_rng(0)
    t, anchor, drop, h = Fl.sample_flags(rng, 10000, 8, Fl.SamplerConfig())
    assert abs(anchor.mean() - 0.5) < 0.02
    assert abs(drop.mean() - 0.15) < 0.02
    assert abs(np.corrcoef(anchor, drop)[0, 1]) < 0.05
    assert set(np.unique(h[anchor])) == set(range(1, 8))
    assert not np.any(h[~anchor])
    assert 0 <= t.min() and t.max() < 1


def test_flags_never_fire_at_zero_probability():
    t, anchor, drop, h = Fl.sample_flags(np.random.default_rng(0), 500, 8,
                                         Fl.SamplerConfig(p_anchor=0, p_cfg=0))
    assert not anchor.any() and not drop.any() and not h.any()


def _train(steps, seed=0):
    cfg = B.ModelConfig.desk(depth=1)
    params = B.init_params(cfg, 0)
    opt = Fl.AdamW(1e-3)
    data = np.random.default_rng(1).standard_normal((2, 4, 3, 8, 8)).astype(np.float32)
    feats = [stub_encode("a car", cfg.d_text), stub_encode("a bus", cfg.d_text)]
    rng = np.random.default_rng(seed)
    return [Fl.training_step(params, cfg, opt, data, feats, rng, Fl.SamplerConfig())[0]
            for _ in range(steps)], params


def test_training_is_deterministic():
    a, _ = _train(10)
    b, _ = _train(10)
    assert a == b


def test_first_step_loss_equals_zero_predictor(rng):
    cfg = B.ModelConfig.desk(depth=1)
    params = B.init_params(cfg, 0)
    data = rand(rng, 3, 4, 3, 8, 8)
    feats = [stub_encode("a car", cfg.d_text)] * 3
    loss, batch = Fl.training_step(params, cfg, Fl.AdamW(1e-3), data, feats,
                                   np.random.default_rng(5), Fl.SamplerConfig())
    target = batch.x1 - batch.x0
    mask = np.arange(3)[None, None, :, None, None] >= batch.h[:, None, None, None, None]
    mask = np.broadcast_to(mask, target.shape)
    assert loss == pytest.approx(float((target[mask].astype(np.float64) ** 2).mean()), rel=1e-5)


def test_adamw_first_step_moves_by_lr():
    p = {"w": T.Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)}
    p["w"].grad = np.array([0.5, -3.0], np.float32)
    opt = Fl.AdamW(lr=0.1, weight_decay=0.0)
    opt.step(p)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-6)
    state = opt.state_arrays()
    opt2 = Fl.AdamW(lr=0.1)
    opt2.load_state_arrays(state)
    assert opt2.step_count == 1
    np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])


def test_non_finite_loss_raises():
    cfg = B.ModelConfig.desk(depth=1)
    params = B.init_params(cfg, 0)
    data = np.full((1, 4, 2, 8, 8), np.inf, np.float32)
    with pytest.raises(NumericalFailure):
        with np.errstate(all="ignore"):
            Fl.training_step(params, cfg, Fl.AdamW(1e-3), data, [stub_encode("x", 32)],
                             np.random.default_rng(0), Fl.SamplerConfig())


# ---------------------------------------------------------------- cost model

def test_flops_closed_forms():
    r = Fl.flops_model(8, 196, 77, 896, 14)
    assert r["spatial_macs"] == 8 * 273 ** 2 * 896
    assert r["temporal_macs"] == 196 * 64 * 896
    r2 = Fl.flops_model(16, 196, 77, 896, 14)
    assert r2["spatial_macs"] == 2 * r["spatial_macs"]
    assert r2["temporal_macs"] == 4 * r["temporal_macs"]
    f1 = Fl.flops_model(8, 196, 77, 896, 14, "full")
    f2 = Fl.flops_model(16, 196, 77, 896, 14, "full")
    assert f1["attention_macs"] == (8 * 196 + 77) ** 2 * 896
    assert f2["attention_macs"] / f1["attention_macs"] > 3.5


def test_peak_is_text_invariant_when_temporal_maps_dominate():
    F, S = 64, 4
    peaks = {Fl.flops_model(F, S, L, 64, 4)["peak_activation"] for L in (1, 2, 4, 8)}
    assert all(F * S > (L + S) ** 2 for L in (1, 2, 4, 8))
    assert peaks == {4 * S * F ** 2}


def test_flops_rejects_bad_input():
    with pytest.raises(ValueError):
        Fl.flops_model(0, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        Fl.flops_model(1, 1, 1, 1, 1, "sparse")


def test_sample_record_json(tmp_path):
    import json
    path = tmp_path / "r.json"
    Fl.write_sample_record(path, seed=1, steps=2, cfg_scale=3.0, h=0, prompt="p",
                           checkpoint_path="c", output_path="o")
    assert json.loads(path.read_text()) == {"seed": 1, "steps": 2, "cfg_scale": 3.0, "h": 0, "prompt": "p",
                                            "checkpoint_path": "c", "output_path": "o"}
