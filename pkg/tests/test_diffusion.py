import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexcotrain.diffusion import (
    MLPDenoiser,
    PointMassDenoiser,
    TrainConfig,
    adamw_update,
    add_noise,
    diffusion_loss,
    init_train_state,
    load_checkpoint,
    loss_and_grad,
    lr_at,
    make_schedule,
    sample_chunk,
    sample_timesteps,
    save_checkpoint,
    train_step,
)
from dexcotrain.errors import NonFiniteLoss, ShapeMismatch


def oracle_cosine_alpha_bar(T, s=0.008):
    f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
    out, p = [], 1.0
    for t in range(1, T + 1):
        p *= 1 - min(1 - f(t) / f(t - 1), 0.999)
        out.append(p)
    return out


def toy_net(seed=0, dtype=np.float64):
    # chunk 2x2, timestep embedding 4, condition 3, width 3: 64 parameters
    return MLPDenoiser(x_dim=4, cond_dim=3, width=3, temb_dim=4, chunk_shape=(2, 2), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

def test_cosine_schedule_regression():
    s = make_schedule(100)
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    assert ab[0] > 0.99 and ab[-1] < 0.05
    # frozen from the closed-form oracle above
    assert ab[0] == pytest.approx(0.9993687184016583, rel=1e-12)
    assert ab[49] == pytest.approx(0.49384359044063775, rel=1e-12)
    assert ab[99] == pytest.approx(2.4285722793500615e-07, rel=1e-9)
    np.testing.assert_allclose(ab, oracle_cosine_alpha_bar(100), rtol=1e-12)
    assert s.eval_steps == 16 and s.T == 100


def test_small_and_linear_schedules():
    s2 = make_schedule(2)
    np.testing.assert_allclose(s2.alpha_bars, [0.49384359044063775, 0.0004938435904406382], rtol=1e-12)
    lin = make_schedule(100, "linear")
    assert np.all(np.diff(lin.alpha_bars) < 0) and lin.alpha_bars[0] > 0.99 and lin.alpha_bars[-1] < 0.05
    assert lin.alpha_bars[49] == pytest.approx(0.07419699671742, rel=1e-12)
    np.testing.assert_allclose(make_schedule(2, "linear").alpha_bars, [0.95, 0.00095], rtol=1e-12)
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, "sigmoid")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 1000), st.sampled_from(["cosine", "linear"]))
def test_schedule_invariants(T, kind):
    s = make_schedule(T, kind)
    ab = s.alpha_bars
    assert len(ab) == T and np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert ab[-1] < 0.05
    np.testing.assert_allclose(ab, np.cumprod(1 - s.betas), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**31 - 1))
def test_add_noise_preserves_second_moment_mix(t, seed):
    # a_t is a unit-norm combination of a0 and eps: |a_t|^2 = ab|a0|^2 + (1-ab)|eps|^2 + cross term
    s = make_schedule(100)
    rng = np.random.default_rng(seed)
    a0, eps = rng.normal(size=6), rng.normal(size=6)
    ab = s.alpha_bars[t - 1]
    at = add_noise(a0, t, eps, s)
    expect = ab * a0 @ a0 + (1 - ab) * eps @ eps + 2 * math.sqrt(ab * (1 - ab)) * a0 @ eps
    assert at @ at == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_add_noise_examples():
    s = make_schedule(100)
    rng = np.random.default_rng(0)
    a0 = rng.uniform(-1, 1, size=(5, 4, 3))
    np.testing.assert_array_equal(add_noise(a0, 7, np.zeros_like(a0), s), math.sqrt(s.alpha_bars[6]) * a0)
    eps = rng.normal(size=a0.shape)
    assert np.max(np.abs(add_noise(a0, 1, eps, s) - a0)) < 0.15
    t = np.array([1, 50, 100, 3, 9])
    out = add_noise(a0, t, eps, s)
    for k in range(5):
        ab = s.alpha_bars[t[k] - 1]
        np.testing.assert_allclose(out[k], math.sqrt(ab) * a0[k] + math.sqrt(1 - ab) * eps[k], atol=1e-15)
    with pytest.raises(ShapeMismatch):
        add_noise(a0, 3, eps[:, :2], s)
    with pytest.raises(ValueError):
        add_noise(a0, 0, eps, s)
    with pytest.raises(ValueError):
        add_noise(a0, 101, eps, s)


def test_forward_marginal_at_T_is_unit_gaussian():
    s = make_schedule(100)
    eps = np.random.default_rng(1).normal(size=(10_000, 8))
    x = add_noise(np.zeros_like(eps), 100, eps, s)
    var, mean = x.var(axis=0), x.mean(axis=0)
    assert np.all((var >= 0.9) & (var <= 1.1))
    assert np.all(np.abs(mean) <= 0.05)


# ---------------------------------------------------------------------------
# denoiser, loss and gradients
# ---------------------------------------------------------------------------

def test_toy_net_has_64_parameters():
    net = toy_net()
    assert net.n_params == 64 and net.params.shape == (64,)


def test_gradient_matches_finite_differences():
    s = make_schedule(100)
    for seed in range(3):
        net = toy_net(seed)
        rng = np.random.default_rng(10 + seed)
        x0 = rng.uniform(-1, 1, size=(5, 2, 2))
        cond = rng.normal(size=(5, 3))
        t = rng.integers(1, 101, size=5)
        eps = rng.normal(size=x0.shape)
        p = net.params.copy()
        _, grad = diffusion_loss(net, p, x0, cond, t, eps, s)
        h = 1e-5
        for k in range(net.n_params):
            e = np.zeros_like(p)
            e[k] = h
            fd = (diffusion_loss(net, p + e, x0, cond, t, eps, s)[0] - diffusion_loss(net, p - e, x0, cond, t, eps, s)[0]) / (2 * h)
            rel = abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-8)
            assert rel < 1e-4, (seed, k, fd, grad[k])


def test_skip_gate_starts_as_plain_network():
    plain, gated = toy_net(3), MLPDenoiser(4, 3, 3, 4, (2, 2), seed=3, dtype=np.float64, skip=True)
    assert gated.n_params == 64 + (4 + 1) * 4
    np.testing.assert_array_equal(gated.params[:64], plain.params)
    rng = np.random.default_rng(0)
    x, cond, t = rng.normal(size=(6, 2, 2)), rng.normal(size=(6, 3)), rng.integers(1, 101, size=6)
    np.testing.assert_array_equal(gated.predict(x, t, cond), plain.predict(x, t, cond))


def test_skip_gradient_matches_finite_differences():
    s = make_schedule(100)
    for seed in range(3):
        net = MLPDenoiser(4, 3, 3, 4, (2, 2), seed=seed, dtype=np.float64, skip=True)
        rng = np.random.default_rng(20 + seed)
        p = net.params.copy()
        p[64:] = rng.normal(size=net.n_params - 64)  # non-zero gate so every path carries gradient
        x0 = rng.uniform(-1, 1, size=(5, 2, 2))
        cond = rng.normal(size=(5, 3))
        t = rng.integers(1, 101, size=5)
        eps = rng.normal(size=x0.shape)
        _, grad = diffusion_loss(net, p, x0, cond, t, eps, s)
        h = 1e-5
        for k in range(net.n_params):
            e = np.zeros_like(p)
            e[k] = h
            fd = (diffusion_loss(net, p + e, x0, cond, t, eps, s)[0] - diffusion_loss(net, p - e, x0, cond, t, eps, s)[0]) / (2 * h)
            rel = abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-8)
            assert rel < 1e-4, (seed, k, fd, grad[k])


def test_checkpoint_keeps_skip_flag(tmp_path):
    s = make_schedule(10)
    net = MLPDenoiser(4, 3, 3, 4, (2, 2), seed=0, skip=True)
    state = init_train_state(net.params + 0.5, 0)
    save_checkpoint(tmp_path / "ck", net, state, s, TrainConfig())
    net2, state2, *_ = load_checkpoint(tmp_path / "ck")
    assert net2.skip and net2.n_params == net.n_params
    assert state2.params.tobytes() == state.params.tobytes()


def test_loss_is_mean_over_batch_of_squared_norm():
    s = make_schedule(100)
    net = toy_net(1)
    rng = np.random.default_rng(2)
    x0, cond = rng.uniform(-1, 1, size=(4, 2, 2)), rng.normal(size=(4, 3))
    t, eps = np.array([1, 20, 60, 100]), rng.normal(size=(4, 2, 2))
    loss, _ = diffusion_loss(net, net.params, x0, cond, t, eps, s)
    pred = net.predict(add_noise(x0, t, eps, s), t, cond)
    assert loss == pytest.approx(np.mean(np.sum((eps - pred) ** 2, axis=(1, 2))), rel=1e-12)


def test_oracle_denoiser_has_zero_loss():
    s = make_schedule(100)
    a_star = np.array([[0.3, -0.2], [0.1, 0.5]])
    oracle = PointMassDenoiser(a_star, s)
    x0 = np.broadcast_to(a_star, (16, 2, 2)).copy()
    loss, grad = loss_and_grad(oracle, x0, np.zeros((16, 1)), s, np.random.default_rng(0))
    assert loss < 1e-20
    assert grad.size == 0 or np.all(grad == 0)


def test_loss_reproducible_and_non_finite():
    s = make_schedule(100)
    net = toy_net(2)
    rng = np.random.default_rng(3)
    x0, cond = rng.uniform(-1, 1, size=(8, 2, 2)), rng.normal(size=(8, 3))
    a = loss_and_grad(net, x0, cond, s, np.random.default_rng(5))
    b = loss_and_grad(net, x0, cond, s, np.random.default_rng(5))
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()
    bad = net.params.copy()
    bad[0] = np.nan
    with pytest.raises(NonFiniteLoss):
        loss_and_grad(net, x0, cond, s, np.random.default_rng(5), params=bad)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1000, cfg) == pytest.approx(1.5e-4)
    assert lr_at(2000, cfg) == pytest.approx(3e-4)
    assert lr_at(cfg.total_steps, cfg) == pytest.approx(0.0, abs=1e-12)
    mid = (2000 + cfg.total_steps) // 2
    assert lr_at(mid, cfg) == pytest.approx(1.5e-4)
    assert all(lr_at(k, cfg) >= lr_at(k + 1, cfg) for k in range(2000, cfg.total_steps))


def test_adamw_step_decreases_quadratic():
    c = np.array([0.5, -1.0, 2.0])
    f = lambda p: float(np.sum((p - c) ** 2))  # noqa: E731
    cfg = TrainConfig(base_lr=0.05, warmup_steps=0, total_steps=100)
    state = init_train_state(np.zeros(3), seed=0)
    before = f(state.params)
    state = adamw_update(state, 2 * (state.params - c), cfg)
    assert f(state.params) < before
    assert state.step == 1
    # first Adam step moves every coordinate by ~lr toward c
    np.testing.assert_allclose(state.params, 0.05 * np.sign(c), rtol=1e-6)


def test_adamw_matches_reference_formula():
    cfg = TrainConfig(base_lr=0.01, warmup_steps=0, total_steps=10, weight_decay=0.1)
    p0 = np.array([1.0, -2.0])
    g1, g2 = np.array([0.3, -0.1]), np.array([0.2, 0.4])
    state = adamw_update(adamw_update(init_train_state(p0, 0), g1, cfg), g2, cfg)
    p, m, v = p0.copy(), np.zeros(2), np.zeros(2)
    for k, g in enumerate([g1, g2], start=1):
        lr = 0.01 * 0.5 * (1 + math.cos(math.pi * (k - 1) / 10))
        p = p * (1 - lr * 0.1)
        m = 0.95 * m + 0.05 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - lr * (m / (1 - 0.95**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(state.params, p, rtol=1e-12)


def _toy_batch(rng, b=32):
    cond = rng.uniform(-1, 1, size=(b, 3))
    x0 = np.tanh(cond[:, :2, None] * np.array([1.0, -0.5])[None, None, :])
    return x0, cond


def test_train_step_deterministic():
    s = make_schedule(100)
    cfg = TrainConfig(base_lr=1e-2, warmup_steps=5, total_steps=40)
    runs = []
    for _ in range(2):
        net = toy_net(0, np.float32)
        state = init_train_state(net.params, seed=3)
        rng = np.random.default_rng(0)
        traj = []
        for _ in range(20):
            state, loss = train_step(state, net, *_toy_batch(rng), s, cfg)
            traj.append(state.params.tobytes())
        runs.append(traj)
    assert runs[0] == runs[1]


def test_training_reduces_loss_on_toy():
    s = make_schedule(100)
    cfg = TrainConfig(base_lr=3e-3, warmup_steps=50, total_steps=1500)
    net = MLPDenoiser(x_dim=4, cond_dim=3, width=64, temb_dim=16, chunk_shape=(2, 2), seed=0)
    state = init_train_state(net.params, seed=0)
    rng = np.random.default_rng(1)
    x0, cond = _toy_batch(np.random.default_rng(99), 256)
    first = loss_and_grad(net, x0, cond, s, np.random.default_rng(7), params=state.params)[0]
    for _ in range(cfg.total_steps):
        idx = rng.integers(0, 256, size=64)
        state, _ = train_step(state, net, x0[idx], cond[idx], s, cfg)
    last = loss_and_grad(net, x0, cond, s, np.random.default_rng(7), params=state.params)[0]
    assert last < 0.5 * first


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sample_timesteps():
    ts = sample_timesteps(100, 16)
    assert ts[0] == 1 and ts[-1] == 100 and len(ts) == 16
    assert np.all(np.diff(ts) > 0)
    np.testing.assert_array_equal(sample_timesteps(100, 100), np.arange(1, 101))
    with pytest.raises(ValueError):
        sample_timesteps(100, 101)


def test_sampling_point_mass_oracle():
    s = make_schedule(100)
    a_star = np.array([[0.3, -0.7], [0.9, 0.0], [-0.25, 0.6]])
    oracle = PointMassDenoiser(a_star, s)
    for seed in range(5):
        out = sample_chunk(oracle, np.zeros(1), s, steps=16, seed=seed)
        assert out.shape == (3, 2)
        assert np.max(np.abs(out - a_star)) < 1e-3


def reference_ddim(net, cond, s, seed, shape):
    """Plain per-step loop over every timestep T..1, clean estimate clamped to +-1.1."""
    x = np.random.default_rng(seed).standard_normal((1, int(np.prod(shape))))
    for t in range(s.T, 0, -1):
        ab = s.alpha_bars[t - 1]
        ab_prev = s.alpha_bars[t - 2] if t > 1 else 1.0
        e = net.predict(x.reshape((1,) + shape), np.array([t]), cond[None]).reshape(1, -1)
        x0 = np.clip((x - math.sqrt(1 - ab) * e) / math.sqrt(ab), -1.1, 1.1)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * e
    return np.clip(x.reshape(shape), -1.1, 1.1)


def test_full_step_sampling_matches_reference_loop():
    s = make_schedule(100)
    net = toy_net(4)
    cond = np.array([0.2, -0.4, 0.9])
    out = sample_chunk(net, cond, s, steps=100, seed=3)
    np.testing.assert_allclose(out, reference_ddim(net, cond, s, 3, (2, 2)), atol=1e-6)
    oracle = PointMassDenoiser(np.full((2, 2), 0.4), s)
    np.testing.assert_allclose(sample_chunk(oracle, cond, s, steps=100, seed=1),
                               sample_chunk(oracle, cond, s, steps=16, seed=1), atol=1e-6)


def test_sampling_deterministic_and_clamped():
    s = make_schedule(100)
    net = toy_net(5)
    cond = np.random.default_rng(0).normal(size=(7, 3))
    a = sample_chunk(net, cond, s, seed=11)
    b = sample_chunk(net, cond, s, seed=11)
    assert a.shape == (7, 2, 2) and a.tobytes() == b.tobytes()
    big = PointMassDenoiser(np.full((2, 2), 3.0), s)
    np.testing.assert_array_equal(sample_chunk(big, np.zeros(1), s, seed=0), 1.1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_resume_is_bitwise(tmp_path):
    s = make_schedule(100)
    cfg = TrainConfig(base_lr=1e-2, warmup_steps=3, total_steps=30)

    def run(state, net, steps, start):
        for k in range(start, start + steps):
            x0, cond = _toy_batch(np.random.default_rng(k))
            state, _ = train_step(state, net, x0, cond, s, cfg)
        return state

    net = toy_net(0, np.float32)
    straight = run(init_train_state(net.params, 1), net, 20, 0)

    half = run(init_train_state(net.params, 1), net, 10, 0)
    save_checkpoint(tmp_path / "ck", net, half, s, cfg, extra={"note": "x"})
    net2, state2, s2, cfg2, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"note": "x"} and cfg2 == cfg and s2.kind == "cosine" and state2.step == 10
    np.testing.assert_array_equal(s2.alpha_bars, s.alpha_bars)
    resumed = run(state2, net2, 10, 10)
    assert resumed.params.tobytes() == straight.params.tobytes()
    assert resumed.m.tobytes() == straight.m.tobytes() and resumed.v.tobytes() == straight.v.tobytes()
