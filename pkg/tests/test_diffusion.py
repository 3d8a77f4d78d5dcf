import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from i2icompress import numerics as nx
from i2icompress.denoiser import UNetConfig, build
from i2icompress.diffusion import (
    SamplerSpec,
    ddim_sample,
    ddim_sigma,
    expected_invocations,
    initial_noise,
    linear_beta_schedule,
    q_sample,
    training_loss,
)
from i2icompress.numerics import Tensor
from i2icompress.tschedule import TimestepSchedule, uniform_schedule
from oracles import alpha_bars

SCHED = linear_beta_schedule(1000)
SMALL = UNetConfig(image_size=8, in_channels=1, cond_channels=1, out_channels=1, base_channels=4,
                   channel_mults=(1, 2), time_embed_dim=8)


class OracleModel:
    """Returns the noise that maps the known clean image ``x0`` to the current ``x_t``."""

    def __init__(self, x0, schedule=SCHED):
        self.x0 = x0
        self.schedule = schedule
        s = x0.shape[-1]
        self.config = UNetConfig(image_size=s, in_channels=x0.shape[1], cond_channels=1, out_channels=x0.shape[1],
                                 channel_mults=(1,))
        self.params = {"w": Tensor(np.zeros(1), dtype=np.float64)}
        self.calls = []

    def __call__(self, x, cond, t, depth=None):
        x = x.data if isinstance(x, Tensor) else x
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        self.calls.append((x.shape[0], tuple(int(v) for v in t)))
        ab = self.schedule.alpha_bars[t].reshape(-1, 1, 1, 1)
        x0 = np.concatenate([self.x0] * (x.shape[0] // self.x0.shape[0]))
        return Tensor((x - np.sqrt(ab) * x0) / np.sqrt(1 - ab), dtype=np.float64)


def trained_like(seed=0):
    with nx.precision(64):
        m = build(SMALL, seed)
    rng = np.random.default_rng(seed)
    for p in m.params.values():
        p.data[...] += rng.normal(0, 0.05, p.shape)
    return m


# ------------------------------------------------------------------ schedule


def test_linear_schedule_endpoints_and_monotone():
    s = linear_beta_schedule(1000)
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02
    assert (np.diff(s.alpha_bars) < 0).all()
    assert s.alpha_bars[0] == pytest.approx(1 - 1e-4)


def test_final_alpha_bar_matches_cumulative_product_script():
    ref = alpha_bars(1000)
    np.testing.assert_allclose(SCHED.alpha_bars, ref, rtol=1e-12)
    assert SCHED.alpha_bars[-1] == pytest.approx(4.0e-5, rel=0.02)


def test_schedule_needs_two_steps():
    with pytest.raises(ValueError):
        linear_beta_schedule(1)


# ------------------------------------------------------------------ forward process


def test_q_sample_special_cases_and_inverse():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 1, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ab = SCHED.alpha_bars[300]
    np.testing.assert_allclose(q_sample(x0, 300, np.zeros_like(x0), SCHED), np.sqrt(ab) * x0, rtol=1e-6)
    np.testing.assert_allclose(q_sample(np.zeros_like(x0), 300, eps, SCHED), np.sqrt(1 - ab) * eps, rtol=1e-6)
    t = np.array([0, 500, 999])
    xt = q_sample(x0, t, eps, SCHED)
    ab_t = SCHED.alpha_bars[t].reshape(-1, 1, 1, 1)
    back = (xt - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
    assert np.abs(back[:2] - x0[:2]).max() < 1e-5
    with pytest.raises(ValueError):
        q_sample(x0, 1000, eps, SCHED)
    with pytest.raises(ValueError):
        q_sample(x0, 0, eps[:1], SCHED)


def test_loss_is_zero_for_oracle_model():
    with nx.precision(64):
        x0 = np.random.default_rng(1).uniform(-1, 1, (4, 1, 8, 8))
        loss = training_loss(OracleModel(x0), x0, np.zeros((4, 1, 8, 8)), SCHED, np.random.default_rng(0))
    assert loss.item() < 1e-20


def test_zero_model_loss_is_unit_noise_variance():
    x0 = np.zeros((1024, 1, 8, 8), dtype=np.float32)
    model = build(SMALL, 0)  # zero output conv
    loss = training_loss(model, x0, x0, SCHED, nx.stream(0, "noise"))
    assert abs(loss.item() - 1.0) < 0.05


def test_condition_dropout_rate():
    seen = []

    class Spy:
        def __call__(self, x, c, t):
            seen.append(np.abs(c).reshape(len(c), -1).max(axis=1) == 0)
            return Tensor(np.zeros_like(x))

    n = 4000
    training_loss(Spy(), np.zeros((n, 1, 2, 2)), np.ones((n, 1, 2, 2)), SCHED, np.random.default_rng(0), p_drop=0.1)
    assert abs(np.mean(seen[0]) - 0.1) < 0.02


# ------------------------------------------------------------------ sampler


def test_one_step_oracle_inversion():
    x0 = np.random.default_rng(2).uniform(-0.9, 0.9, (3, 1, 8, 8))
    model = OracleModel(x0)
    out = ddim_sample(model, np.zeros((3, 1, 8, 8)), SamplerSpec(TimestepSchedule((999,))), [0, 1, 2], SCHED)
    assert np.abs(out - x0).max() < 1e-4


@pytest.mark.parametrize("steps", [(0, 999), (10, 400, 999), tuple(range(0, 1000, 100))])
def test_multi_step_oracle_inversion(steps):
    x0 = np.random.default_rng(3).uniform(-0.9, 0.9, (2, 1, 8, 8))
    out = ddim_sample(OracleModel(x0), np.zeros((2, 1, 8, 8)), SamplerSpec(TimestepSchedule(steps)), [5, 6], SCHED)
    assert np.abs(out - x0).max() < 1e-4


@pytest.mark.parametrize("eta", [0.0, 0.5])
def test_sampling_is_bit_deterministic(eta):
    m = trained_like()
    cond = np.random.default_rng(0).uniform(-1, 1, (2, 1, 8, 8))
    spec = SamplerSpec(uniform_schedule(4), eta=eta)
    with nx.precision(64):
        a = ddim_sample(m, cond, spec, [1, 2], SCHED)
        b = ddim_sample(m, cond, spec, [1, 2], SCHED)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


def test_per_item_seeds_make_batches_order_independent():
    m = trained_like()
    cond = np.random.default_rng(0).uniform(-1, 1, (2, 1, 8, 8))
    spec = SamplerSpec(uniform_schedule(3), eta=1.0)
    with nx.precision(64):
        both = ddim_sample(m, cond, spec, [11, 12], SCHED)
        rev = ddim_sample(m, cond[::-1].copy(), spec, [12, 11], SCHED)
    np.testing.assert_allclose(both, rev[::-1], rtol=0, atol=1e-12)


def test_initial_noise_uses_item_streams():
    a = initial_noise([4, 5], (1, 2, 2))
    assert np.array_equal(a[1], initial_noise([5], (1, 2, 2))[0])


@given(t=st.integers(1, 999), gap=st.integers(1, 200))
def test_sigma_limits(t, gap):
    prev = max(0, t - gap)
    ab_t, ab_p = SCHED.alpha_bars[t], SCHED.alpha_bars[prev]
    assert ddim_sigma(ab_t, ab_p, 0.0) == 0.0
    # adjacent steps at eta = 1: the DDPM posterior deviation
    posterior = (1 - SCHED.alpha_bars[t - 1]) / (1 - ab_t) * SCHED.betas[t]
    assert ddim_sigma(ab_t, SCHED.alpha_bars[t - 1], 1.0) == pytest.approx(np.sqrt(posterior), rel=1e-9)


def test_guidance_one_is_the_conditional_path():
    m = trained_like()
    cond = np.random.default_rng(4).uniform(-1, 1, (2, 1, 8, 8))
    spec = SamplerSpec(uniform_schedule(3), guidance=1.0)
    m.call_log = []
    with nx.precision(64):
        out = ddim_sample(m, cond, spec, [0, 1], SCHED)
    assert all(len(t) == 2 for t in m.call_log)  # never the doubled batch
    x = initial_noise([0, 1], (1, 8, 8), np.float64)
    with nx.precision(64):
        for k, tau in enumerate((999, 500, 0)):
            eps = m(x, cond, tau).data
            ab = SCHED.alpha_bars[tau]
            x0 = (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
            if k == 2:
                break
            ab_p = SCHED.alpha_bars[(999, 500, 0)[k + 1]]
            x = np.sqrt(ab_p) * x0 + np.sqrt(1 - ab_p) * eps
    assert np.array_equal(out, np.clip(x0, -1, 1))


def test_guidance_combination():
    m = trained_like()
    cond = np.random.default_rng(5).uniform(-1, 1, (1, 1, 8, 8))
    spec = SamplerSpec(TimestepSchedule((700,)), guidance=3.0)
    with nx.precision(64):
        out = ddim_sample(m, cond, spec, [9], SCHED)
        x = initial_noise([9], (1, 8, 8), np.float64)
        e_c = m(x, cond, 700).data
        e_u = m(x, np.zeros_like(cond), 700).data
    eps = e_u + 3.0 * (e_c - e_u)
    ab = SCHED.alpha_bars[700]
    np.testing.assert_allclose(out, np.clip((x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), -1, 1), atol=1e-12)


@pytest.mark.parametrize("w, n, batch", [(1.0, 5, 3), (2.0, 5, 3), (0.0, 2, 1), (1.5, 10, 2)])
def test_invocations_equal_analytic_count(w, n, batch):
    m = build(SMALL, 0)
    spec = SamplerSpec(uniform_schedule(n), guidance=w)
    m.call_log = []
    ddim_sample(m, np.zeros((batch, 1, 8, 8), np.float32), spec, list(range(batch)), SCHED)
    assert m.invocations == expected_invocations(spec, batch) == batch * n * (1 if w == 1 else 2)
    visited = {t for call in m.call_log for t in call}
    assert visited <= set(spec.timesteps.steps)


def test_per_step_depths_are_applied():
    m = build(SMALL, 0)
    m.access_log = set()
    spec = SamplerSpec(uniform_schedule(2), depths=(2, 1))
    ddim_sample(m, np.zeros((1, 1, 8, 8), np.float32), spec, [0], SCHED)
    assert max(m.owner[n] for n in m.access_log) == 2
    with pytest.raises(ValueError):
        SamplerSpec(uniform_schedule(3), depths=(1, 2))


@pytest.mark.parametrize(
    "kwargs", [dict(eta=-0.1), dict(eta=1.5), dict(guidance=-1.0)]
)
def test_sampler_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerSpec(uniform_schedule(3), **kwargs)


def test_sampler_rejects_bad_timesteps_and_seeds():
    m = build(SMALL, 0)
    cond = np.zeros((1, 1, 8, 8), np.float32)
    with pytest.raises(ValueError):
        ddim_sample(m, cond, SamplerSpec(TimestepSchedule((5, 1000))), [0], SCHED)
    with pytest.raises(ValueError):
        ddim_sample(m, cond, SamplerSpec(TimestepSchedule(())), [0], SCHED)
    with pytest.raises(ValueError):
        ddim_sample(m, cond, SamplerSpec(uniform_schedule(2)), [0, 1], SCHED)


def test_clip_x0_clamps_every_intermediate_estimate():
    class Scaled:
        config = SMALL
        params = {"w": Tensor(np.zeros(1), dtype=np.float64)}

        def __call__(self, x, cond, t, depth=None):
            return Tensor(0.1 * x, dtype=np.float64)

    steps = (0, 500, 999)
    x_T = initial_noise([3], (1, 8, 8), np.float64)
    cond = np.zeros((1, 1, 8, 8))
    outs = {}
    for clip in (False, True):
        x = x_T
        for k, tau in enumerate(steps[::-1]):
            ab = SCHED.alpha_bars[tau]
            x0 = (x - np.sqrt(1 - ab) * 0.1 * x) / np.sqrt(ab)
            if k == 2:
                break
            x0 = np.clip(x0, -1, 1) if clip else x0
            ab_p = SCHED.alpha_bars[steps[::-1][k + 1]]
            x = np.sqrt(ab_p) * x0 + np.sqrt(1 - ab_p) * 0.1 * x
        got = ddim_sample(Scaled(), cond, SamplerSpec(TimestepSchedule(steps), clip_x0=clip), [3], SCHED)
        np.testing.assert_allclose(got, np.clip(x0, -1, 1), atol=1e-12)
        outs[clip] = got
    assert not np.array_equal(outs[False], outs[True])
