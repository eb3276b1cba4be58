import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionedit.errors import ConfigError, DimensionError, NumericError
from regionedit.flow import (FlowSchedule, euler_sample, intermediate_init,
                             interpolate, sharpen_upsample)


# -- schedule --------------------------------------------------------------

def test_schedule_grid_values():
    s = FlowSchedule(28, 18)
    assert s.executed == 10
    assert np.isclose(s.t_start, 10 / 28)
    times = s.times()
    assert times.shape == (10,)
    assert np.isclose(times[0], 10 / 28) and np.isclose(times[-1], 1 / 28)
    assert (np.diff(times) < 0).all()


def test_schedule_skip_grid():
    for skip in (0, 10, 14, 18, 22, 24):
        s = FlowSchedule(28, skip)
        assert s.executed == 28 - skip
        assert np.isclose(s.t_start, (28 - skip) / 28)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        FlowSchedule(0, 0)
    with pytest.raises(ConfigError):
        FlowSchedule(28, 28)
    with pytest.raises(ConfigError):
        FlowSchedule(28, -1)


# -- interpolation and init ------------------------------------------------

def test_interpolate_endpoints():
    x0 = np.array([1.0, 2.0], dtype=np.float32)
    x1 = np.array([-3.0, 5.0], dtype=np.float32)
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    mid = interpolate(x0, x1, 0.5)
    assert np.allclose(mid, [(1 - 3) / 2, (2 + 5) / 2])


def test_intermediate_init_formula():
    rng = np.random.default_rng(0)
    ref = rng.random((4, 3)).astype(np.float32)
    noise = rng.standard_normal((4, 3)).astype(np.float32)
    ref_noise = rng.standard_normal((4, 3)).astype(np.float32)
    sched = FlowSchedule(28, 18)
    got = intermediate_init(ref, noise, ref_noise, sched, alpha=0.7)
    ts = np.float64(10 / 28)
    want = 0.7 * noise.astype(np.float64) + 0.3 * (
        (1 - ts) * ref.astype(np.float64) + ts * ref_noise.astype(np.float64))
    assert np.allclose(got, want, atol=1e-6)


def test_intermediate_init_skip_zero_is_pure_noise():
    rng = np.random.default_rng(1)
    ref = rng.random((4, 3)).astype(np.float32)
    noise = rng.standard_normal((4, 3)).astype(np.float32)
    got = intermediate_init(ref, noise, noise * 0 + 1, FlowSchedule(28, 0))
    assert np.array_equal(got, noise)


def test_intermediate_init_guards():
    a = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(DimensionError):
        intermediate_init(a, a, np.zeros((3, 2), dtype=np.float32),
                          FlowSchedule(28, 18))
    with pytest.raises(ConfigError):
        intermediate_init(a, a, a, FlowSchedule(28, 18), alpha=1.0)


# -- sampler ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 120), st.integers(0, 10 ** 6))
def test_constant_field_recovers_x0_exactly(steps, seed):
    """Straight-path oracle: under v = x1 - x0 the sampler lands on x0
    for any step count."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(6).astype(np.float32)
    x1 = rng.standard_normal(6).astype(np.float32)
    v = (x1.astype(np.float64) - x0.astype(np.float64))
    out = euler_sample(lambda z, t: np.broadcast_to(v, z.shape),
                       x1.copy(), FlowSchedule(steps, 0))
    assert np.max(np.abs(out.astype(np.float64) - x0)) <= 1e-6


def test_truncated_run_from_interpolant():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(5).astype(np.float32)
    x1 = rng.standard_normal(5).astype(np.float32)
    sched = FlowSchedule(28, 18)
    z_start = ((1 - sched.t_start) * x0.astype(np.float64)
               + sched.t_start * x1.astype(np.float64))
    v = x1.astype(np.float64) - x0.astype(np.float64)
    out = euler_sample(lambda z, t: np.broadcast_to(v, z.shape),
                       z_start, sched)
    assert np.max(np.abs(out.astype(np.float64) - x0)) <= 1e-6


def test_callback_sees_every_step():
    seen = []
    sched = FlowSchedule(8, 3)
    euler_sample(lambda z, t: np.zeros_like(z), np.zeros(2), sched,
                 callback=lambda st_: seen.append((st_.steps_done, st_.t)))
    assert [s for s, _ in seen] == [4, 5, 6, 7, 8]
    assert np.isclose(seen[-1][1], 0.0)


def test_non_finite_velocity_raises():
    with pytest.raises(NumericError):
        euler_sample(lambda z, t: np.full_like(z, np.inf),
                     np.zeros(3), FlowSchedule(4, 0))


def test_velocity_shape_mismatch():
    with pytest.raises(DimensionError):
        euler_sample(lambda z, t: np.zeros(4), np.zeros(3),
                     FlowSchedule(4, 0))


# -- reference construction ------------------------------------------------

def test_sharpen_upsample_shape_and_range():
    rng = np.random.default_rng(3)
    lr = rng.random((8, 8, 3)).astype(np.float32)
    out = sharpen_upsample(lr, 4, sigma=1.0, amount=0.5)
    assert out.shape == (32, 32, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sharpen_upsample_flat_image_unchanged():
    lr = np.full((4, 4, 3), 0.6, dtype=np.float32)
    out = sharpen_upsample(lr, 2)
    assert np.allclose(out, 0.6, atol=1e-6)


def test_sharpen_amplifies_edges():
    lr = np.zeros((8, 8, 3), dtype=np.float32)
    lr[:, 4:] = 1.0
    plain = sharpen_upsample(lr, 2, sigma=1.0, amount=0.0)
    sharp = sharpen_upsample(lr, 2, sigma=1.0, amount=0.8)
    # overshoot near the edge pushes contrast outward before the clip
    assert sharp[:, 9].mean() >= plain[:, 9].mean()
    assert sharp[:, 6].mean() <= plain[:, 6].mean()
