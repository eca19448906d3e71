import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from bsldm.sampler import SamplerTrace, ThresholdPolicy, apply_threshold, reverse_step, sample_latents
from bsldm.schedules import make_cosine_schedule


class ConstEstimator(nn.Module):
    """Predicts a fixed fraction of the noisy latent; cheap but nontrivial."""

    def __init__(self, gain=0.5):
        super().__init__()
        self.gain = gain

    def forward(self, x, t):
        return self.gain * x[:, : x.shape[1] // 2]


def test_threshold_examples():
    temporal = ThresholdPolicy("temporal", 0.003, 1.4)
    assert temporal.threshold(0) == pytest.approx(1.4)
    assert temporal.threshold(999) == pytest.approx(4.397)
    z = torch.tensor([-3.0, 0.5, 5.0])
    assert apply_threshold(z, 0, ThresholdPolicy("static")).tolist() == [-1.0, 0.5, 1.0]
    torch.testing.assert_close(apply_threshold(z, 0, temporal), torch.tensor([-1.4, 0.5, 1.4]))
    torch.testing.assert_close(apply_threshold(z, 999, temporal), torch.tensor([-3.0, 0.5, 4.397]))
    assert torch.equal(apply_threshold(z, 5, ThresholdPolicy("none")), z)


def test_dynamic_threshold_matches_percentile_oracle():
    v = np.linspace(-2.0, 2.0, 1001)
    s = np.percentile(np.abs(v), 99.5)
    expected = np.clip(v, -s, s) / s
    got = apply_threshold(torch.tensor(v), 0, ThresholdPolicy("dynamic", percentile=99.5)).numpy()
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert got.max() == pytest.approx(1.0)
    # below 1 the bound is lifted to 1 and nothing changes
    small = torch.linspace(-0.5, 0.5, 11)
    assert torch.equal(apply_threshold(small, 0, ThresholdPolicy("dynamic")), small)


def test_dynamic_threshold_is_per_sample():
    z = torch.stack([torch.linspace(-4, 4, 64), torch.linspace(-0.5, 0.5, 64)]).reshape(2, 1, 8, 8)
    out = apply_threshold(z, 0, ThresholdPolicy("dynamic"))
    assert float(out[0].abs().max()) == pytest.approx(1.0)
    assert torch.equal(out[1], z[1])


@pytest.mark.parametrize("kind", ["static", "temporal"])
@settings(max_examples=50, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2 ** 16), scale=st.floats(0.1, 20))
def test_clamps_are_idempotent_and_never_grow(kind, t, seed, scale):
    pol = ThresholdPolicy(kind)
    z = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    once = apply_threshold(z, t, pol)
    assert torch.equal(apply_threshold(once, t, pol), once)
    assert float(once.abs().max()) <= float(z.abs().max())


def test_policy_validation():
    for bad in (dict(kind="soft"), dict(kind="temporal", omega=0.0), dict(kind="temporal", intercept=0.5),
                dict(kind="dynamic", percentile=10)):
        with pytest.raises(ValueError):
            ThresholdPolicy(**bad)
    assert math.isnan(ThresholdPolicy("none").threshold(3))


def test_reverse_step_inverts_single_step_schedule():
    sched = make_cosine_schedule(1)
    g = torch.Generator().manual_seed(0)
    ab = float(sched.alpha_bar[0])
    z0 = torch.rand(100, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(100, 3, 4, 4, generator=g, dtype=torch.float64)
    z1 = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * eps
    rec = reverse_step(z1, 0, eps, sched, ThresholdPolicy("none"), noise=torch.zeros_like(z0))
    assert float((rec - z0).abs().max()) <= 1e-5


def test_reverse_step_zero_is_fixed_point():
    sched = make_cosine_schedule(1000)
    z = torch.zeros(1, 3, 4, 4)
    for t in (999, 500, 1, 0):
        assert torch.equal(reverse_step(z, t, torch.zeros_like(z), sched, ThresholdPolicy("temporal")), z)


def test_reverse_step_mean_formula():
    sched = make_cosine_schedule(1000)
    t = 321
    z, eps, n = torch.randn(3, 1, 2, 2, dtype=torch.float64).unbind(0)
    a, ab, sig = sched.alpha[t], sched.alpha_bar[t], sched.sigma[t]
    expected = (z - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a) + sig * n
    got = reverse_step(z, t, eps, sched, ThresholdPolicy("none"), noise=n)
    torch.testing.assert_close(got, expected, atol=1e-12, rtol=1e-12)
    with pytest.raises(IndexError):
        reverse_step(z, 1000, eps, sched, ThresholdPolicy("none"))


def test_temporal_bound_holds_along_trajectories():
    sched = make_cosine_schedule(1000)
    pol = ThresholdPolicy("temporal", 0.003, 1.4)
    trace = SamplerTrace()
    cond = torch.randn(4, 3, 4, 4, generator=torch.Generator().manual_seed(1)) * 3
    sample_latents(cond, ConstEstimator(-2.0), sched, pol, seed=0, trace=trace)
    assert len(trace.rows) == 1000
    for row in trace.rows:
        bound = 0.003 * max(row["t"] - 1, 0) + 1.4
        assert max(abs(row["min"]), abs(row["max"])) <= bound + 1e-6
    ts = np.array([r["t"] for r in trace.rows[:-1]], dtype=float)
    s = np.array([r["threshold"] for r in trace.rows[:-1]])
    assert np.polyfit(ts, s, 1)[0] == pytest.approx(0.003)


def test_sampling_is_deterministic_and_batch_independent(tmp_path):
    sched = make_cosine_schedule(50)
    cond = torch.randn(3, 2, 4, 4, generator=torch.Generator().manual_seed(2))
    pol = ThresholdPolicy("static")
    a = sample_latents(cond, ConstEstimator(), sched, pol, seed=9)
    b = sample_latents(cond, ConstEstimator(), sched, pol, seed=9)
    assert torch.equal(a, b)
    single = sample_latents(cond[1:2], ConstEstimator(), sched, pol, seed=[10])
    assert torch.equal(single[0], a[1])
    assert float(a.abs().max()) <= 1.0
    trace = SamplerTrace()
    sample_latents(cond, ConstEstimator(), sched, pol, seed=9, trace=trace)
    trace.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().strip().splitlines()
    assert lines[0] == "t,min,max,mean,std,threshold" and len(lines) == 51
