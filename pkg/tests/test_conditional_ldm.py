import numpy as np
import pytest
import torch
from torch import nn

from bsldm.conditional_ldm import (
    EmaState, EstimatorConfig, UNet, diffusion_loss, ema_update, load_checkpoint, predict_noise, train_ldm,
)
from bsldm.schedules import OffsetNoiseConfig, make_cosine_schedule

SMALL = EstimatorConfig(latent_channels=3, base_channels=16, channel_mult=(1, 2), attention_resolutions=(4,),
                        num_res_blocks=1, time_embed_dim=32, latent_size=8, batch_size=4)
MINI = EstimatorConfig(latent_channels=1, base_channels=8, channel_mult=(1,), attention_resolutions=(),
                       num_res_blocks=1, time_embed_dim=8, latent_size=4, batch_size=2)


@pytest.fixture(scope="module")
def sched():
    return make_cosine_schedule(1000)


class OracleEstimator(nn.Module):
    """Recovers the exact noise when the conditioning latent equals z0."""

    def __init__(self, schedule, c):
        super().__init__()
        self.ab = torch.as_tensor(schedule.alpha_bar)
        self.c = c

    def forward(self, x, t):
        z_t, z0 = x[:, :self.c], x[:, self.c:]
        ab = self.ab[t].to(x.dtype).view(-1, 1, 1, 1)
        return (z_t - ab.sqrt() * z0) / (1 - ab).sqrt()


class ZeroEstimator(nn.Module):
    def forward(self, x, t):
        return torch.zeros_like(x[:, : x.shape[1] // 2])


def test_unet_output_shape_and_input_channels():
    torch.manual_seed(0)
    model = UNet(SMALL)
    assert SMALL.in_channels == 6
    first = next(m for m in model.modules() if isinstance(m, nn.Conv2d))
    assert first.in_channels == 6
    out = predict_noise(torch.randn(2, 3, 8, 8), torch.tensor([0, 999]), torch.randn(2, 3, 8, 8), model)
    assert out.shape == (2, 3, 8, 8)
    with pytest.raises(ValueError):
        predict_noise(torch.randn(2, 3, 8, 8), torch.tensor([0, 1]), torch.randn(2, 3, 4, 4), model)
    with pytest.raises(ValueError):
        model(torch.randn(1, 3, 8, 8), torch.tensor([0]))


def test_prediction_is_deterministic_and_batch_order_invariant():
    torch.manual_seed(1)
    model = UNet(SMALL).eval()
    z, c = torch.randn(4, 3, 8, 8), torch.randn(4, 3, 8, 8)
    t = torch.tensor([1, 50, 400, 999])
    with torch.no_grad():
        a = predict_noise(z, t, c, model)
        b = predict_noise(z, t, c, model)
        perm = torch.tensor([2, 0, 3, 1])
        p = predict_noise(z[perm], t[perm], c[perm], model)
    assert torch.equal(a, b)
    torch.testing.assert_close(p, a[perm], atol=1e-5, rtol=1e-5)


def test_oracle_estimator_has_zero_loss(sched):
    z0 = torch.randn(64, 3, 8, 8, dtype=torch.float64)
    loss = diffusion_loss(z0, z0.clone(), sched, OffsetNoiseConfig(0.1), OracleEstimator(sched, 3), seed=0)
    assert float(loss) < 1e-12


def test_zero_estimator_loss_is_noise_power(sched):
    z0 = torch.zeros(4000, 1, 8, 8, dtype=torch.float64)
    loss = diffusion_loss(z0, z0, sched, OffsetNoiseConfig(0.1), ZeroEstimator(), seed=3)
    assert float(loss) == pytest.approx(1.1, rel=0.03)
    loss0 = diffusion_loss(z0, z0, sched, OffsetNoiseConfig(0.0), ZeroEstimator(), seed=3)
    assert float(loss0) == pytest.approx(1.0, rel=0.03)


def test_loss_is_deterministic_given_seed(sched):
    torch.manual_seed(2)
    model = UNet(SMALL)
    z0, c = torch.randn(3, 3, 8, 8), torch.randn(3, 3, 8, 8)
    a = diffusion_loss(z0, c, sched, OffsetNoiseConfig(), model, seed=5)
    b = diffusion_loss(z0, c, sched, OffsetNoiseConfig(), model, seed=5)
    assert float(a.detach()) == float(b.detach())
    with pytest.raises(ValueError):
        diffusion_loss(z0, c[:2], sched, OffsetNoiseConfig(), model)


def test_loss_gradient_matches_finite_differences(sched):
    torch.manual_seed(3)
    model = UNet(MINI).double()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 10_000
    z0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    cond = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    off = OffsetNoiseConfig(0.1)

    def loss_fn():
        return diffusion_loss(z0, cond, sched, off, model, seed=11)

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    params = [p for p in model.parameters() if p.requires_grad]
    h = 1e-6
    checked = 0
    for p in params:
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(grad[i])
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-8, (p.shape, i, fd, an)
            checked += 1
    assert checked > 20


def test_ema_examples():
    ema = EmaState(0.5, {"w": torch.tensor([0.0])})
    ema_update(ema, {"w": torch.tensor([2.0])})
    assert float(ema.shadow["w"]) == 1.0
    ema_update(ema, {"w": torch.tensor([2.0])})
    assert float(ema.shadow["w"]) == 1.5


def test_ema_converges_geometrically():
    d = 0.995
    ema = EmaState(d, {"w": torch.tensor([0.0], dtype=torch.float64)})
    for _ in range(100):
        ema_update(ema, {"w": torch.tensor([1.0], dtype=torch.float64)})
    assert float(ema.shadow["w"]) == pytest.approx(1 - d ** 100, abs=1e-12)


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        EmaState(1.0)
    ema = EmaState(0.9, {"w": torch.zeros(2)})
    with pytest.raises(ValueError):
        ema_update(ema, {"v": torch.zeros(2)})
    with pytest.raises(ValueError):
        ema_update(ema, {"w": torch.zeros(3)})


def test_default_hyperparameters():
    cfg = EstimatorConfig()
    assert cfg.lr == 2e-4 and cfg.ema_decay == 0.995
    assert cfg.in_channels == 2 * cfg.latent_channels


def test_smoke_training_resume_and_checkpoint(tmp_path, sched):
    g = torch.Generator().manual_seed(0)
    z0, cond = torch.rand(8, 3, 8, 8, generator=g) * 2 - 1, torch.rand(8, 3, 8, 8, generator=g) * 2 - 1
    ckpt, log = tmp_path / "ldm.pt", tmp_path / "ldm.csv"
    model, ema, hist = train_ldm(z0, cond, sched, OffsetNoiseConfig(), SMALL, 1, seed=0,
                                 checkpoint_path=ckpt, log_path=log)
    assert len(hist) == 1 and np.isfinite(hist[0]["loss"]) and hist[0]["lr"] == 2e-4
    _, _, hist2 = train_ldm(z0, cond, sched, OffsetNoiseConfig(), SMALL, 2, seed=0,
                            checkpoint_path=ckpt, log_path=log)
    assert [r["epoch"] for r in hist2] == [2]
    assert len(log.read_text().strip().splitlines()) == 3
    loaded, payload = load_checkpoint(ckpt)
    assert payload["schedule_fingerprint"] == sched.fingerprint()
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, payload["ema"][k])
    with pytest.raises(ValueError):
        train_ldm(z0, cond, make_cosine_schedule(500), OffsetNoiseConfig(), SMALL, 3, seed=0, checkpoint_path=ckpt)


def test_training_is_reproducible(sched):
    g = torch.Generator().manual_seed(1)
    z0, cond = torch.randn(4, 3, 8, 8, generator=g), torch.randn(4, 3, 8, 8, generator=g)
    a = train_ldm(z0, cond, sched, OffsetNoiseConfig(), SMALL, 1, seed=4)[0]
    b = train_ldm(z0, cond, sched, OffsetNoiseConfig(), SMALL, 1, seed=4)[0]
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), k
