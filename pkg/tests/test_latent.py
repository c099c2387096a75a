"""Autoencoder and the latent-space sampling pipeline."""

import time

import numpy as np
import pytest

from floodsr.data import DemScaler, Normalization
from floodsr.diffusion import SamplerConfig, linear_schedule, sample
from floodsr.errors import ContractError, DimensionError
from floodsr.latent import (
    Autoencoder,
    AutoencoderConfig,
    LatentModels,
    latent_pipeline,
    train_autoencoder,
)
from floodsr.unet import Unet, UnetConfig


def smooth_fields(rng, n, size):
    """Random smooth maps in [-1, 1]: sums of a few Gaussian bumps."""
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, 1, size, size), np.float32)
    for i in range(n):
        field = np.zeros((size, size))
        for _ in range(4):
            cy, cx = rng.uniform(0, size, 2)
            s = rng.uniform(size / 8, size / 3)
            field += rng.uniform(-1, 1) * np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * s * s))
        field /= max(np.abs(field).max(), 1e-6)
        out[i, 0] = field
    return out


@pytest.fixture(scope="module")
def trained_ae():
    rng = np.random.default_rng(0)
    patches = smooth_fields(rng, 96, 32)
    cfg = AutoencoderConfig(spatial_factor=4, latent_channels=4, base_width=8)
    ae, stats = train_autoencoder(
        patches, cfg, steps=700, seed=1, lr=2e-3, batch_size=8,
        recon_tolerance=None,
    )
    return ae, stats, patches


def test_ae_config_validation():
    with pytest.raises(ContractError):
        AutoencoderConfig(spatial_factor=3)
    with pytest.raises(ContractError):
        AutoencoderConfig(latent_channels=0)


def test_encode_shape_law():
    # shapes need no training: (1, H, W) -> (4, H/f, W/f)
    ae = Autoencoder(AutoencoderConfig(spatial_factor=4, latent_channels=4, base_width=8))
    z = ae.encode(np.zeros((1, 64, 64), np.float32))
    assert z.shape == (4, 16, 16)
    x = ae.decode(z)
    assert x.shape == (1, 64, 64)


def test_encode_batch_shape_law():
    ae = Autoencoder(AutoencoderConfig(spatial_factor=2, latent_channels=4, base_width=8))
    z = ae.encode(np.zeros((5, 1, 32, 32), np.float32))
    assert z.shape == (5, 4, 16, 16)
    assert ae.decode(z).shape == (5, 1, 32, 32)


def test_encode_rejects_indivisible():
    ae = Autoencoder(AutoencoderConfig(spatial_factor=4, latent_channels=4, base_width=8))
    with pytest.raises(ContractError):
        ae.encode(np.zeros((1, 30, 30), np.float32))
    with pytest.raises(DimensionError):
        ae.decode(np.zeros((2, 16, 16), np.float32))


def test_ae_deterministic_build():
    cfg = AutoencoderConfig(base_width=8)
    a, b = Autoencoder(cfg, seed=4), Autoencoder(cfg, seed=4)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_trained_roundtrip_quality(trained_ae):
    ae, stats, patches = trained_ae
    # held-out reconstruction within 2% of the field variance
    assert stats["holdout_mse"] < 0.02 * stats["holdout_variance"]
    # latents rescaled to roughly unit spread
    z = ae.encode(patches[:32])
    assert 0.5 < float(z.std()) < 2.0


def test_trained_constant_probe(trained_ae):
    ae, _, _ = trained_ae
    for value in (0.0, 0.4):
        probe = np.full((1, 32, 32), value, np.float32)
        recon = ae.decode(ae.encode(probe))
        # mean reconstruction within 5% of the constant (edge pixels of a
        # conv stack always carry localized error, so max is not the bar)
        assert float(np.abs(recon - value).mean()) < 0.05 * max(abs(value), 0.1)


def test_pipeline_m0_is_ae_roundtrip(trained_ae):
    ae, _, _ = trained_ae
    norm = Normalization(max_depth=100.0, out_range=(-1.0, 1.0))
    dem_scaler = DemScaler(0.0, 10.0)
    sched = linear_schedule(40, 0.01, 0.2)
    unet = Unet(UnetConfig(in_channels=12, out_channels=4, base_width=8, depth=2,
                           attn_levels=(1,), time_embed_dim=32), seed=0)
    models = LatentModels(ae=ae, unet=unet, sched=sched, norm=norm, dem_scaler=dem_scaler)
    rng = np.random.default_rng(3)
    cg = rng.uniform(0, 80, (32, 32))
    dem = rng.uniform(0, 10, (32, 32))
    out = latent_pipeline(models, cg, dem, SamplerConfig("truncated", m=0, infer_steps=1))
    expected = norm.denormalize(ae.decode(ae.encode(norm.normalize(cg)[None, None]))[0, 0])
    np.testing.assert_allclose(out.depths, np.maximum(expected, 0.0), atol=1e-5)


def test_pipeline_output_shape(trained_ae):
    ae, _, _ = trained_ae
    norm = Normalization(max_depth=100.0, out_range=(-1.0, 1.0))
    models = LatentModels(
        ae=ae,
        unet=Unet(UnetConfig(in_channels=12, out_channels=4, base_width=8, depth=2,
                             attn_levels=(1,), time_embed_dim=32), seed=0),
        sched=linear_schedule(40, 0.01, 0.2),
        norm=norm,
        dem_scaler=DemScaler(0.0, 10.0),
    )
    cg_coarse = np.random.default_rng(0).uniform(0, 50, (8, 8))
    dem = np.random.default_rng(1).uniform(0, 10, (32, 32))
    out = latent_pipeline(models, cg_coarse, dem,
                          SamplerConfig("truncated", m=10, infer_steps=5), upscale=4)
    assert out.depths.shape == (32, 32)
    assert (out.depths >= 0).all()


class _LatentOracle:
    """Knows the true latent; hands back the exact forward noise."""

    def __init__(self, z0, sched):
        self.z0 = z0
        self.sched = sched

    def predict(self, z_t, cond, t):
        g = self.sched.gamma_at(int(t))
        return ((z_t - np.sqrt(g) * self.z0) / np.sqrt(1.0 - g)).astype(np.float32)


def test_latent_oracle_matches_pixel_oracle(trained_ae):
    # sampling in latent space with a perfect noise model must reproduce the
    # map up to autoencoder reconstruction error
    ae, stats, patches = trained_ae
    sched = linear_schedule(60, 0.005, 0.12)
    target = patches[:1]
    z0 = ae.encode(target)
    cond = np.concatenate([z0, np.zeros_like(z0)], axis=1)
    cfg = SamplerConfig(start="random_noise", infer_steps=60, seed=5)
    z_hat = sample(_LatentOracle(z0, sched), cond, sched, cfg,
                   target_channels=4)
    decoded = ae.decode(z_hat)
    ae_err = np.sqrt(stats["holdout_mse"])
    rmse = float(np.sqrt(np.mean((decoded - target) ** 2)))
    # the sampler adds stochastic spread on top of AE error; 4x covers it
    assert rmse < max(4 * ae_err, 0.1)


def test_latent_step_faster_than_pixel_step(trained_ae):
    ae, _, _ = trained_ae
    # equal infer_steps; latent operates on 8x8x12, pixel on 32x32x3
    sched = linear_schedule(20, 0.01, 0.2)
    pixel = Unet(UnetConfig(in_channels=3, out_channels=1, base_width=16, depth=2,
                            attn_levels=(1,), time_embed_dim=32), seed=0)
    latent = Unet(UnetConfig(in_channels=12, out_channels=4, base_width=16, depth=2,
                             attn_levels=(1,), time_embed_dim=32), seed=0)
    cond_px = np.zeros((4, 2, 32, 32), np.float32)
    cond_lat = np.zeros((4, 8, 8, 8), np.float32)
    cfg = SamplerConfig(start="random_noise", infer_steps=20, seed=0)

    def clock(model, cond, channels):
        t0 = time.perf_counter()
        sample(model, cond, sched, cfg, target_channels=channels)
        return time.perf_counter() - t0

    clock(pixel, cond_px, 1)  # warm caches
    clock(latent, cond_lat, 4)
    t_pixel = min(clock(pixel, cond_px, 1) for _ in range(3))
    t_latent = min(clock(latent, cond_lat, 4) for _ in range(3))
    assert t_latent < t_pixel
