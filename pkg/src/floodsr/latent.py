"""Latent-space variant: a deterministic convolutional autoencoder
compresses maps spatially (4 channels at a quarter resolution by default)
and diffusion runs on the latents.

The autoencoder is trained in-repo with a plain L2 reconstruction loss on
normalized fine patches; after training, latents are rescaled by a
dataset-derived constant so their standard deviation is close to one
before diffusion sees them. The coarse-grid map and the DEM are encoded
separately and concatenated as conditioning channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import sample as diffusion_sample
from .errors import ContractError, DimensionError, TrainingError
from .nn import Tensor, mse, no_grad
from .nn.optim import FusedAdam
from .nn.ops import conv2d, nearest_upsample2x, silu


@dataclass
class AutoencoderConfig:
    spatial_factor: int = 4
    latent_channels: int = 4
    base_width: int = 16

    def __post_init__(self):
        f = self.spatial_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ContractError("spatial_factor must be a power of two >= 2")
        if self.latent_channels < 1:
            raise ContractError("latent_channels must be >= 1")
        if self.base_width < 4:
            raise ContractError("base_width must be >= 4")

    @property
    def stages(self):
        return self.spatial_factor.bit_length() - 1

    def to_dict(self):
        return {
            "spatial_factor": self.spatial_factor,
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Autoencoder:
    """Symmetric conv encoder/decoder with stride-2 stages."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = {}
        self.latent_scale = 1.0
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        def add_conv(name, c_in, c_out, k):
            std = np.sqrt(2.0 / (c_in * k * k))
            w = Tensor(
                (rng.standard_normal((c_out, c_in, k, k)) * std).astype(self.dtype),
                requires_grad=True, dtype=self.dtype,
            )
            b = Tensor(np.zeros(c_out, self.dtype), requires_grad=True, dtype=self.dtype)
            self.params[name + ".w"] = w
            self.params[name + ".b"] = b
            return w, b

        w0 = cfg.base_width
        self.enc_layers = []
        self.enc_layers.append((add_conv("enc.stem", 1, w0, 3), 1, 1))
        width = w0
        for s in range(cfg.stages):
            nxt = width * 2
            self.enc_layers.append((add_conv(f"enc.down{s}", width, nxt, 3), 2, 1))
            self.enc_layers.append((add_conv(f"enc.mix{s}", nxt, nxt, 3), 1, 1))
            width = nxt
        self.enc_head = add_conv("enc.head", width, cfg.latent_channels, 1)

        self.dec_stem = add_conv("dec.stem", cfg.latent_channels, width, 1)
        self.dec_layers = []
        for s in range(cfg.stages):
            nxt = width // 2
            self.dec_layers.append(("up", add_conv(f"dec.up{s}", width, nxt, 3)))
            self.dec_layers.append(("mix", add_conv(f"dec.mix{s}", nxt, nxt, 3)))
            width = nxt
        self.dec_head = add_conv("dec.head", width, 1, 3)

    # ---- autograd paths -------------------------------------------------------

    def encode_tensor(self, x):
        h = x
        for (w, b), stride, pad in self.enc_layers:
            h = silu(conv2d(h, w, b, stride=stride, pad=pad))
        w, b = self.enc_head
        return conv2d(h, w, b) * self.latent_scale

    def decode_tensor(self, z):
        z = z * (1.0 / self.latent_scale)
        w, b = self.dec_stem
        h = silu(conv2d(z, w, b))
        for kind, (w, b) in self.dec_layers:
            if kind == "up":
                h = silu(conv2d(nearest_upsample2x(h), w, b, pad=1))
            else:
                h = silu(conv2d(h, w, b, pad=1))
        w, b = self.dec_head
        return conv2d(h, w, b, pad=1)

    # ---- array convenience ------------------------------------------------------

    def _as_batch(self, arr):
        arr = np.asarray(arr, dtype=self.dtype)
        if arr.ndim == 3:
            return arr[None], True
        if arr.ndim == 4:
            return arr, False
        raise DimensionError("expected [C,H,W] or [N,C,H,W]")

    def encode(self, x):
        batch, single = self._as_batch(x)
        if batch.shape[1] != 1:
            raise DimensionError("encoder expects single-channel maps")
        f = self.cfg.spatial_factor
        if batch.shape[2] % f or batch.shape[3] % f:
            raise ContractError(f"spatial dims must be divisible by {f}")
        with no_grad():
            z = self.encode_tensor(Tensor(batch, dtype=self.dtype)).data
        return z[0] if single else z

    def decode(self, z):
        batch, single = self._as_batch(z)
        if batch.shape[1] != self.cfg.latent_channels:
            raise DimensionError(
                f"decoder expects {self.cfg.latent_channels} latent channels"
            )
        with no_grad():
            x = self.decode_tensor(Tensor(batch, dtype=self.dtype)).data
        return x[0] if single else x

    # ---- persistence ------------------------------------------------------------

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays, prefix=""):
        for name, p in self.params.items():
            incoming = np.asarray(arrays[prefix + name], dtype=p.data.dtype)
            if incoming.shape != p.data.shape:
                raise ContractError(f"AE parameter {name} shape mismatch")
            p.data[...] = incoming

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


def train_autoencoder(patches, cfg, steps, seed, lr=1e-3, batch_size=16,
                      holdout_fraction=0.1, recon_tolerance=None, log=None):
    """Fit the autoencoder on normalized fine patches [N,1,H,W].

    Returns (autoencoder, stats). stats carries the held-out reconstruction
    MSE and the latent scale. When recon_tolerance is given, the held-out
    MSE must come in below recon_tolerance * variance(holdout) or training
    is considered failed.
    """
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 4 or patches.shape[1] != 1:
        raise DimensionError("expected normalized patches [N,1,H,W]")
    if len(patches) < 8:
        raise ContractError("too few patches to fit an autoencoder")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patches))
    n_hold = max(1, int(len(patches) * holdout_fraction))
    hold = patches[order[:n_hold]]
    train = patches[order[n_hold:]]

    ae = Autoencoder(cfg, seed=seed)
    opt = FusedAdam(ae.params, lr=lr)
    for step in range(steps):
        idx = rng.integers(0, len(train), size=batch_size)
        batch = Tensor(train[idx])
        ae.zero_grads()
        loss = mse(ae.decode_tensor(ae.encode_tensor(batch)), batch)
        if not np.isfinite(loss.data).all():
            raise TrainingError(f"autoencoder loss diverged at step {step}")
        loss.backward()
        opt.step()
        if log is not None and (step % 200 == 0 or step == steps - 1):
            log(f"ae step {step} loss {loss.item():.6f}")

    # latent rescaling constant from a training sample (pre-scale std)
    probe = train[rng.choice(len(train), size=min(256, len(train)), replace=False)]
    z = ae.encode(probe)
    std = float(z.std())
    if std <= 0:
        raise TrainingError("autoencoder collapsed: zero latent variance")
    ae.latent_scale = 1.0 / std

    recon = ae.decode(ae.encode(hold))
    hold_mse = float(np.mean((recon - hold) ** 2))
    hold_var = float(hold.var())
    stats = {
        "holdout_mse": hold_mse,
        "holdout_variance": hold_var,
        "latent_scale": ae.latent_scale,
        "steps": steps,
    }
    if recon_tolerance is not None and hold_var > 0:
        if hold_mse > recon_tolerance * hold_var:
            raise TrainingError(
                f"autoencoder reconstruction MSE {hold_mse:.5f} above "
                f"{recon_tolerance:.3f} * variance {hold_var:.5f}"
            )
    return ae, stats


def encode(ae, x):
    """Module-level alias: latent of a [1,H,W] map (or a batch)."""
    return ae.encode(x)


def decode(ae, z):
    return ae.decode(z)


@dataclass
class LatentModels:
    """Everything the latent pipeline needs at inference time."""

    ae: Autoencoder
    unet: object
    sched: object
    norm: object
    dem_scaler: object


def latent_pipeline(models, cg_map_cm, dem_m, cfg, upscale=1, cell_size=1.0):
    """Super-resolve one coarse map (cm) conditioned on a DEM (m).

    Encodes the upsampled, normalized coarse map and the scaled DEM
    separately, concatenates their latents as conditioning, samples in
    latent space (truncated starts noise the encoded coarse latent), then
    decodes and maps back to depths in cm.
    """
    from .data import upsample_bilinear
    from .terrain import DepthGrid

    if models.ae is None:
        raise ContractError("latent pipeline needs a trained autoencoder")
    cg = np.asarray(cg_map_cm, dtype=np.float64)
    if upscale > 1:
        cg = upsample_bilinear(cg, upscale)
    if cg.shape != np.asarray(dem_m).shape:
        raise DimensionError("coarse map (after upsampling) must align with the DEM")
    cg_norm = models.norm.normalize(cg)[None, None]
    dem_norm = models.dem_scaler.normalize(dem_m)[None, None]
    z_cg = models.ae.encode(cg_norm)
    z_dem = models.ae.encode(dem_norm)
    cond = np.concatenate([z_cg, z_dem], axis=1)

    if cfg.start == "truncated" and cfg.m == 0:
        z_out = z_cg
    else:
        z_out = diffusion_sample(
            models.unet, cond, models.sched, cfg,
            target_channels=models.ae.cfg.latent_channels,
        )
    decoded = models.ae.decode(z_out)[0, 0]
    depths = models.norm.denormalize(decoded)
    return DepthGrid(depths=np.maximum(depths, 0.0), cell_size=cell_size)
