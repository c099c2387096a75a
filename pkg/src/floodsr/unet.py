"""Conditional U-Net noise predictor.

The target channel is concatenated with the conditioning channels
(upsampled coarse-grid map and DEM, or their latents) and run through an
encoder-decoder with skip connections. Every level applies two residual
blocks (group norm + SiLU + conv) with an additive timestep-embedding
injection; configured levels add single-head self-attention. Resolution
drops by stride-2 convolutions and is restored by nearest upsampling
followed by a convolution.

Second residual convolutions, attention projections and the output head
start at zero, so a freshly built model predicts zero noise and training
starts from the identity gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Tensor, concat_channels, conv2d, group_norm, linear, no_grad
from .nn.ops import nearest_upsample2x, self_attention, silu


@dataclass
class UnetConfig:
    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 32
    depth: int = 4
    attn_levels: tuple = (2, 3)
    time_embed_dim: int = 128
    groups: int = 8
    channel_mults: tuple = ()

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError("depth must be >= 2")
        if self.base_width < 8:
            raise ContractError("base_width must be >= 8")
        if self.base_width % self.groups:
            raise ContractError("base_width must be divisible by the norm group count")
        if self.time_embed_dim % 2:
            raise ContractError("time_embed_dim must be even")
        if not self.channel_mults:
            self.channel_mults = tuple(2**level for level in range(self.depth))
        if len(self.channel_mults) != self.depth:
            raise ContractError("channel_mults must list one multiplier per level")
        self.attn_levels = tuple(sorted(set(self.attn_levels)))
        for level in self.attn_levels:
            if not 0 <= level < self.depth:
                raise ContractError(f"attention level {level} outside [0, {self.depth})")

    @property
    def widths(self):
        return [self.base_width * m for m in self.channel_mults]

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "attn_levels": list(self.attn_levels),
            "time_embed_dim": self.time_embed_dim,
            "groups": self.groups,
            "channel_mults": list(self.channel_mults),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attn_levels"] = tuple(d.get("attn_levels", ()))
        d["channel_mults"] = tuple(d.get("channel_mults", ()))
        return cls(**d)


def timestep_embedding(t, dim):
    """Sinusoidal embedding: sin(t * w_k) ++ cos(t * w_k), w_k = 10000^(-2k/dim).

    t may be a scalar or a vector; the result is [dim] or [N, dim].
    """
    if dim % 2:
        raise ContractError("embedding dimension must be even")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2, dtype=np.float64)
    omega = np.power(10000.0, -2.0 * k / dim)
    phases = t_arr[:, None] * omega[None, :]
    emb = np.concatenate([np.sin(phases), np.cos(phases)], axis=1)
    if np.isscalar(t) or np.ndim(t) == 0:
        return emb[0]
    return emb


class _Param:
    """Registry helper: creates tensors and records them by name."""

    def __init__(self, params, rng, dtype):
        self.params = params
        self.rng = rng
        self.dtype = dtype

    def conv(self, name, c_in, c_out, k, zero=False, bias=True):
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            std = np.sqrt(2.0 / (c_in * k * k))
            w = self.rng.standard_normal((c_out, c_in, k, k)) * std
        w_t = self._add(name + ".w", w)
        b_t = self._add(name + ".b", np.zeros(c_out)) if bias else None
        return w_t, b_t

    def linear(self, name, d_in, d_out):
        std = np.sqrt(1.0 / d_in)
        return (
            self._add(name + ".w", self.rng.standard_normal((d_out, d_in)) * std),
            self._add(name + ".b", np.zeros(d_out)),
        )

    def norm(self, name, channels):
        return (
            self._add(name + ".g", np.ones(channels)),
            self._add(name + ".b", np.zeros(channels)),
        )

    def _add(self, name, value):
        tensor = Tensor(value.astype(self.dtype), requires_grad=True, dtype=self.dtype)
        self.params[name] = tensor
        return tensor


class _Conv:
    def __init__(self, reg, name, c_in, c_out, k=3, stride=1, zero=False):
        self.w, self.b = reg.conv(name, c_in, c_out, k, zero=zero)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _Norm:
    def __init__(self, reg, name, channels, groups):
        self.g, self.b = reg.norm(name, channels)
        self.groups = groups

    def __call__(self, x):
        return group_norm(x, self.g, self.b, self.groups)


class _ResBlock:
    def __init__(self, reg, name, c_in, c_out, temb_dim, groups):
        self.norm1 = _Norm(reg, name + ".norm1", c_in, groups)
        self.conv1 = _Conv(reg, name + ".conv1", c_in, c_out)
        self.temb_w, self.temb_b = reg.linear(name + ".temb", temb_dim, c_out)
        self.norm2 = _Norm(reg, name + ".norm2", c_out, groups)
        self.conv2 = _Conv(reg, name + ".conv2", c_out, c_out, zero=True)
        self.skip = None if c_in == c_out else _Conv(reg, name + ".skip", c_in, c_out, k=1)
        self.c_out = c_out

    def __call__(self, x, temb):
        h = self.conv1(silu(self.norm1(x)))
        n = h.shape[0]
        inject = linear(silu(temb), self.temb_w, self.temb_b).reshape(n, self.c_out, 1, 1)
        h = h + inject
        h = self.conv2(silu(self.norm2(h)))
        skip = x if self.skip is None else self.skip(x)
        return skip + h


class _Attention:
    def __init__(self, reg, name, channels, groups):
        self.norm = _Norm(reg, name + ".norm", channels, groups)
        self.wq, _ = reg.conv(name + ".q", channels, channels, 1, bias=False)
        self.wk, _ = reg.conv(name + ".k", channels, channels, 1, bias=False)
        self.wv, _ = reg.conv(name + ".v", channels, channels, 1, bias=False)
        self.wo, _ = reg.conv(name + ".proj", channels, channels, 1, zero=True, bias=False)

    def __call__(self, x):
        return x + self_attention(self.norm(x), self.wq, self.wk, self.wv, self.wo)


class Unet:
    """Noise predictor; build once, then call predict/predict_tensor."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        reg = _Param(self.params, rng, np.dtype(dtype))
        widths = cfg.widths
        d = cfg.time_embed_dim

        self.temb_l1 = reg.linear("temb.l1", d, d)
        self.temb_l2 = reg.linear("temb.l2", d, d)
        self.stem = _Conv(reg, "stem", cfg.in_channels, widths[0])

        self.enc = []
        for level, w in enumerate(widths):
            blocks = {
                "res1": _ResBlock(reg, f"enc{level}.res1", w, w, d, cfg.groups),
                "res2": _ResBlock(reg, f"enc{level}.res2", w, w, d, cfg.groups),
                "attn": (
                    _Attention(reg, f"enc{level}.attn", w, cfg.groups)
                    if level in cfg.attn_levels
                    else None
                ),
                "down": (
                    _Conv(reg, f"enc{level}.down", w, widths[level + 1], stride=2)
                    if level < cfg.depth - 1
                    else None
                ),
            }
            self.enc.append(blocks)

        self.dec = []
        for level in range(cfg.depth - 2, -1, -1):
            w = widths[level]
            blocks = {
                "level": level,
                "up": _Conv(reg, f"dec{level}.up", widths[level + 1], w),
                "res1": _ResBlock(reg, f"dec{level}.res1", 2 * w, w, d, cfg.groups),
                "res2": _ResBlock(reg, f"dec{level}.res2", w, w, d, cfg.groups),
                "attn": (
                    _Attention(reg, f"dec{level}.attn", w, cfg.groups)
                    if level in cfg.attn_levels
                    else None
                ),
            }
            self.dec.append(blocks)

        self.out_norm = _Norm(reg, "out.norm", widths[0], cfg.groups)
        self.out_conv = _Conv(reg, "out.conv", widths[0], cfg.out_channels, zero=True)
        self.dtype = np.dtype(dtype)

    # ---- forward ------------------------------------------------------------

    def forward(self, x, t):
        """x: Tensor [N, in_channels, H, W]; t: int or [N] ints."""
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise DimensionError(f"expected {self.cfg.in_channels} channels, got {c}")
        down_factor = 2 ** (self.cfg.depth - 1)
        if h % down_factor or w % down_factor:
            raise DimensionError(
                f"spatial size {h}x{w} not divisible by {down_factor}"
            )
        t_vec = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        emb = timestep_embedding(t_vec, self.cfg.time_embed_dim).astype(self.dtype)
        temb = linear(Tensor(emb, dtype=self.dtype), *self.temb_l1)
        temb = linear(silu(temb), *self.temb_l2)

        hx = self.stem(x)
        skips = []
        for blocks in self.enc:
            hx = blocks["res1"](hx, temb)
            hx = blocks["res2"](hx, temb)
            if blocks["attn"] is not None:
                hx = blocks["attn"](hx)
            skips.append(hx)
            if blocks["down"] is not None:
                hx = blocks["down"](hx)

        for blocks in self.dec:
            hx = blocks["up"](nearest_upsample2x(hx))
            hx = concat_channels([hx, skips[blocks["level"]]])
            hx = blocks["res1"](hx, temb)
            hx = blocks["res2"](hx, temb)
            if blocks["attn"] is not None:
                hx = blocks["attn"](hx)

        return self.out_conv(silu(self.out_norm(hx)))

    def predict_tensor(self, x_t, cond, t):
        """Autograd path: concatenate target and conditioning, run the net."""
        if x_t.shape[0] != cond.shape[0] or x_t.shape[2:] != cond.shape[2:]:
            raise DimensionError("x_t and conditioning must be spatially aligned")
        if x_t.shape[1] + cond.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"{x_t.shape[1]}+{cond.shape[1]} channels != {self.cfg.in_channels}"
            )
        return self.forward(concat_channels([x_t, cond]), t)

    def predict(self, x_t, cond, t):
        """Inference path on plain arrays; no graph is built."""
        with no_grad():
            out = self.predict_tensor(
                Tensor(np.asarray(x_t, dtype=self.dtype)),
                Tensor(np.asarray(cond, dtype=self.dtype)),
                t,
            )
        return out.data

    # ---- parameter plumbing ---------------------------------------------------

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays, prefix=""):
        missing = [n for n in self.params if prefix + n not in arrays]
        if missing:
            raise ContractError(f"checkpoint missing parameters: {missing[:3]}...")
        for name, p in self.params.items():
            incoming = np.asarray(arrays[prefix + name], dtype=p.data.dtype)
            if incoming.shape != p.data.shape:
                raise ContractError(
                    f"parameter {name} shape {incoming.shape} != {p.data.shape}"
                )
            # in-place so optimizer views of the parameter stay attached
            p.data[...] = incoming

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def grad_arrays(self):
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


def build(cfg, seed=0, dtype=np.float32):
    """Construct a Unet with deterministic, seed-driven initialization."""
    return Unet(cfg, seed=seed, dtype=dtype)


def predict(model, x_t, cond, t):
    """Module-level alias for Unet.predict (array in, array out)."""
    return model.predict(x_t, cond, t)
