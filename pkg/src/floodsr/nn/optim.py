"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericError


@dataclass
class AdamState:
    """Optimizer hyperparameters plus per-parameter moment estimates."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


class FusedAdam:
    """Adam over a fixed parameter set, fused into flat buffers.

    Same update rule as adam_step (equal up to float rounding order), but
    pays the numpy dispatch cost once per update instead of once per
    tensor. The parameter tensors are re-pointed at views of one flat
    buffer, so updates need no scatter step; anything replacing .data
    wholesale (instead of writing in place) would detach a parameter from
    training.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps_stab=1e-8):
        self.names = sorted(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_stab=eps_stab)
        total = sum(params[n].data.size for n in self.names)
        dtype = params[self.names[0]].data.dtype
        self.flat_p = np.empty(total, dtype=dtype)
        self.flat_m = np.zeros(total, dtype=dtype)
        self.flat_v = np.zeros(total, dtype=dtype)
        self.flat_g = np.empty(total, dtype=dtype)
        self.slices = {}
        offset = 0
        for name in self.names:
            p = params[name]
            end = offset + p.data.size
            self.slices[name] = slice(offset, end)
            self.flat_p[offset:end] = p.data.reshape(-1)
            p.data = self.flat_p[offset:end].reshape(p.data.shape)
            offset = end
        self.params = params
        # expose the moment views so checkpoints can serialize them
        self.state.first_moment = {
            n: self.flat_m[self.slices[n]].reshape(params[n].data.shape)
            for n in self.names
        }
        self.state.second_moment = {
            n: self.flat_v[self.slices[n]].reshape(params[n].data.shape)
            for n in self.names
        }

    def load_moments(self, first, second, step_count):
        for name in self.names:
            self.flat_m[self.slices[name]] = np.asarray(first[name]).reshape(-1)
            self.flat_v[self.slices[name]] = np.asarray(second[name]).reshape(-1)
        self.state.step_count = step_count

    def step(self):
        s = self.state
        s.step_count += 1
        for name in self.names:
            grad = self.params[name].grad
            sl = self.slices[name]
            if grad is None:
                self.flat_g[sl] = 0.0
            else:
                if not np.isfinite(grad).all():
                    raise NumericError(f"non-finite gradient for {name}")
                self.flat_g[sl] = grad.reshape(-1)
        g, m, v, p = self.flat_g, self.flat_m, self.flat_v, self.flat_p
        np.multiply(m, s.beta1, out=m)
        m += (1.0 - s.beta1) * g
        np.multiply(v, s.beta2, out=v)
        np.multiply(g, g, out=g)
        v += (1.0 - s.beta2) * g
        bc1 = 1.0 - s.beta1**s.step_count
        bc2 = 1.0 - s.beta2**s.step_count
        np.sqrt(v / bc2, out=g)
        g += s.eps_stab
        np.divide(m, g, out=g)
        g *= s.lr / bc1
        p -= g


def adam_step(params, grads, state):
    """Apply one Adam update in place; returns the mutated state.

    params: dict name -> Tensor (leaves); grads: dict name -> ndarray.
    Parameters without a gradient entry are left untouched.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
        v = state.second_moment.get(name)
        if v is None:
            v = state.second_moment[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps_stab)).astype(p.data.dtype)
    return state
