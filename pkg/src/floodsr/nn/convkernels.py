"""Raw convolution arithmetic behind conv2d.

Two interchangeable kernel sets: a pure-numpy einsum implementation and,
when torch is importable, torch's CPU convolution kernels (used like a
BLAS: arrays in, arrays out, no torch autograd). Select explicitly with
FLOODSR_CONV_BACKEND=numpy|torch; the default prefers torch.

Both backends implement the same three contracts:
    forward(x, w, stride, pad)                input -> output
    grad_w(x, g, kernel_shape, stride, pad)   input + output grad -> dW
    grad_x(g, w, stride, pad, h, w)           output grad -> input grad
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError


def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _padded(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


class NumpyConv:
    name = "numpy"

    @staticmethod
    def forward(x, w, stride, pad):
        return np.einsum(
            "nchwij,ocij->nohw", _windows(_padded(x, pad), w.shape[2], stride), w,
            optimize=True,
        )

    @staticmethod
    def grad_w(x, g, kernel_shape, stride, pad):
        return np.einsum(
            "nohw,nchwij->ocij", g, _windows(_padded(x, pad), kernel_shape[2], stride),
            optimize=True,
        )

    @staticmethod
    def grad_x(g, w, stride, pad, h, wd):
        n, o, ho, wo = g.shape
        _, c, k, _ = w.shape
        if stride > 1:
            dilated = np.zeros(
                (n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype
            )
            dilated[:, :, ::stride, ::stride] = g
        else:
            dilated = g
        gp = np.pad(dilated, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        flipped = w[:, :, ::-1, ::-1]
        full = np.einsum("nohwij,ocij->nchw", _windows(gp, k, 1), flipped, optimize=True)
        dx = np.zeros((n, c, h, wd), dtype=g.dtype)
        rows = min(full.shape[2] - pad, h)
        cols = min(full.shape[3] - pad, wd)
        dx[:, :, :rows, :cols] = full[:, :, pad : pad + rows, pad : pad + cols]
        return dx


class TorchConv:
    name = "torch"

    def __init__(self):
        import torch
        import torch.nn.functional as F

        # a second intra-op thread pool fights numpy's BLAS pool for the
        # same cores; keeping torch single-threaded is strictly faster here
        torch.set_num_threads(1)
        self.torch = torch
        self.F = F

    def _t(self, arr):
        return self.torch.from_numpy(np.ascontiguousarray(arr))

    def forward(self, x, w, stride, pad):
        with self.torch.no_grad():
            out = self.F.conv2d(self._t(x), self._t(w), stride=stride, padding=pad)
        return out.numpy()

    def grad_w(self, x, g, kernel_shape, stride, pad):
        with self.torch.no_grad():
            out = self.torch.nn.grad.conv2d_weight(
                self._t(x), kernel_shape, self._t(g), stride=stride, padding=pad
            )
        return out.numpy()

    def grad_x(self, g, w, stride, pad, h, wd):
        n, o, ho, wo = g.shape
        _, c, k, _ = w.shape
        torch = self.torch
        with torch.no_grad():
            gt = self._t(g)
            if stride > 1:
                dilated = torch.zeros(
                    (n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                    dtype=gt.dtype,
                )
                dilated[:, :, ::stride, ::stride] = gt
            else:
                dilated = gt
            flipped = self._t(w).flip(2, 3).transpose(0, 1).contiguous()
            full = self.F.conv2d(dilated, flipped, padding=k - 1)
            rows = min(full.shape[2] - pad, h)
            cols = min(full.shape[3] - pad, wd)
            if rows == h and cols == wd:
                # covers the whole input; hand back a view, callers copy
                return full.numpy()[:, :, pad : pad + h, pad : pad + wd]
            dx = torch.zeros((n, c, h, wd), dtype=gt.dtype)
            dx[:, :, :rows, :cols] = full[:, :, pad : pad + rows, pad : pad + cols]
        return dx.numpy()


_ACTIVE = None


def active_backend():
    """Resolve the kernel backend once, honoring FLOODSR_CONV_BACKEND."""
    global _ACTIVE
    if _ACTIVE is None:
        choice = os.environ.get("FLOODSR_CONV_BACKEND", "auto")
        if choice not in ("auto", "numpy", "torch"):
            raise ContractError(f"unknown conv backend {choice!r}")
        if choice == "numpy":
            _ACTIVE = NumpyConv()
        else:
            try:
                _ACTIVE = TorchConv()
            except ImportError:
                if choice == "torch":
                    raise ContractError("torch conv backend requested but not importable")
                _ACTIVE = NumpyConv()
    return _ACTIVE


def _reset_backend_for_tests():
    global _ACTIVE
    _ACTIVE = None
