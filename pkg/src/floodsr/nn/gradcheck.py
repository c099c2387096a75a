"""Finite-difference gradient verification.

Central differences at h=1e-3 need float64 inputs to stay above roundoff,
so every check here runs in 64-bit. Entries with both analytic and numeric
gradients below the dead-zone threshold are accepted as matching zeros.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

DEAD_ZONE = 1e-7


def rel_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    if diff < DEAD_ZONE:
        return 0.0
    return diff / denom


def numeric_grad(f, tensors, wrt, index, h=1e-3):
    """Central difference of scalar f(*tensors) w.r.t. one entry of tensors[wrt]."""
    arr = tensors[wrt].data
    orig = arr.flat[index]
    arr.flat[index] = orig + h
    plus = f(*tensors).item()
    arr.flat[index] = orig - h
    minus = f(*tensors).item()
    arr.flat[index] = orig
    return (plus - minus) / (2.0 * h)


def check_gradients(f, tensors, rng, entries_per_tensor=5, h=1e-3):
    """Compare analytic and finite-difference gradients of scalar f(*tensors).

    Checks a random subset of entries of every tensor that requires a
    gradient. Returns the worst relative error observed.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.zero_grad()
    loss = f(*tensors)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        assert t.grad is not None, "no gradient reached a checked tensor"
        n = t.data.size
        count = min(entries_per_tensor, n)
        idx = rng.choice(n, size=count, replace=False)
        for j in idx:
            num = numeric_grad(f, tensors, i, j, h=h)
            worst = max(worst, rel_error(float(t.grad.flat[j]), num))
    return worst


def check_param_gradients(params, loss_fn, rng, entries_per_tensor=3, h=1e-3):
    """Gradient-check a named parameter dict against a closure loss.

    loss_fn() must rebuild the loss from the current parameter values on
    every call (finite differencing mutates them between calls).
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 parameters")
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    worst = 0.0
    worst_name = None
    for name, p in params.items():
        n = p.data.size
        count = min(entries_per_tensor, n)
        idx = rng.choice(n, size=count, replace=False)
        for j in idx:
            orig = p.data.flat[j]
            p.data.flat[j] = orig + h
            plus = loss_fn().item()
            p.data.flat[j] = orig - h
            minus = loss_fn().item()
            p.data.flat[j] = orig
            num = (plus - minus) / (2.0 * h)
            err = rel_error(float(analytic[name].flat[j]), num)
            if err > worst:
                worst = err
                worst_name = name
    return worst, worst_name
