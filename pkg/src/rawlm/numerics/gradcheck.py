"""Finite-difference oracle for the reverse-mode sweep."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences ``(f(x+eps) - f(x-eps)) / (2 eps)`` in float64.

    The probe runs on a float64 copy of ``x``; numpy type promotion then
    carries every downstream operation that touches ``x`` in 64-bit, so the
    oracle is not limited by 32-bit rounding of the path it checks.  With
    ``indices`` only those flat entries are probed; the rest stay zero.
    """
    probe = Tensor(x.data.astype(np.float64), dtype=np.float64)
    flat = probe.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        up = np.float64(f(probe).item())
        flat[i] = orig - eps
        down = np.float64(f(probe).item())
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(x.shape)


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    with Tape() as tape:
        y = f(x)
    if y.node_id is None:
        # f does not depend on anything differentiable
        return np.zeros(x.shape, dtype=np.float64)
    (g,) = tape.gradients(y, [x])
    if g is None:
        return np.zeros(x.shape, dtype=np.float64)
    return np.asarray(g, dtype=np.float64)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / (|a| + |n|)`` elementwise; entries with ``|a| + |n| <= floor`` count as 0."""
    denom = np.abs(analytic) + np.abs(numeric)
    err = np.zeros_like(denom)
    ok = denom > floor
    err[ok] = np.abs(analytic - numeric)[ok] / denom[ok]
    return err


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3, floor: float = 1e-6,
               max_elements: Optional[int] = None, seed: int = 0) -> float:
    """Worst relative disagreement between ``backward`` and central differences.

    ``f`` must be scalar valued and deterministic (dropout off) and ``x`` must
    require grad.  The analytic side runs at ``x``'s own precision.  For large
    tensors ``max_elements`` probes a seeded random subset of entries.
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    a = analytic_gradient(f, x)
    idx = None
    if max_elements is not None and x.data.size > max_elements:
        idx = np.sort(np.random.default_rng(seed).choice(x.data.size, max_elements, replace=False))
    n = numeric_gradient(f, x, eps, idx)
    if idx is not None:
        a, n = a.reshape(-1)[idx], n.reshape(-1)[idx]
    err = relative_errors(a, n, floor)
    return float(err.max()) if err.size else 0.0
