"""Fused Adam over flat parameter arrays with a zero-gradient skip.

The fused kernel performs the whole update for an entry in one pass and
early-outs when the gradient is exactly zero: the parameter and both
moment buffers stay frozen, as if the entry never saw the step. The step
counter is global and bias correction always uses the global count, even
for entries that sat out earlier steps. A textbook scalar-loop reference
without the skip is kept for cross-checking; the two agree whenever no
gradient entry is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float = 0.1, beta1: float = 0.9,
              beta2: float = 0.99, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n_params, dtype=np.float64),
                   v=np.zeros(n_params, dtype=np.float64),
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


@njit(cache=True, parallel=True)
def _fused_kernel(p, g, m, v, t, lr, b1, b2, eps):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in prange(p.shape[0]):
        gi = g[i]
        if gi == 0.0:
            continue
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


@njit(cache=True)
def _reference_kernel(p, g, m, v, t, lr, b1, b2, eps):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def _check(params: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}")
    finite = np.isfinite(grads)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise ValueError(f"non-finite gradient at flat index {idx}")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr_mult: float = 1.0) -> None:
    """One fused Adam step in place; entries with zero gradient are untouched."""
    _check(params, grads, state)
    state.step += 1
    _fused_kernel(params.ravel(), grads.ravel(), state.m.ravel(), state.v.ravel(),
                  float(state.step), state.lr * lr_mult,
                  state.beta1, state.beta2, state.eps)


def adam_reference_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
                        lr_mult: float = 1.0) -> None:
    """Textbook Adam over every entry (no skip), for verification."""
    _check(params, grads, state)
    state.step += 1
    _reference_kernel(params.ravel(), grads.ravel(), state.m.ravel(), state.v.ravel(),
                      float(state.step), state.lr * lr_mult,
                      state.beta1, state.beta2, state.eps)
