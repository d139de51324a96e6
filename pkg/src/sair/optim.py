"""Deterministic Adam, shared by latent inversion and restoration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    """Parameters plus first/second moment accumulators."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, params: np.ndarray) -> "AdamState":
        p = np.array(params, dtype=np.float64)
        return cls(params=p, m=np.zeros_like(p), v=np.zeros_like(p))


def adam_step(
    state: AdamState,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> AdamState:
    """One bias-corrected Adam update; returns a fresh state.

    ``t`` is the 1-based step index used for bias correction.  Non-finite
    gradients abort with the step index in the message.
    """
    if t < 1:
        raise ValueError(f"adam_step: step index must be >= 1, got {t}")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ValueError(f"adam_step: gradient shape {g.shape} != params shape {state.params.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"adam_step: non-finite gradient at iteration {t}")
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.all(np.isfinite(params)):
        raise NonFiniteError(f"adam_step: non-finite parameters at iteration {t}")
    return AdamState(params=params, m=m, v=v)
