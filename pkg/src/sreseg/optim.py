"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamWState", "adamw_init", "adamw_step", "cosine_lr"]


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus hyperparameters and step count."""

    lr0: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_init(params: dict[str, np.ndarray], lr0: float = 5e-4,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-4) -> AdamWState:
    state = AdamWState(lr0=lr0, betas=betas, eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float | None = None) -> AdamWState:
    """One bias-corrected update, in place on the parameter arrays.

    Weight decay is decoupled: it shrinks parameters directly instead of
    being added to the gradient.
    """
    if lr is None:
        lr = state.lr0
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / corr1
        v_hat = v / corr2
        if state.weight_decay:
            p -= (lr * state.weight_decay) * p
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at step == total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return float(lr0 * 0.5 * (1.0 + np.cos(np.pi * frac)))
