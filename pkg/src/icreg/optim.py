"""Adam optimizer over flat parameter arrays, with a fixed-iteration loop.

Used for both the 12 affine entries and full displacement fields. No early
stopping: iteration counts are part of the method's configuration, which keeps
runs reproducible. The learning rate at step t is lr0 * decay**t; instance
optimization uses decay = 1.0 (constant rate).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class AdamState:
    """Moment accumulators and schedule for one optimization run."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr0: float
    decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def fresh(cls, shape: tuple[int, ...], lr0: float, decay: float = 1.0) -> "AdamState":
        return cls(step=0, m=np.zeros(shape), v=np.zeros(shape), lr0=lr0, decay=decay)


def adam_step(state: AdamState, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update.

    Returns (new_state, update); the update is the additive step to SUBTRACT
    from the parameters for minimization.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"grad shape {g.shape} != parameter shape {state.m.shape}")
    finite = np.isfinite(g)
    if not finite.all():
        idx = tuple(int(k) for k in np.unravel_index(int(np.argmin(finite)), g.shape))
        raise ValueError(f"non-finite gradient entry at index {idx}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    lr = state.lr0 * state.decay**state.step
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return replace(state, step=t, m=m, v=v), update


def minimize(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params0: np.ndarray,
    iterations: int,
    lr0: float,
    decay: float = 1.0,
) -> tuple[np.ndarray, list[float]]:
    """Run exactly `iterations` Adam steps; returns (params, loss trace).

    The trace holds the loss at each evaluated iterate (before its step), one
    entry per iteration. Exactly one loss+gradient evaluation per iteration.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    params = np.array(params0, dtype=np.float64)
    state = AdamState.fresh(params.shape, lr0, decay)
    trace: list[float] = []
    for i in range(iterations):
        try:
            loss, grad = loss_and_grad(params)
        except Exception as exc:
            raise RuntimeError(f"objective evaluation failed at iteration {i}") from exc
        trace.append(float(loss))
        state, update = adam_step(state, grad)
        params = params - update
    return params, trace
