"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Moment accumulators are created lazily on the first step.  Non-finite
    gradients abort before any parameter is touched.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for name, g in grads.items():
            if name not in state.m:
                state.m[name] = torch.zeros_like(params[name])
                state.v[name] = torch.zeros_like(params[name])
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            params[name].sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.eps))
