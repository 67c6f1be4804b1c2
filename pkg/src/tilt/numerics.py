"""Tensor primitives, gradient utilities, AdamW and learning-rate schedules.

Tensors and reverse-mode differentiation come from torch; this module keeps
the handful of primitives the model is written against so their numerical
contracts can be tested in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch

RMS_EPS = 1e-6


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if logits.dim() == 0:
        raise ValueError("softmax_rows needs at least one axis, got a scalar")
    z = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ValueError(f"rms_norm needs non-empty rows, got shape {tuple(x.shape)}")
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"gain shape {tuple(gain.shape)} does not match row size {x.shape[-1]}")
    scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x * scale * gain


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(
        loss.reshape(()), [params[n] for n in names], allow_unused=True
    )
    return {
        n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)
    }


def finite_difference(
    fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: Sequence[int], h: float = 1e-4
) -> float:
    """Central difference of scalar ``fn()`` w.r.t. one element of ``tensor``."""
    idx = tuple(index)
    with torch.no_grad():
        orig = tensor[idx].item()
        tensor[idx] = orig + h
        up = fn().item()
        tensor[idx] = orig - h
        down = fn().item()
        tensor[idx] = orig
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class OptimizerState:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState
) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m / c1, denom, value=-state.lr)


def lr_linear(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ValueError("linear schedule needs total > 0")
    return max(0.0, base_lr * (1 - step / total))


def lr_constant(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ValueError("schedule needs total > 0")
    return base_lr


SCHEDULES: dict[str, Callable[[int, int, float], float]] = {
    "linear": lr_linear,
    "constant": lr_constant,
}


def all_finite(tensors: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)


__all__ = [
    "softmax_rows",
    "rms_norm",
    "backward",
    "finite_difference",
    "relative_error",
    "OptimizerState",
    "adamw_step",
    "lr_linear",
    "lr_constant",
    "SCHEDULES",
    "all_finite",
]
