"""Tensor primitives, autodiff entry point and Adam.

Tensors are ``torch.Tensor``; reverse-mode differentiation uses torch's
autograd tape. The wrappers here pin the contracts the rest of the package
relies on (shape errors, degenerate mask rows, epsilon handling) so that the
model code never calls the raw library functions directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row with no allowed entries."""


class ContractError(ValueError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    ``mask`` broadcasts against ``scores``. Blocked entries come out exactly 0.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool, device=scores.device)
    if not bool(mask.any(dim=-1).all()):
        raise DegenerateRowError("mask has a row with every entry blocked")
    filled = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(filled, dim=-1)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = LAYER_NORM_EPS
) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise DimensionError(
            f"gain/shift {tuple(gain.shape)}/{tuple(shift.shape)} do not match last axis {x.shape[-1]}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + shift


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x, approximate="tanh")


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()


def zero_grads(params: Sequence[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def grads_or_zeros(params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamMoments:
    first: list[torch.Tensor] = field(default_factory=list)
    second: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamMoments":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    moments: AdamMoments,
    hyper: AdamHyper,
    t: int,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``moments``."""
    if t < 1:
        raise ContractError("Adam step index starts at 1")
    if not (len(params) == len(grads) == len(moments.first) == len(moments.second)):
        raise DimensionError("params, grads and moments differ in length")
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for p, g, m, v in zip(params, grads, moments.first, moments.second):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise DimensionError(f"shape mismatch in Adam step: {tuple(p.shape)} vs {tuple(g.shape)}")
        m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
        v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
        denom = (v / bc2).sqrt_().add_(hyper.eps)
        p.addcdiv_(m / bc1, denom, value=-hyper.lr)


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], param: torch.Tensor, step: float = 1e-5
) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param``.

    Perturbs ``param`` entry by entry in place and restores it afterwards.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            plus = fn().item()
            flat[k] = orig - step
            minus = fn().item()
            flat[k] = orig
            out[k] = (plus - minus) / (2 * step)
    return grad
