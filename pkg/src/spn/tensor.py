"""Float64 array substrate.

Arrays are ``torch.Tensor`` objects in float64 and the gradient tape is torch's
autograd graph. This module adds the checked primitives the model is built
from, a hand-written Adam update, and a central-difference gradient checker
used as an independent oracle for every differentiable composite.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .errors import ContractError, InvalidValueError, ShapeError

DTYPE = torch.float64
FD_FLOOR_FACTOR = 1e5

# When set, relu() appends its pre-activations here so gradient_check can
# detect coordinates that sit next to a kink.
_kink_probe: list[torch.Tensor] | None = None


def as_array(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def require_finite(x: torch.Tensor, what: str = "input") -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidValueError(f"{what} contains NaN or Inf")


def relu(x: torch.Tensor) -> torch.Tensor:
    """Elementwise max(x, 0). The gradient at exactly 0 is 0."""
    require_finite(x, "relu input")
    if _kink_probe is not None:
        _kink_probe.append(x.detach().clone())
    return torch.relu(x)


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, shifted by the row max before exponentiating."""
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last dimension")
    shifted = x - x.max(dim=-1, keepdim=True).values
    ex = torch.exp(shifted)
    return ex / ex.sum(dim=-1, keepdim=True)


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: torch.Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param, dtype=DTYPE),
                   torch.zeros_like(param, dtype=DTYPE), **hyper)


def adam_step(params: torch.Tensor, grads: torch.Tensor, state: AdamState):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Returns ``(params, state)``; the state's step counter is incremented.
    """
    if params.shape != grads.shape:
        raise ShapeError(f"params {tuple(params.shape)} vs grads {tuple(grads.shape)}")
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError("Adam moment shapes do not match the parameter")
    with torch.no_grad():
        state.step += 1
        state.m.mul_(state.beta1).add_(grads, alpha=1.0 - state.beta1)
        state.v.mul_(state.beta2).addcmul_(grads, grads, value=1.0 - state.beta2)
        m_hat = state.m / (1.0 - state.beta1 ** state.step)
        v_hat = state.v / (1.0 - state.beta2 ** state.step)
        params.sub_(state.lr * m_hat / (torch.sqrt(v_hat) + state.eps))
    return params, state


class Adam:
    """Keeps one AdamState per named parameter and clips by global norm."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm: float | None = 5.0):
        self.params = list(named_params)
        self.clip_norm = clip_norm
        self.states = {
            name: AdamState.zeros_like(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name, p in self.params
        }

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for _, p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for (name, p), g in zip(self.params, grads):
            adam_step(p.data, g * scale if scale != 1.0 else g, self.states[name])
        return norm


@contextlib.contextmanager
def _probing() -> Iterator[list[torch.Tensor]]:
    global _kink_probe
    saved, _kink_probe = _kink_probe, []
    try:
        yield _kink_probe
    finally:
        _kink_probe = saved


def _relu_pattern(fn: Callable[[], torch.Tensor]) -> list[torch.Tensor]:
    with _probing() as probe:
        fn()
    return [torch.sign(t) for t in probe]


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)
    floor: float = 0.0


def gradient_check(
    fn: Callable[[], torch.Tensor],
    leaves: Sequence[torch.Tensor],
    *,
    step: float = 1e-6,
    kink_radius: float = 1e-5,
    max_coords: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and closes over ``leaves``; the leaves are
    perturbed in place and restored. A coordinate is skipped (and listed in
    ``excluded`` as ``(leaf index, flat index)``) when moving it by
    ``kink_radius`` either way flips the sign of any relu pre-activation.
    ``max_coords`` checks a seeded random subset of coordinates instead of all
    of them. Relative error is ``|ad - fd| / max(|ad|, |fd|, floor)``, where
    the floor is raised to ``1e5 * eps * max(|f|, 1) / step``: a central
    difference cannot resolve gradients below that level to 1e-4.
    """
    leaves = list(leaves)
    for leaf in leaves:
        if leaf.dtype != DTYPE:
            raise ContractError("gradient_check needs float64 leaves")
        if not leaf.is_contiguous():
            raise ContractError("gradient_check needs contiguous leaves")
    with torch.enable_grad():
        for leaf in leaves:
            leaf.grad = None
            leaf.requires_grad_(True)
        out = fn()
        if out.numel() != 1:
            raise ContractError(f"function must return a scalar, got shape {tuple(out.shape)}")
        grads = torch.autograd.grad(out, leaves, allow_unused=True)
    resolution = np.finfo(np.float64).eps * max(abs(float(out.detach())), 1.0) / step
    floor = max(floor, FD_FLOOR_FACTOR * resolution)
    grads = [torch.zeros(l.numel(), dtype=DTYPE) if g is None else g.detach().reshape(-1)
             for l, g in zip(leaves, grads)]

    coords = [(i, j) for i, leaf in enumerate(leaves) for j in range(leaf.numel())]
    if max_coords is not None and max_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    base_pattern = _relu_pattern(fn)
    worst = 0.0
    excluded: list[tuple[int, int]] = []
    checked = 0
    with torch.no_grad():
        for i, j in coords:
            flat = leaves[i].data.view(-1)
            orig = flat[j].item()
            kinked = False
            for delta in (kink_radius, -kink_radius):
                flat[j] = orig + delta
                pattern = _relu_pattern(fn)
                if any(not torch.equal(a, b) for a, b in zip(pattern, base_pattern)):
                    kinked = True
                    break
            if kinked:
                flat[j] = orig
                excluded.append((i, j))
                continue
            flat[j] = orig + step
            x_plus = flat[j].item()
            f_plus = float(fn())
            flat[j] = orig - step
            x_minus = flat[j].item()
            f_minus = float(fn())
            flat[j] = orig
            # divide by the representable step, not the nominal 2 * step
            fd = (f_plus - f_minus) / (x_plus - x_minus)
            ad = float(grads[i][j])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            worst = max(worst, rel)
            checked += 1
    return GradCheckResult(worst, checked, excluded, floor)
