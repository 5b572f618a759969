"""Prediction heads: a bias-free linear action classifier and a
noise-conditioned residual decoder for trajectory and pose."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .errors import ContractError, ShapeError
from .metrics import normalized_mse
from .tensor import DTYPE, relu, softmax_rows

BEST_OF_K = 5


class ActionHead(nn.Module):
    """Logits ``W_act @ x``; each column of ``W_act`` belongs to one prototype
    (or one prototype/modality pair when the head reads the flattened match)."""

    def __init__(self, n_inputs: int, n_actions: int):
        super().__init__()
        self.W = nn.Parameter(torch.empty(n_actions, n_inputs, dtype=DTYPE))
        nn.init.normal_(self.W, std=1.0 / n_inputs ** 0.5)

    def forward(self, x):
        if x.shape[-1] != self.W.shape[1]:
            raise ShapeError(f"action head expects {self.W.shape[1]} inputs, got {x.shape[-1]}")
        return x @ self.W.T


def predict_action(x: torch.Tensor, head: ActionHead) -> torch.Tensor:
    return softmax_rows(head(x))


def predicted_class(probs: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return torch.argmax(probs, dim=-1)


class GenerativeHead(nn.Module):
    """``y = last_frame + scale * g(concat(condition, noise))``.

    ``out_shape`` is ``(T_pred, F)`` for a trajectory (F = 4) or
    ``(T_pred, 17, 2)`` for a pose; ``scale`` holds the per-coordinate image
    normalisers so the decoder works in normalised units.
    """

    def __init__(self, n_inputs: int, out_shape: Sequence[int], scale: Sequence[float],
                 noise_dim: int = 8, hidden: int = 128):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.frame_shape = self.out_shape[1:]
        self.noise_dim = noise_dim
        self.n_inputs = n_inputs
        n_out = 1
        for s in self.out_shape:
            n_out *= s
        self.fc1 = nn.Linear(n_inputs + noise_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.fc3 = nn.Linear(hidden, n_out, dtype=DTYPE)
        self.register_buffer("scale", torch.broadcast_to(torch.as_tensor(scale, dtype=DTYPE), self.frame_shape).clone())

    def forward(self, cond, noise, last_frame):
        if noise.shape[-1] != self.noise_dim:
            raise ShapeError(f"noise dim {noise.shape[-1]} != {self.noise_dim}")
        if cond.shape[-1] != self.n_inputs:
            raise ShapeError(f"condition dim {cond.shape[-1]} != {self.n_inputs}")
        if tuple(last_frame.shape[-len(self.frame_shape):]) != self.frame_shape:
            raise ShapeError(f"last frame shape {tuple(last_frame.shape)} vs {self.frame_shape}")
        h = relu(self.fc1(torch.cat([cond, noise], dim=-1)))
        h = relu(self.fc2(h))
        resid = self.fc3(h).reshape(*cond.shape[:-1], *self.out_shape)
        return last_frame.unsqueeze(-len(self.out_shape)) + resid * self.scale


def generate_sequence(cond, noise, head: GenerativeHead, last_frame) -> torch.Tensor:
    return head(cond, noise, last_frame)


def best_of_k(candidates, truth, img_size):
    """Pick the candidate with the lowest normalised MSE.

    Returns ``(candidate, error, index)``; the first candidate wins ties.
    """
    if len(candidates) == 0:
        raise ContractError("best_of_k needs at least one candidate")
    errors = [normalized_mse(c, truth, img_size) for c in candidates]
    best = min(range(len(errors)), key=errors.__getitem__)
    return candidates[best], errors[best], best
