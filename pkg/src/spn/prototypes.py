"""Prototype bottleneck: matching, masking and nearest-sample explanations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import RangeError, ShapeError
from .tensor import DTYPE, relu


class PrototypeBank(nn.Module):
    """N x D prototype matrix, initialised uniformly in [-1/sqrt(D), 1/sqrt(D)]."""

    def __init__(self, n_prototypes: int, dim: int):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.P = nn.Parameter(torch.empty(n_prototypes, dim, dtype=DTYPE).uniform_(-bound, bound))

    @property
    def n(self) -> int:
        return self.P.shape[0]


@dataclass
class MatchMatrix:
    """Non-negative prototype/modality similarities, ``[B x] N x M``."""

    values: torch.Tensor

    @property
    def aggregate(self) -> torch.Tensor:
        return self.values.sum(dim=-1)

    @property
    def n_prototypes(self) -> int:
        return self.values.shape[-2]


def match(E: torch.Tensor, P: torch.Tensor | PrototypeBank) -> MatchMatrix:
    """``E'[n, m] = relu(p_n . e_m)`` for embeddings ``[B x] M x D``."""
    if isinstance(P, PrototypeBank):
        P = P.P
    if E.shape[-1] != P.shape[-1]:
        raise ShapeError(f"embedding dim {E.shape[-1]} != prototype dim {P.shape[-1]}")
    return MatchMatrix(relu(torch.matmul(P, E.transpose(-1, -2))))


def keep_mask(keep: Iterable[int] | None, n: int) -> torch.Tensor:
    mask = torch.zeros(n, dtype=DTYPE)
    if keep is None:
        return mask + 1.0
    for k in keep:
        if not 0 <= int(k) < n:
            raise RangeError(f"prototype id {k} outside [0, {n})")
        mask[int(k)] = 1.0
    return mask


def mask_prototypes(mm: MatchMatrix, keep: Iterable[int]) -> MatchMatrix:
    """Zero every prototype row not in ``keep`` (across all modalities)."""
    mask = keep_mask(keep, mm.n_prototypes)
    return MatchMatrix(mm.values * mask[:, None])


@dataclass
class ExplanationSet:
    prototype: int
    entries: list[tuple[int, int, float]] = field(default_factory=list)  # (sample id, modality, activation)
    concepts: list[list[int]] | None = None

    @property
    def sample_ids(self) -> list[int]:
        return [e[0] for e in self.entries]


def nearest_samples(n: int, activations, k: int, sample_ids: Sequence[int] | None = None) -> ExplanationSet:
    """Top-``k`` (sample, modality) entries of prototype ``n``.

    ``activations`` is S x N x M (all samples of a split). Entries are pooled
    over samples and modalities; ties go to the lower (sample id, modality).
    """
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 3:
        raise ShapeError("activations must be S x N x M")
    S, N, M = acts.shape
    if not 0 <= n < N:
        raise RangeError(f"prototype {n} outside [0, {N})")
    if k > S * M or k < 1:
        raise RangeError(f"K={k} but the pool holds {S * M} entries")
    ids = np.arange(S) if sample_ids is None else np.asarray(sample_ids)
    pool = acts[:, n, :].ravel()
    sid = np.repeat(ids, M)
    mid = np.tile(np.arange(M), S)
    order = np.lexsort((mid, sid, -pool))[:k]
    return ExplanationSet(n, [(int(sid[i]), int(mid[i]), float(pool[i])) for i in order])
