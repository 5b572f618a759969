"""Training objectives."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, InvalidValueError, ShapeError

CE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_cluster: float = 0.001
    lambda_l1: float = 0.01
    tau: float = 0.1
    w_action: float = 1.0
    w_traj: float = 1.0
    w_pose: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        for name in ("lambda_cluster", "lambda_l1", "w_action", "w_traj", "w_pose"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class LossReport:
    cluster: float
    l1: float
    action_ce: float
    traj_mse: float
    pose_mse: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def clustering_loss(emb: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-modal contrastive loss over a B x M x D batch of embeddings.

    For every sample i and modality pair (m, n), including m == n, the
    similarity of e[i, m] with e[i, n] competes against e[i, m] with e[j, n]
    for all j in the batch. Averaged over B * M^2 terms.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if emb.dim() != 3:
        raise ShapeError("clustering_loss expects B x M x D embeddings")
    B, M, _ = emb.shape
    # sim[i, m, n, j] = e[i, m] . e[j, n] / tau
    sim = torch.einsum("imd,jnd->imnj", emb, emb) / tau
    positive = torch.diagonal(sim, dim1=0, dim2=3)  # m x n x i
    log_norm = torch.logsumexp(sim, dim=3)           # i x m x n
    return (log_norm - positive.permute(2, 0, 1)).sum() / (B * M * M)


def l1_sparsity(match_values: torch.Tensor) -> torch.Tensor:
    """Mean absolute value of the match entries."""
    return match_values.abs().mean()


def cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log p[true]`` with p clamped below at 1e-12."""
    if probs.dim() == 1:
        probs, target = probs[None], torch.as_tensor(target).reshape(1)
    if probs.shape[0] != target.shape[0]:
        raise ShapeError("probs and targets disagree on batch size")
    p = probs.gather(1, target.long().reshape(-1, 1)).squeeze(1)
    return -torch.log(p.clamp_min(CE_CLAMP)).mean()


def coordinate_scale(last_dim: int, img_size, like: torch.Tensor | None = None):
    W, H = float(img_size[0]), float(img_size[1])
    if last_dim == 4:
        vals = [W, H, W, H]
    elif last_dim == 2:
        vals = [W, H]
    else:
        raise ShapeError(f"cannot normalise coordinates with last dimension {last_dim}")
    return torch.tensor(vals, dtype=torch.float64) if like is None else like.new_tensor(vals)


def sequence_mse(pred: torch.Tensor, true: torch.Tensor, img_size) -> torch.Tensor:
    """MSE over all coordinates after dividing x-like values by width and
    y-like values by height."""
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(true.shape)}")
    scale = coordinate_scale(pred.shape[-1], img_size, pred)
    return (((pred - true) / scale) ** 2).mean()


def task_losses(probs, action, traj_pred, traj_true, pose_pred, pose_true, img_size):
    return (cross_entropy(probs, action),
            sequence_mse(traj_pred, traj_true, img_size),
            sequence_mse(pose_pred, pose_true, img_size))


def total_loss(cluster, l1, action_ce, traj_mse, pose_mse, cfg: LossConfig):
    """Weighted sum of the regularisers and the task losses."""
    for name, v in (("cluster", cluster), ("l1", l1), ("action_ce", action_ce),
                    ("traj_mse", traj_mse), ("pose_mse", pose_mse)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise InvalidValueError(f"loss component {name} is not finite")
    return (cfg.lambda_cluster * cluster + cfg.lambda_l1 * l1
            + cfg.w_action * action_ce + cfg.w_traj * traj_mse + cfg.w_pose * pose_mse)
