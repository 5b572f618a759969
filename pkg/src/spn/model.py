"""The full network: encoders -> prototype matching -> heads, plus batching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoders import MODALITIES, EncoderStack, encode_all
from .errors import ConfigError
from .heads import ActionHead, GenerativeHead, predict_action
from .prototypes import MatchMatrix, PrototypeBank, match
from .synth import N_JOINTS, GeneratorConfig, Sample
from .tensor import DTYPE

HEAD_INPUTS = ("aggregate", "flatten")


@dataclass
class Batch:
    ids: np.ndarray
    payloads: dict[str, torch.Tensor]
    action: torch.Tensor
    traj_fut: torch.Tensor
    pose_fut: torch.Tensor
    traj_last: torch.Tensor
    pose_last: torch.Tensor
    img_size: tuple[int, int]
    concepts: list[list[int]]

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            ids=self.ids[idx],
            payloads={k: v[t] for k, v in self.payloads.items()},
            action=self.action[t], traj_fut=self.traj_fut[t], pose_fut=self.pose_fut[t],
            traj_last=self.traj_last[t], pose_last=self.pose_last[t],
            img_size=self.img_size, concepts=[self.concepts[i] for i in idx],
        )


def collate(samples: Sequence[Sample]) -> Batch:
    if not samples:
        raise ConfigError("cannot batch an empty sample list")
    sizes = {tuple(s.img_size) for s in samples}
    if len(sizes) != 1:
        raise ConfigError("all samples in a batch must share one image size")

    def stack(name):
        return torch.as_tensor(np.stack([getattr(s, name) for s in samples]), dtype=DTYPE)

    k_nb = samples[0].social.shape[0]
    present = np.array([[1.0 if k < s.neighbor_count else 0.0 for k in range(k_nb)] for s in samples])
    social = torch.cat([stack("social"), torch.as_tensor(present, dtype=DTYPE)[..., None]], dim=-1)
    traj_obs, pose_obs = stack("traj_obs"), stack("pose_obs")
    return Batch(
        ids=np.array([s.id for s in samples], dtype=np.int64),
        payloads={"ctx": stack("ctx"), "pose": pose_obs, "traj": traj_obs,
                  "ego": stack("ego_obs"), "social": social},
        action=torch.as_tensor([s.action for s in samples], dtype=torch.long),
        traj_fut=stack("traj_fut"), pose_fut=stack("pose_fut"),
        traj_last=traj_obs[:, -1], pose_last=pose_obs[:, -1],
        img_size=sizes.pop(), concepts=[list(s.concepts) for s in samples],
    )


class SPN(nn.Module):
    def __init__(self, gen: GeneratorConfig, n_prototypes: int = 16, dim: int = 64,
                 modalities: Sequence[str] = MODALITIES, width: int = 64, heads: int = 4,
                 noise_dim: int = 8, hidden: int = 128, head_input: str = "aggregate"):
        super().__init__()
        if head_input not in HEAD_INPUTS:
            raise ConfigError(f"head_input must be one of {HEAD_INPUTS}")
        self.gen = gen
        self.head_input = head_input
        self.encoders = EncoderStack(gen, modalities, dim, width, heads)
        self.bank = PrototypeBank(n_prototypes, dim)
        n_mod = len(self.encoders.modalities)
        n_cond = n_prototypes if head_input == "aggregate" else n_prototypes * n_mod
        W, H = gen.img_size
        self.action_head = ActionHead(n_cond, gen.n_actions)
        self.traj_head = GenerativeHead(n_cond, (gen.t_pred, 4), [W, H, W, H], noise_dim, hidden)
        self.pose_head = GenerativeHead(n_cond, (gen.t_pred, N_JOINTS, 2), [W, H], noise_dim, hidden)

    @property
    def n_prototypes(self) -> int:
        return self.bank.n

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.encoders.modalities

    @property
    def noise_dim(self) -> int:
        return self.traj_head.noise_dim

    def embed(self, payloads) -> torch.Tensor:
        return encode_all(payloads, self.encoders)

    def match(self, emb, keep_mask: torch.Tensor | None = None) -> torch.Tensor:
        values = match(emb, self.bank).values
        if keep_mask is not None:
            values = values * keep_mask[:, None]
        return values

    def condition(self, match_values: torch.Tensor) -> torch.Tensor:
        if self.head_input == "aggregate":
            return MatchMatrix(match_values).aggregate
        return match_values.reshape(*match_values.shape[:-2], -1)

    def forward(self, batch: Batch, traj_noise, pose_noise, keep_mask=None) -> dict:
        emb = self.embed(batch.payloads)
        values = self.match(emb, keep_mask)
        cond = self.condition(values)
        return {
            "emb": emb,
            "match": values,
            "cond": cond,
            "probs": predict_action(cond, self.action_head),
            "traj": self.traj_head(cond, traj_noise, batch.traj_last),
            "pose": self.pose_head(cond, pose_noise, batch.pose_last),
        }

    def prototype_columns(self) -> torch.Tensor:
        """A x N x k view of W_act: the columns that belong to each prototype."""
        W = self.action_head.W.detach()
        if self.head_input == "aggregate":
            return W[:, :, None]
        return W.reshape(W.shape[0], self.n_prototypes, -1)
