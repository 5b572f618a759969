"""Per-modality encoders and the projection into the joint latent space.

Each modality m has a backbone f_m followed by a bias-free projection W_e and a
relu, so every embedding row is non-negative. Modality payloads are the raw
sample arrays (pixels, m/s^2, log ratios); each backbone does its own
feature scaling.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import torch
from torch import nn

from .errors import ContractError, ShapeError
from .synth import N_JOINTS, GeneratorConfig
from .tensor import DTYPE, relu

MODALITIES = ("ctx", "pose", "traj", "ego", "social")


def payload_shape(modality: str, gen: GeneratorConfig) -> tuple[int, ...]:
    """Per-sample payload shape for a modality (without the batch axis)."""
    shapes = {
        "ctx": (gen.n_channels, gen.ctx_size, gen.ctx_size),
        "pose": (gen.t_obs, N_JOINTS, 2),
        "traj": (gen.t_obs, 4),
        "ego": (gen.t_obs, 1),
        # log-ratio neighbor rows plus a presence flag from neighbor_count
        "social": (gen.k_nb, 5),
    }
    if modality not in shapes:
        raise ContractError(f"unknown modality {modality!r}")
    return shapes[modality]


class ContextBackbone(nn.Module):
    """Three conv3x3 + relu + 2x average-pool stages, then global average pool."""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        chans = [in_channels, width // 4, width // 2, width]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=3, padding=1, dtype=DTYPE) for a, b in zip(chans[:-1], chans[1:])
        )
        self.out_features = width

    def forward(self, x):
        for conv in self.convs:
            x = nn.functional.avg_pool2d(relu(conv(x)), 2)
        return x.mean(dim=(-2, -1))


class SequenceBackbone(nn.Module):
    """Token embedding + learned positional offsets + one self-attention layer,
    mean-pooled over tokens."""

    def __init__(self, in_features: int, n_tokens: int, width: int = 64, heads: int = 4,
                 ffn: int = 128):
        super().__init__()
        self.embed = nn.Linear(in_features, width, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(n_tokens, width, dtype=DTYPE))
        nn.init.normal_(self.pos, std=0.02)
        self.layer = nn.TransformerEncoderLayer(
            width, heads, dim_feedforward=ffn, dropout=0.0, activation=relu, batch_first=True,
            dtype=DTYPE,
        )
        self.out_features = width

    def forward(self, tokens):
        h = self.embed(tokens) + self.pos
        return self.layer(h).mean(dim=1)


class ModalityEncoder(nn.Module):
    """``e_m = relu(W_e f_m(x_m))`` with a modality-specific featurizer in front of f_m."""

    def __init__(self, name: str, backbone: nn.Module, out_features: int, dim: int,
                 featurize=None):
        super().__init__()
        self.name = name
        self.backbone = backbone
        self.proj = nn.Linear(out_features, dim, bias=False, dtype=DTYPE)
        self.featurize = featurize or (lambda x: x)

    def forward(self, x):
        return relu(self.proj(self.backbone(self.featurize(x))))


def _traj_tokens(img_size):
    W, H = img_size

    def featurize(x):
        scale = x.new_tensor([W, H, W, H])
        norm = x / scale
        rel = (x - x[:, -1:, :]) / scale * 10.0
        return torch.cat([norm, rel], dim=-1)
    return featurize


def _pose_tokens(img_size):
    W, H = img_size

    def featurize(x):
        # x: B x T x 17 x 2 -> B x (T*17) x 4
        center = x.mean(dim=2, keepdim=True)
        height = (x[..., 1].amax(dim=2) - x[..., 1].amin(dim=2)).clamp_min(1.0)
        rel = (x - center) / height[..., None, None]
        absolute = x / x.new_tensor([W, H])
        tokens = torch.cat([rel * 4.0, absolute], dim=-1)
        return tokens.reshape(x.shape[0], -1, 4)
    return featurize


def _ego_tokens(x):
    return x / 3.0


def _social_tokens(x):
    return torch.cat([x[..., :4] / 5.0, x[..., 4:]], dim=-1)


class EncoderStack(nn.Module):
    """One encoder per enabled modality, all projecting to the shared ``dim``."""

    def __init__(self, gen: GeneratorConfig, modalities: Sequence[str] = MODALITIES,
                 dim: int = 64, width: int = 64, heads: int = 4):
        super().__init__()
        unknown = set(modalities) - set(MODALITIES)
        modalities = [m for m in MODALITIES if m in set(modalities)]
        if not modalities or unknown:
            raise ContractError("enabled modalities must be a non-empty subset of " + ", ".join(MODALITIES))
        self.gen = gen
        self.dim = dim
        self.modalities = tuple(modalities)
        encoders = {}
        for m in self.modalities:
            if m == "ctx":
                bb = ContextBackbone(gen.n_channels, width)
                enc = ModalityEncoder(m, bb, bb.out_features, dim)
            elif m == "pose":
                bb = SequenceBackbone(4, gen.t_obs * N_JOINTS, width, heads)
                enc = ModalityEncoder(m, bb, width, dim, _pose_tokens(gen.img_size))
            elif m == "traj":
                bb = SequenceBackbone(8, gen.t_obs, width, heads)
                enc = ModalityEncoder(m, bb, width, dim, _traj_tokens(gen.img_size))
            elif m == "ego":
                bb = SequenceBackbone(1, gen.t_obs, width, heads)
                enc = ModalityEncoder(m, bb, width, dim, _ego_tokens)
            else:
                bb = SequenceBackbone(5, gen.k_nb, width, heads)
                enc = ModalityEncoder(m, bb, width, dim, _social_tokens)
            encoders[m] = enc
        self.encoders = nn.ModuleDict(encoders)

    def forward(self, payloads: Mapping[str, torch.Tensor]) -> torch.Tensor:
        return encode_all(payloads, self)


def encode_modality(x: torch.Tensor, modality: str, stack: EncoderStack) -> torch.Tensor:
    """Embed a batch (or a single payload) of one modality; returns ``[B x] D``."""
    if modality not in stack.encoders:
        raise ContractError(f"modality {modality!r} is not enabled")
    expected = payload_shape(modality, stack.gen)
    single = tuple(x.shape) == expected
    if not single and tuple(x.shape[1:]) != expected:
        raise ShapeError(f"{modality}: payload shape {tuple(x.shape)} does not match {expected}")
    x = x.to(DTYPE)
    out = stack.encoders[modality](x[None] if single else x)
    return out[0] if single else out


def encode_all(payloads: Mapping[str, torch.Tensor], stack: EncoderStack) -> torch.Tensor:
    """Stack the enabled modalities' embeddings in fixed order; returns B x M x D."""
    missing = [m for m in stack.modalities if m not in payloads]
    if missing:
        raise ContractError(f"missing enabled modalities: {missing}")
    rows = [encode_modality(payloads[m], m, stack) for m in stack.modalities]
    return torch.stack(rows, dim=-2)
