"""Training loop, checkpoints, evaluation and the two ablation harnesses."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .encoders import MODALITIES
from .errors import ConfigError, ParseError, VersionError
from .heads import BEST_OF_K, predict_action, predicted_class
from .losses import (LossConfig, LossReport, clustering_loss, coordinate_scale, cross_entropy,
                     l1_sparsity, sequence_mse, total_loss)
from .metrics import (EvalReport, classification_metrics, concept_histogram, concept_purity,
                      top_k_ms_report)
from .model import SPN, Batch, collate
from .prototypes import keep_mask
from .synth import CONCEPTS, GeneratorConfig, load_generator_config, read_dataset
from .tensor import DTYPE, Adam

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SPNCKPT1"
CRITERIA = ("topk-ms", "linear-weight")
EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    n_prototypes: int = 16
    dim: int = 64
    k_topms: int = 5
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))
    t_obs: int = 8
    t_pred: int = 8
    n_actions: int = 3
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    lambda_cluster: float = 0.001
    lambda_l1: float = 0.01
    tau: float = 0.1
    w_action: float = 1.0
    w_traj: float = 1.0
    w_pose: float = 1.0
    seed: int = 0
    width: int = 64
    heads: int = 4
    noise_dim: int = 8
    hidden: int = 128
    head_input: str = "aggregate"
    clip_norm: float = 5.0
    best_of: int = BEST_OF_K

    def __post_init__(self):
        self.modalities = list(self.modalities)
        if self.batch_size < 1 or self.epochs < 0 or self.n_prototypes < 1 or self.dim < 1:
            raise ConfigError("batch_size, n_prototypes and dim must be positive; epochs >= 0")
        if self.lambda_cluster > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when lambda_cluster > 0")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.best_of < 1:
            raise ConfigError("best_of must be >= 1")
        self.loss_config  # validates the loss fields

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_cluster, self.lambda_l1, self.tau,
                          self.w_action, self.w_traj, self.w_pose)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def load_config(path) -> dict:
    """Read a flat JSON config file into a dict of TrainConfig fields."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value object")
    return data


def check_compatible(cfg: TrainConfig, gen: GeneratorConfig) -> None:
    for key in ("t_obs", "t_pred", "n_actions"):
        if getattr(cfg, key) != getattr(gen, key):
            raise ConfigError(f"config {key}={getattr(cfg, key)} but the dataset has {getattr(gen, key)}")


def build_model(cfg: TrainConfig, gen: GeneratorConfig) -> SPN:
    check_compatible(cfg, gen)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return SPN(gen, cfg.n_prototypes, cfg.dim, cfg.modalities, cfg.width, cfg.heads,
                   cfg.noise_dim, cfg.hidden, cfg.head_input)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    data_config: GeneratorConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    loss_report: LossReport | None = None

    def model(self) -> SPN:
        model = build_model(self.config, self.data_config)
        state = model.state_dict()
        for name, value in self.params.items():
            if name not in state:
                raise VersionError(f"checkpoint tensor {name!r} does not exist in the model")
            state[name] = torch.from_numpy(value.copy())
        model.load_state_dict(state)
        return model


def checkpoint_from_model(model: SPN, cfg: TrainConfig, epoch=0, report=None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().astype(np.float64, copy=True)
              for k, v in model.state_dict().items()}
    return Checkpoint(cfg, model.gen, params, epoch, report)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Magic line, one-line JSON manifest, then little-endian float64 blobs."""
    tensors, blobs, offset = [], [], 0
    for name, value in ckpt.params.items():
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": CKPT_MAGIC.decode(),
        "config": ckpt.config.to_dict(),
        "data_config": ckpt.data_config.to_dict(),
        "epoch": ckpt.epoch,
        "loss_report": ckpt.loss_report.to_dict() if ckpt.loss_report else None,
        "tensors": tensors,
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n")
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC + b"\n"):
        raise VersionError(f"{path}: not an SPN checkpoint (bad magic)")
    rest = raw[len(CKPT_MAGIC) + 1:]
    end = rest.find(b"\n")
    if end < 0:
        raise ParseError(path, 0, "truncated manifest")
    manifest = json.loads(rest[:end].decode("utf-8"))
    body = rest[end + 1:]
    params = {}
    for t in manifest["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise ParseError(path, 0, f"tensor {t['name']} is truncated")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    report = manifest.get("loss_report")
    return Checkpoint(
        TrainConfig.from_dict(manifest["config"]),
        GeneratorConfig.from_dict(manifest["data_config"]),
        params, manifest.get("epoch", 0),
        LossReport(**report) if report else None,
    )


# ---------------------------------------------------------------- training

def compute_losses(model: SPN, batch: Batch, traj_noise, pose_noise, cfg: LossConfig):
    out = model(batch, traj_noise, pose_noise)
    parts = {
        "cluster": clustering_loss(out["emb"], cfg.tau),
        "l1": l1_sparsity(out["match"]),
        "action_ce": cross_entropy(out["probs"], batch.action),
        "traj_mse": sequence_mse(out["traj"], batch.traj_fut, batch.img_size),
        "pose_mse": sequence_mse(out["pose"], batch.pose_fut, batch.img_size),
    }
    total = total_loss(parts["cluster"], parts["l1"], parts["action_ce"],
                       parts["traj_mse"], parts["pose_mse"], cfg)
    report = LossReport(**{k: float(v.detach()) for k, v in parts.items()}, total=float(total.detach()))
    return total, report


def objective(model: SPN, batch: Batch, cfg: TrainConfig, seed: int = 0) -> LossReport:
    """Training objective over a whole batch with fixed noise, without gradients."""
    g = torch.Generator().manual_seed(seed)
    n = len(batch)
    tn = torch.randn(n, cfg.noise_dim, generator=g, dtype=DTYPE)
    pn = torch.randn(n, cfg.noise_dim, generator=g, dtype=DTYPE)
    with torch.no_grad():
        return compute_losses(model, batch, tn, pn, cfg.loss_config)[1]


def _mean_report(reports: list[tuple[int, LossReport]]) -> LossReport:
    total = sum(n for n, _ in reports)
    keys = [f.name for f in fields(LossReport)]
    return LossReport(**{k: sum(n * getattr(r, k) for n, r in reports) / total for k in keys})


def train(cfg: TrainConfig, data_dir, log_path=None,
          on_epoch: Callable[[int, LossReport], None] | None = None) -> Checkpoint:
    """Mini-batch Adam on the weighted total loss; deterministic given (cfg, data)."""
    gen = load_generator_config(data_dir)
    check_compatible(cfg, gen)
    samples = read_dataset(data_dir, "train")
    data = collate(samples)
    model = build_model(cfg, gen)
    if cfg.epochs == 0:
        return checkpoint_from_model(model, cfg)

    opt = Adam(model.named_parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    noise_gen = torch.Generator().manual_seed(cfg.seed + 2)
    loss_cfg = cfg.loss_config
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    report = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            perm = order_rng.permutation(len(data))
            parts = []
            for lo in range(0, len(perm), cfg.batch_size):
                batch = data.take(perm[lo:lo + cfg.batch_size])
                tn = torch.randn(len(batch), cfg.noise_dim, generator=noise_gen, dtype=DTYPE)
                pn = torch.randn(len(batch), cfg.noise_dim, generator=noise_gen, dtype=DTYPE)
                opt.zero_grad()
                loss, rep = compute_losses(model, batch, tn, pn, loss_cfg)
                loss.backward()
                opt.step()
                parts.append((len(batch), rep))
            report = _mean_report(parts)
            record = {"epoch": epoch, **report.to_dict(), "wall_time": time.perf_counter() - start}
            log.info("epoch %d total %.5f ce %.4f", epoch, report.total, report.action_ce)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(epoch, report)
    finally:
        if log_fh:
            log_fh.close()
    return checkpoint_from_model(model, cfg, cfg.epochs, report)


# ---------------------------------------------------------------- evaluation

def eval_noise(seed: int, sample_id: int, draw: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Trajectory and pose noise for one (sample, draw); independent of batching."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(sample_id), int(draw)]))
    return rng.standard_normal(dim), rng.standard_normal(dim)


def _as_model(source) -> tuple[SPN, TrainConfig]:
    if isinstance(source, Checkpoint):
        return source.model(), source.config
    model, cfg = source
    return model, cfg


def _load_split(data_dir, split, gen: GeneratorConfig | None = None) -> Batch:
    samples = read_dataset(data_dir, split)
    if gen is not None:
        check_compatible_data(gen, load_generator_config(data_dir))
    samples.sort(key=lambda s: s.id)
    return collate(samples)


def check_compatible_data(model_gen: GeneratorConfig, data_gen: GeneratorConfig) -> None:
    for key in ("t_obs", "t_pred", "n_actions", "img_size", "ctx_size", "k_nb", "n_seg"):
        if getattr(model_gen, key) != getattr(data_gen, key):
            raise ConfigError(f"checkpoint {key}={getattr(model_gen, key)} but dataset has {getattr(data_gen, key)}")


def activations(model: SPN, batch: Batch, keep: Sequence[int] | None = None) -> np.ndarray:
    """S x N x M match values for a whole split."""
    mask = keep_mask(keep, model.n_prototypes) if keep is not None else None
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(batch), EVAL_CHUNK):
            part = batch.take(np.arange(lo, min(lo + EVAL_CHUNK, len(batch))))
            chunks.append(model.match(model.embed(part.payloads), mask).numpy())
    return np.concatenate(chunks)


def _per_sample_mse(pred: torch.Tensor, true: torch.Tensor, img_size) -> np.ndarray:
    scale = coordinate_scale(pred.shape[-1], img_size, pred)
    err = ((pred - true) / scale) ** 2
    return err.reshape(err.shape[0], -1).mean(dim=1).numpy()


def evaluate(source, data_dir, split: str = "test", keep: Sequence[int] | None = None,
             seed: int | None = None) -> EvalReport:
    """Score a checkpoint (or ``(model, config)``) on one split.

    Trajectory and pose are scored best-of-``config.best_of`` with noise seeded
    by (seed, sample id, draw index).
    """
    model, cfg = _as_model(source)
    model.eval()
    batch = _load_split(data_dir, split, model.gen)
    seed = cfg.seed if seed is None else seed
    mask = keep_mask(keep, model.n_prototypes) if keep is not None else None
    n = len(batch)
    best_traj = np.full(n, np.inf)
    best_pose = np.full(n, np.inf)
    preds = []
    with torch.no_grad():
        for lo in range(0, n, EVAL_CHUNK):
            idx = np.arange(lo, min(lo + EVAL_CHUNK, n))
            part = batch.take(idx)
            values = model.match(model.embed(part.payloads), mask)
            cond = model.condition(values)
            preds.append(predicted_class(predict_action(cond, model.action_head)).numpy())
            for draw in range(cfg.best_of):
                noise = [eval_noise(seed, sid, draw, model.noise_dim) for sid in part.ids]
                tn = torch.as_tensor(np.stack([a for a, _ in noise]), dtype=DTYPE)
                pn = torch.as_tensor(np.stack([b for _, b in noise]), dtype=DTYPE)
                traj = model.traj_head(cond, tn, part.traj_last)
                pose = model.pose_head(cond, pn, part.pose_last)
                best_traj[idx] = np.minimum(best_traj[idx], _per_sample_mse(traj, part.traj_fut, batch.img_size))
                best_pose[idx] = np.minimum(best_pose[idx], _per_sample_mse(pose, part.pose_fut, batch.img_size))
    pred = np.concatenate(preds)
    acc, f1 = classification_metrics(pred, batch.action.numpy(), model.gen.n_actions)

    t_pred = model.gen.t_pred
    base_traj = _per_sample_mse(batch.traj_last[:, None].expand(-1, t_pred, -1), batch.traj_fut, batch.img_size)
    base_pose = _per_sample_mse(batch.pose_last[:, None].expand(-1, t_pred, -1, -1), batch.pose_fut, batch.img_size)

    acts = activations(model, batch, keep)
    ms = top_k_ms_report(acts, cfg.k_topms, batch.ids)
    labels = dict(zip(batch.ids.tolist(), batch.concepts))
    purity = [concept_purity([e[0] for e in top], labels) for top in ms.top]
    return EvalReport(
        accuracy=acc, f1=f1,
        traj_mse=float(best_traj.mean()), pose_mse=float(best_pose.mean()),
        mean_topk_ms=ms.mean_psi, purity=purity, psi=ms.psi,
        baseline_traj_mse=float(base_traj.mean()), baseline_pose_mse=float(base_pose.mean()),
        n_samples=n, kept_prototypes=None if keep is None else sorted(int(k) for k in keep),
    )


# ---------------------------------------------------------------- harnesses

def select_prototypes(source, data_dir, criterion: str, keep_count: int) -> list[int]:
    """Rank prototypes by Top-K MS on the train split or by the L1 norm of their
    action-head columns; return the ``keep_count`` best ids."""
    model, cfg = _as_model(source)
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    n = model.n_prototypes
    if not 0 <= keep_count <= n:
        raise ConfigError(f"keep_count must be in [0, {n}]")
    if criterion == "topk-ms":
        batch = _load_split(data_dir, "train", model.gen)
        score = np.array(top_k_ms_report(activations(model, batch), cfg.k_topms, batch.ids).psi)
    else:
        score = model.prototype_columns().abs().sum(dim=(0, 2)).numpy()
    order = sorted(range(n), key=lambda i: (-score[i], i))
    return sorted(order[:keep_count])


def ablate_partial(source, data_dir, criterion: str, keep_count: int, split: str = "test") -> EvalReport:
    model, cfg = _as_model(source)
    keep = select_prototypes((model, cfg), data_dir, criterion, keep_count)
    return evaluate((model, cfg), data_dir, split, keep=keep)


REG_GRID = ((0.0, 0.0), (0.001, 0.0), (0.0, 0.01), (0.001, 0.01))


def ablate_regularizers(base: TrainConfig, data_dir, split: str = "test",
                        grid: Sequence[tuple[float, float]] = REG_GRID) -> list[dict]:
    """Train every (lambda_cluster, lambda_l1) cell with the same seed and data order."""
    rows = []
    for lc, ll in grid:
        cfg = base.replace(lambda_cluster=lc, lambda_l1=ll)
        report = evaluate(train(cfg, data_dir), data_dir, split)
        rows.append({
            "lambda_cluster": lc, "lambda_l1": ll,
            "accuracy": report.accuracy, "f1": report.f1,
            "traj_mse": report.traj_mse, "pose_mse": report.pose_mse,
            "mean_topk_ms": report.mean_topk_ms,
        })
    return rows


def explain(source, data_dir, top_k: int = 5, split: str = "train", n_ranks: int = 100) -> dict:
    """Per-prototype explanation tables: Top-K MS, nearest (sample, modality)
    entries, concept histogram and the activation-vs-rank curve."""
    model, cfg = _as_model(source)
    batch = _load_split(data_dir, split, model.gen)
    acts = activations(model, batch)
    ms = top_k_ms_report(acts, top_k, batch.ids)
    labels = dict(zip(batch.ids.tolist(), batch.concepts))
    prototypes = []
    for n in range(model.n_prototypes):
        ids = [e[0] for e in ms.top[n]]
        pool = np.sort(acts[:, n, :].ravel())[::-1][:n_ranks]
        prototypes.append({
            "prototype": n,
            "psi": ms.psi[n],
            "pool_mean": ms.mean[n],
            "pool_variance": ms.variance[n],
            "top": [{"sample": sid, "modality": model.modalities[m], "activation": a}
                    for sid, m, a in ms.top[n]],
            "concepts": {CONCEPTS[c]: cnt for c, cnt in concept_histogram(ids, labels).items()},
            "purity": concept_purity(ids, labels),
            "activation_vs_rank": [float(v) for v in pool],
        })
    return {"split": split, "k": top_k, "pool_size": ms.pool_size,
            "mean_topk_ms": ms.mean_psi, "prototypes": prototypes}


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
