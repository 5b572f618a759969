"""Procedural pedestrian scenarios with planted concepts, and dataset files.

Every sample carries the five input modalities (local context raster, past
pose, past trajectory, ego acceleration, social relation), the future
trajectory and pose, an action label and the list of concepts that were
switched on while generating it. Each concept drives its own group of
scenario parameters, so the concept labels are recoverable from the raw data
(see :func:`concept_parameters`).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, InvalidValueError, ParseError, SplitNotFoundError, VersionError

FORMAT_VERSION = "spn-dataset-v1"
SPLITS = ("train", "val", "test")
ACTIONS = ("cross", "walk_along", "stand")
SEG_CLASSES = ("road", "sidewalk", "crosswalk", "other")
CONCEPTS = (
    "crosswalk",            # zebra region in the context raster
    "ego_decel",            # ego vehicle braking
    "crossing_intent",      # pedestrian moves toward the road
    "fast_gait",            # high stride frequency
    "approaching_neighbor", # another agent right next to the target
    "near_curb",            # starts close to the curb
    "shadow",               # dark band across the context raster
    "stationary",           # standing still, no stride
)
CROSSWALK, EGO_DECEL, CROSSING, FAST_GAIT, NEIGHBOR, NEAR_CURB, SHADOW, STATIONARY = range(8)
CROSS, WALK, STAND = range(3)

N_JOINTS = 17
# COCO joint order, offsets from the bbox center in units of bbox height.
POSE_TEMPLATE = np.array([
    [0.00, -0.42], [-0.02, -0.44], [0.02, -0.44], [-0.04, -0.43], [0.04, -0.43],
    [-0.10, -0.30], [0.10, -0.30], [-0.13, -0.12], [0.13, -0.12],
    [-0.14, 0.05], [0.14, 0.05], [-0.07, 0.02], [0.07, 0.02],
    [-0.07, 0.24], [0.07, 0.24], [-0.07, 0.46], [0.07, 0.46],
])
# Horizontal stride swing per joint, as a multiple of the gait amplitude; the
# sign encodes which half of the gait cycle the limb is on.
SWING = np.array([0, 0, 0, 0, 0, 0, 0, -0.3, 0.3, -0.6, 0.6, 0, 0, 0.5, -0.5, 1.0, -1.0])

# Base colors per segmentation class; crosswalk pixels alternate white and road.
ROAD_RGB = (0.35, 0.35, 0.38)
SIDEWALK_RGB = (0.65, 0.62, 0.58)
OTHER_RGB = (0.30, 0.55, 0.30)
ZEBRA_RGB = (0.92, 0.92, 0.92)
MIN_BRIGHTNESS = {0: 0.36, 1: 0.6167, 2: 0.36, 3: 0.3833}
SHADOW_FACTOR = 0.45
LOG_CLAMP = 1e-6


@dataclass(frozen=True)
class GeneratorConfig:
    t_obs: int = 8
    t_pred: int = 8
    img_size: tuple[int, int] = (512, 512)
    ctx_size: int = 32
    n_seg: int = 4
    k_nb: int = 4
    n_actions: int = 3
    pose_noise: float = 1.0
    bbox_noise: float = 0.5
    class_freqs: tuple[float, float, float] = (0.25, 0.5, 0.25)
    concept_rate: float = 0.2
    fast_gait_rate: float = 0.3
    curb_frac: float = 0.55

    def __post_init__(self):
        if self.t_obs < 1 or self.t_pred < 1:
            raise ConfigError("t_obs and t_pred must be >= 1")
        if self.n_actions != len(ACTIONS) or len(self.class_freqs) != len(ACTIONS):
            raise ConfigError(f"the generator defines exactly {len(ACTIONS)} action classes")
        if abs(sum(self.class_freqs) - 1.0) > 1e-9 or min(self.class_freqs) < 0:
            raise ConfigError("class_freqs must be a probability vector")
        if self.n_seg != len(SEG_CLASSES):
            raise ConfigError(f"n_seg must be {len(SEG_CLASSES)}")
        if self.img_size[0] <= 0 or self.img_size[1] <= 0:
            raise ConfigError("img_size must be positive")
        if self.ctx_size < 8 or self.k_nb < 1:
            raise ConfigError("ctx_size must be >= 8 and k_nb >= 1")

    @property
    def n_channels(self) -> int:
        return 3 + self.n_seg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["img_size"] = list(self.img_size)
        d["class_freqs"] = list(self.class_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("img_size", "class_freqs"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sample:
    id: int
    split: str
    concepts: list[int]
    action: int
    ctx: np.ndarray          # (3 + S, H, W)
    pose_obs: np.ndarray     # (T_obs, 17, 2)
    traj_obs: np.ndarray     # (T_obs, 4) cx, cy, w, h
    ego_obs: np.ndarray      # (T_obs, 1)
    social: np.ndarray       # (K_nb, 4)
    neighbor_count: int
    traj_fut: np.ndarray     # (T_pred, 4)
    pose_fut: np.ndarray     # (T_pred, 17, 2)
    img_size: tuple[int, int]


ARRAY_FIELDS = ("ctx", "pose_obs", "traj_obs", "ego_obs", "social", "traj_fut", "pose_fut")
RECORD_FIELDS = ("id", "split", "concepts", "action", "ctx", "pose_obs", "traj_obs",
                 "ego_obs", "social", "neighbor_count", "traj_fut", "pose_fut", "img_size")


def action_for(concepts: Iterable[int]) -> int:
    concepts = set(concepts)
    if CROSSING in concepts:
        return CROSS
    if STATIONARY in concepts:
        return STAND
    return WALK


def encode_social_relation(target, neighbors, k_nb: int = 4):
    """Log-ratio encoding of neighbor bboxes relative to the target bbox.

    Boxes are ``(cx, cy, w, h)``. Each row is
    ``[log(|x_b-x_k|/w_b), log(|y_b-y_k|/h_b), log(w_k/w_b), log(h_k/h_b)]`` with
    log arguments clamped below at 1e-6. The ``k_nb`` nearest neighbors by
    center distance are kept, zero-padded. Returns ``(rows, neighbor_count)``.
    """
    xb, yb, wb, hb = (float(v) for v in target)
    if not (wb > 0 and hb > 0):
        raise InvalidValueError("target bbox width and height must be positive")
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((k_nb, 4))
    if len(nb) == 0:
        return out, 0
    dist = np.hypot(nb[:, 0] - xb, nb[:, 1] - yb)
    order = np.argsort(dist, kind="stable")[:k_nb]
    for row, k in enumerate(order):
        xk, yk, wk, hk = nb[k]
        ratios = (abs(xb - xk) / wb, abs(yb - yk) / hb, wk / wb, hk / hb)
        out[row] = [math.log(max(r, LOG_CLAMP)) for r in ratios]
    return out, len(order)


def sample_seed(base_seed: int, sample_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(sample_id)])


def _draw_concepts(rng: np.random.Generator, cfg: GeneratorConfig) -> list[int]:
    behavior = int(rng.choice(3, p=cfg.class_freqs))
    active = set()
    if behavior == CROSS:
        active.add(CROSSING)
    elif behavior == STAND:
        active.add(STATIONARY)
    for c in (CROSSWALK, EGO_DECEL, NEIGHBOR, NEAR_CURB, SHADOW):
        if rng.random() < cfg.concept_rate:
            active.add(c)
    if behavior != STAND and rng.random() < cfg.fast_gait_rate:
        active.add(FAST_GAIT)
    if not active:
        active.add(int(rng.choice([CROSSWALK, EGO_DECEL, NEIGHBOR, NEAR_CURB, SHADOW, FAST_GAIT])))
    return sorted(active)


def _render_context(rng, cfg: GeneratorConfig, active: set[int]) -> np.ndarray:
    n = cfg.ctx_size
    seg = np.zeros((n, n), dtype=np.int64)
    curb_row = int(rng.integers(n // 4, n * 5 // 8))
    seg[curb_row:] = 1
    other_rows = int(rng.integers(0, n // 5))
    if other_rows:
        seg[n - other_rows:] = 3
    rgb = np.empty((3, n, n))
    rgb[:, seg == 0] = np.array(ROAD_RGB)[:, None]
    rgb[:, seg == 1] = np.array(SIDEWALK_RGB)[:, None]
    rgb[:, seg == 3] = np.array(OTHER_RGB)[:, None]
    if CROSSWALK in active:
        width = n * 5 // 16
        c0 = int(rng.integers(n // 8, n - width - n // 8))
        seg[:curb_row, c0:c0 + width] = 2
        for c in range(c0, c0 + width):
            color = ZEBRA_RGB if (c - c0) % 4 < 2 else ROAD_RGB
            rgb[:, :curb_row, c] = np.array(color)[:, None]
    if SHADOW in active:
        band = int(rng.integers(n // 6, n // 4 + 1))
        r0 = int(rng.integers(0, n - band))
        rgb[:, r0:r0 + band] *= SHADOW_FACTOR
    rgb = np.clip(rgb + rng.normal(0.0, 0.02, rgb.shape), 0.0, 1.0).round(2)
    onehot = (seg[None] == np.arange(cfg.n_seg)[:, None, None]).astype(np.float64)
    return np.concatenate([rgb, onehot], axis=0)


def _pose_sequence(rng, centers, heights, phase0, freq, amp, direction, t0, noise):
    t = np.arange(t0, t0 + len(centers))
    phase = phase0 + 2.0 * math.pi * freq * t
    out = np.empty((len(centers), N_JOINTS, 2))
    for i in range(len(centers)):
        offs = POSE_TEMPLATE.copy()
        offs[:, 0] += direction * amp * SWING * math.sin(phase[i])
        out[i] = centers[i][None, :] + heights[i] * offs
    return out + rng.normal(0.0, noise, out.shape)


def generate_scenario(seed, cfg: GeneratorConfig | None = None, *, sample_id: int = 0,
                      split: str = "train") -> Sample:
    """Generate one sample; the result is a pure function of ``seed`` and ``cfg``."""
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)
    W, H = cfg.img_size
    sx, sy = W / 512.0, H / 512.0
    T = cfg.t_obs + cfg.t_pred

    concepts = _draw_concepts(rng, cfg)
    active = set(concepts)
    action = action_for(active)

    # bbox size and starting position
    h = rng.uniform(70.0, 110.0) * sy
    w = 0.4 * h * sx / sy
    curb_y = cfg.curb_frac * H
    gap = rng.uniform(10.0, 40.0) if NEAR_CURB in active else rng.uniform(90.0, 140.0)
    y0 = curb_y + gap * sy

    # piecewise-constant velocity: one segment over the observation window,
    # a second one over the prediction window
    if action == WALK:
        vx = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 7.0)
        v_obs = np.array([vx * sx, 0.0])
        v_fut = v_obs
    elif action == CROSS:
        vx = rng.uniform(-1.5, 1.5)
        vy = -rng.uniform(3.0, 5.0)
        v_obs = np.array([vx * sx, vy * sy])
        v_fut = np.array([vx * sx, 1.6 * vy * sy])
    else:
        v_obs = v_fut = np.zeros(2)
    drift = v_obs[0] * (T - 1)
    x0 = rng.uniform(w + max(0.0, -drift), W - w - max(0.0, drift))

    steps = np.concatenate([np.tile(v_obs, (cfg.t_obs, 1)), np.tile(v_fut, (cfg.t_pred, 1))])
    steps[0] = 0.0
    centers = np.array([x0, y0]) + np.cumsum(steps, axis=0)
    boxes = np.empty((T, 4))
    boxes[:, :2] = centers + rng.normal(0.0, cfg.bbox_noise, (T, 2))
    boxes[:, 2] = w + rng.normal(0.0, cfg.bbox_noise, T)
    boxes[:, 3] = h + rng.normal(0.0, cfg.bbox_noise, T)
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, W)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, H)
    boxes[:, 2:] = np.maximum(boxes[:, 2:], 1.0)

    # pose: template skeleton + sinusoidal stride
    freq = 0.3 if FAST_GAIT in active else 0.12
    amp = 0.0 if action == STAND else 0.12
    direction = 1.0 if v_obs[0] >= 0 else -1.0
    pose = _pose_sequence(rng, boxes[:, :2], boxes[:, 3], rng.uniform(0, 2 * math.pi),
                          freq, amp, direction, 0, cfg.pose_noise)

    # ego acceleration
    if EGO_DECEL in active:
        ego = -rng.uniform(2.5, 3.5) + rng.normal(0.0, 0.2, (cfg.t_obs, 1))
    else:
        ego = rng.uniform(-0.5, 0.8) + rng.normal(0.0, 0.2, (cfg.t_obs, 1))

    # neighbors at the last observed frame
    last = boxes[cfg.t_obs - 1]
    neighbors = []
    if NEIGHBOR in active:
        dx = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.3) * last[2]
        dy = rng.uniform(-0.3, 0.3) * last[3]
        neighbors.append([last[0] + dx, last[1] + dy,
                          last[2] * rng.uniform(0.8, 1.2), last[3] * rng.uniform(0.8, 1.2)])
    for _ in range(int(rng.integers(0, cfg.k_nb))):
        dx = rng.uniform(3.0, 6.0) * last[2]
        if not (0.0 <= last[0] + dx <= W):
            dx = -dx
        dy = rng.uniform(-1.0, 1.0) * last[3]
        scale = rng.uniform(1.5, 3.0) if rng.random() < 0.3 else rng.uniform(0.7, 1.3)
        neighbors.append([last[0] + dx, float(np.clip(last[1] + dy, 0.0, H)),
                          last[2] * scale, last[3] * scale])
    social, count = encode_social_relation(last, neighbors, cfg.k_nb)

    ctx = _render_context(rng, cfg, active)

    return Sample(
        id=int(sample_id), split=split, concepts=concepts, action=action, ctx=ctx,
        pose_obs=pose[:cfg.t_obs], traj_obs=boxes[:cfg.t_obs], ego_obs=ego,
        social=social, neighbor_count=count,
        traj_fut=boxes[cfg.t_obs:], pose_fut=pose[cfg.t_obs:], img_size=(W, H),
    )


def generate_dataset(cfg: GeneratorConfig, seed: int, sizes: dict[str, int]) -> dict[str, list[Sample]]:
    """Generate every split. Sample ids are global and increase across splits."""
    out: dict[str, list[Sample]] = {}
    next_id = 0
    for split in SPLITS:
        n = int(sizes.get(split, 0))
        if n < 0:
            raise ConfigError(f"negative size for split {split}")
        out[split] = [generate_scenario(sample_seed(seed, i), cfg, sample_id=i, split=split)
                      for i in range(next_id, next_id + n)]
        next_id += n
    return out


def concept_parameters(sample: Sample, cfg: GeneratorConfig | None = None) -> dict[str, float]:
    """Recover the raw scenario parameter each concept controls from a sample."""
    cfg = cfg or GeneratorConfig()
    W, H = sample.img_size
    traj = sample.traj_obs
    vel = np.diff(traj[:, :2], axis=0).mean(axis=0) if len(traj) > 1 else np.zeros(2)
    ankles = sample.pose_obs[:, 15, 0] - sample.pose_obs[:, 16, 0]
    stride = np.abs(np.diff(ankles)).mean() / traj[:, 3].mean() if len(traj) > 1 else 0.0
    ctx = sample.ctx
    seg = ctx[3:].argmax(axis=0)
    brightness = ctx[:3].mean(axis=0)
    floor = np.vectorize(MIN_BRIGHTNESS.get)(seg)
    nearest = math.exp(sample.social[0, 0]) if sample.neighbor_count else math.inf
    return {
        "crosswalk": float((seg == 2).mean()),
        "ego_decel": float(sample.ego_obs.mean()),
        "crossing_intent": float(vel[1] / (H / 512.0)),
        "fast_gait": float(stride),
        "approaching_neighbor": float(nearest),
        "near_curb": float((traj[0, 1] - cfg.curb_frac * H) / (H / 512.0)),
        "shadow": float((brightness < 0.7 * floor).mean()),
        "stationary": float(np.hypot(*vel) / (W / 512.0)),
    }


# ---------------------------------------------------------------- file I/O

def sample_to_record(s: Sample) -> dict:
    rec = {}
    for name in RECORD_FIELDS:
        value = getattr(s, name)
        if name in ARRAY_FIELDS:
            value = value.tolist()
        elif name == "img_size":
            value = [int(v) for v in value]
        elif name == "concepts":
            value = [int(c) for c in value]
        rec[name] = value
    return rec


def record_to_sample(rec: dict) -> Sample:
    missing = [k for k in RECORD_FIELDS if k not in rec]
    if missing:
        raise ValueError(f"missing fields {missing}")
    extra = sorted(set(rec) - set(RECORD_FIELDS))
    if extra:
        raise ValueError(f"unexpected fields {extra}")
    kw = {k: rec[k] for k in RECORD_FIELDS}
    for name in ARRAY_FIELDS:
        kw[name] = np.asarray(kw[name], dtype=np.float64)
    kw["img_size"] = tuple(int(v) for v in kw["img_size"])
    kw["concepts"] = [int(c) for c in kw["concepts"]]
    return Sample(**kw)


def write_dataset(samples: dict[str, list[Sample]], directory, cfg: GeneratorConfig, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, items in samples.items():
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        name = f"{split}.jsonl"
        with open(directory / name, "w", encoding="utf-8") as fh:
            for s in items:
                fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
                fh.write("\n")
        files[split] = name
    manifest = {
        "format": FORMAT_VERSION,
        "generator": cfg.to_dict(),
        "seed": int(seed),
        "splits": {k: len(v) for k, v in samples.items()},
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ParseError(path, 0, f"manifest is not valid JSON ({exc})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise VersionError(f"{path}: format {manifest.get('format')!r}, expected {FORMAT_VERSION!r}")
    return manifest


def read_dataset(directory, split: str, expected: GeneratorConfig | None = None) -> list[Sample]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected is not None and GeneratorConfig.from_dict(manifest["generator"]) != expected:
        raise VersionError(f"{directory}: generator config differs from the expected one")
    if split not in manifest.get("files", {}):
        raise SplitNotFoundError(f"split {split!r} not in {directory / 'manifest.json'}")
    path = directory / manifest["files"][split]
    samples = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            try:
                samples.append(record_to_sample(json.loads(line)))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise ParseError(path, index, str(exc)) from None
    expected_n = manifest["splits"].get(split)
    if expected_n is not None and expected_n != len(samples):
        raise ParseError(path, len(samples), f"expected {expected_n} records, found {len(samples)}")
    return samples


def load_generator_config(directory) -> GeneratorConfig:
    return GeneratorConfig.from_dict(read_manifest(directory)["generator"])
