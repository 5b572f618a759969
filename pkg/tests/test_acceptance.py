"""Acceptance gate. Each test prints one PASS/FAIL line per criterion.

The end-to-end criteria train the default configuration (16 prototypes,
64 dims, 2000 training samples, 20 epochs) several times, so this module takes
roughly 25 minutes on one CPU core.
"""
import math
import time

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES

from spn.losses import clustering_loss, cross_entropy, l1_sparsity, sequence_mse
from spn.metrics import normalized_mse, shuffled_purity, top_k_ms, top_k_ms_report
from spn.model import collate
from spn.synth import GeneratorConfig, generate_dataset, read_dataset, write_dataset
from spn.tensor import DTYPE, as_array, gradient_check, softmax_rows
from spn.trainer import (
    TrainConfig, ablate_partial, activations, build_model, compute_losses, eval_noise, evaluate,
    load_checkpoint, save_checkpoint, train,
)

SEEDS = (0, 1, 2)
FULL = dict(lambda_cluster=0.001, lambda_l1=0.01)
NONE = dict(lambda_cluster=0.0, lambda_l1=0.0)
SIZES = {"train": 2000, "val": 250, "test": 250}


def verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    gen = GeneratorConfig()
    root = tmp_path_factory.mktemp("default_data")
    samples = generate_dataset(gen, 0, SIZES)
    write_dataset(samples, root, gen, 0)
    return root, samples


class Runs:
    """Trains each (regularisation, seed) cell at most once per session."""

    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.cache = {}

    def get(self, reg: str, seed: int):
        key = (reg, seed)
        if key not in self.cache:
            cfg = TrainConfig(seed=seed, **(FULL if reg == "full" else NONE))
            start = time.perf_counter()
            ckpt = train(cfg, self.data_dir)
            elapsed = time.perf_counter() - start
            self.cache[key] = (ckpt, evaluate(ckpt, self.data_dir, "test"), elapsed)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(dataset):
    return Runs(dataset[0])


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    gen = GeneratorConfig()
    batch = collate(generate_dataset(gen, 99, {"train": 4})["train"])
    worst = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        emb = as_array(rng.random((6, 5, 8)))
        mv = as_array(rng.random((6, 16, 5)))
        logits = as_array(rng.standard_normal((6, 3)))
        target = torch.as_tensor(rng.integers(0, 3, 6))
        pred = as_array(rng.random((6, 8, 17, 2)) * 512)
        truth = as_array(rng.random((6, 8, 17, 2)) * 512)
        cfg = TrainConfig(seed=seed)
        model = build_model(cfg, gen)
        g = torch.Generator().manual_seed(seed)
        tn = torch.randn(4, cfg.noise_dim, generator=g, dtype=DTYPE)
        pn = torch.randn(4, cfg.noise_dim, generator=g, dtype=DTYPE)
        checks = {
            "cluster": (lambda: clustering_loss(emb, 0.1), [emb], None),
            "l1": (lambda: l1_sparsity(mv), [mv], None),
            "ce": (lambda: cross_entropy(softmax_rows(logits), target), [logits], None),
            "mse": (lambda: sequence_mse(pred, truth, (512, 512)), [pred], 200),
            "composite": (lambda: compute_losses(model, batch, tn, pn, cfg.loss_config)[0],
                          list(model.parameters()), 40),
        }
        for name, (fn, leaves, cap) in checks.items():
            res = gradient_check(fn, leaves, max_coords=cap, seed=seed)
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(1, "gradient checks < 1e-4 at 5 points, < 60 s", ok, detail)


def test_criterion_2_clustering_oracle():
    ortho = clustering_loss(as_array([[[1.0, 0.0]], [[0.0, 1.0]]]), 1.0).item()
    same = clustering_loss(as_array([[[0.6, 0.8]], [[0.6, 0.8]]]), 1.0).item()
    single = clustering_loss(as_array(np.random.default_rng(0).random((1, 5, 4))), 1.0).item()
    ok = abs(ortho - 0.313262) <= 1e-6 and abs(ortho - math.log1p(math.exp(-1))) <= 1e-9
    ok = ok and abs(same - math.log(2)) <= 1e-9 and single == 0.0
    verdict(2, "clustering loss oracle", ok, f"orthonormal {ortho:.9f}, identical {same:.9f}, B=1 {single}")


def test_criterion_3_topk_ms_oracle():
    hand = top_k_ms([1.0, 0.0, 0.0, 0.0], 1)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        # a pool of exactly K entries has psi identically 0, so draw more than K
        pool = rng.random(int(rng.integers(6, 80))) * rng.uniform(0.1, 10)
        a, b = rng.uniform(0.05, 20), rng.uniform(-10, 10)
        base = top_k_ms(pool, 5)
        worst = max(worst, abs(top_k_ms(a * pool + b, 5) - base / a) / abs(base / a))
    flat = top_k_ms([0.7] * 6, 5)
    ok = abs(hand - 3.0) <= 1e-9 and worst <= 1e-6 and flat == 0.0
    verdict(3, "Top-K MS oracle", ok, f"psi {hand}, affine rel err {worst:.1e}, constant pool {flat}")


def test_criterion_4_end_to_end(runs, dataset):
    ckpt, rep, elapsed = runs.get("full", 0)
    train_actions = np.array([s.action for s in dataset[1]["train"]])
    test_actions = np.array([s.action for s in dataset[1]["test"]])
    majority = float(np.mean(test_actions == np.bincount(train_actions).argmax()))
    ok = (elapsed < 600 and rep.accuracy >= 0.85 and majority <= 0.55
          and rep.traj_mse < rep.baseline_traj_mse and rep.pose_mse < rep.baseline_pose_mse)
    detail = (f"train {elapsed:.0f}s, accuracy {rep.accuracy:.3f} vs majority {majority:.3f}, "
              f"traj {rep.traj_mse:.2e} < {rep.baseline_traj_mse:.2e}, "
              f"pose {rep.pose_mse:.2e} < {rep.baseline_pose_mse:.2e}")
    verdict(4, "end-to-end learning", ok, detail)


def test_criterion_5_regularization_direction(runs):
    wins, drops, parts = 0, [], []
    for seed in SEEDS:
        full = runs.get("full", seed)[1]
        none = runs.get("none", seed)[1]
        wins += full.mean_topk_ms > none.mean_topk_ms
        drops.append(none.accuracy - full.accuracy)
        parts.append(f"seed {seed}: {full.mean_topk_ms:.3g} vs {none.mean_topk_ms:.3g}")
    ok = wins >= 2 and max(drops) <= 0.05
    verdict(5, "regularisation raises mean Top-5 MS", ok,
            f"{wins}/3 seeds; {'; '.join(parts)}; max accuracy drop {max(drops):.3f}")


def test_criterion_6_purity_vs_shuffled(runs, dataset):
    ckpt, rep, _ = runs.get("full", 0)
    top5 = np.argsort(-np.array(rep.psi), kind="stable")[:5]
    purity = float(np.mean([rep.purity[n] for n in top5]))
    # recover the same top-5 sample lists the report used
    batch = collate(read_dataset(dataset[0], "test"))
    ms = top_k_ms_report(activations(ckpt.model(), batch), ckpt.config.k_topms, batch.ids)
    tops = [[e[0] for e in ms.top[n]] for n in top5]
    labels = dict(zip(batch.ids.tolist(), batch.concepts))
    baseline = shuffled_purity(tops, labels, n_shuffles=1000, seed=0)
    ok = purity >= 1.5 * baseline
    verdict(6, "top-5 MS prototypes are concept-pure", ok,
            f"purity {purity:.3f} vs shuffled {baseline:.3f} (ratio {purity / baseline:.2f})")


def zero_aggregate_oracle(ckpt, samples):
    """Best-of-k trajectory/pose error of the decoders fed an all-zero condition."""
    model = ckpt.model()
    cfg = ckpt.config
    zero = torch.zeros(model.traj_head.n_inputs, dtype=DTYPE)
    traj_err, pose_err = [], []
    with torch.no_grad():
        for s in samples:
            best_t = best_p = math.inf
            for draw in range(cfg.best_of):
                tn, pn = eval_noise(cfg.seed, s.id, draw, model.noise_dim)
                traj = model.traj_head(zero, torch.as_tensor(tn), torch.as_tensor(s.traj_obs[-1]))
                pose = model.pose_head(zero, torch.as_tensor(pn), torch.as_tensor(s.pose_obs[-1]))
                best_t = min(best_t, normalized_mse(traj.numpy(), s.traj_fut, s.img_size))
                best_p = min(best_p, normalized_mse(pose.numpy(), s.pose_fut, s.img_size))
            traj_err.append(best_t)
            pose_err.append(best_p)
    return float(np.mean(traj_err)), float(np.mean(pose_err))


def test_criterion_7_partial_prototypes(runs, dataset):
    data_dir, samples = dataset
    ckpt, full, _ = runs.get("full", 0)
    n = ckpt.config.n_prototypes
    problems = []

    unmasked = full.to_dict()
    unmasked.pop("kept_prototypes")
    for criterion in ("topk-ms", "linear-weight"):
        rep = ablate_partial(ckpt, data_dir, criterion, n).to_dict()
        if rep.pop("kept_prototypes") != list(range(n)) or rep != unmasked:
            problems.append(f"keep-all {criterion} differs")

    empty = evaluate(ckpt, data_dir, "test", keep=[])
    test = samples["test"]
    class0 = float(np.mean([s.action == 0 for s in test]))
    oracle_traj, oracle_pose = zero_aggregate_oracle(ckpt, test)
    if empty.accuracy != class0:
        problems.append(f"keep-none accuracy {empty.accuracy} != {class0}")
    if abs(empty.traj_mse - oracle_traj) > 1e-12 or abs(empty.pose_mse - oracle_pose) > 1e-12:
        problems.append("keep-none MSE differs from the zero-aggregate decoder")

    kept = {}
    for criterion in ("topk-ms", "linear-weight"):
        rep = ablate_partial(ckpt, data_dir, criterion, 5)
        kept[criterion] = rep.kept_prototypes
        valid = (len(rep.kept_prototypes) == 5 and len(set(rep.kept_prototypes)) == 5
                 and all(0 <= k < n for k in rep.kept_prototypes)
                 and 0 <= rep.accuracy <= 1 and np.isfinite([rep.traj_mse, rep.pose_mse]).all())
        if not valid:
            problems.append(f"{criterion} 5-of-{n} report invalid")
    detail = (f"class-0 freq {class0:.3f}, keep-none traj {empty.traj_mse:.3e}/{oracle_traj:.3e}; "
              f"topk-ms kept {kept['topk-ms']}, linear-weight kept {kept['linear-weight']}")
    verdict(7, "partial-prototype harness", not problems, "; ".join(problems) or detail)


def test_criterion_8_determinism_and_persistence(runs, dataset, tmp_path):
    data_dir, samples = dataset
    problems = []

    # two runs from one seed: the default model, two epochs each
    cfg = TrainConfig(seed=5, epochs=2)
    a = save_checkpoint(train(cfg, data_dir), tmp_path / "a.ckpt").read_bytes()
    b = save_checkpoint(train(cfg, data_dir), tmp_path / "b.ckpt").read_bytes()
    if a != b:
        problems.append("checkpoints differ")

    ckpt, in_memory, _ = runs.get("full", 0)
    reloaded = evaluate(load_checkpoint(save_checkpoint(ckpt, tmp_path / "full.ckpt")), data_dir, "test")
    worst = 0.0
    for key, value in in_memory.to_dict().items():
        other = reloaded.to_dict()[key]
        if isinstance(value, list):
            worst = max([worst] + [abs(x - y) for x, y in zip(value, other)])
            if len(value) != len(other):
                problems.append(f"{key} length differs")
        elif isinstance(value, float):
            worst = max(worst, abs(value - other))
        elif value != other:
            problems.append(f"{key} differs")
    if worst > 1e-12:
        problems.append(f"reloaded metrics differ by {worst:.1e}")

    mismatched = 0
    for split, items in samples.items():
        for x, y in zip(items, read_dataset(data_dir, split)):
            same = all(
                np.array_equal(getattr(x, f), getattr(y, f)) if isinstance(getattr(x, f), np.ndarray)
                else getattr(x, f) == getattr(y, f)
                for f in x.__dataclass_fields__
            )
            mismatched += not same
    if mismatched:
        problems.append(f"{mismatched} samples changed on disk")
    detail = f"{len(a)} byte checkpoints identical, reload max diff {worst:.1e}, 2500 samples field-exact"
    verdict(8, "determinism and persistence", not problems, "; ".join(problems) or detail)
