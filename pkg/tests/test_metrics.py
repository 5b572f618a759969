import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spn.errors import ConfigError, ContractError, RangeError, ShapeError
from spn.metrics import (
    EvalReport, classification_metrics, concept_histogram, concept_purity, normalized_mse,
    shuffled_purity, top_k_ms, top_k_ms_report,
)
from spn.prototypes import ExplanationSet


def test_psi_hand_example():
    assert top_k_ms([1.0, 0.0, 0.0, 0.0], 1) == pytest.approx(3.0, abs=1e-9)


def test_psi_constant_pool():
    assert top_k_ms([2.5] * 4, 1) == 0.0
    assert top_k_ms(np.full(10, 1e-3), 5) == 0.0


def test_psi_scaling_halves():
    pool = np.random.default_rng(0).random(20)
    assert top_k_ms(2 * pool, 5) == pytest.approx(top_k_ms(pool, 5) / 2, rel=1e-12)


def test_psi_affine_covariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pool = rng.random(int(rng.integers(5, 60))) * rng.uniform(0.1, 10)
        a, b = rng.uniform(0.1, 10), rng.uniform(-5, 5)
        base = top_k_ms(pool, 5)
        assert top_k_ms(a * pool + b, 5) == pytest.approx(base / a, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=6, max_size=40), st.randoms(use_true_random=False))
def test_psi_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert top_k_ms(shuffled, 3) == pytest.approx(top_k_ms(values, 3), rel=1e-9, abs=1e-12)


def test_psi_dilution():
    # a few large spikes, the rest at or below the mean
    pool = np.array([9.0, 8.0, 7.5, 1.0, 0.5, 0.2, 0.0, 0.0, 0.0, 0.0])
    assert (pool[3:] <= pool.mean()).all()
    values = [top_k_ms(pool, k) for k in range(1, len(pool) + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_psi_range_errors():
    with pytest.raises(RangeError):
        top_k_ms([1.0, 2.0], 3)
    with pytest.raises(RangeError):
        top_k_ms([1.0], 1)


def test_report_matches_scalar_metric():
    acts = np.random.default_rng(2).random((7, 3, 2))
    rep = top_k_ms_report(acts, 5, sample_ids=np.arange(10, 17))
    assert rep.pool_size == 14 and rep.k == 5
    for n in range(3):
        pool = acts[:, n, :].ravel()
        assert rep.psi[n] == top_k_ms(pool, 5)
        assert rep.mean[n] == pytest.approx(pool.mean())
        assert rep.variance[n] == pytest.approx(pool.var(ddof=1))
        top = [a for *_, a in rep.top[n]]
        assert top == sorted(pool, reverse=True)[:5]
    assert rep.mean_psi == pytest.approx(np.mean(rep.psi))


def test_classification_examples():
    assert classification_metrics([0, 1, 2], [0, 1, 2], 3) == (1.0, 1.0)
    acc, f1 = classification_metrics([1, 1, 1, 1], [1, 0, 1, 0], 2)
    assert acc == 0.5 and f1 == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        classification_metrics([0, 1], [0], 2)
    with pytest.raises(ContractError):
        classification_metrics([], [], 2)


def test_macro_f1_with_missing_class():
    # class 2 never predicted nor present: its F1 counts as 0
    acc, f1 = classification_metrics([0, 1, 0, 1], [0, 1, 0, 1], 3)
    assert acc == 1.0 and f1 == pytest.approx(2 / 3)


def test_normalized_mse():
    truth = np.random.default_rng(0).random((8, 4)) * 300
    assert normalized_mse(truth, truth, (640, 480)) == 0.0
    assert normalized_mse(truth + [640, 480, 640, 480], truth, (640, 480)) == pytest.approx(1.0)
    pose = np.random.default_rng(1).random((8, 17, 2)) * 300
    assert normalized_mse(pose + [640, 480], pose, (640, 480)) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        normalized_mse(truth, truth, (0, 480))
    with pytest.raises(ShapeError):
        normalized_mse(truth, truth[:4], (640, 480))


def test_normalized_mse_rescale_invariant():
    rng = np.random.default_rng(3)
    a, b = rng.random((8, 4)) * 500, rng.random((8, 4)) * 500
    for s in (0.5, 2.0, 3.7):
        assert normalized_mse(s * a, s * b, (512 * s, 384 * s)) == pytest.approx(
            normalized_mse(a, b, (512, 384)), rel=1e-12)


def test_purity_examples():
    labels = {0: [1], 1: [1, 3], 2: [1], 3: [1, 2], 4: [1]}
    assert concept_purity([0, 1, 2, 3, 4], labels) == 1.0
    labels = {0: ["a"], 1: ["a"], 2: ["b"], 3: ["b"], 4: ["c"]}
    assert concept_purity([0, 1, 2, 3, 4], labels) == pytest.approx(0.4)
    assert concept_purity([3], labels) == 1.0
    ex = ExplanationSet(0, [(0, 0, 1.0), (2, 1, 0.5)])
    assert concept_purity(ex, labels) == 0.5
    with pytest.raises(ContractError):
        concept_purity([9], labels)


def test_histogram_counts_each_sample_once():
    labels = {0: [1, 1, 2], 1: [2]}
    assert concept_histogram([0, 1], labels) == {1: 1, 2: 2}


def test_shuffled_purity_of_uniform_labels():
    labels = {i: [7] for i in range(20)}
    assert shuffled_purity([[0, 1, 2]], labels, n_shuffles=10) == 1.0
    labels = {i: [i % 5] for i in range(50)}
    base = shuffled_purity([[0, 5, 10, 15, 20]], labels, n_shuffles=200, seed=1)
    assert concept_purity([0, 5, 10, 15, 20], labels) == 1.0
    assert 0.2 <= base < 0.7


def test_eval_report_bounds():
    with pytest.raises(ContractError):
        EvalReport(accuracy=1.2, f1=0.5, traj_mse=0.0, pose_mse=0.0, mean_topk_ms=0.0)
    with pytest.raises(ContractError):
        EvalReport(accuracy=1.0, f1=0.5, traj_mse=-1.0, pose_mse=0.0, mean_topk_ms=0.0)
    rep = EvalReport(accuracy=1.0, f1=0.5, traj_mse=0.0, pose_mse=0.0, mean_topk_ms=0.0)
    assert set(rep.to_dict()) >= {"accuracy", "f1", "traj_mse", "pose_mse", "mean_topk_ms", "purity"}
