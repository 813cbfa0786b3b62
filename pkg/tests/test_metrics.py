"""Metric tests against brute-force and closed-form oracles.

Pair counting, exhaustive assignment enumeration, permutation baselines, and
quantile-function integrals; no expected value is taken from the metric
implementations themselves.
"""

import itertools
import math

import numpy as np
import pytest

from modedyn.datagen import GeneratorConfig, generate_bistable, true_expert_thetas
from modedyn.library import build_library, rescale_theta
from modedyn.local import EmConfig, LocalModel
from modedyn.metrics import (
    PartitionScore,
    ari,
    best_permutation,
    metric_record,
    nmi,
    partition_score,
    recovery_report,
    roc_auc,
    wasserstein_1d,
    wasserstein_joint,
)


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------

def _rand_index_pairs(a, b):
    """ARI by direct enumeration of all point pairs."""
    n = len(a)
    same_a = np.equal.outer(a, a)
    same_b = np.equal.outer(b, b)
    iu = np.triu_indices(n, k=1)
    agree = same_a[iu] & same_b[iu]
    # expected-index correction on the pair-counting contingency table
    both = np.sum(agree)
    pairs_a = np.sum(same_a[iu])
    pairs_b = np.sum(same_b[iu])
    total = len(iu[0])
    expected = pairs_a * pairs_b / total
    max_index = 0.5 * (pairs_a + pairs_b)
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def _auc_pairs(scores, labels):
    """AUC by direct comparison of every positive/negative pair."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for s in pos:
        wins += np.sum(s > neg) + 0.5 * np.sum(s == neg)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# partition metrics
# ---------------------------------------------------------------------------

def test_ari_identical_partitions():
    labels = np.array([0, 0, 1, 2, 2, 1])
    assert ari(labels, labels) == 1.0
    # relabeling does not change identity
    assert ari(labels, labels + 7) == 1.0


def test_ari_one_constant_partition_scores_zero():
    a = np.zeros(10, dtype=int)
    b = np.arange(10) % 3
    assert ari(a, b) == 0.0
    assert ari(b, a) == 0.0


def test_ari_both_constant_scores_one():
    assert ari(np.zeros(6), np.ones(6)) == 1.0


def test_ari_crossed_pairs_is_minus_half():
    assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5, abs=1e-12)


def test_ari_matches_pair_enumeration_on_random_partitions():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = rng.integers(5, 50)
        a = rng.integers(0, rng.integers(2, 6), size=n)
        b = rng.integers(0, rng.integers(2, 6), size=n)
        assert ari(a, b) == pytest.approx(_rand_index_pairs(a, b), abs=1e-12)
        assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-15)


def test_ari_input_validation():
    with pytest.raises(ValueError):
        ari([0], [1])
    with pytest.raises(ValueError):
        ari([0, 1], [0, 1, 2])


def test_nmi_identical_partitions():
    labels = np.array([0, 1, 1, 2, 0, 2])
    assert nmi(labels, labels) == pytest.approx(1.0, abs=1e-12)


def test_nmi_zero_when_either_entropy_zero():
    assert nmi(np.zeros(8), np.arange(8) % 2) == 0.0
    assert nmi(np.arange(8) % 2, np.zeros(8)) == 0.0


def test_nmi_independent_labels_near_zero():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 4, size=100_000)
    b = rng.integers(0, 4, size=100_000)
    assert nmi(a, b) <= 0.01


def test_nmi_relabeling_and_symmetry():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 3, size=40)
    b = rng.integers(0, 4, size=40)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-14)
    remap = np.array([5, 9, 7])
    assert nmi(remap[a], b) == pytest.approx(nmi(a, b), abs=1e-14)


def test_nmi_closed_form_half_dependent():
    # two balanced binary partitions agreeing on exactly 3/4 of the points:
    # joint (3/8, 1/8, 1/8, 3/8); MI = sum p log(p / 1/4); H = log 2
    a = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    b = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    mi = 2 * (3 / 8) * math.log((3 / 8) / (1 / 4)) + 2 * (1 / 8) * math.log((1 / 8) / (1 / 4))
    assert nmi(a, b) == pytest.approx(mi / math.log(2), abs=1e-12)


def test_partition_score_bundle():
    score = partition_score([0, 0, 1, 1], [0, 0, 1, 1])
    assert isinstance(score, PartitionScore)
    assert score.ari == 1.0 and score.nmi == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# transport distances
# ---------------------------------------------------------------------------

def test_w1d_identical_and_translation():
    rng = np.random.default_rng(3)
    a = rng.normal(size=200)
    assert wasserstein_1d(a, a, 1) == 0.0
    assert wasserstein_1d(a, a + 0.7, 1) == pytest.approx(0.7, abs=1e-12)
    assert wasserstein_1d(a, a - 1.2, 2) == pytest.approx(1.2, abs=1e-12)


def test_w1d_uniform_grids():
    a = (np.arange(1000) + 0.5) / 1000.0
    b = 2.0 * (np.arange(1000) + 0.5) / 1000.0
    # quantile functions q and 2q: integral of |q| over [0,1] is 1/2
    assert wasserstein_1d(a, b, 1) == pytest.approx(0.5, rel=0.02)


def test_w1d_unequal_sizes_consistent():
    rng = np.random.default_rng(4)
    a = rng.normal(size=900)
    b = rng.normal(loc=0.3, size=400)
    full = wasserstein_1d(a, b, 1)
    # against the equal-size estimate on matched draws the gap is small
    b2 = rng.normal(loc=0.3, size=900)
    assert abs(full - wasserstein_1d(a, b2, 1)) < 0.05
    with pytest.raises(ValueError):
        wasserstein_1d(a, [], 1)
    with pytest.raises(ValueError):
        wasserstein_1d(a, b, 3)


def test_wjoint_trivial_cases():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(40, 3))
    assert wasserstein_joint(A, A, 1) == 0.0
    v = np.array([0.3, -0.4, 1.2])
    assert wasserstein_joint(A, A + v, 1) == pytest.approx(np.linalg.norm(v), abs=1e-12)
    swapped = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert wasserstein_joint(np.array([[0.0, 0.0], [1.0, 0.0]]), swapped, 1) == 0.0


def test_wjoint_matches_brute_force_small():
    rng = np.random.default_rng(6)
    for _ in range(20):
        m = rng.integers(2, 9)
        d = rng.integers(1, 4)
        A = rng.normal(size=(m, d))
        B = rng.normal(size=(m, d))
        for p in (1, 2):
            dist = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2))
            best = min(
                (dist[np.arange(m), perm] ** p).mean()
                for perm in map(list, itertools.permutations(range(m)))
            )
            expect = best ** (1.0 / p)
            assert wasserstein_joint(A, B, p) == pytest.approx(expect, abs=1e-12)


def test_wjoint_equals_sorted_matching_in_1d():
    rng = np.random.default_rng(7)
    a = rng.normal(size=60)
    b = rng.normal(loc=0.5, size=60)
    assert wasserstein_joint(a, b, 1) == pytest.approx(wasserstein_1d(a, b, 1), abs=1e-9)
    assert wasserstein_1d(a, b, 1) <= wasserstein_joint(a, b, 1) + 1e-9


def test_wjoint_subsample_deterministic():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(3000, 2))
    B = rng.normal(loc=0.2, size=(2500, 2))
    v1 = wasserstein_joint(A, B, 1, cap=256, seed=11)
    v2 = wasserstein_joint(A, B, 1, cap=256, seed=11)
    v3 = wasserstein_joint(A, B, 1, cap=256, seed=12)
    assert v1 == v2
    assert v1 != v3
    with pytest.raises(ValueError):
        wasserstein_joint(A, np.zeros((4, 3)), 1)


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def test_auc_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 0.9, 0.95, 0.99])
    labels = np.array([0, 0, 0, 1, 1, 1])
    assert roc_auc(scores, labels) == 1.0
    assert roc_auc(-scores, labels) == 0.0


def test_auc_all_ties_is_half():
    assert roc_auc(np.ones(10), np.arange(10) % 2) == 0.5


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(9)
    for _ in range(15):
        n = rng.integers(10, 60)
        scores = np.round(rng.normal(size=n), 1)  # induce ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pytest.approx(
            _auc_pairs(scores, labels), abs=1e-12
        )


def test_auc_complement_identity():
    rng = np.random.default_rng(10)
    scores = rng.normal(size=500)
    labels = rng.integers(0, 2, size=500)
    assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(
        1.0, abs=1e-12
    )


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(11)
    scores = rng.normal(size=10_000)
    labels = rng.integers(0, 2, size=10_000)
    assert abs(roc_auc(scores, labels) - 0.5) < 0.02


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------

def _model_with_thetas(thetas, dim, degree=2):
    lib = build_library(dim, degree)
    K = thetas.shape[0]
    return LocalModel(
        library=lib,
        thetas=np.asarray(thetas, dtype=float),
        sigmas=np.ones(K),
        mixing=np.full(K, 1.0 / K),
        config=EmConfig(n_clusters=K),
    )


def test_best_permutation_brute_force():
    rng = np.random.default_rng(12)
    for K in range(2, 7):
        truth = rng.normal(size=(K, 6, 2))
        perm = rng.permutation(K)
        fitted = truth[perm] + 0.01 * rng.normal(size=truth.shape)
        got = best_permutation(fitted, truth)
        best = min(
            itertools.permutations(range(K)),
            key=lambda q: sum(
                np.linalg.norm(fitted[i] - truth[q[i]]) for i in range(K)
            ),
        )
        assert got == best
        assert sorted(got) == list(range(K))


def test_recovery_exact_model_identity_alignment():
    lib = build_library(2, 2)
    truth = true_expert_thetas("bistable", lib)
    model = _model_with_thetas(truth, dim=2)
    rep = recovery_report(model, truth)
    assert rep.alignment == (0, 1)
    assert rep.max_true_term_error == 0.0
    assert rep.max_spurious_magnitude == 0.0


def test_recovery_swapped_model_swap_alignment():
    lib = build_library(2, 2)
    truth = true_expert_thetas("bistable", lib)
    model = _model_with_thetas(truth[::-1], dim=2)
    rep = recovery_report(model, truth)
    assert rep.alignment == (1, 0)
    assert rep.max_true_term_error == 0.0


def test_recovery_rescaling_round_trip():
    # a model holding normalized-coordinate coefficients scores perfectly
    # once the dataset scales are supplied
    lib = build_library(2, 2)
    truth = true_expert_thetas("bistable", lib)
    ss = np.array([2.0, 0.5])
    vs = np.array([0.8, 1.6])
    stored = np.stack([
        rescale_theta(lib, truth[k], ss, vs, to_raw=False) for k in range(2)
    ])
    model = _model_with_thetas(stored, dim=2)
    rep = recovery_report(model, truth, state_scale=ss, velocity_scale=vs)
    assert rep.max_true_term_error < 1e-12
    assert rep.max_spurious_magnitude < 1e-12


def test_recovery_table_structure_and_errors():
    lib = build_library(2, 1)
    truth = np.zeros((1, 3, 2))
    truth[0, 1, 0] = 2.0
    fitted = truth.copy()
    fitted[0, 1, 0] = 2.1     # error on a true term
    fitted[0, 2, 1] = 0.03    # spurious term
    model = _model_with_thetas(fitted, dim=2, degree=1)
    rep = recovery_report(model, truth)
    assert rep.max_true_term_error == pytest.approx(0.1, abs=1e-12)
    assert rep.max_spurious_magnitude == pytest.approx(0.03, abs=1e-12)
    # rows cover every expert/term/output combination in library order
    assert len(rep.table) == 1 * 3 * 2
    terms = [row[1] for row in rep.table[::2]]
    assert terms == list(lib.terms)


def test_recovery_shape_validation():
    lib = build_library(2, 2)
    truth = true_expert_thetas("bistable", lib)
    model = _model_with_thetas(truth, dim=2)
    with pytest.raises(ValueError):
        recovery_report(model, truth[:, :3, :])
    with pytest.raises(ValueError):
        recovery_report(model, truth[:1])
    with pytest.raises(ValueError):
        recovery_report(model, truth, state_scale=np.ones(2))


def test_recovery_on_real_fit():
    from modedyn.local import fit_local
    from modedyn.datagen import split_dataset

    ds = generate_bistable(GeneratorConfig(n_samples=2000, seed=13))
    tr, va = split_dataset(ds, 0.8, seed=13)
    model = fit_local(tr, EmConfig(n_clusters=2, n_restarts=4, seed=13), val=va)
    lib = model.library
    truth = true_expert_thetas("bistable", lib)
    rep = recovery_report(
        model, truth,
        state_scale=np.array(ds.meta["normalization"]["state_scale"]),
        velocity_scale=np.array(ds.meta["normalization"]["velocity_scale"]),
    )
    assert rep.max_true_term_error < 0.2
    assert rep.max_spurious_magnitude < 0.1


def test_metric_record_drops_missing_fields():
    rec = metric_record("w1", 0.25, p=1, n_a=100, n_b=90, cap=None, seed=None)
    assert rec == {"metric": "w1", "value": 0.25, "p": 1, "n_a": 100, "n_b": 90}
