"""Synthetic generator: determinism, planted geometry, popularity law, and the
ground-truth file format."""

from __future__ import annotations

import numpy as np
import pytest

from symcere.data import DataError
from symcere.synth import (
    SynthConfig,
    _orthonormal_axes,
    generate,
    read_ground_truth,
    write_ground_truth,
)


def small_config(**overrides):
    base = dict(
        num_users=40,
        num_items=30,
        num_clusters=5,
        interactions_per_user=6,
        popularity_exponent=1.0,
        text_dim=12,
        subjective_weight=0.6,
        noise_scale=0.1,
        seed=3,
    )
    base.update(overrides)
    return SynthConfig(**base)


def test_same_seed_identical_bytes():
    a = generate(small_config())
    b = generate(small_config())
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert np.array_equal(a.dataset.train_users, b.dataset.train_users)
    assert np.array_equal(a.dataset.test_items, b.dataset.test_items)
    assert a.ground_truth.cluster_axes.tobytes() == b.ground_truth.cluster_axes.tobytes()
    assert [r.item_key for r in a.records] == [r.item_key for r in b.records]


def test_different_seed_differs():
    a = generate(small_config(seed=3))
    b = generate(small_config(seed=4))
    assert a.embeddings.tobytes() != b.embeddings.tobytes()


def test_embeddings_unit_norm():
    res = generate(small_config())
    norms = np.linalg.norm(res.embeddings.astype(np.float64), axis=1)
    assert np.abs(norms - 1.0).max() < 1e-5


def test_axes_orthonormal():
    res = generate(small_config())
    gt = res.ground_truth
    frame = np.vstack([gt.cluster_axes, gt.subjective_axis])
    gram = frame @ frame.T
    assert np.abs(gram - np.eye(frame.shape[0])).max() < 1e-6


def test_orthonormal_axes_helper_deterministic():
    a = _orthonormal_axes(np.random.default_rng(9), 8, 4)
    b = _orthonormal_axes(np.random.default_rng(9), 8, 4)
    assert np.array_equal(a, b)
    assert np.abs(a @ a.T - np.eye(4)).max() < 1e-10


def test_subjective_energy_matches_weight():
    # lambda = 0.6 plants exactly 0.36 of squared mass on the subjective axis
    res = generate(small_config(num_users=300, interactions_per_user=8))
    gt = res.ground_truth
    proj = res.embeddings.astype(np.float64) @ gt.subjective_axis
    energy = float(np.mean(proj**2))
    assert energy == pytest.approx(0.36, abs=0.02)
    # per-row the split is exact by construction up to float32 storage
    assert np.abs(proj**2 - 0.36).max() < 1e-6


def test_objective_energy_complements_subjective():
    res = generate(small_config())
    gt = res.ground_truth
    coords = res.embeddings.astype(np.float64) @ gt.cluster_axes.T
    obj_energy = float(np.mean(np.sum(coords**2, axis=1)))
    assert obj_energy == pytest.approx(1.0 - 0.36, abs=1e-6)


def test_lambda_zero_noise_zero_on_axis():
    res = generate(
        small_config(subjective_weight=0.0, noise_scale=0.0, popularity_exponent=0.0)
    )
    gt = res.ground_truth
    emb = res.embeddings.astype(np.float64)
    train_items = res.dataset.train_items
    for r in range(emb.shape[0]):
        axis = gt.cluster_axes[gt.item_cluster[train_items[r]]]
        assert np.abs(emb[r] - axis).max() < 1e-6


def test_uniform_frequencies_at_zero_exponent():
    cfg = small_config(
        num_users=600,
        num_items=10,
        num_clusters=1,
        interactions_per_user=1,
        popularity_exponent=0.0,
        text_dim=4,
    )
    res = generate(cfg)
    counts = np.bincount(
        [int(r.item_key[1:]) for r in res.records], minlength=cfg.num_items
    )
    n = len(res.records)
    p = 1.0 / cfg.num_items
    sigma = np.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() < 3 * sigma + 1


def test_power_law_rank1_to_rank2_ratio():
    # single cluster isolates the popularity law from affinity effects
    cfg = SynthConfig(
        num_users=20000,
        num_items=50,
        num_clusters=1,
        interactions_per_user=1,
        popularity_exponent=1.0,
        text_dim=4,
        subjective_weight=0.0,
        noise_scale=0.0,
        seed=5,
    )
    res = generate(cfg)
    counts = np.bincount(
        [int(r.item_key[1:]) for r in res.records], minlength=cfg.num_items
    )
    ratio = counts[0] / counts[1]
    assert ratio == pytest.approx(2.0, rel=0.1)


def test_popularity_weights_sum_to_one():
    res = generate(small_config())
    assert res.ground_truth.item_popularity.sum() == pytest.approx(1.0)


def test_affinity_concentrates_on_preferred_cluster():
    cfg = small_config(num_users=400, interactions_per_user=5, popularity_exponent=0.0)
    res = generate(cfg)
    gt = res.ground_truth
    ds = res.dataset
    # per user, the most-hit cluster should be hit roughly 80% of the time
    hits = in_cluster = 0
    for u in range(ds.num_users):
        items = ds.train_items[ds.train_users == u]
        clusters = gt.item_cluster[items]
        counts = np.bincount(clusters, minlength=cfg.num_clusters)
        in_cluster += counts.max()
        hits += items.size
    frac = in_cluster / hits
    assert 0.7 < frac < 0.95


def test_embedding_rows_align_with_train_order():
    res = generate(small_config())
    assert res.embeddings.shape == (res.dataset.n_train, small_config().text_dim)
    gt = res.ground_truth
    emb = res.embeddings.astype(np.float64)
    # each row's dominant cluster axis must be its own item's cluster
    coords = emb @ gt.cluster_axes.T
    dominant = np.argmax(np.abs(coords), axis=1)
    own = gt.item_cluster[res.dataset.train_items]
    assert np.mean(dominant == own) > 0.95


def test_infeasible_config_rejected():
    with pytest.raises(ValueError, match="distinct items"):
        small_config(interactions_per_user=31).validate()
    with pytest.raises(ValueError, match="text_dim"):
        small_config(text_dim=5).validate()
    with pytest.raises(ValueError, match="subjective_weight"):
        small_config(subjective_weight=1.5).validate()


def test_ground_truth_file_roundtrip(tmp_path):
    res = generate(small_config())
    p = tmp_path / "gt.symg"
    write_ground_truth(p, res.ground_truth)
    back = read_ground_truth(p)
    assert np.array_equal(back.item_cluster, res.ground_truth.item_cluster)
    assert np.array_equal(back.cluster_axes, res.ground_truth.cluster_axes)
    assert np.array_equal(back.subjective_axis, res.ground_truth.subjective_axis)
    assert np.array_equal(back.item_popularity, res.ground_truth.item_popularity)


def test_ground_truth_file_rejects_truncation(tmp_path):
    res = generate(small_config())
    p = tmp_path / "gt.symg"
    write_ground_truth(p, res.ground_truth)
    blob = p.read_bytes()
    p.write_bytes(blob[:-1])
    with pytest.raises(DataError, match="expected"):
        read_ground_truth(p)


def test_ground_truth_file_rejects_bad_magic(tmp_path):
    res = generate(small_config())
    p = tmp_path / "gt.symg"
    write_ground_truth(p, res.ground_truth)
    blob = bytearray(p.read_bytes())
    blob[:4] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="magic"):
        read_ground_truth(p)
