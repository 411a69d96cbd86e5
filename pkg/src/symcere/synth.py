"""Synthetic dataset generator with planted cluster structure.

Items belong to round-robin clusters and draw popularity from a power law.
Users prefer one cluster and sample items by popularity x cluster affinity.
Each interaction gets a unit text embedding that splits its squared norm
between an objective component (the item's cluster axis plus in-subspace
noise) and a subjective component (a +/- sentiment sign on an axis orthogonal
to every cluster axis).  The planted axes let tests measure how much
subjective energy survives training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, InteractionRecord, InteractionSet, temporal_split

GT_MAGIC = b"SYMG"
GT_VERSION = 1

# probability mass a user puts on their preferred cluster
_PREFERRED_AFFINITY = 0.8


@dataclass(frozen=True)
class SynthConfig:
    num_users: int
    num_items: int
    num_clusters: int
    interactions_per_user: int
    popularity_exponent: float = 1.0
    text_dim: int = 32
    subjective_weight: float = 0.6
    noise_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("need at least one user and one item")
        if not 1 <= self.num_clusters <= self.num_items:
            raise ValueError(
                f"num_clusters must be in [1, num_items], got {self.num_clusters}"
            )
        if self.interactions_per_user < 1:
            raise ValueError("interactions_per_user must be >= 1")
        if self.interactions_per_user > self.num_items:
            raise ValueError(
                "cannot sample "
                f"{self.interactions_per_user} distinct items from {self.num_items}"
            )
        if self.popularity_exponent < 0:
            raise ValueError("popularity_exponent must be >= 0")
        # one orthogonal axis per cluster plus the subjective axis
        if self.text_dim < self.num_clusters + 1:
            raise ValueError(
                f"text_dim {self.text_dim} too small for "
                f"{self.num_clusters} cluster axes plus a subjective axis"
            )
        if not 0.0 <= self.subjective_weight <= 1.0:
            raise ValueError("subjective_weight must be in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


@dataclass
class SynthGroundTruth:
    """Planted structure: per-item cluster ids, orthonormal cluster axes, the
    subjective axis, and the item popularity distribution."""

    item_cluster: np.ndarray  # (num_items,) int32
    cluster_axes: np.ndarray  # (num_clusters, text_dim) float64, orthonormal rows
    subjective_axis: np.ndarray  # (text_dim,) float64, unit, orthogonal to all axes
    item_popularity: np.ndarray  # (num_items,) float64, sums to 1


@dataclass
class SynthResult:
    dataset: InteractionSet
    embeddings: np.ndarray  # (n_train, text_dim) float32, row-aligned with train
    ground_truth: SynthGroundTruth
    records: list[InteractionRecord]


def _orthonormal_axes(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """`count` orthonormal rows of length `dim`, deterministic under the rng."""
    gauss = rng.standard_normal((dim, count))
    q, r = np.linalg.qr(gauss)
    # canonical sign so the basis is unique
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def generate(config: SynthConfig, train_fraction: float = 0.8) -> SynthResult:
    """Generate interactions plus aligned text embeddings and ground truth.

    Fully deterministic for a given config: same seed, same bytes.  Sampling
    order is users in index order, then one embedding per interaction in
    record order.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    c = config.num_clusters
    axes = _orthonormal_axes(rng, config.text_dim, c + 1)
    cluster_axes = axes[:c]
    subjective_axis = axes[c]

    item_cluster = (np.arange(config.num_items) % c).astype(np.int32)
    weights = (np.arange(1, config.num_items + 1, dtype=np.float64)) ** (
        -config.popularity_exponent
    )
    popularity = weights / weights.sum()

    preferred = rng.integers(0, c, size=config.num_users)

    records: list[InteractionRecord] = []
    chosen_items: list[int] = []
    for u in range(config.num_users):
        if c == 1:
            affinity = np.ones(config.num_items)
        else:
            affinity = np.where(
                item_cluster == preferred[u],
                _PREFERRED_AFFINITY,
                (1.0 - _PREFERRED_AFFINITY) / (c - 1),
            )
        w = popularity * affinity
        w = w / w.sum()
        picked = rng.choice(
            config.num_items, size=config.interactions_per_user, replace=False, p=w
        )
        for step, item in enumerate(picked.tolist()):
            records.append(
                InteractionRecord(
                    user_key=f"u{u}", item_key=f"i{item}", timestamp=step
                )
            )
            chosen_items.append(item)

    # one embedding per record, drawn after all interactions so the record
    # order fixes the draw order
    lam = config.subjective_weight
    obj_scale = np.sqrt(max(1.0 - lam * lam, 0.0))
    basis = cluster_axes.T  # (text_dim, c), orthonormal columns
    all_emb = np.empty((len(records), config.text_dim), dtype=np.float64)
    for r, item in enumerate(chosen_items):
        noise = rng.standard_normal(config.text_dim)
        noise_obj = basis @ (basis.T @ noise)
        v = cluster_axes[item_cluster[item]] + config.noise_scale * noise_obj
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            v = cluster_axes[item_cluster[item]]
            norm = 1.0
        sentiment = 1.0 if rng.random() < 0.5 else -1.0
        all_emb[r] = obj_scale * (v / norm) + lam * sentiment * subjective_axis

    dataset = temporal_split(records, train_fraction)
    embeddings = all_emb[dataset.train_source].astype(np.float32)

    gt = SynthGroundTruth(
        item_cluster=_remap_clusters(item_cluster, dataset),
        cluster_axes=cluster_axes,
        subjective_axis=subjective_axis,
        item_popularity=_remap_popularity(popularity, dataset),
    )
    return SynthResult(dataset=dataset, embeddings=embeddings, ground_truth=gt, records=records)


def _remap_clusters(item_cluster: np.ndarray, dataset: InteractionSet) -> np.ndarray:
    """Reindex per-item cluster ids to the dataset's item indices."""
    out = np.zeros(dataset.num_items, dtype=np.int32)
    for idx, key in enumerate(dataset.item_keys):
        out[idx] = item_cluster[int(key[1:])]
    return out


def _remap_popularity(popularity: np.ndarray, dataset: InteractionSet) -> np.ndarray:
    out = np.zeros(dataset.num_items, dtype=np.float64)
    for idx, key in enumerate(dataset.item_keys):
        out[idx] = popularity[int(key[1:])]
    return out


def write_ground_truth(path: str | Path, gt: SynthGroundTruth) -> None:
    """Binary ground-truth file: magic, version, shapes, then the arrays."""
    ni = gt.item_cluster.shape[0]
    c, d = gt.cluster_axes.shape
    header = struct.pack("<4sIQII", GT_MAGIC, GT_VERSION, ni, c, d)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(gt.item_cluster.astype("<i4").tobytes())
        fh.write(gt.cluster_axes.astype("<f8").tobytes())
        fh.write(gt.subjective_axis.astype("<f8").tobytes())
        fh.write(gt.item_popularity.astype("<f8").tobytes())


def read_ground_truth(path: str | Path) -> SynthGroundTruth:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read ground truth {path}: {exc}") from exc
    head = struct.Struct("<4sIQII")
    if len(blob) < head.size:
        raise DataError(f"{path}: truncated header")
    magic, version, ni, c, d = head.unpack_from(blob)
    if magic != GT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != GT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = head.size
    expected = off + ni * 4 + c * d * 8 + d * 8 + ni * 8
    if len(blob) != expected:
        raise DataError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    item_cluster = np.frombuffer(blob, dtype="<i4", count=ni, offset=off).copy()
    off += ni * 4
    axes = np.frombuffer(blob, dtype="<f8", count=c * d, offset=off).reshape(c, d).copy()
    off += c * d * 8
    subj = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    off += d * 8
    pop = np.frombuffer(blob, dtype="<f8", count=ni, offset=off).copy()
    return SynthGroundTruth(
        item_cluster=item_cluster,
        cluster_axes=axes,
        subjective_axis=subj,
        item_popularity=pop,
    )
