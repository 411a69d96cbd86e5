"""Geometric diagnostics: how spread out the learned representations are,
whether norms track popularity, and how much planted subjective signal the
projection retains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import ProjectionHead, l2_normalize, project_text
from .synth import SynthGroundTruth


@dataclass
class UniformityStats:
    """Summary of pairwise cosine similarities over sampled distinct pairs.

    A collapsed representation shows a high mean and a tiny standard
    deviation; a healthy one spreads out.  Exhaustive when the requested
    sample covers every distinct pair.
    """

    mean: float
    std_dev: float
    min: float
    p25: float
    p75: float
    max: float
    num_pairs: int
    exhaustive: bool
    seed: int


def cosine_similarity_stats(
    embeddings: np.ndarray, num_pairs: int = 100_000, seed: int = 0
) -> UniformityStats:
    """Cosine similarity over distinct row pairs, sampled without replacement.

    Falls back to full enumeration when num_pairs covers all n*(n-1)/2 pairs.
    Computation is float64; std_dev is the unbiased estimator (0.0 for a single
    pair).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise ValueError("need at least two rows")
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    units = l2_normalize(emb)
    total = n * (n - 1) // 2
    exhaustive = num_pairs >= total
    if exhaustive:
        iu, ju = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        chosen: set[tuple[int, int]] = set()
        while len(chosen) < num_pairs:
            draw = rng.integers(0, n, size=(num_pairs - len(chosen), 2))
            for a, b in draw.tolist():
                if a == b:
                    continue
                pair = (a, b) if a < b else (b, a)
                chosen.add(pair)
                if len(chosen) == num_pairs:
                    break
        pairs = np.array(sorted(chosen), dtype=np.int64)
        iu, ju = pairs[:, 0], pairs[:, 1]
    sims = np.sum(units[iu] * units[ju], axis=1)
    std_dev = float(np.std(sims, ddof=1)) if sims.size > 1 else 0.0
    return UniformityStats(
        mean=float(sims.mean()),
        std_dev=std_dev,
        min=float(sims.min()),
        p25=float(np.percentile(sims, 25)),
        p75=float(np.percentile(sims, 75)),
        max=float(sims.max()),
        num_pairs=int(sims.size),
        exhaustive=exhaustive,
        seed=int(seed),
    )


def dimension_variance(embeddings: np.ndarray) -> np.ndarray:
    """Unbiased per-coordinate variance across rows (float64)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] < 2:
        raise ValueError("need at least two rows")
    return emb.var(axis=0, ddof=1)


def variance_histogram(variances: np.ndarray, bins: int = 50):
    """(counts, edges) over [0, max]; degenerate all-zero input spans [0, 1]."""
    v = np.asarray(variances, dtype=np.float64)
    hi = float(v.max())
    if hi <= 0.0:
        hi = 1.0
    counts, edges = np.histogram(v, bins=bins, range=(0.0, hi))
    return counts, edges


def popularity_norm_correlation(
    item_embeddings: np.ndarray, train_frequency: np.ndarray
):
    """Pearson correlation between log(1 + frequency) and embedding norm.

    Returns (r, scatter) where scatter has one (log-frequency, norm) row per
    item for plotting.  Raises when either side is constant, since the
    correlation is undefined there.
    """
    emb = np.asarray(item_embeddings, dtype=np.float64)
    freq = np.asarray(train_frequency, dtype=np.float64)
    if emb.shape[0] != freq.shape[0]:
        raise ValueError(
            f"{emb.shape[0]} embedding rows vs {freq.shape[0]} frequencies"
        )
    if emb.shape[0] < 2:
        raise ValueError("need at least two items")
    norms = np.linalg.norm(emb, axis=1)
    logf = np.log1p(freq)
    if np.ptp(logf) == 0.0 or np.ptp(norms) == 0.0:
        raise ValueError("constant input; correlation undefined")
    r = float(np.corrcoef(logf, norms)[0, 1])
    return r, np.stack([logf, norms], axis=1)


@dataclass
class AnchoringEnergies:
    """Mean squared projection of unit text representations onto the planted
    axes, mapped into the shared space: objective (each row against its own
    item's cluster axis), subjective, and the remainder."""

    objective: float
    subjective: float
    residual: float


def anchoring_energy(
    text_embeddings: np.ndarray,
    row_clusters: np.ndarray,
    head: ProjectionHead,
    ground_truth: SynthGroundTruth,
) -> AnchoringEnergies:
    """Decompose projected text energy along the planted axes.

    The cluster axes and the subjective axis are pushed through the linear
    part of the projection (directions have no bias) and re-orthonormalized
    in a fixed order, cluster axes first, so the subjective direction is
    whatever part of its image the cluster images do not span.  Rows are
    projected, normalized, and scored against their own item's axis.
    """
    axes = np.vstack([ground_truth.cluster_axes, ground_truth.subjective_axis[None, :]])
    c = ground_truth.cluster_axes.shape[0]
    d = head.w.shape[1]
    if c + 1 > d:
        raise ValueError(
            f"{c} cluster axes plus the subjective axis exceed the {d}-dim space"
        )
    images = axes @ head.w.astype(np.float64)  # (c+1, d)
    q, r = np.linalg.qr(images.T)
    signs = np.sign(np.diag(r))
    if (signs == 0).any():
        raise ValueError("planted axes collapse under the projection")
    q = q * signs  # (d, c+1), columns orthonormal, order preserved

    projected = l2_normalize(project_text(head, text_embeddings))
    row_clusters = np.asarray(row_clusters, dtype=np.int64)
    if row_clusters.shape[0] != projected.shape[0]:
        raise ValueError("one cluster id per row required")

    coords = projected @ q  # (n, c+1)
    own = coords[np.arange(projected.shape[0]), row_clusters]
    objective = float(np.mean(own**2))
    subjective = float(np.mean(coords[:, c] ** 2))
    return AnchoringEnergies(
        objective=objective,
        subjective=subjective,
        residual=1.0 - objective - subjective,
    )


def write_histogram_tsv(path, counts: np.ndarray, edges: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left\tbin_right\tcount\n")
        for i, count in enumerate(counts.tolist()):
            fh.write(f"{edges[i]:.8g}\t{edges[i + 1]:.8g}\t{count}\n")


def write_scatter_tsv(path, scatter: np.ndarray, header: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header.rstrip("\n") + "\n")
        for row in scatter:
            fh.write("\t".join(f"{x:.8g}" for x in row) + "\n")
