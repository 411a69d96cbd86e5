"""Training objectives and their closed-form gradients.

Everything here is plain numpy in float64.  Each loss returns its value
together with gradients w.r.t. its direct inputs; the trainer chains them
through the normalization and the encoder by hand.

The cross-modal loss restricts each anchor's denominator to its own positive
plus verified negatives (batch items the anchor's user never interacted
with), so observed user-item pairs that collide inside a batch are never
pushed apart.  With the mask opened up to every off-diagonal entry the same
code computes the unmasked variant, which it must upper-bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import NormalizedAdjacency, adjacency_from_edges


class NumericError(Exception):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LossWeights:
    """Scales of the objective terms.

    total = cross + alpha * intra + beta * ranking + lambda_reg * ||params||^2
    """

    temperature: float = 0.2
    alpha: float = 0.5
    beta: float = 0.05
    lambda_reg: float = 1e-4

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        for name in ("alpha", "beta", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class ProjectionHead:
    """Affine map from text-encoder space to the graph embedding space."""

    w: np.ndarray  # (text_dim, d) float32
    b: np.ndarray  # (d,) float32


def project_text(head: ProjectionHead, text: np.ndarray) -> np.ndarray:
    """T @ W + b in float64."""
    t = np.asarray(text, dtype=np.float64)
    if t.shape[1] != head.w.shape[0]:
        raise ValueError(
            f"text dimension {t.shape[1]} does not match head input {head.w.shape[0]}"
        )
    return t @ head.w.astype(np.float64) + head.b.astype(np.float64)


def project_text_backward(
    head: ProjectionHead, text: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(dW, db) for the affine projection; the text input is fixed data."""
    t = np.asarray(text, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    return t.T @ g, g.sum(axis=0)


def l2_normalize(x: np.ndarray, return_norms: bool = False):
    """Rows rescaled to unit Euclidean norm, in float64.

    Raises NumericError naming the first offending row when a norm falls at
    or below 1e-12; debiasing depends on every representation actually
    reaching the sphere.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    mat = x[None, :] if single else x
    norms = np.linalg.norm(mat, axis=1)
    bad = np.where(norms <= 1e-12)[0]
    if bad.size:
        raise NumericError(f"cannot normalize row {int(bad[0])}: norm {norms[bad[0]]:g}")
    out = mat / norms[:, None]
    if single:
        out, norms = out[0], norms[0]
    return (out, norms) if return_norms else out


def l2_normalize_backward(
    unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray
) -> np.ndarray:
    """Chain a gradient through row normalization.

    d raw = (grad - (unit . grad) unit) / norm per row: the component along
    the row direction dies, the rest shrinks by the original norm.
    """
    unit = np.asarray(unit, dtype=np.float64)
    grad_unit = np.asarray(grad_unit, dtype=np.float64)
    along = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - along * unit) / np.asarray(norms, dtype=np.float64)[:, None]


def _masked_nce_direction(
    anchors: np.ndarray, candidates: np.ndarray, allowed: np.ndarray, tau: float
):
    """One direction of the contrastive loss with a restricted denominator.

    allowed[i, k] marks candidates admitted to anchor i's log-sum-exp; the
    diagonal (the positive) must be True.  Log-sum-exp is max-shifted so
    unnormalized representations with large inner products stay finite.

    Returns (loss, d_anchors, d_candidates); dL/ds_ik = (p_ik - [k == i]) /
    (B * tau) with p the masked softmax.
    """
    b = anchors.shape[0]
    logits = (anchors @ candidates.T) / tau
    if not np.isfinite(logits).all():
        raise NumericError("non-finite similarity logits")
    neg = np.where(allowed, logits, -np.inf)
    row_max = neg.max(axis=1, keepdims=True)
    expo = np.exp(neg - row_max)
    expo[~allowed] = 0.0
    denom = expo.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    pos = np.diag(logits)
    loss = float(np.mean(lse - pos))

    probs = expo / denom
    d_logits = probs.copy()
    d_logits[np.arange(b), np.arange(b)] -= 1.0
    d_logits /= b * tau
    return loss, d_logits @ candidates, d_logits.T @ anchors


def symcere_cross_modal(
    graph_units: np.ndarray,
    text_units: np.ndarray,
    negative_mask,
    tau: float,
):
    """Symmetric cross-modal alignment loss with false-negative masking.

    Both modalities' rows are batch-aligned: row i's graph representation is
    positive for row i's text representation and vice versa.  The same
    verified-negative mask applies in both directions.  The returned loss is
    the mean of the two directional losses and is always >= 0 because each
    anchor's positive sits inside its own denominator.

    `negative_mask` is a boolean |B| x |B| matrix (or a ContrastiveBatch
    carrying one); True marks a verified negative.  Returns
    (loss, d_graph_units, d_text_units).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if hasattr(negative_mask, "mask"):
        negative_mask = negative_mask.mask
    g = np.asarray(graph_units, dtype=np.float64)
    t = np.asarray(text_units, dtype=np.float64)
    if g.shape != t.shape:
        raise ValueError(f"modality shapes differ: {g.shape} vs {t.shape}")
    b = g.shape[0]
    if negative_mask.shape != (b, b):
        raise ValueError(f"mask shape {negative_mask.shape}, batch is {b}")
    allowed = negative_mask | np.eye(b, dtype=bool)

    loss_gt, dg1, dt1 = _masked_nce_direction(g, t, allowed, tau)
    loss_tg, dt2, dg2 = _masked_nce_direction(t, g, allowed, tau)
    loss = 0.5 * (loss_gt + loss_tg)
    return loss, 0.5 * (dg1 + dg2), 0.5 * (dt1 + dt2)


def full_offdiagonal_mask(b: int) -> np.ndarray:
    """Every other batch row is treated as a negative (no verification)."""
    return ~np.eye(b, dtype=bool)


def infonce_intra(anchors: np.ndarray, positives: np.ndarray, tau: float):
    """Single-direction contrastive loss over a full batch denominator.

    Used intra-modally between two augmented views; row i of `positives` is
    the positive for row i of `anchors` and every other row is a negative.

    Returns (loss, d_anchors, d_positives).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"view shapes differ: {a.shape} vs {p.shape}")
    allowed = np.ones((a.shape[0],) * 2, dtype=bool)
    return _masked_nce_direction(a, p, allowed, tau)


def augment_edge_dropout(
    adj: NormalizedAdjacency, drop_prob: float, seed
) -> NormalizedAdjacency:
    """Drop each undirected edge independently, then renormalize.

    Weights are recomputed from the surviving degrees, not rescaled, so the
    result is a valid normalized adjacency of the thinned graph.  Nodes may
    end up isolated; their rows go empty.  drop_prob = 0 keeps every edge.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if drop_prob == 0.0:
        return adj
    users, items = adj.undirected_edges()
    rng = np.random.default_rng(seed)
    keep = rng.random(users.shape[0]) >= drop_prob
    return adjacency_from_edges(adj.num_users, adj.num_items, users[keep], items[keep])


def augment_text_mask(
    text: np.ndarray, mask_prob: float, seed, max_retries: int = 100
) -> np.ndarray:
    """Zero coordinates independently with probability mask_prob, then
    renormalize rows.

    Rows that lose every coordinate are re-drawn (bounded retries) so the
    output always normalizes.  mask_prob = 0 returns the input unchanged.
    """
    if not 0.0 <= mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in [0, 1), got {mask_prob}")
    t = np.asarray(text, dtype=np.float64)
    if mask_prob == 0.0:
        return t.copy()
    rng = np.random.default_rng(seed)
    keep = rng.random(t.shape) >= mask_prob
    out = t * keep
    for _ in range(max_retries):
        norms = np.linalg.norm(out, axis=1)
        bad = np.where(norms <= 1e-12)[0]
        if not bad.size:
            return out / norms[:, None]
        redraw = rng.random((bad.size, t.shape[1])) >= mask_prob
        out[bad] = t[bad] * redraw
    raise NumericError(
        f"{bad.size} row(s) still zero after masking retries; "
        "input rows may be zero or mask_prob too high"
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def bpr_loss(
    node_units: np.ndarray,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
    num_users: int,
    user_train_items: list[frozenset[int]] | None = None,
):
    """Pairwise ranking loss, summed over triples.

    loss = sum -log sigmoid(u . v_pos - u . v_neg) over (user, observed item,
    unobserved item) triples, computed on the same table the caller scores
    with (normalized rows when debiasing is on).  Passing user_train_items
    turns on triple validation.

    Returns (loss, d_node_units) with the gradient scattered onto the table.
    """
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    if user_train_items is not None:
        for u, vp, vn in zip(users.tolist(), pos_items.tolist(), neg_items.tolist()):
            if vp not in user_train_items[u]:
                raise ValueError(f"positive item {vp} not observed for user {u}")
            if vn in user_train_items[u]:
                raise ValueError(f"negative item {vn} was observed for user {u}")

    table = np.asarray(node_units, dtype=np.float64)
    gu = table[users]
    gp = table[num_users + pos_items]
    gn = table[num_users + neg_items]
    diff = np.sum(gu * (gp - gn), axis=1)
    # -log sigmoid(x) = softplus(-x), computed stably
    loss = float(np.logaddexp(0.0, -diff).sum())

    coeff = (expit(diff) - 1.0)[:, None]
    grad = np.zeros_like(table)
    np.add.at(grad, users, coeff * (gp - gn))
    np.add.at(grad, num_users + pos_items, coeff * gu)
    np.add.at(grad, num_users + neg_items, -coeff * gu)
    return loss, grad


def total_loss(cross: float, intra: float, ranking: float, reg_sq: float, weights: LossWeights) -> float:
    """Weighted sum of the objective terms; names the first non-finite one."""
    for name, value in (
        ("cross", cross),
        ("intra", intra),
        ("ranking", ranking),
        ("regularization", reg_sq),
    ):
        if not np.isfinite(value):
            raise NumericError(f"{name} loss term is non-finite: {value}")
    return (
        cross
        + weights.alpha * intra
        + weights.beta * ranking
        + weights.lambda_reg * reg_sq
    )
