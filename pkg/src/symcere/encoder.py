"""Graph encoders over the normalized interaction graph.

Two backbones:
  * lightgcn: parameter-free neighborhood averaging, output is the mean of
    all layer outputs (including layer 0)
  * ngcf: per-layer linear transforms, an elementwise interaction term, and
    LeakyReLU, with all layer outputs concatenated and projected back to the
    embedding size

Backward passes are hand-derived; the normalized adjacency is symmetric, so
its transpose never needs materializing.  Parameters are stored float32 and
all propagation runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NormalizedAdjacency


@dataclass
class NgcfLayerWeights:
    w_self: np.ndarray  # (d, d) float32, applied to (A + I) h
    w_inter: np.ndarray  # (d, d) float32, applied to (A h) * h
    bias: np.ndarray  # (d,) float32


@dataclass
class NgcfWeights:
    layers: list[NgcfLayerWeights]
    w_out: np.ndarray  # ((K + 1) * d, d) float32, projects the concat


@dataclass
class GraphParams:
    """Trainable encoder state shared by both backbones.

    base_embeddings holds user rows then item rows.  layer_weights are the
    per-depth mixing coefficients of the light backbone, uniform 1/(K+1) by
    default.  message is only populated for the weighted backbone.
    """

    base_embeddings: np.ndarray  # (num_users + num_items, d) float32
    num_layers: int
    layer_weights: np.ndarray = field(default=None)
    leaky_slope: float = 0.2
    message: NgcfWeights | None = None

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.layer_weights is None:
            self.layer_weights = np.full(
                self.num_layers + 1, 1.0 / (self.num_layers + 1), dtype=np.float64
            )
        if self.layer_weights.shape[0] != self.num_layers + 1:
            raise ValueError("need one mixing weight per layer output")

    @property
    def embed_dim(self) -> int:
        return int(self.base_embeddings.shape[1])


def lightgcn_forward(params: GraphParams, adj: NormalizedAdjacency) -> np.ndarray:
    """Mean of propagated embeddings: sum_k alpha_k A^k E0, float64 output."""
    e = params.base_embeddings.astype(np.float64)
    if e.shape[0] != adj.size:
        raise ValueError(
            f"embedding table has {e.shape[0]} rows, graph has {adj.size} nodes"
        )
    out = params.layer_weights[0] * e
    for k in range(1, params.num_layers + 1):
        e = adj.matmul(e)
        out = out + params.layer_weights[k] * e
    return out


def lightgcn_backward(
    params: GraphParams, adj: NormalizedAdjacency, grad_out: np.ndarray
) -> np.ndarray:
    """Gradient w.r.t. the base table.

    d out / d E0 = sum_k alpha_k A^k; A is symmetric so the adjoint is the
    same propagation applied to the upstream gradient.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    acc = params.layer_weights[0] * g
    for k in range(1, params.num_layers + 1):
        g = adj.matmul(g)
        acc = acc + params.layer_weights[k] * g
    return acc


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, 1.0, slope)


@dataclass
class NgcfCache:
    """Intermediates needed by the backward pass, one entry per layer."""

    hs: list[np.ndarray]  # h_0 .. h_K
    props: list[np.ndarray]  # A h_{k-1} per layer
    pre: list[np.ndarray]  # pre-activation z per layer
    concat: np.ndarray  # (N, (K + 1) * d)


def ngcf_forward(
    params: GraphParams, adj: NormalizedAdjacency, want_cache: bool = False
):
    """Weighted message passing.

    Per layer: z = ((A + I) h) W_self + ((A h) * h) W_inter + b, then
    LeakyReLU.  All layer outputs are concatenated and projected by W_out.
    Returns (output, cache) when want_cache, else the output alone.
    """
    if params.message is None:
        raise ValueError("weighted backbone selected but message weights are missing")
    if len(params.message.layers) != params.num_layers:
        raise ValueError(
            f"{len(params.message.layers)} layer weight blocks for "
            f"{params.num_layers} layers"
        )
    h = params.base_embeddings.astype(np.float64)
    if h.shape[0] != adj.size:
        raise ValueError(
            f"embedding table has {h.shape[0]} rows, graph has {adj.size} nodes"
        )
    d = h.shape[1]
    expect = (params.num_layers + 1) * d
    if params.message.w_out.shape != (expect, d):
        raise ValueError(
            f"w_out shape {params.message.w_out.shape}, expected {(expect, d)}"
        )

    hs = [h]
    props, pre = [], []
    for layer in params.message.layers:
        p = adj.matmul(h)
        z = (
            (p + h) @ layer.w_self.astype(np.float64)
            + (p * h) @ layer.w_inter.astype(np.float64)
            + layer.bias.astype(np.float64)
        )
        h = _leaky(z, params.leaky_slope)
        props.append(p)
        pre.append(z)
        hs.append(h)
    concat = np.concatenate(hs, axis=1)
    out = concat @ params.message.w_out.astype(np.float64)
    if want_cache:
        return out, NgcfCache(hs=hs, props=props, pre=pre, concat=concat)
    return out


@dataclass
class NgcfGrads:
    d_base: np.ndarray
    d_layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (dW_self, dW_inter, db)
    d_w_out: np.ndarray


def ngcf_backward(
    params: GraphParams,
    adj: NormalizedAdjacency,
    cache: NgcfCache,
    grad_out: np.ndarray,
) -> NgcfGrads:
    """Full backward through the weighted backbone.

    For the interaction term m = (A h) * h, the gradient splits into a path
    through the propagation (A^T dm * h, with A symmetric) and a direct path
    (dm * A h).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k_layers = params.num_layers
    d = params.embed_dim

    d_w_out = cache.concat.T @ grad_out
    d_concat = grad_out @ params.message.w_out.astype(np.float64).T
    # gradient flowing into each stored layer output
    d_hs = [
        d_concat[:, k * d : (k + 1) * d].copy() for k in range(k_layers + 1)
    ]

    d_layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = [None] * k_layers
    for k in range(k_layers, 0, -1):
        layer = params.message.layers[k - 1]
        h_prev = cache.hs[k - 1]
        p = cache.props[k - 1]
        dz = d_hs[k] * _leaky_grad(cache.pre[k - 1], params.leaky_slope)

        s_in = p + h_prev
        m_in = p * h_prev
        dw_self = s_in.T @ dz
        dw_inter = m_in.T @ dz
        db = dz.sum(axis=0)

        ds = dz @ layer.w_self.astype(np.float64).T
        dm = dz @ layer.w_inter.astype(np.float64).T
        dp = ds + dm * h_prev
        d_hs[k - 1] += adj.matmul(dp) + ds + dm * p
        d_layers[k - 1] = (dw_self, dw_inter, db)

    return NgcfGrads(d_base=d_hs[0], d_layers=d_layers, d_w_out=d_w_out)


def interaction_repr(
    graph_emb: np.ndarray, users: np.ndarray, items: np.ndarray, num_users: int
) -> np.ndarray:
    """Per-interaction representation: mean of the user row and the item row."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    return 0.5 * (graph_emb[users] + graph_emb[num_users + items])


def interaction_repr_backward(
    grad: np.ndarray,
    users: np.ndarray,
    items: np.ndarray,
    num_users: int,
    num_nodes: int,
) -> np.ndarray:
    """Scatter per-interaction gradients back onto the node table.

    Repeated users or items within the batch accumulate.
    """
    out = np.zeros((num_nodes, grad.shape[1]), dtype=np.float64)
    half = 0.5 * np.asarray(grad, dtype=np.float64)
    np.add.at(out, np.asarray(users, dtype=np.int64), half)
    np.add.at(out, np.asarray(items, dtype=np.int64) + num_users, half)
    return out


def forward(params: GraphParams, adj: NormalizedAdjacency, backbone: str, want_cache: bool = False):
    """Dispatch on backbone name ('lightgcn' or 'ngcf')."""
    if backbone == "lightgcn":
        out = lightgcn_forward(params, adj)
        return (out, None) if want_cache else out
    if backbone == "ngcf":
        return ngcf_forward(params, adj, want_cache=want_cache)
    raise ValueError(f"unknown backbone {backbone!r}")
