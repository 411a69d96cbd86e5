"""Objective terms: closed-form examples, naive-loop oracles, dominance and
symmetry properties, augmentations, and finite-difference gradient checks."""

from __future__ import annotations

import numpy as np
import pytest

from symcere.data import adjacency_from_edges
from symcere.encoder import GraphParams, lightgcn_forward
from symcere.losses import (
    LossWeights,
    NumericError,
    ProjectionHead,
    augment_edge_dropout,
    augment_text_mask,
    bpr_loss,
    full_offdiagonal_mask,
    infonce_intra,
    l2_normalize,
    l2_normalize_backward,
    project_text,
    project_text_backward,
    symcere_cross_modal,
    total_loss,
)

from conftest import fd_gradient, random_unit_rows, rel_err


def naive_masked_nce(anchors, cands, allowed, tau):
    """Per-anchor python-loop oracle for one contrastive direction."""
    b = anchors.shape[0]
    total = 0.0
    for i in range(b):
        pos = float(anchors[i] @ cands[i]) / tau
        terms = [float(anchors[i] @ cands[k]) / tau for k in range(b) if allowed[i, k]]
        total += float(np.log(np.sum(np.exp(terms)))) - pos
    return total / b


def naive_symmetric(g, t, mask, tau):
    allowed = mask | np.eye(g.shape[0], dtype=bool)
    return 0.5 * (
        naive_masked_nce(g, t, allowed, tau) + naive_masked_nce(t, g, allowed, tau)
    )


# -- normalization -------------------------------------------------------


def test_l2_normalize_three_four_five():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_l2_normalize_idempotent_on_unit():
    v = np.array([[0.6, 0.8]])
    assert np.allclose(l2_normalize(v), v)
    assert np.abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-6


def test_l2_normalize_zero_rejected():
    with pytest.raises(NumericError, match="row 1"):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_l2_normalize_scaling_invariance_bit_exact():
    # scaling a row by a power of two cannot change the normalized output
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    assert np.array_equal(l2_normalize(x), l2_normalize(4.0 * x))
    # general positive scale agrees to rounding
    assert np.allclose(l2_normalize(x), l2_normalize(3.7 * x), atol=1e-14)


def test_l2_normalize_backward_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    target = rng.standard_normal((4, 3))

    def f(mat):
        return float(np.sum(l2_normalize(mat) * target))

    unit, norms = l2_normalize(x, return_norms=True)
    analytic = l2_normalize_backward(unit, norms, target)
    assert rel_err(analytic, fd_gradient(f, x.copy())) < 1e-6


# -- projection ----------------------------------------------------------


def test_project_identity_and_constant():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    head = ProjectionHead(w=np.eye(2), b=np.zeros(2))
    assert np.allclose(project_text(head, t), t)
    head = ProjectionHead(w=np.zeros((2, 3)), b=np.array([5.0, 6.0, 7.0]))
    out = project_text(head, t)
    assert np.allclose(out, [[5.0, 6.0, 7.0]] * 2)


def test_project_shape_mismatch():
    head = ProjectionHead(w=np.eye(3), b=np.zeros(3))
    with pytest.raises(ValueError, match="does not match"):
        project_text(head, np.ones((2, 4)))


def test_project_gradients_match_fd():
    rng = np.random.default_rng(2)
    t = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 4))
    w0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal(4)

    dw, db = project_text_backward(ProjectionHead(w=w0, b=b0), t, target)

    def f_w(w):
        return float(np.sum(project_text(ProjectionHead(w=w, b=b0), t) * target))

    def f_b(b):
        return float(np.sum(project_text(ProjectionHead(w=w0, b=b), t) * target))

    assert rel_err(dw, fd_gradient(f_w, w0.copy())) < 1e-6
    assert rel_err(db, fd_gradient(f_b, b0.copy())) < 1e-6


# -- cross-modal loss ----------------------------------------------------


def test_cross_modal_single_row_is_zero():
    g = l2_normalize(np.array([[1.0, 2.0]]))
    t = l2_normalize(np.array([[0.5, -1.0]]))
    loss, dg, dt = symcere_cross_modal(g, t, np.array([[False]]), 0.2)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert np.abs(dg).max() < 1e-15
    assert np.abs(dt).max() < 1e-15


def test_cross_modal_two_equal_logits_is_log_two():
    # duplicate rows make every pairwise similarity identical
    g = np.tile(l2_normalize(np.array([1.0, 1.0])), (2, 1))
    t = np.tile(l2_normalize(np.array([1.0, -0.5])), (2, 1))
    loss, _, _ = symcere_cross_modal(g, t, full_offdiagonal_mask(2), 0.5)
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_cross_modal_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        b = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        g = random_unit_rows(rng, b, d)
        t = random_unit_rows(rng, b, d)
        mask = rng.random((b, b)) < 0.5
        np.fill_diagonal(mask, False)
        tau = float(rng.uniform(0.1, 1.0))
        loss, _, _ = symcere_cross_modal(g, t, mask, tau)
        assert loss == pytest.approx(naive_symmetric(g, t, mask, tau), abs=1e-10)
        assert loss >= -1e-12


def test_cross_modal_accepts_contrastive_batch():
    class Holder:
        def __init__(self, mask):
            self.mask = mask

    rng = np.random.default_rng(4)
    g = random_unit_rows(rng, 3, 4)
    t = random_unit_rows(rng, 3, 4)
    mask = full_offdiagonal_mask(3)
    a, _, _ = symcere_cross_modal(g, t, mask, 0.2)
    b, _, _ = symcere_cross_modal(g, t, Holder(mask), 0.2)
    assert a == b


def test_cross_modal_symmetric_in_modalities():
    rng = np.random.default_rng(5)
    g = random_unit_rows(rng, 5, 6)
    t = random_unit_rows(rng, 5, 6)
    mask = rng.random((5, 5)) < 0.4
    np.fill_diagonal(mask, False)
    a, _, _ = symcere_cross_modal(g, t, mask, 0.3)
    b, _, _ = symcere_cross_modal(t, g, mask, 0.3)
    assert a == pytest.approx(b, abs=1e-12)


def test_cross_modal_dominated_by_unmasked():
    # spec example: |B|=3 with one excluded false negative
    rng = np.random.default_rng(6)
    g = random_unit_rows(rng, 3, 8)
    t = random_unit_rows(rng, 3, 8)
    mask = full_offdiagonal_mask(3)
    mask[0, 1] = False  # (u_0, v_1) is a known interaction
    masked, _, _ = symcere_cross_modal(g, t, mask, 0.2)
    full, _, _ = symcere_cross_modal(g, t, full_offdiagonal_mask(3), 0.2)
    assert masked < full


def test_cross_modal_gradients_match_fd():
    rng = np.random.default_rng(7)
    for _ in range(50):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        g = random_unit_rows(rng, b, d)
        t = random_unit_rows(rng, b, d)
        mask = rng.random((b, b)) < 0.5
        np.fill_diagonal(mask, False)
        tau = float(rng.uniform(0.15, 1.0))
        _, dg, dt = symcere_cross_modal(g, t, mask, tau)

        def f_g(x):
            return symcere_cross_modal(x, t, mask, tau)[0]

        def f_t(x):
            return symcere_cross_modal(g, x, mask, tau)[0]

        assert rel_err(dg, fd_gradient(f_g, g.copy())) < 1e-4
        assert rel_err(dt, fd_gradient(f_t, t.copy())) < 1e-4


def test_cross_modal_monotone_in_positive_logit():
    # raising a positive similarity (leaving the rest) must lower the loss
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    t0 = np.array([[0.8, 0.6], [0.0, 1.0]])
    t1 = np.array([[0.9539392014169456, 0.3], [0.0, 1.0]])  # unit row, higher s_00
    mask = full_offdiagonal_mask(2)
    a, _, _ = symcere_cross_modal(g, t0, mask, 0.2)
    b, _, _ = symcere_cross_modal(g, t1, mask, 0.2)
    assert np.abs(np.linalg.norm(t1, axis=1) - 1).max() < 1e-12
    assert b < a


def test_cross_modal_temperature_equals_logit_scaling():
    rng = np.random.default_rng(8)
    g = random_unit_rows(rng, 4, 5)
    t = random_unit_rows(rng, 4, 5)
    mask = full_offdiagonal_mask(4)
    c = 2.0
    direct, _, _ = symcere_cross_modal(g, t, mask, 0.2 * c)
    allowed = mask | np.eye(4, dtype=bool)
    # oracle with logits divided by c instead of the larger temperature
    def scaled_oracle(anchors, cands):
        b = anchors.shape[0]
        tot = 0.0
        for i in range(b):
            terms = [
                float(anchors[i] @ cands[k]) / 0.2 / c for k in range(b) if allowed[i, k]
            ]
            tot += float(np.log(np.sum(np.exp(terms)))) - float(anchors[i] @ cands[i]) / 0.2 / c
        return tot / b

    oracle = 0.5 * (scaled_oracle(g, t) + scaled_oracle(t, g))
    assert direct == pytest.approx(oracle, abs=1e-12)


def test_cross_modal_rejects_bad_inputs():
    g = np.eye(2)
    with pytest.raises(ValueError, match="temperature"):
        symcere_cross_modal(g, g, full_offdiagonal_mask(2), 0.0)
    with pytest.raises(ValueError, match="mask shape"):
        symcere_cross_modal(g, g, np.zeros((3, 3), dtype=bool), 0.2)
    with pytest.raises(ValueError, match="shapes differ"):
        symcere_cross_modal(g, np.eye(3), full_offdiagonal_mask(2), 0.2)


def test_cross_modal_non_finite_logits_reported():
    g = np.array([[np.inf, 0.0], [0.0, 1.0]])
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError, match="non-finite"):
            symcere_cross_modal(g, np.eye(2), full_offdiagonal_mask(2), 0.2)


# -- intra-modal loss ----------------------------------------------------


def test_infonce_identical_single_row_zero():
    x = l2_normalize(np.array([[2.0, 1.0]]))
    loss, _, _ = infonce_intra(x, x.copy(), 0.2)
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_infonce_orthogonal_pairs_softplus():
    x = np.eye(2)
    loss, _, _ = infonce_intra(x, x.copy(), 1.0)
    expect = float(np.logaddexp(0.0, -1.0))  # softplus(-1)
    assert loss == pytest.approx(expect, abs=1e-12)
    assert loss == pytest.approx(0.3132616875182228, abs=1e-12)


def test_infonce_matches_loop_oracle():
    rng = np.random.default_rng(9)
    for _ in range(30):
        b = int(rng.integers(1, 9))
        d = int(rng.integers(2, 10))
        x = random_unit_rows(rng, b, d)
        y = random_unit_rows(rng, b, d)
        tau = float(rng.uniform(0.1, 1.0))
        loss, _, _ = infonce_intra(x, y, tau)
        allowed = np.ones((b, b), dtype=bool)
        assert loss == pytest.approx(naive_masked_nce(x, y, allowed, tau), abs=1e-10)


def test_infonce_gradients_match_fd():
    rng = np.random.default_rng(10)
    for _ in range(50):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        x = random_unit_rows(rng, b, d)
        y = random_unit_rows(rng, b, d)
        tau = float(rng.uniform(0.15, 1.0))
        _, dx, dy = infonce_intra(x, y, tau)

        def f_x(m):
            return infonce_intra(m, y, tau)[0]

        def f_y(m):
            return infonce_intra(x, m, tau)[0]

        assert rel_err(dx, fd_gradient(f_x, x.copy())) < 1e-4
        assert rel_err(dy, fd_gradient(f_y, y.copy())) < 1e-4


def test_masked_equals_infonce_when_mask_is_full():
    rng = np.random.default_rng(11)
    g = random_unit_rows(rng, 6, 5)
    t = random_unit_rows(rng, 6, 5)
    sym, _, _ = symcere_cross_modal(g, t, full_offdiagonal_mask(6), 0.2)
    gt, _, _ = infonce_intra(g, t, 0.2)
    tg, _, _ = infonce_intra(t, g, 0.2)
    assert sym == pytest.approx(0.5 * (gt + tg), abs=1e-12)


# -- augmentations -------------------------------------------------------


def build_random_adj(rng, nu=40, ni=60, ne=400):
    eu = rng.integers(0, nu, size=ne)
    ei = rng.integers(0, ni, size=ne)
    return adjacency_from_edges(nu, ni, eu, ei)


def test_edge_dropout_p0_identity():
    rng = np.random.default_rng(12)
    adj = build_random_adj(rng)
    out = augment_edge_dropout(adj, 0.0, 99)
    assert out is adj


def test_edge_dropout_binomial_bound():
    rng = np.random.default_rng(13)
    nu, ni = 120, 120
    # a dense-ish random bipartite graph with ~10^4 distinct edges
    eu = rng.integers(0, nu, size=30000)
    ei = rng.integers(0, ni, size=30000)
    adj = adjacency_from_edges(nu, ni, eu, ei)
    n = adj.num_edges
    assert n > 8000
    out = augment_edge_dropout(adj, 0.5, 7)
    sigma = np.sqrt(n * 0.25)
    assert abs(out.num_edges - 0.5 * n) < 3 * sigma


def test_edge_dropout_deterministic_and_renormalized():
    rng = np.random.default_rng(14)
    adj = build_random_adj(rng)
    a = augment_edge_dropout(adj, 0.3, 55)
    b = augment_edge_dropout(adj, 0.3, 55)
    assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.weights, b.weights)
    # weights must come from surviving degrees, not the original ones
    eu, ei = a.undirected_edges()
    rebuilt = adjacency_from_edges(adj.num_users, adj.num_items, eu, ei)
    assert np.array_equal(a.weights, rebuilt.weights)


def test_edge_dropout_isolated_nodes_keep_base_rows():
    adj = adjacency_from_edges(1, 1, np.array([0]), np.array([0]))
    # pick a seed that drops the single edge at p=0.99
    seed = next(
        s for s in range(100) if np.random.default_rng(s).random(1)[0] < 0.99
    )
    dropped = augment_edge_dropout(adj, 0.99, seed)
    assert dropped.num_edges == 0
    base = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    params = GraphParams(base_embeddings=base, num_layers=2)
    out = lightgcn_forward(params, dropped)
    # with no edges only the k=0 term survives
    assert np.allclose(out, params.layer_weights[0] * base.astype(np.float64))


def test_text_mask_p0_identity_copy():
    rng = np.random.default_rng(15)
    t = random_unit_rows(rng, 4, 6)
    out = augment_text_mask(t, 0.0, 1)
    assert out is not t
    assert np.array_equal(out, t)


def test_text_mask_zero_fraction_bound_and_renormalized():
    rng = np.random.default_rng(16)
    t = random_unit_rows(rng, 200, 50)
    out = augment_text_mask(t, 0.3, 2)
    zeros = float(np.mean(out == 0.0))
    sigma = np.sqrt(0.3 * 0.7 / t.size)
    assert abs(zeros - 0.3) < 3 * sigma + 1e-3
    assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-6


def test_text_mask_deterministic():
    rng = np.random.default_rng(17)
    t = random_unit_rows(rng, 10, 8)
    assert np.array_equal(augment_text_mask(t, 0.4, 9), augment_text_mask(t, 0.4, 9))


def test_text_mask_redraws_fully_zeroed_rows():
    t = np.array([[1.0]])
    out = augment_text_mask(t, 0.9, 3)
    assert out.shape == (1, 1)
    assert abs(abs(out[0, 0]) - 1.0) < 1e-12


def test_text_mask_zero_input_row_errors():
    t = np.array([[0.0, 0.0]])
    with pytest.raises(NumericError, match="retries"):
        augment_text_mask(t, 0.5, 4)


# -- bpr -----------------------------------------------------------------


def test_bpr_equal_scores_ln2():
    # user row orthogonal to both item rows: diff = 0 exactly
    table = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss, _ = bpr_loss(table, np.array([0]), np.array([0]), np.array([1]), num_users=1)
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_bpr_monotone_in_gap():
    def loss_at(gap):
        u = np.array([[1.0, 0.0]])
        vp = np.array([[gap / 2.0, 0.0]])
        vn = np.array([[-gap / 2.0, 0.0]])
        table = np.vstack([u, vp, vn])
        val, _ = bpr_loss(table, np.array([0]), np.array([0]), np.array([1]), 1)
        return val

    assert loss_at(10.0) < loss_at(0.0) < loss_at(-10.0)
    assert loss_at(10.0) == pytest.approx(np.logaddexp(0, -10.0), abs=1e-12)
    assert loss_at(-10.0) == pytest.approx(np.logaddexp(0, 10.0), abs=1e-12)


def test_bpr_sums_not_means():
    rng = np.random.default_rng(18)
    table = rng.standard_normal((6, 4))
    users = np.array([0, 0, 0])
    pos = np.array([0, 0, 0])
    neg = np.array([1, 1, 1])
    triple, _ = bpr_loss(table, users, pos, neg, 2)
    single, _ = bpr_loss(table, users[:1], pos[:1], neg[:1], 2)
    assert triple == pytest.approx(3.0 * single, rel=1e-12)


def test_bpr_validates_triples():
    table = np.eye(3)
    seen = [frozenset({0})]
    with pytest.raises(ValueError, match="not observed"):
        bpr_loss(table, np.array([0]), np.array([1]), np.array([0]), 1, seen)
    with pytest.raises(ValueError, match="was observed"):
        bpr_loss(table, np.array([0]), np.array([0]), np.array([0]), 1, seen)


def test_bpr_gradients_match_fd():
    rng = np.random.default_rng(19)
    for _ in range(50):
        nu = int(rng.integers(1, 4))
        ni = int(rng.integers(2, 5))
        d = int(rng.integers(2, 17))
        b = int(rng.integers(1, 9))
        table = rng.standard_normal((nu + ni, d))
        users = rng.integers(0, nu, size=b)
        pos = rng.integers(0, ni, size=b)
        neg = rng.integers(0, ni, size=b)
        _, grad = bpr_loss(table, users, pos, neg, nu)

        def f(m):
            return bpr_loss(m, users, pos, neg, nu)[0]

        assert rel_err(grad, fd_gradient(f, table.copy())) < 1e-4


# -- total ---------------------------------------------------------------


def test_total_loss_zero():
    w = LossWeights()
    assert total_loss(0.0, 0.0, 0.0, 0.0, w) == 0.0


def test_total_loss_weighted_sum():
    w = LossWeights()
    assert total_loss(1.0, 1.0, 1.0, 1.0, w) == pytest.approx(1.5501, abs=1e-12)


def test_total_loss_alpha_toggle_removes_intra():
    w0 = LossWeights(alpha=0.0)
    w1 = LossWeights(alpha=0.5)
    delta = total_loss(0.3, 2.0, 0.1, 0.0, w1) - total_loss(0.3, 2.0, 0.1, 0.0, w0)
    assert delta == pytest.approx(0.5 * 2.0, abs=1e-12)


def test_total_loss_reports_non_finite_term():
    w = LossWeights()
    with pytest.raises(NumericError, match="intra"):
        total_loss(0.0, float("nan"), 0.0, 0.0, w)
    with pytest.raises(NumericError, match="ranking"):
        total_loss(0.0, 0.0, float("inf"), 0.0, w)


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0).validate()
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1).validate()
    LossWeights().validate()
