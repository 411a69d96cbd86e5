"""Shared fixtures and numeric helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from symcere.data import InteractionRecord


def make_records(pairs, start_ts=0):
    """Build records from (user, item) or (user, item, ts[, review]) tuples.

    When timestamps are omitted they increase with position so temporal
    order equals input order.
    """
    out = []
    for pos, tup in enumerate(pairs):
        if len(tup) == 2:
            u, i = tup
            ts, review = start_ts + pos, None
        elif len(tup) == 3:
            u, i, ts = tup
            review = None
        else:
            u, i, ts, review = tup
        out.append(InteractionRecord(str(u), str(i), int(ts), review))
    return out


def fd_gradient(f, x, eps=1e-6):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(analytic, reference):
    """Relative error between gradient tensors as a norm ratio."""
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(r), 1e-12)
    return float(np.linalg.norm(a - r) / denom)


def random_unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
