import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpll import atm, losses, nn
from advpll.transition import adversary_aware_matrix, build_rival_matrix
from oracles import central_difference, contrastive_reference, rel_error

SYM3 = adversary_aware_matrix(build_rival_matrix(3, 2, 0.5))


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_identity_correction_is_cross_entropy():
    rng = np.random.default_rng(0)
    f = nn.softmax(rng.standard_normal((5, 4)))
    q = rng.dirichlet(np.ones(4), 5)
    got, _ = losses.adversary_aware_ce(f, q, np.eye(4))
    np.testing.assert_allclose(got, -(q * np.log(f)).sum(axis=1), atol=1e-15)


def test_hand_computed_corrected_loss():
    got, _ = losses.adversary_aware_ce(np.array([0.5, 0.3, 0.2]), np.array([1.0, 0, 0]), SYM3)
    assert got[0] == pytest.approx(-math.log(0.75), abs=1e-15)


def test_matrix_is_applied_on_the_left():
    t = build_rival_matrix(4, 1, 1.0)
    M = adversary_aware_matrix(t)
    f = np.array([0.4, 0.3, 0.2, 0.1])
    q = np.array([0.0, 1.0, 0.0, 0.0])
    got, _ = losses.adversary_aware_ce(f, q, M)
    # row 1 of T + I picks f_1 + f_2
    assert got[0] == pytest.approx(-math.log(0.3 + 0.2), abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_corrected_loss_logit_gradient(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(3, 7))
    k = int(rng.integers(1, c))
    M = adversary_aware_matrix(build_rival_matrix(c, k, 1.0 / k))
    z = rng.standard_normal(c)
    q = rng.dirichlet(np.ones(c))
    _, g = losses.adversary_aware_ce(nn.softmax(z), q, M)
    num = central_difference(lambda v: losses.adversary_aware_ce(nn.softmax(v), q, M)[0][0], z)
    assert rel_error(g[0], num) < 1e-6


def test_corrected_loss_bound_and_sign():
    rng = np.random.default_rng(1)
    M = adversary_aware_matrix(build_rival_matrix(6, 3, 1 / 3))
    f = nn.softmax(rng.standard_normal((200, 6)) * 3)
    q = rng.dirichlet(np.ones(6), 200)
    vals, _ = losses.adversary_aware_ce(f, q, M)
    assert np.all(f @ M.entries.T <= 2.0)
    assert np.all(vals >= 0)
    with pytest.raises(ValueError):
        losses.adversary_aware_ce(f, q, 3 * np.ones((6, 6)))


def test_floor_inactive_when_outputs_are_positive():
    f = np.array([[1e-9, 0.5, 0.5 - 1e-9]])
    q = np.array([[0.2, 0.3, 0.5]])
    got, _ = losses.adversary_aware_ce(f, q, np.eye(3))
    assert got[0] == pytest.approx(-(q * np.log(f)).sum(), rel=1e-15)


def test_floor_guards_zero_outputs():
    got, g = losses.adversary_aware_ce(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), np.eye(2))
    assert got[0] == pytest.approx(-math.log(1e-12))
    assert np.all(np.isfinite(g))


def test_contrastive_equal_similarities_give_log_pool_size():
    d, b = 4, 3
    u = np.tile(np.eye(d)[0], (b, 1))
    others = np.tile(np.eye(d)[0], (5, 1))
    pool = np.concatenate([u, others])
    labels = np.zeros(b + 5, dtype=int)
    p = atm.ContrastivePool(pool, labels, b)
    for tau in (0.07, 0.5, 2.0):
        res = losses.contrastive_loss(u, pool, p.positives, p.denominators, tau)
        assert res.value == pytest.approx(math.log(b + 5 - 1), abs=1e-12)


def test_contrastive_decreases_as_positive_aligns():
    u = np.array([[1.0, 0.0]])
    neg = np.array([[0.0, 1.0], [-1.0, 0.0]])
    vals = []
    for angle in np.linspace(np.pi, 0, 7):
        pos = np.array([[np.cos(angle), np.sin(angle)]])
        pool = np.concatenate([u, pos, neg])
        p = atm.ContrastivePool(pool, np.array([0, 0, 1, 1]), 1)
        vals.append(losses.contrastive_loss(u, pool, p.positives, p.denominators, 0.07).value)
    assert all(a > b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_matches_reference(seed):
    rng = np.random.default_rng(seed)
    u = unit_rows(rng, 2, 4)
    extra = unit_rows(rng, 4, 4)
    pool = np.concatenate([u, extra])
    labels = rng.integers(0, 2, 6)
    p = atm.ContrastivePool(pool, labels, 2)
    res = losses.contrastive_loss(u, pool, p.positives, p.denominators, 0.07)
    ref = contrastive_reference(u.tolist(), pool.tolist(), labels.tolist(), 0.07)
    active = [v for v in ref if v is not None]
    for i, v in enumerate(ref):
        assert res.skipped[i] == (v is None)
        if v is not None:
            assert res.per_query[i] == pytest.approx(v, abs=1e-12)
    expected = sum(active) / len(active) if active else 0.0
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_empty_positive_sets_are_skipped():
    u = unit_rows(np.random.default_rng(0), 3, 4)
    p = atm.ContrastivePool(u, np.array([0, 1, 2]), 3)
    res = losses.contrastive_loss(u, u, p.positives, p.denominators, 0.07)
    assert res.skipped.all() and res.value == 0.0
    assert np.all(res.grad_queries == 0)


def test_positives_must_sit_inside_the_pool():
    u = unit_rows(np.random.default_rng(0), 2, 3)
    with pytest.raises(ValueError):
        losses.contrastive_loss(u, u, np.eye(2, dtype=bool), ~np.eye(2, dtype=bool), 0.07)
    with pytest.raises(ValueError):
        losses.contrastive_loss(u, u, np.zeros((2, 2), bool), ~np.eye(2, dtype=bool), 0.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_contrastive_invariant_to_pool_order(seed):
    rng = np.random.default_rng(seed)
    b, extra = 3, 5
    u = unit_rows(rng, b, 4)
    rest = unit_rows(rng, extra, 4)
    labels = rng.integers(0, 2, b + extra)
    pool = np.concatenate([u, rest])
    p = atm.ContrastivePool(pool, labels, b)
    base = losses.contrastive_loss(u, pool, p.positives, p.denominators, 0.1)
    perm = np.concatenate([np.arange(b), b + rng.permutation(extra)])
    pool2, labels2 = pool[perm], labels[perm]
    p2 = atm.ContrastivePool(pool2, labels2, b)
    other = losses.contrastive_loss(u, pool2, p2.positives, p2.denominators, 0.1)
    assert other.value == pytest.approx(base.value, abs=1e-12)
    # renaming the labels leaves the positive structure unchanged
    p3 = atm.ContrastivePool(pool, (labels + 7) * 3, b)
    renamed = losses.contrastive_loss(u, pool, p3.positives, p3.denominators, 0.1)
    assert renamed.value == pytest.approx(base.value, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_embedding_gradients(seed):
    rng = np.random.default_rng(seed)
    b = 4
    u0 = unit_rows(rng, b, 3)
    rest = unit_rows(rng, 5, 3)
    labels = rng.integers(0, 2, b + 5)
    p = atm.ContrastivePool(np.concatenate([u0, rest]), labels, b)

    def value(u):
        return losses.contrastive_loss(u, np.concatenate([u, rest]), p.positives, p.denominators, 0.07).value

    res = losses.contrastive_loss(u0, p.embeddings, p.positives, p.denominators, 0.07)
    total = res.grad_queries + res.grad_pool[:b]
    assert rel_error(total, central_difference(value, u0)) < 1e-6


def _combined(lam, seed=0):
    rng = np.random.default_rng(seed)
    b = 5
    f = nn.softmax(rng.standard_normal((b, 3)))
    q = rng.dirichlet(np.ones(3), b)
    u = unit_rows(rng, b, 4)
    pool = atm.build_pool(u, unit_rows(rng, b, 4), rng.integers(0, 3, b))
    return losses.combined_loss(f, q, SYM3, u, pool.embeddings, pool.positives, pool.denominators, lam, 0.07)


def test_combined_without_contrastive_weight_is_classification():
    bd, gl, gu = _combined(0.0)
    assert bd.combined == bd.classification and bd.contrastive == 0.0
    assert np.all(gu == 0)


def test_combined_is_affine_in_lambda():
    c0, c1, c2 = (_combined(lam)[0].combined for lam in (0.0, 0.5, 1.0))
    assert c2 - c0 == pytest.approx(2 * (c1 - c0), abs=1e-12)
    bd = _combined(0.5)[0]
    assert bd.combined == pytest.approx(0.5 * bd.contrastive + bd.classification, abs=1e-12)


def test_default_weight_and_temperature():
    from advpll.trainer import TrainConfig
    cfg = TrainConfig()
    assert cfg.lam == 0.5 and cfg.tau == 0.07
