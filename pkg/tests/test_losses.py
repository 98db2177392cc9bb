import math

import numpy as np
import pytest

from moelab.losses import (
    ContrastiveBatch,
    EansParams,
    decay_weight,
    eans,
    eans_weight_matrix,
    infonce,
    normalize_weights,
    routing_distance,
    signature_distance_matrix,
    staged_loss,
)
from moelab.moe_lora import RoutingSignature
from moelab.numcore import Tensor, finite_diff_check, l2_normalize_rows, take_rows

from conftest import random_unit_rows

PARAMS = EansParams()  # paper-table defaults


def unit_batch(q_rows, t_rows, tau=1.0, q_sigs=None, t_sigs=None):
    return ContrastiveBatch(
        query_embeddings=Tensor(np.asarray(q_rows, dtype=np.float64)),
        target_embeddings=Tensor(np.asarray(t_rows, dtype=np.float64)),
        temperature=tau,
        query_signatures=q_sigs,
        target_signatures=t_sigs,
    )


def random_signature(rng, num_layers=2, sites=2, experts=4, mask=None):
    vals = rng.random((num_layers, sites, experts))
    vals /= vals.sum(axis=-1, keepdims=True)
    mask = np.ones(num_layers, dtype=bool) if mask is None else np.asarray(mask)
    vals[~mask] = 0.0
    return RoutingSignature(values=vals, layer_mask=mask)


def one_hot_signature(expert, num_layers=2, sites=2, experts=4):
    vals = np.zeros((num_layers, sites, experts))
    vals[..., expert] = 1.0
    return RoutingSignature(values=vals, layer_mask=np.ones(num_layers, dtype=bool))


def straight_line_eans(q, t, tau, q_sigs, t_sigs, params):
    """Independent transcription of the paper formulas, no shortcuts."""
    b = q.shape[0]
    losses = []
    for i in range(b):
        s_pos = float(np.dot(q[i], t[i]))
        negatives = [j for j in range(b) if j != i]
        dists, sims = [], []
        for j in negatives:
            rq, rj = q_sigs[i], t_sigs[j]
            num = np.abs(rq.values[rq.layer_mask] - rj.values[rj.layer_mask]).sum()
            denom = int(rq.layer_mask.sum()) * rq.values.shape[1] * rq.values.shape[2]
            dists.append(num / denom)
            sims.append(float(np.dot(q[i], t[j])))
        raw = [params.w_min + (params.w_max - params.w_min) * math.exp(-d / params.sigma)
               for d in dists]
        m = len(raw)
        norm = [w * m / sum(raw) for w in raw]
        denom_terms = math.exp(s_pos / tau) + sum(
            w * math.exp(s / tau) for w, s in zip(norm, sims)
        )
        losses.append(-math.log(math.exp(s_pos / tau) / denom_terms))
    return sum(losses) / b


# ---------------------------------------------------------------------------
# infonce


def test_infonce_equal_logits_is_log_batch_size():
    # all similarities identical -> loss = ln(M + 1), here M = 3
    row = np.zeros(4)
    row[0] = 1.0
    q = np.tile(row, (4, 1))
    t = np.tile(row, (4, 1))
    loss = infonce(unit_batch(q, t, tau=0.37))
    assert abs(float(loss.data) - math.log(4.0)) < 1e-12


def test_infonce_hand_value():
    # s+ = 1, single negative s- = 0, tau = 1 -> ln(1 + e^-1)
    q = np.eye(2)
    t = np.eye(2)
    loss = infonce(unit_batch(q, t, tau=1.0))
    assert abs(float(loss.data) - math.log(1.0 + math.exp(-1.0))) < 1e-12


def test_infonce_saturates_when_separated():
    # separation (s+ - s-)/tau = 1/0.02 = 50 >= 40 -> loss below 1e-15
    q = np.eye(2)
    t = np.eye(2)
    loss = infonce(unit_batch(q, t, tau=0.02))
    assert 0.0 <= float(loss.data) < 1e-15


def test_batch_validation():
    q = np.eye(2)
    with pytest.raises(ValueError):
        unit_batch(q, q, tau=0.0)
    with pytest.raises(ValueError):
        unit_batch(q[:1], q[:1])  # B < 2
    with pytest.raises(ValueError):
        unit_batch(q * 2.0, q)  # not normalized
    with pytest.raises(ValueError):
        ContrastiveBatch(Tensor(q), Tensor(np.eye(3)))


def test_infonce_gradient_wrt_embeddings():
    rng = np.random.default_rng(0)
    emb = np.concatenate([random_unit_rows(rng, 4, 6), random_unit_rows(rng, 4, 6)])

    def f(x):
        qe = l2_normalize_rows(take_rows(x, np.arange(4)))
        te = l2_normalize_rows(take_rows(x, np.arange(4, 8)))
        return infonce(ContrastiveBatch(qe, te, temperature=0.1))

    assert finite_diff_check(f, Tensor(emb), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# routing distance


def test_distance_identical_is_zero():
    rng = np.random.default_rng(1)
    sig = random_signature(rng)
    assert routing_distance(sig, sig) == 0.0


def test_distance_hand_case():
    a = RoutingSignature(values=np.array([[[1.0, 0.0]]]), layer_mask=np.array([True]))
    b = RoutingSignature(values=np.array([[[0.0, 1.0]]]), layer_mask=np.array([True]))
    # (1 + 1) / (1 * 1 * 2) = 1.0 = 2/N
    assert routing_distance(a, b) == 1.0


def test_distance_disjoint_one_hot_hits_upper_bound():
    for n in (2, 4, 8):
        for num_layers, sites in ((1, 1), (3, 2), (4, 3)):
            a = one_hot_signature(0, num_layers, sites, n)
            b = one_hot_signature(1, num_layers, sites, n)
            assert abs(routing_distance(a, b) - 2.0 / n) < 1e-15


def test_distance_bounds_random_pairs():
    rng = np.random.default_rng(2)
    for n in (2, 4, 8):
        for _ in range(200):
            a = random_signature(rng, experts=n)
            b = random_signature(rng, experts=n)
            d = routing_distance(a, b)
            assert 0.0 <= d <= 2.0 / n + 1e-12


def test_distance_requires_matching_structure():
    rng = np.random.default_rng(3)
    a = random_signature(rng, num_layers=2)
    b = random_signature(rng, num_layers=3)
    with pytest.raises(ValueError):
        routing_distance(a, b)
    c = random_signature(rng, num_layers=2, mask=[True, False])
    with pytest.raises(ValueError):
        routing_distance(a, c)


# ---------------------------------------------------------------------------
# decay weighting


def test_decay_weight_at_zero_is_w_max():
    assert decay_weight(0.0, PARAMS) == 10.0


def test_decay_weight_at_sigma():
    # w_min + (w_max - w_min) e^-1 with the defaults
    expected = 0.1 + 9.9 * math.exp(-1.0)
    assert abs(decay_weight(0.002, PARAMS) - expected) < 1e-12
    assert abs(decay_weight(0.002, PARAMS) - 3.7420) < 1e-4


def test_decay_weight_far_tail_reaches_w_min():
    assert abs(decay_weight(100 * PARAMS.sigma, PARAMS) - 0.1) < 1e-9


def test_decay_weight_strictly_decreasing():
    ds = np.linspace(0, 0.02, 200)
    ws = [decay_weight(float(d), PARAMS) for d in ds]
    assert all(a > b for a, b in zip(ws, ws[1:]))
    assert all(PARAMS.w_min < w <= PARAMS.w_max for w in ws)


def test_decay_weight_rejects_negative():
    with pytest.raises(ValueError):
        decay_weight(-0.1, PARAMS)


def test_params_validation():
    with pytest.raises(ValueError):
        EansParams(w_min=-1.0)
    with pytest.raises(ValueError):
        EansParams(w_min=2.0, w_max=1.0)
    with pytest.raises(ValueError):
        EansParams(sigma=0.0)


# ---------------------------------------------------------------------------
# weight normalization


def test_normalize_equal_weights():
    assert np.array_equal(normalize_weights(np.array([2.0, 2.0, 2.0])), [1.0, 1.0, 1.0])


def test_normalize_hand_case():
    np.testing.assert_allclose(normalize_weights(np.array([1.0, 3.0])), [0.5, 1.5])


def test_normalize_single_weight():
    assert np.array_equal(normalize_weights(np.array([4.0])), [1.0])


def test_normalize_sum_equals_count():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        w = rng.random(m) * 10 + 1e-6
        assert abs(normalize_weights(w).sum() - m) < 1e-9


def test_normalize_scale_invariance():
    rng = np.random.default_rng(5)
    w = rng.random(12) + 0.01
    base = normalize_weights(w)
    for _ in range(100):
        c = float(10 ** rng.uniform(-6, 6))
        np.testing.assert_allclose(normalize_weights(c * w), base, rtol=1e-12)


def test_normalize_rejects_nonpositive():
    with pytest.raises(ValueError):
        normalize_weights(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        normalize_weights(np.array([1.0, -2.0]))
    with pytest.raises(ValueError):
        normalize_weights(np.array([]))


# ---------------------------------------------------------------------------
# the weighted loss


def test_eans_equals_infonce_under_shared_signature():
    rng = np.random.default_rng(6)
    q = random_unit_rows(rng, 5, 8)
    t = random_unit_rows(rng, 5, 8)
    shared = random_signature(rng)
    q_sigs = [random_signature(rng) for _ in range(5)]
    t_sigs = [shared] * 5  # every negative at the same distance per query
    batch = unit_batch(q, t, tau=0.07, q_sigs=q_sigs, t_sigs=t_sigs)
    assert abs(float(eans(batch, PARAMS).data) - float(infonce(batch).data)) < 1e-9


def test_eans_equals_infonce_single_expert():
    rng = np.random.default_rng(7)
    q = random_unit_rows(rng, 4, 8)
    t = random_unit_rows(rng, 4, 8)
    sigs = [one_hot_signature(0, experts=1) for _ in range(4)]
    batch = unit_batch(q, t, tau=0.1, q_sigs=sigs, t_sigs=list(sigs))
    assert abs(float(eans(batch, PARAMS).data) - float(infonce(batch).data)) < 1e-9


def near_uniform_signature(rng, logit_scale=0.05, experts=4):
    # router softmax over small logits: the regime where weights homogenize
    logits = rng.standard_normal((2, 2, experts)) * logit_scale
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return RoutingSignature(values=e / e.sum(axis=-1, keepdims=True),
                            layer_mask=np.ones(2, dtype=bool))


def test_eans_equals_infonce_huge_sigma():
    # at sigma = 1e6 the residual log-weight spread is first-order in
    # spread(d)/sigma, so the 1e-9 identity needs near-uniform signatures;
    # the unrestricted limit is checked at sigma = 1e12 below
    flat = EansParams(w_min=0.1, w_max=10.0, sigma=1e6)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(3, 8))
        q = random_unit_rows(rng, b, 8)
        t = random_unit_rows(rng, b, 8)
        q_sigs = [near_uniform_signature(rng) for _ in range(b)]
        t_sigs = [near_uniform_signature(rng) for _ in range(b)]
        batch = unit_batch(q, t, tau=0.5, q_sigs=q_sigs, t_sigs=t_sigs)
        assert abs(float(eans(batch, flat).data) - float(infonce(batch).data)) < 1e-9


def test_eans_equals_infonce_sigma_limit_unrestricted():
    huge = EansParams(w_min=0.1, w_max=10.0, sigma=1e12)
    rng = np.random.default_rng(8)
    for _ in range(10):
        b = int(rng.integers(3, 8))
        q = random_unit_rows(rng, b, 8)
        t = random_unit_rows(rng, b, 8)
        q_sigs = [random_signature(rng) for _ in range(b)]
        t_sigs = [random_signature(rng) for _ in range(b)]
        batch = unit_batch(q, t, tau=0.2, q_sigs=q_sigs, t_sigs=t_sigs)
        assert abs(float(eans(batch, huge).data) - float(infonce(batch).data)) < 1e-12


def test_eans_matches_straight_line_oracle():
    rng = np.random.default_rng(9)
    for trial in range(20):
        b = int(rng.integers(3, 7))
        q = random_unit_rows(rng, b, 8)
        t = random_unit_rows(rng, b, 8)
        q_sigs = [random_signature(rng) for _ in range(b)]
        t_sigs = [random_signature(rng) for _ in range(b)]
        tau = float(rng.uniform(0.05, 1.0))
        batch = unit_batch(q, t, tau=tau, q_sigs=q_sigs, t_sigs=t_sigs)
        got = float(eans(batch, PARAMS).data)
        want = straight_line_eans(q, t, tau, q_sigs, t_sigs, PARAMS)
        assert abs(got - want) < 1e-10, trial


def test_eans_requires_signatures():
    rng = np.random.default_rng(10)
    batch = unit_batch(random_unit_rows(rng, 3, 4), random_unit_rows(rng, 3, 4))
    with pytest.raises(ValueError):
        eans(batch, PARAMS)


def test_eans_hand_built_3_sample_batch():
    # B=3 with crafted signatures: verify against the same transcription
    q = np.eye(3)
    t_raw = np.array([[1.0, 0.2, 0.0], [0.1, 1.0, 0.0], [0.0, 0.3, 1.0]])
    t = t_raw / np.linalg.norm(t_raw, axis=1, keepdims=True)
    q_sigs = [one_hot_signature(0), one_hot_signature(1), one_hot_signature(2)]
    t_sigs = [one_hot_signature(0), one_hot_signature(0), one_hot_signature(3)]
    batch = unit_batch(q, t, tau=0.5, q_sigs=q_sigs, t_sigs=t_sigs)
    got = float(eans(batch, PARAMS).data)
    want = straight_line_eans(q, t, 0.5, q_sigs, t_sigs, PARAMS)
    assert abs(got - want) < 1e-10


def test_eans_weight_matrix_consistent_with_scalar_path():
    rng = np.random.default_rng(11)
    sigs_q = [random_signature(rng) for _ in range(4)]
    sigs_t = [random_signature(rng) for _ in range(4)]
    dist = signature_distance_matrix(sigs_q, sigs_t)
    for i in range(4):
        for j in range(4):
            assert abs(dist[i, j] - routing_distance(sigs_q[i], sigs_t[j])) < 1e-14
    weights = eans_weight_matrix(dist, PARAMS)
    off = ~np.eye(4, dtype=bool)
    for i in range(4):
        raw = np.array([decay_weight(dist[i, j], PARAMS) for j in range(4) if j != i])
        np.testing.assert_allclose(weights[i, off[i]], normalize_weights(raw), rtol=1e-12)
        assert abs(weights[i, off[i]].sum() - 3.0) < 1e-9


def test_loss_monotonic_in_negative_weight():
    # lifting any single normalized weight (holding others fixed) never
    # lowers the loss: dL/dw_i >= 0
    rng = np.random.default_rng(12)
    for _ in range(20):
        b = 5
        q = random_unit_rows(rng, b, 6)
        t = random_unit_rows(rng, b, 6)
        tau = 0.3
        logits = (q @ t.T) / tau
        weights = np.ones((b, b))

        def weighted_loss(w):
            total = 0.0
            for i in range(b):
                terms = [math.exp(logits[i, i])] + [
                    w[i, j] * math.exp(logits[i, j]) for j in range(b) if j != i
                ]
                total += -math.log(math.exp(logits[i, i]) / sum(terms))
            return total / b

        base = weighted_loss(weights)
        i, j = rng.integers(b), rng.integers(b)
        if i == j:
            continue
        bumped = weights.copy()
        bumped[i, j] += 0.5
        assert weighted_loss(bumped) >= base - 1e-12


def test_eans_gradient_wrt_embeddings():
    rng = np.random.default_rng(13)
    b = 4
    emb = np.concatenate([random_unit_rows(rng, b, 6), random_unit_rows(rng, b, 6)])
    q_sigs = [random_signature(rng) for _ in range(b)]
    t_sigs = [random_signature(rng) for _ in range(b)]

    def f(x):
        qe = l2_normalize_rows(take_rows(x, np.arange(b)))
        te = l2_normalize_rows(take_rows(x, np.arange(b, 2 * b)))
        return eans(ContrastiveBatch(qe, te, temperature=0.1,
                                     query_signatures=q_sigs,
                                     target_signatures=t_sigs), PARAMS)

    assert finite_diff_check(f, Tensor(emb), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# staged objective


def test_staged_loss_switches_at_warmup():
    rng = np.random.default_rng(14)
    b = 4
    q = random_unit_rows(rng, b, 6)
    t = random_unit_rows(rng, b, 6)
    q_sigs = [random_signature(rng) for _ in range(b)]
    t_sigs = [random_signature(rng) for _ in range(b)]
    batch = unit_batch(q, t, tau=0.1, q_sigs=q_sigs, t_sigs=t_sigs)
    plain = float(infonce(batch).data)
    weighted = float(eans(batch, PARAMS).data)
    assert float(staged_loss(batch, PARAMS, step=0, t_warmup=600).data) == plain
    assert float(staged_loss(batch, PARAMS, step=599, t_warmup=600).data) == plain
    assert float(staged_loss(batch, PARAMS, step=600, t_warmup=600).data) == weighted
    assert float(staged_loss(batch, PARAMS, step=0, t_warmup=0).data) == weighted
    with pytest.raises(ValueError):
        staged_loss(batch, PARAMS, step=-1, t_warmup=0)
