import numpy as np
import pytest

from moelab import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def _np_softmax(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def test_softmax_rows_matches_reference(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((37, 9)) * 5
    got = kernels.softmax_rows(x)
    np.testing.assert_allclose(got, _np_softmax(x), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rows_grad_matches_jacobian(backend):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 4))
    y = kernels.softmax_rows(x)
    gy = rng.standard_normal((5, 4))
    got = kernels.softmax_rows_grad(y, gy)
    # explicit Jacobian: J = diag(y) - y y^T per row
    for i in range(5):
        jac = np.diag(y[i]) - np.outer(y[i], y[i])
        np.testing.assert_allclose(got[i], jac @ gy[i], atol=1e-12)


def test_logsumexp_rows(backend):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((11, 6)) * 30
    got = kernels.logsumexp_rows(x)
    ref = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    # overflow safety
    big = np.array([[1e4, 1e4 - 3.0]])
    assert np.isfinite(kernels.logsumexp_rows(big)).all()


def test_pairwise_l1_matches_loops(backend):
    rng = np.random.default_rng(3)
    a = rng.random((8, 13))
    b = rng.random((6, 13))
    got = kernels.pairwise_l1(a, b)
    ref = np.array([[np.abs(a[i] - b[j]).sum() for j in range(6)] for i in range(8)])
    np.testing.assert_allclose(got, ref, atol=1e-12)
    with pytest.raises(ValueError):
        kernels.pairwise_l1(a, rng.random((6, 12)))


def test_adamw_update_matches_hand_formula(backend):
    rng = np.random.default_rng(4)
    p = rng.standard_normal(16)
    g = rng.standard_normal(16)
    m = rng.standard_normal(16) * 0.1
    v = rng.random(16) * 0.1
    p0, g0, m0, v0 = p.copy(), g.copy(), m.copy(), v.copy()
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.05
    bc1, bc2 = 1 - b1 ** 3, 1 - b2 ** 3
    kernels.adamw_update(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2)
    m_ref = b1 * m0 + (1 - b1) * g0
    v_ref = b2 * v0 + (1 - b2) * g0 * g0
    p_ref = p0 - lr * ((m_ref / bc1) / (np.sqrt(v_ref / bc2) + eps) + wd * p0)
    np.testing.assert_allclose(p, p_ref, atol=1e-14)
    np.testing.assert_allclose(m, m_ref, atol=1e-15)
    np.testing.assert_allclose(v, v_ref, atol=1e-15)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="only one backend available")
def test_backends_agree():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((23, 7)) * 3
    a = rng.random((9, 20))
    b = rng.random((9, 20))
    results = {}
    for name in BACKENDS:
        kernels.set_backend(name)
        results[name] = (
            kernels.softmax_rows(x),
            kernels.logsumexp_rows(x),
            kernels.pairwise_l1(a, b),
        )
    kernels.set_backend(kernels._default_backend())
    first, second = (results[n] for n in BACKENDS[:2])
    for lhs, rhs in zip(first, second):
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-14)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("tpu")
    assert kernels.get_backend() in BACKENDS
