"""Backend-level kernel tests: correctness and numpy/cython agreement."""

import numpy as np
import pytest

from msdcl._kernels import available_backends

BACKENDS = available_backends()
rs = np.random.default_rng(42)


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_row_softmax_rows_sum_to_one(impl):
    x = rs.uniform(-5, 5, (6, 9))
    p = impl.row_softmax(x, 0.5)
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
    assert p.min() > 0


def test_row_log_softmax_matches_log_of_softmax(impl):
    x = rs.uniform(-3, 3, (4, 7))
    lp = impl.row_log_softmax(x, 0.7)
    p = impl.row_softmax(x, 0.7)
    assert np.abs(np.exp(lp) - p).max() < 1e-12


def test_row_l2_norms(impl):
    x = np.array([[3.0, 4.0], [1.0, 0.0]])
    assert np.allclose(impl.row_l2_norms(x), [5.0, 1.0])


def test_kl_rows_mean_zero_log_zero(impl):
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    logq = np.log(np.array([[0.5, 0.5], [0.5, 0.5]]))
    # row 1: ln 2; row 2: 0
    assert impl.kl_rows_mean(p, logq) == pytest.approx(np.log(2) / 2, rel=1e-12)


def test_ema_update_endpoints(impl):
    k = np.array([1.0, 2.0, 3.0])
    q = np.array([4.0, 5.0, 6.0])
    impl.ema_update(k.copy(), q, 1.0)
    k1 = k.copy()
    impl.ema_update(k1, q, 1.0)
    assert np.array_equal(k1, k)
    k0 = k.copy()
    impl.ema_update(k0, q, 0.0)
    assert np.array_equal(k0, q)


def test_adamw_first_step(impl):
    w = np.array([1.0])
    g = np.array([1.0])
    m = np.zeros(1)
    v = np.zeros(1)
    impl.adamw_update(w, g, m, v, 0.1, 0.9, 0.999, 1 - 0.9, 1 - 0.999, 1e-8, 0.0)
    assert w[0] == pytest.approx(0.9, abs=1e-6)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend unavailable")
class TestBackendAgreement:
    def test_row_ops_agree(self):
        np_impl, cy_impl = BACKENDS["numpy"], BACKENDS["cython"]
        x = rs.uniform(-8, 8, (16, 33))
        g = rs.uniform(-1, 1, (16, 33))
        for tau in (0.07, 1.0, 3.0):
            p1, p2 = np_impl.row_softmax(x, tau), cy_impl.row_softmax(x, tau)
            assert np.abs(p1 - p2).max() < 1e-14
            l1, l2 = np_impl.row_log_softmax(x, tau), cy_impl.row_log_softmax(x, tau)
            assert np.abs(l1 - l2).max() < 1e-12
            assert np.abs(np_impl.softmax_grad_z(p1, g) - cy_impl.softmax_grad_z(p1, g)).max() < 1e-14
            assert np.abs(np_impl.log_softmax_grad_z(l1, g) - cy_impl.log_softmax_grad_z(l1, g)).max() < 1e-13

    def test_normalize_and_kl_agree(self):
        np_impl, cy_impl = BACKENDS["numpy"], BACKENDS["cython"]
        x = rs.uniform(-2, 2, (10, 8)) + 0.3
        n1, n2 = np_impl.row_l2_norms(x), cy_impl.row_l2_norms(x)
        assert np.abs(n1 - n2).max() < 1e-14
        y = x / n1[:, None]
        g = rs.uniform(-1, 1, x.shape)
        assert np.abs(
            np_impl.row_l2_normalize_grad(y, n1, g) - cy_impl.row_l2_normalize_grad(y, n1, g)
        ).max() < 1e-13
        p = np_impl.row_softmax(x, 1.0)
        lq = np_impl.row_log_softmax(rs.uniform(-2, 2, x.shape), 1.0)
        assert np_impl.kl_rows_mean(p, lq) == pytest.approx(cy_impl.kl_rows_mean(p, lq), rel=1e-12)

    def test_updates_bitwise_identical(self):
        np_impl, cy_impl = BACKENDS["numpy"], BACKENDS["cython"]
        k1 = rs.uniform(-1, 1, 257)
        q = rs.uniform(-1, 1, 257)
        k2 = k1.copy()
        np_impl.ema_update(k1, q, 0.995)
        cy_impl.ema_update(k2, q, 0.995)
        assert np.array_equal(k1, k2)

        w1, g = rs.uniform(-1, 1, 101), rs.uniform(-1, 1, 101)
        m1, v1 = rs.uniform(0, 0.1, 101), rs.uniform(0, 0.1, 101)
        w2, m2, v2 = w1.copy(), m1.copy(), v1.copy()
        args = (1e-3, 0.9, 0.999, 1 - 0.9**3, 1 - 0.999**3, 1e-8, 0.01)
        np_impl.adamw_update(w1, g, m1, v1, *args)
        cy_impl.adamw_update(w2, g, m2, v2, *args)
        assert np.array_equal(w1, w2)
        assert np.array_equal(m1, m2)
        assert np.array_equal(v1, v2)
