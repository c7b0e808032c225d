import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_matmul
from quantlab.errors import DimensionError, DomainError
from quantlab.tensor import (
    add_bias,
    frobenius_norm,
    make_rng,
    matmul,
    power_iteration,
    relu,
    second_moment,
    spectral_norm,
    variance,
)


def test_matmul_identity():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)


def test_matmul_hand_value():
    np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])


@pytest.mark.parametrize("seed", range(3))
def test_matmul_matches_naive_oracle_exactly(seed):
    rng = make_rng(seed)
    a = rng.standard_normal((8, 8), dtype=np.float32)
    b = rng.standard_normal((8, 8), dtype=np.float32)
    np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_nonsquare_matches_oracle():
    rng = make_rng(11)
    a = rng.standard_normal((5, 7), dtype=np.float32)
    b = rng.standard_normal((7, 3), dtype=np.float32)
    np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_bilinear():
    rng = make_rng(3)
    for _ in range(20):
        a = rng.standard_normal((4, 4), dtype=np.float32)
        b = rng.standard_normal((4, 4), dtype=np.float32)
        alpha = np.float32(rng.uniform(-3, 3))
        np.testing.assert_allclose(matmul(alpha * a, b), alpha * matmul(a, b), rtol=1e-6, atol=1e-6)


def test_frobenius():
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm([[3, 4]]) == 5.0
    t = make_rng(1).standard_normal((13, 17))
    oracle = sum(float(v) ** 2 for v in t.ravel()) ** 0.5
    assert frobenius_norm(t) == pytest.approx(oracle, rel=1e-6)


@pytest.mark.parametrize(
    "w, expected",
    [(np.eye(3), 1.0), ([[0, 2], [0, 0]], 2.0), (np.diag([3.0, 1.0]), 3.0), (np.zeros((2, 2)), 0.0)],
)
def test_spectral_norm_known_values(w, expected):
    assert spectral_norm(np.asarray(w)) == pytest.approx(expected, rel=1e-7)


def test_power_iteration_flags_nonconvergence():
    w = make_rng(0).standard_normal((40, 40))
    _, converged = power_iteration(w, max_iters=1)
    assert not converged
    value, converged = power_iteration(w, max_iters=2000, tol=1e-12)
    assert converged
    assert value == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-6)


def test_power_iteration_rejects_bad_args():
    with pytest.raises(DimensionError):
        power_iteration(np.zeros((0, 3)))
    with pytest.raises(DomainError):
        power_iteration(np.eye(2), max_iters=0)


def test_spectral_below_frobenius():
    rng = make_rng(5)
    for _ in range(100):
        m, n = rng.integers(1, 12, size=2)
        w = rng.standard_normal((m, n))
        assert spectral_norm(w) <= frobenius_norm(w) * (1 + 1e-12)


def test_operator_bound():
    rng = make_rng(6)
    for _ in range(100):
        a = rng.standard_normal((6, 9))
        x = rng.standard_normal(9)
        assert np.linalg.norm(a @ x) <= spectral_norm(a, 2000, 1e-12) * np.linalg.norm(x) + 1e-5


def test_elementwise_helpers():
    np.testing.assert_array_equal(relu([-1, 0, 2]), [0, 0, 2])
    assert second_moment([1, 1, 1, 1]) == 1.0
    assert variance([0, 2]) == 1.0
    np.testing.assert_array_equal(add_bias(np.zeros((2, 3)), [1, 2, 3]), [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(DimensionError):
        add_bias(np.zeros((2, 3)), [1, 2])


@pytest.mark.parametrize("fn", [variance, second_moment])
def test_empty_statistics_raise(fn):
    with pytest.raises(DomainError):
        fn([])


def test_rng_reproducible_bytes():
    a = make_rng(123).standard_normal((4, 5), dtype=np.float32)
    b = make_rng(123).standard_normal((4, 5), dtype=np.float32)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != make_rng(124).standard_normal((4, 5), dtype=np.float32).tobytes()


def test_rng_reference_vector():
    # frozen PCG64 outputs; a change here means the stream is no longer portable
    assert [int(v) for v in make_rng(0).bit_generator.random_raw(3)] == [
        11749869230777074271,
        4976686463289251617,
        755828109848996024,
    ]
    np.testing.assert_array_equal(
        make_rng(42).standard_normal(3, dtype=np.float32),
        np.array([0.14190717041492462, -1.6685079336166382, -1.3321080207824707], dtype=np.float32),
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_property_matches_oracle(m, k, n, seed):
    rng = make_rng(seed)
    a = rng.standard_normal((m, k), dtype=np.float32)
    b = rng.standard_normal((k, n), dtype=np.float32)
    np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))
