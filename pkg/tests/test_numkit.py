import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safedyn import numkit as nk
from safedyn.plants import duffing_deriv


def random_sym(rng, n):
    S = rng.standard_normal((n, n))
    return 0.5 * (S + S.T)


# --- sym_eig -------------------------------------------------------------------


def test_sym_eig_identity():
    w, V = nk.sym_eig(np.eye(3))
    assert np.allclose(w, 1.0)
    assert np.allclose(V.T @ V, np.eye(3), atol=1e-12)


def test_sym_eig_diagonal_sorted_ascending():
    w, V = nk.sym_eig(np.diag([2.0, 1.0]))
    assert np.allclose(w, [1.0, 2.0])
    assert np.allclose(np.abs(V), [[0, 1], [1, 0]])


def test_sym_eig_random_reconstruction():
    S = random_sym(np.random.default_rng(0), 6)
    w, V = nk.sym_eig(S)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - S) <= 1e-10 * np.linalg.norm(S)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 32), seed=st.integers(0, 2 ** 31 - 1))
def test_sym_eig_reconstruction_property(n, seed):
    S = random_sym(np.random.default_rng(seed), n)
    w, V = nk.sym_eig(S)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - S) <= 1e-10 * max(1.0, np.linalg.norm(S))
    assert np.allclose(w, np.linalg.eigvalsh(S), atol=1e-10 * max(1.0, np.abs(w).max()))


def test_sym_eig_rejects_nonfinite():
    with pytest.raises(nk.NonFiniteError):
        nk.sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))


# --- is_neg_def ------------------------------------------------------------------


def test_is_neg_def_examples():
    assert nk.is_neg_def(-np.eye(2), 0.0)
    assert not nk.is_neg_def(np.zeros((2, 2)), 0.0)
    assert not nk.is_neg_def(np.diag([-1.0, -1e-9]), 1e-8)


def _cholesky_neg_def(S):
    try:
        np.linalg.cholesky(-S)
        return True
    except np.linalg.LinAlgError:
        return False


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2 ** 31 - 1), shift=st.floats(-3, 3))
def test_is_neg_def_matches_cholesky(n, seed, shift):
    S = random_sym(np.random.default_rng(seed), n) - shift * np.eye(n)
    w = np.linalg.eigvalsh(S)
    if abs(w[-1]) < 1e-8:  # ambiguous at the boundary for both tests
        return
    assert nk.is_neg_def(S, 0.0) == _cholesky_neg_def(S)


# --- ridge_lls ---------------------------------------------------------------------


def test_ridge_identity():
    B = np.random.default_rng(1).standard_normal((4, 2))
    assert np.allclose(nk.ridge_lls(np.eye(4), B, 0.0), B)


def test_ridge_recovers_consistent_system():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((40, 5))
    X0 = rng.standard_normal((5, 3))
    assert np.max(np.abs(nk.ridge_lls(A, A @ X0) - X0)) <= 1e-10


def test_ridge_heavy_shrinkage():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((20, 4)) / 5
    B = rng.standard_normal((20, 2)) / 5
    assert np.linalg.norm(nk.ridge_lls(A, B, 1e6)) <= 1e-5


def test_ridge_singular_without_ridge_raises():
    A = np.ones((5, 2))
    with pytest.raises(nk.SingularSystemError):
        nk.ridge_lls(A, np.ones(5), 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), p=st.integers(1, 6))
def test_ridge_normal_equations_property(seed, p):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3 * p + 5, p))
    B = rng.standard_normal((3 * p + 5, 2))
    X = nk.ridge_lls(A, B)
    assert np.max(np.abs(A.T @ (A @ X - B))) <= 1e-8


# --- rk4 ---------------------------------------------------------------------------


def test_rk4_zero_field():
    x = np.array([1.0, -2.0])
    assert np.array_equal(nk.rk4_step(lambda t, x: np.zeros_like(x), x, 0.0, 0.1), x)


def test_rk4_exponential():
    x = nk.rk4_step(lambda t, x: x, np.array([1.0]), 0.0, 0.01)
    assert abs(x[0] - np.exp(0.01)) <= 1e-10


def duffing_error(h, t_end=2.0):
    f = lambda t, x: duffing_deriv(x, np.zeros(1), t, 0.5)
    ref = np.array([1.0, 0.0])
    for k in range(int(round(t_end / 1e-4))):
        ref = nk.rk4_step(f, ref, k * 1e-4, 1e-4)
    x = np.array([1.0, 0.0])
    for k in range(int(round(t_end / h))):
        x = nk.rk4_step(f, x, k * h, h)
    return np.linalg.norm(x - ref)


def test_rk4_step_halving_ratio_on_duffing():
    ratio = duffing_error(0.1) / duffing_error(0.05)
    assert 12.0 <= ratio <= 20.0


def test_rk4_order_four_slope():
    hs = np.array([0.2, 0.1, 0.05])
    errs = [abs(_exp_error(h)) for h in hs]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 3.7 <= slope <= 4.3


def _exp_error(h):
    x = np.array([1.0])
    for k in range(int(round(1.0 / h))):
        x = nk.rk4_step(lambda t, x: -x, x, k * h, h)
    return x[0] - np.exp(-1.0)


def test_rk4_reports_nonfinite_component():
    with pytest.raises(nk.NonFiniteError) as e:
        nk.rk4_step(lambda t, x: np.array([0.0, np.inf]), np.zeros(2), 0.0, 0.1)
    assert e.value.index == 1


# --- random streams -------------------------------------------------------------------


def test_seeded_gaussian_repeatable():
    a = nk.seeded_gaussian(5, (10, 2), [1.0, 2.0])
    b = nk.seeded_gaussian(5, (10, 2), [1.0, 2.0])
    assert np.array_equal(a, b)


def test_seeded_gaussian_unit_variance():
    v = nk.seeded_gaussian(0, (100_000, 1), [1.0]).var()
    assert 0.98 <= v <= 1.02


def test_seeded_gaussian_scaling():
    s = nk.seeded_gaussian(1, (100_000, 1), [4.0]).std()
    assert abs(s - 2.0) <= 0.04


def test_rng_streams_independent_of_call_order():
    a1 = nk.rng_for(3, 1).standard_normal(4)
    nk.rng_for(3, 2).standard_normal(4)
    assert np.array_equal(a1, nk.rng_for(3, 1).standard_normal(4))
    assert not np.array_equal(a1, nk.rng_for(3, 2).standard_normal(4))
