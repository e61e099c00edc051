import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcrit.errors import DimensionError, InvalidInputError
from dlcrit.linalg import (RNG_IDENTITY, matrix_from_json, matrix_to_json, minres,
                           quadratic_model, seeded_rng, steihaug_cg, sym_eig)


def random_symmetric(rng, n, scale=1.0):
    a = rng.standard_normal((n, n)) * scale
    return a + a.T


# --- sym_eig -----------------------------------------------------------------

def test_sym_eig_diagonal():
    out = sym_eig(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(out.eigenvalues, [1.0, 2.0, 3.0], atol=0)
    np.testing.assert_allclose(np.abs(out.eigenvectors), np.eye(3)[:, [1, 2, 0]], atol=0)


def test_sym_eig_swap_matrix():
    out = sym_eig([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(out.eigenvalues, [-1.0, 1.0], atol=1e-15)


def test_sym_eig_random_16():
    a = random_symmetric(seeded_rng(16), 16)
    out = sym_eig(a)
    q, lam = out.eigenvectors, out.eigenvalues
    assert np.max(np.abs(q @ np.diag(lam) @ q.T - a)) <= 1e-10


def test_sym_eig_many_random_matrices():
    rng = seeded_rng(2024)
    for trial in range(120):
        n = int(rng.integers(1, 65))
        a = random_symmetric(rng, n, scale=10.0 ** rng.uniform(-3, 3))
        if trial % 10 == 0 and n > 2:
            # rank-deficient cases with repeated zero eigenvalues
            b = rng.standard_normal((n, n // 3 + 1))
            a = b @ b.T
        out = sym_eig(a)
        q, lam = out.eigenvectors, out.eigenvalues
        tol = 1e-10 * max(1.0, np.max(np.abs(lam)))
        assert np.max(np.abs(q @ np.diag(lam) @ q.T - a)) <= tol
        assert np.max(np.abs(q.T @ q - np.eye(n))) <= 1e-10
        assert np.all(np.diff(lam) >= 0)
        np.testing.assert_allclose(lam, np.linalg.eigvalsh(a), atol=tol)


def test_sym_eig_symmetrizes_small_asymmetry():
    a = random_symmetric(seeded_rng(1), 6)
    a[0, 1] += 1e-10
    out = sym_eig(a)
    np.testing.assert_allclose(out.eigenvalues, np.linalg.eigvalsh(0.5 * (a + a.T)), atol=1e-12)


def test_sym_eig_deterministic():
    a = random_symmetric(seeded_rng(3), 20)
    x, y = sym_eig(a), sym_eig(a.copy())
    assert np.array_equal(x.eigenvalues, y.eigenvalues)
    assert np.array_equal(x.eigenvectors, y.eigenvectors)


def test_sym_eig_zero_and_scalar():
    out = sym_eig(np.zeros((5, 5)))
    assert np.array_equal(out.eigenvalues, np.zeros(5))
    assert np.array_equal(out.eigenvectors, np.eye(5))
    assert sym_eig([[4.0]]).eigenvalues.tolist() == [4.0]


def test_sym_eig_errors():
    with pytest.raises(DimensionError):
        sym_eig(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        sym_eig(np.zeros(4))
    with pytest.raises(InvalidInputError):
        sym_eig([[1.0, np.nan], [np.nan, 1.0]])


# --- minres ------------------------------------------------------------------

def dense(a):
    return lambda v: a @ v


def test_minres_identity():
    out = minres(lambda v: v, np.array([5.0, -3.0]))
    np.testing.assert_allclose(out.solution, [5.0, -3.0], atol=1e-15)
    assert out.iterations == 1
    assert out.flag == "converged"


def test_minres_singular_consistent():
    out = minres(dense(np.diag([1.0, 0.0])), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out.solution, [1.0, 0.0], atol=1e-15)
    assert out.flag == "converged"


def test_minres_singular_inconsistent():
    a = np.diag([1.0, 0.0])
    b = np.array([1.0, 1.0])
    out = minres(dense(a), b)
    # least-squares residual is the component of b outside range(A)
    w, v = np.linalg.eigh(a)
    keep = np.abs(w) > 1e-12
    proj = v[:, keep] @ v[:, keep].T
    assert np.linalg.norm(a @ out.solution - b) == pytest.approx(np.linalg.norm(b - proj @ b),
                                                                 abs=1e-12)
    assert out.residual_norm == pytest.approx(1.0, abs=1e-12)
    assert out.flag == "converged"


def test_minres_zero_rhs():
    out = minres(lambda v: 2 * v, np.zeros(3))
    assert np.array_equal(out.solution, np.zeros(3))
    assert out.iterations == 0 and out.flag == "converged"


def test_minres_spd_matches_dense_solve():
    rng = seeded_rng(11)
    for _ in range(30):
        n = int(rng.integers(2, 65))
        m = rng.standard_normal((n, n))
        a = m @ m.T + n * np.eye(n)
        b = rng.standard_normal(n)
        out = minres(dense(a), b, rel_tol=1e-13, max_iters=4 * n)
        ref = np.linalg.solve(a, b)
        assert np.linalg.norm(out.solution - ref) <= 1e-8 * np.linalg.norm(ref)


def test_minres_indefinite_and_residual_history():
    rng = seeded_rng(12)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        a = random_symmetric(rng, n)
        b = rng.standard_normal(n)
        out = minres(dense(a), b, rel_tol=1e-10, max_iters=3 * n, track_residuals=True)
        hist = np.array(out.residual_history)
        assert len(hist) == out.iterations + 1
        assert np.all(np.diff(hist) <= 1e-9 * hist[0])
        assert out.residual_norm == pytest.approx(np.linalg.norm(a @ out.solution - b),
                                                  rel=1e-8, abs=1e-14)


def test_minres_reports_max_iters():
    a = np.diag(np.arange(1.0, 21.0))
    out = minres(dense(a), np.ones(20), rel_tol=1e-12, max_iters=3)
    assert out.flag == "max_iters"
    assert out.iterations == 3


def test_minres_flags_asymmetric_operator():
    a = np.array([[1.0, 5.0], [0.0, 1.0]])
    out = minres(dense(a), np.array([1.0, 1.0]))
    assert out.flag == "breakdown"
    assert np.all(np.isfinite(out.solution))


def test_minres_input_errors():
    with pytest.raises(InvalidInputError):
        minres(lambda v: v, np.array([np.inf, 1.0]))
    with pytest.raises(InvalidInputError):
        minres(lambda v: v, np.ones(2), rel_tol=1.5)
    with pytest.raises(DimensionError):
        minres(lambda v: v[:1], np.ones(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 24), st.integers(0, 2**32 - 1))
def test_minres_singular_consistent_min_norm(n, seed):
    rng = seeded_rng(seed)
    rank = max(1, n // 2)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.zeros(n)
    lam[:rank] = rng.uniform(0.5, 3.0, rank) * rng.choice([-1.0, 1.0], rank)
    a = q @ np.diag(lam) @ q.T
    b = a @ rng.standard_normal(n)
    out = minres(dense(a), b, rel_tol=1e-12, max_iters=4 * n)
    ref = np.linalg.pinv(a, rcond=1e-10) @ b
    assert np.linalg.norm(out.solution - ref) <= 1e-8 * max(1.0, np.linalg.norm(ref))


# --- steihaug_cg ---------------------------------------------------------------

def test_steihaug_interior_newton_point():
    out = steihaug_cg(dense(np.diag([2.0, 2.0])), np.array([2.0, 0.0]), 10.0)
    np.testing.assert_allclose(out.step, [-1.0, 0.0], atol=1e-15)
    assert not out.on_boundary


def test_steihaug_boundary_collinear():
    out = steihaug_cg(dense(np.diag([2.0, 2.0])), np.array([2.0, 0.0]), 0.5)
    np.testing.assert_allclose(out.step, [-0.5, 0.0], atol=1e-15)
    assert out.on_boundary


def exact_tr_solution(b, g, radius):
    """Moré-Sorensen: bisection on lambda for ||(B + lambda I)^-1 g|| = radius."""
    n = len(g)
    step = lambda lam: -np.linalg.solve(b + lam * np.eye(n), g)  # noqa: E731
    lo, hi = 0.0, 1.0
    while np.linalg.norm(step(hi)) > radius:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(step(mid)) > radius:
            lo = mid
        else:
            hi = mid
    return step(hi)


def cauchy_decrease(b, g, radius):
    gbg = g @ b @ g
    gg = g @ g
    t = radius / np.sqrt(gg) if gbg <= 0 else min(gg / gbg, radius / np.sqrt(gg))
    return t * gg - 0.5 * t * t * gbg


def test_steihaug_against_exact_subproblem_2x2():
    b = np.diag([1.0, 100.0])
    g = np.array([1.0, 1.0])
    out = steihaug_cg(dense(b), g, 0.1)
    assert np.linalg.norm(out.step) == pytest.approx(0.1, rel=1e-12)
    decrease = -quadratic_model(dense(b), g, out.step)
    best = -quadratic_model(dense(b), g, exact_tr_solution(b, g, 0.1))
    assert decrease >= cauchy_decrease(b, g, 0.1) - 1e-15
    assert decrease <= best + 1e-12
    # frozen: optimum from a dense scan of the boundary circle
    assert best == pytest.approx(0.0995862673771, rel=1e-9)


def test_steihaug_zero_gradient():
    out = steihaug_cg(lambda v: v, np.zeros(3), 1.0)
    assert np.array_equal(out.step, np.zeros(3))
    with pytest.raises(InvalidInputError):
        steihaug_cg(lambda v: v, np.ones(3), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_steihaug_radius_and_cauchy_properties(n, seed, radius):
    rng = seeded_rng(seed)
    m = rng.standard_normal((n, max(1, n // 2)))
    b = m @ m.T  # positive semidefinite, usually singular
    g = rng.standard_normal(n)
    out = steihaug_cg(dense(b), g, radius)
    assert np.linalg.norm(out.step) <= radius * (1 + 1e-12)
    decrease = -quadratic_model(dense(b), g, out.step)
    assert decrease >= 0.0
    assert decrease >= cauchy_decrease(b, g, radius) * (1 - 1e-9) - 1e-12


def test_steihaug_deterministic():
    rng = seeded_rng(5)
    m = rng.standard_normal((10, 10))
    b, g = m @ m.T, rng.standard_normal(10)
    assert np.array_equal(steihaug_cg(dense(b), g, 0.3).step, steihaug_cg(dense(b), g, 0.3).step)


# --- RNG and serialization ------------------------------------------------------

def test_rng_determinism():
    a = seeded_rng(0).standard_normal(100)
    assert np.array_equal(a, seeded_rng(0).standard_normal(100))
    assert not np.array_equal(a, seeded_rng(1).standard_normal(100))
    assert RNG_IDENTITY == "numpy.random.Generator(PCG64)"


def test_rng_normal_moments():
    z = seeded_rng(0).standard_normal(100_000)
    assert abs(z.mean()) <= 0.02
    assert abs(z.var() - 1.0) <= 0.05
    u = seeded_rng(0).uniform(size=100_000)
    assert abs(u.mean() - 0.5) <= 0.01


def test_matrix_json_round_trip():
    a = seeded_rng(9).standard_normal((3, 5))
    text = matrix_to_json(a)
    doc = json.loads(text)
    assert doc["rows"] == 3 and doc["cols"] == 5 and len(doc["data"]) == 15
    assert np.array_equal(matrix_from_json(text), a)


def test_matrix_json_rejects_bad_documents():
    with pytest.raises(DimensionError):
        matrix_from_json('{"rows": 2, "cols": 2, "data": [1, 2, 3]}')
    with pytest.raises(InvalidInputError):
        matrix_to_json([[np.nan]])
