"""Sub-operations of the p(l)-CG iteration, each against a small hand or dense oracle."""
import math

import numpy as np
import pytest
import scipy.linalg

from conftest import lanczos, shifted_bases
from pipelcg.checks import (explicit_bases, explicit_g, g_agreement_error, lanczos_residual,
                            orthonormality_error, shifted_basis_residual)
from pipelcg.comm import make_fabric
from pipelcg.errors import BreakdownError, ContractViolation
from pipelcg.linalg import SparseMatrix
from pipelcg.problems import laplacian_2d
from pipelcg.solvers.plcg import (BandedG, BasisWindow, TransformState, dot_product_batch,
                                  g_column_correction, lu_advance, pipelcg_solve, receive_column,
                                  restart, solution_update, t_column_update)
from pipelcg.solvers.common import Preconditioner


def recorded_run(A, b, l, sigma, maxit, M=None):
    rec = {}
    pipelcg_solve(A, M, b, l=l, sigma=sigma, rtol=1e-300, maxit=maxit, record=rec,
                  restart_budget=0)
    return rec


# -- BandedG ------------------------------------------------------------------

def test_banded_g_storage():
    G = BandedG(2)
    G[0, 3] = 1.5
    assert G[0, 3] == 1.5 and G[1, 3] == 0.0
    assert G[0, 7] == 0.0  # outside the band reads as zero
    with pytest.raises(ContractViolation):
        G[0, 5] = 1.0
    with pytest.raises(ContractViolation):
        G[4, 3] = 1.0
    assert G.in_band(1, 5) and not G.in_band(0, 5)


# -- g_column_correction -----------------------------------------------------

def test_column_correction_takes_square_root():
    G = BandedG(1)
    G[0, 0], G[0, 1], G[1, 1] = 1.0, 0.0, 4.0
    assert g_column_correction(G, 1, 1) == 2.0


def test_column_correction_orthogonalizes():
    # raw column (z1.v0, z1.z1) for z1 = [3, 4], v0 = e1: g01 = 3, g11 = 5 - 9 = 16 -> 4
    G = BandedG(1)
    G[0, 0], G[0, 1], G[1, 1] = 1.0, 3.0, 25.0
    assert g_column_correction(G, 1, 1) == 4.0
    assert G[0, 1] == 3.0


def test_column_correction_negative_argument_breaks_down():
    G = BandedG(1)
    G[0, 0], G[0, 1], G[1, 1] = 1.0, 1.0, 1.0 - 1e-3
    with pytest.raises(BreakdownError) as exc:
        g_column_correction(G, 1, 1)
    assert exc.value.where == "sqrt"
    assert exc.value.value == pytest.approx(-1e-3, rel=1e-9)


def test_column_correction_rounding_band_is_clamped():
    G = BandedG(1)
    G[0, 0], G[0, 1], G[1, 1] = 1.0, 1.0, 1.0 - 1e-17
    assert g_column_correction(G, 1, 1) == 0.0


def test_column_correction_matches_gram_schmidt_on_diag12():
    A = np.diag([1.0, 2.0])
    v0 = np.array([1.0, 1.0]) / math.sqrt(2)
    rec = recorded_run(SparseMatrix.from_dense(A), np.ones(2), l=1, sigma=[0.0], maxit=1)
    state = rec["cycles"][0]["state"]
    V, _ = lanczos(A, v0, 1)
    Z = np.column_stack([V[:, 0], A @ V[:, 0]])  # z_0 = v_0, z_1 = A v_0
    Gx = V.T @ Z
    for j, i in [(0, 0), (0, 1), (1, 1)]:
        assert state.G[j, i] == pytest.approx(Gx[j, i], abs=1e-14)
    assert state.G[1, 1] == pytest.approx(0.5, abs=1e-15)


# -- t_column_update ---------------------------------------------------------

def test_first_column_from_the_shifted_form():
    st = TransformState(1, [0.0])
    st.G[0, 1], st.G[1, 1] = 1.5, 0.5
    assert t_column_update(st, 1, 1) == (1.5, 0.5)
    st = TransformState(1, [0.25])
    st.G[0, 1], st.G[1, 1] = 1.25, 0.5
    # gamma = g01 + sigma * g00
    assert t_column_update(st, 1, 1) == (1.5, 0.5)


def test_t_column_diag12():
    rec = recorded_run(SparseMatrix.diagonal_matrix([1.0, 2.0]), np.ones(2), l=1, sigma=[0.0], maxit=1)
    st = rec["cycles"][0]["state"]
    assert st.gamma[0] == pytest.approx(1.5, abs=1e-15)
    assert st.delta[0] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("l", [1, 2, 3])
def test_t_columns_match_lanczos(l):
    # 8x8 keeps 12 iterations well short of Krylov exhaustion
    A = laplacian_2d(8, 8)
    b = np.random.default_rng(1).standard_normal(64)
    sigma = np.linspace(1.0, 7.0, l)
    rec = recorded_run(A, b, l=l, sigma=sigma, maxit=12)
    T = rec["cycles"][0]["state"].tridiagonal()
    _, Tref = lanczos(A.to_dense(), b, T.shape[1])
    # past i = 2l the recycled form is used; all columns must still agree
    assert np.abs(T - Tref).max() <= 1e-10


# -- lu_advance --------------------------------------------------------------

def test_lu_of_tridiagonal():
    st = TransformState(1, [0.0], zeta0=1.0)
    st.gamma.update({0: 2.0, 1: 2.0})
    st.delta.update({0: 1.0, 1: 1.0})
    assert lu_advance(st, 1, 1) == (0.0, 2.0, 1.0)
    lam, eta, zeta = lu_advance(st, 2, 1)
    assert (lam, eta, zeta) == (0.5, 1.5, -0.5)
    P, L, U = scipy.linalg.lu(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.array_equal(P, np.eye(2))
    assert L[1, 0] == lam and U[1, 1] == eta
    assert st.lu_eta[0] == st.gamma[0]


def test_lu_zero_pivot():
    st = TransformState(1, [0.0])
    st.gamma.update({0: 0.0})
    with pytest.raises(BreakdownError):
        lu_advance(st, 1, 1)


# -- basis_vector_updates ------------------------------------------------------

def test_shifted_relation_on_diag123():
    A = SparseMatrix.diagonal_matrix([1.0, 2.0, 3.0])
    sigma = [3.0, 1.0]
    rec = recorded_run(A, np.ones(3), l=2, sigma=sigma, maxit=1)
    assert shifted_basis_residual(A, rec, 2, sigma) <= 1e-12


@pytest.mark.parametrize("l", [1, 2, 3])
def test_bases_match_explicit_construction(l):
    A = laplacian_2d(8, 8)
    b = np.random.default_rng(2).standard_normal(64)
    sigma = np.linspace(1.0, 7.0, l)
    rec = recorded_run(A, b, l=l, sigma=sigma, maxit=10)
    window = rec["cycles"][0]["window"]
    V = window.recorded_basis(0)
    Vref, _ = lanczos(A.to_dense(), b, V.shape[1] - 1)
    assert np.abs(V - Vref).max() <= 1e-10
    for k, Zk in enumerate(shifted_bases(A.to_dense(), Vref, sigma, l)):
        got = window.recorded_basis(k)
        m = min(got.shape[1], Zk.shape[1])
        assert np.abs(got[:, :m] - Zk[:, :m]).max() <= 1e-9 * np.abs(Zk).max()


def test_lanczos_relation_after_ten_iterations():
    A = laplacian_2d(8, 8)
    sigma = [6.0, 2.0]
    rec = recorded_run(A, np.random.default_rng(3).standard_normal(64), l=2, sigma=sigma, maxit=10)
    V, _ = explicit_bases(rec, 2)
    T = rec["cycles"][0]["state"].tridiagonal()
    assert T.shape[1] >= 10
    assert lanczos_residual(A, V, T) <= 1e-10
    assert shifted_basis_residual(A, rec, 2, sigma) <= 1e-10


def test_preconditioned_bases_are_m_orthonormal():
    A = laplacian_2d(8, 8)
    M = Preconditioner.jacobi(A)
    rec = recorded_run(A, np.random.default_rng(4).standard_normal(64), l=2, sigma=[1.5, 0.5], maxit=8, M=M)
    V, Z = explicit_bases(rec, 2)
    assert orthonormality_error(V, M, A) <= 1e-12
    assert lanczos_residual(A, V, rec["cycles"][0]["state"].tridiagonal(), M) <= 1e-10
    assert g_agreement_error(rec["cycles"][0]["state"], explicit_g(V, Z, M, A), 2) <= 1e-10


# -- solution_update ---------------------------------------------------------

def test_first_direction_and_step():
    w = BasisWindow(3, 1)
    w.z[0].claim(0)[...] = [2.0, 0.0, 0.0]
    st = TransformState(1, [0.0], zeta0=3.0)
    st.lu_eta[0], st.zeta[0] = 2.0, 3.0
    x = np.zeros(3)
    solution_update(w, st, 1, 1, x)
    assert w.p.tolist() == [1.0, 0.0, 0.0] and x.tolist() == [0.0, 0.0, 0.0]
    w.z[0].claim(1)[...] = [0.0, 4.0, 0.0]
    st.delta[0], st.lu_eta[1] = 1.0, 2.0
    solution_update(w, st, 2, 1, x)
    # x1 = x0 + zeta0 p0; p1 = (v1 - delta0 p0) / eta1
    assert x.tolist() == [3.0, 0.0, 0.0]
    assert w.p.tolist() == [-0.5, 2.0, 0.0]
    assert w.x_index == 1


def test_identity_iterate_is_b():
    b = np.array([1.0, -2.0, 0.5])
    for l in (1, 2, 3):
        x, rep = pipelcg_solve(SparseMatrix.diagonal_matrix(np.ones(3)), None, b, l=l, sigma=[0.5] * l)
        assert rep.converged and np.allclose(x, b, rtol=1e-15)


def test_diag123_direct_solution():
    x, rep = pipelcg_solve(SparseMatrix.diagonal_matrix([1.0, 2.0, 3.0]), None, np.ones(3),
                           l=1, rtol=1e-10, lmin=0.0, lmax=4.0)
    assert rep.converged
    assert np.allclose(x, [1.0, 0.5, 1 / 3], rtol=1e-10, atol=0)
    assert rep.iterations <= 3 + 1


# -- dot_product_batch -------------------------------------------------------

def _filled_window(n, l, i, rng):
    w = BasisWindow(n, l)
    vecs = {}
    for j in range(max(0, i - l + 2), i + 2):
        vecs[("l", j)] = w.z[l].claim(j)
        vecs[("l", j)][...] = rng.standard_normal(n)
    if i - l + 1 >= 0:
        z0 = w.z[0].claim(i - l + 1)
        z0[...] = rng.standard_normal(n)
        vecs[("0", i - l + 1)] = z0
    return w, vecs


@pytest.mark.parametrize("l, i", [(1, 3), (2, 6), (3, 9), (3, 1)])
def test_payload_layout(l, i):
    rng = np.random.default_rng(l * 10 + i)
    w, vecs = _filled_window(12, l, i, rng)
    u = w.u.get(i + 1)
    f = make_fabric(ranks=3)
    payload = f.wait(dot_product_batch(w, i, l, f))
    assert payload.shape == (2 * l + 1,)
    base = i + 1 - 2 * l
    expect = np.zeros(2 * l + 1)
    for (kind, j), v in vecs.items():
        expect[j - base] = u @ v
    assert np.allclose(payload, expect, rtol=1e-13, atol=1e-13)
    computed = np.count_nonzero(expect)
    assert computed == min(i + 2, l + 1)


def test_symmetry_fill_equals_full_band():
    # filled entries G[j, c] for j < c - l equal the directly computed (z_c, v_j)
    A = laplacian_2d(8, 8)
    l = 2
    rec = recorded_run(A, np.random.default_rng(5).standard_normal(64), l=l, sigma=[6.0, 2.0], maxit=12)
    V, Z = explicit_bases(rec, l)
    Gx = explicit_g(V, Z)
    st = rec["cycles"][0]["state"]
    scale = np.abs(Gx).max()
    worst = 0.0
    for c in range(2 * l, Gx.shape[1]):
        for j in range(c - 2 * l, c - l):
            worst = max(worst, abs(st.G[j, c] - Gx[j, c]))
    assert worst <= 1e-12 * scale


def test_receive_column_places_rows():
    st = TransformState(1, [0.0])
    st.G[0, 1], st.G[1, 1] = 0.3, 0.9  # column 1, already corrected
    receive_column(st, 2, 1, [99.0, 2.0, 5.0])  # column 2: rows 0 (by symmetry), 1, 2
    assert (st.G[0, 2], st.G[1, 2], st.G[2, 2]) == (0.9, 2.0, 5.0)


# -- restart -----------------------------------------------------------------

def test_restart_at_the_solution():
    A = SparseMatrix.diagonal_matrix([2.0, 4.0])
    _, state, norm = restart(A, Preconditioner.identity(), np.array([2.0, 4.0]),
                             np.ones(2), 2, [1.0, 3.0], np.array([0, 2]))
    assert norm == 0.0
    x, rep = pipelcg_solve(A, None, [2.0, 4.0], x0=[1.0, 1.0], l=2)
    assert rep.converged and rep.iterations == 0 and x.tolist() == [1.0, 1.0]


def test_restart_normalizes_the_residual():
    A = laplacian_2d(3, 3)
    b = np.arange(9.0)
    x = np.ones(9)
    window, state, norm = restart(A, Preconditioner.identity(), b, x, 2, [1.0, 2.0], np.array([0, 9]))
    r = b - A.to_dense() @ x
    assert norm == pytest.approx(np.linalg.norm(r), rel=1e-15)
    for k in range(3):
        assert np.allclose(window.z[k].get(0), r / norm, rtol=1e-15)
    assert state.zeta0 == norm and state.G[0, 0] == 1.0


@pytest.mark.parametrize("l", [1, 2, 3])
def test_forced_restart_still_converges(l):
    A = laplacian_2d(12, 12)
    b = np.ones(A.n)
    rec = {}
    x, rep = pipelcg_solve(A, "jacobi", b, l=l, rtol=1e-6, lmin=0, lmax=2,
                           force_restart_at=(12, 24), record=rec)
    assert rep.converged and rep.restarts == 2
    assert [bd["where"] for bd in rep.breakdowns] == ["forced", "forced"]
    assert rep.true_relative_residual <= 1e-5
    # each new cycle starts from a residual no worse than 10x the previous start
    starts = [c["state"].zeta0 for c in rec["cycles"]]
    assert all(b_ <= 10 * a for a, b_ in zip(starts, starts[1:]))
    # the restarted zeta equals sqrt((u0, r0)) at the restart iterate
    assert starts[1] in rep.recursive_residual_history
