import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pipelcg.comm import make_fabric
from pipelcg.errors import BreakdownError, ContractViolation
from pipelcg.linalg import SparseMatrix
from pipelcg.problems import laplacian_2d
from pipelcg.solvers import Preconditioner, classic_cg, pipelined_cg_ghysels


@pytest.fixture(params=[classic_cg, pipelined_cg_ghysels], ids=["cg", "pcg"])
def method(request):
    return request.param


def test_identity_solves_immediately(method):
    b = np.array([3.0, -1.0, 2.0, 0.5])
    x, rep = method(SparseMatrix.diagonal_matrix(np.ones(4)), None, b)
    assert rep.converged
    assert np.array_equal(x, b)
    assert rep.iterations <= 2


def test_small_diagonal_exact_solution(method):
    x, rep = method(SparseMatrix.diagonal_matrix([1.0, 2.0, 3.0]), None, np.ones(3), rtol=1e-12)
    assert rep.converged
    assert np.allclose(x, [1.0, 0.5, 1 / 3], rtol=1e-12, atol=0)
    # three Krylov steps; p-CG needs one more loop pass to see the final residual
    assert rep.iterations <= (3 if method is classic_cg else 4)


def test_laplacian_jacobi_reductions():
    A = laplacian_2d(10, 10)
    b = np.ones(A.n)
    x, rep = classic_cg(A, "jacobi", b, rtol=1e-6)
    assert rep.converged
    assert rep.counters["reductions_initiated"] == 2 * rep.iterations
    assert rep.counters["spmv"] == rep.iterations
    assert rep.true_relative_residual <= 1e-5
    x2, rep2 = pipelined_cg_ghysels(A, "jacobi", b, rtol=1e-6)
    assert rep2.converged
    assert rep2.counters["reductions_initiated"] == rep2.iterations
    assert rep2.iterations <= 1.05 * rep.iterations + 1
    assert np.allclose(x, x2, rtol=1e-5)


def test_pcg_counters_per_iteration():
    A = laplacian_2d(12, 12)
    _, rep = pipelined_cg_ghysels(A, None, np.ones(A.n), rtol=1e-8)
    body = rep.per_iteration_counters[:-1]  # the last pass stops at the convergence test
    assert all(c["reductions_initiated"] == 1 and c["spmv"] == 1 for c in body)
    # 6 AXPYs + 2 dots = 16N flops
    assert all(c["axpys"] + c["local_dots"] == 8 for c in body)


def test_scipy_agreement(method):
    rng = np.random.default_rng(4)
    B = sp.random(60, 60, density=0.1, random_state=4)
    A = SparseMatrix.from_scipy(B @ B.T + 5 * sp.identity(60))
    b = rng.standard_normal(60)
    x, rep = method(A, "jacobi", b, rtol=1e-10)
    assert rep.converged
    assert np.allclose(x, np.linalg.solve(A.to_dense(), b), rtol=1e-7, atol=1e-9)


def test_indefinite_matrix_raises(method):
    A = SparseMatrix.diagonal_matrix([1.0, -1.0])
    with pytest.raises(BreakdownError):
        method(A, None, np.array([1.0, 1.0]))


def test_maxit_gives_report_not_exception(method):
    A = laplacian_2d(20, 20)
    x, rep = method(A, None, np.ones(A.n), maxit=3)
    assert not rep.converged and rep.reason == "maxit"


def test_nonzero_initial_guess(method):
    # exact start: zero residual, nothing to do
    x, rep = method(SparseMatrix.diagonal_matrix([2.0, 4.0]), None, [2.0, 4.0], x0=[1.0, 1.0])
    assert rep.converged and rep.iterations <= 1 and x.tolist() == [1.0, 1.0]
    A = laplacian_2d(6, 6)
    b = np.ones(A.n)
    xs = np.linalg.solve(A.to_dense(), b)
    x, rep = method(A, None, b, x0=np.full(A.n, 3.0), rtol=1e-10)
    assert rep.converged and np.allclose(x, xs, rtol=1e-8)


def test_input_validation(method):
    A = laplacian_2d(3, 3)
    with pytest.raises(ContractViolation):
        method(A, None, np.ones(4))
    with pytest.raises(ValueError):
        method(A, None, np.ones(9), rtol=0.0)
    with pytest.raises(ContractViolation):
        method(A, "ilu", np.ones(9))


def test_ranks_do_not_change_the_answer(method):
    A = laplacian_2d(8, 8)
    b = np.ones(A.n)
    x1, r1 = method(A, "jacobi", b, rtol=1e-8)
    x4, r4 = method(A, "jacobi", b, rtol=1e-8, fabric=make_fabric(ranks=4))
    assert r1.iterations == r4.iterations
    assert np.allclose(x1, x4, rtol=1e-12)


def test_jacobi_preconditioner():
    A = SparseMatrix.diagonal_matrix([2.0, 4.0])
    M = Preconditioner.jacobi(A)
    assert np.allclose(M.apply(np.array([2.0, 4.0])), [1.0, 1.0])
    assert np.allclose(M.apply_forward(np.array([1.0, 1.0])), [2.0, 4.0])
    with pytest.raises(ContractViolation):
        Preconditioner.jacobi(SparseMatrix.diagonal_matrix([1.0, 0.0]))
    # Jacobi on a diagonal matrix is an exact inverse
    x, rep = classic_cg(SparseMatrix.diagonal_matrix([1.0, 10.0, 100.0]), "jacobi", np.ones(3))
    assert rep.iterations == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_random_spd_truthful_residual(n, seed):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((n, n))
    A = SparseMatrix.from_dense(Q @ Q.T + n * np.eye(n), symmetric=False)
    b = rng.standard_normal(n)
    for solver in (classic_cg, pipelined_cg_ghysels):
        x, rep = solver(A, "jacobi", b, rtol=1e-8, maxit=10 * n)
        assert rep.converged
        assert rep.true_relative_residual <= 10 * 1e-8
