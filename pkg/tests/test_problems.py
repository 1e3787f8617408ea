import numpy as np
import pytest

from pipelcg.errors import ContractViolation
from pipelcg.problems import (ProblemSpec, build_problem, diagonal_spectrum, laplacian_2d,
                              laplacian_eigenvalues, load_matrix_market, write_matrix_market)


def test_single_node():
    assert laplacian_2d(1, 1).to_dense().tolist() == [[4.0]]
    assert diagonal_spectrum(1, 1).to_dense()[0, 0] == pytest.approx(4.0, abs=1e-15)


def test_center_row_stencil():
    A = laplacian_2d(3, 3).to_dense()
    row = A[4]
    assert sorted(row[row != 0].tolist()) == [-1.0, -1.0, -1.0, -1.0, 4.0]
    # row-major numbering: neighbours of node 4 are 1, 3, 5, 7
    assert np.flatnonzero(row).tolist() == [1, 3, 4, 5, 7]


def test_laplacian_spectrum_bounds():
    ev = np.linalg.eigvalsh(laplacian_2d(10, 10).to_dense())
    assert 7.5 < ev.max() < 8.0
    assert ev.min() > 0
    assert np.allclose(np.sort(ev), np.sort(laplacian_eigenvalues(10, 10)), atol=1e-12)


def test_diagonal_entry_value():
    d = diagonal_spectrum(3, 3).diagonal()
    assert d[0] == pytest.approx(4 - 4 * np.cos(np.pi / 4), abs=1e-12)
    assert d[0] == pytest.approx(1.17157, abs=1e-5)


def test_diagonal_matches_laplacian_spectrum():
    ev = np.linalg.eigvalsh(laplacian_2d(5, 5).to_dense())
    assert np.allclose(np.sort(diagonal_spectrum(5, 5).diagonal()), ev, atol=1e-12)


@pytest.mark.parametrize("make", [laplacian_2d, diagonal_spectrum])
def test_generators_are_symmetric_positive_definite(make):
    A = make(7, 5)
    assert A.symmetric_flag
    rng = np.random.default_rng(0)
    X = rng.standard_normal((A.n, 100))
    rq = np.einsum("ij,ij->j", X, A.to_scipy() @ X)
    assert np.all(rq > 0)


def test_bad_grids():
    with pytest.raises(ContractViolation):
        laplacian_2d(0, 3)
    with pytest.raises(ContractViolation):
        laplacian_2d(2**16, 2**16)


def test_problem_spec_parsing():
    s = ProblemSpec.parse("laplacian2d:100x100")
    assert (s.kind, s.nx, s.ny) == ("laplacian_2d", 100, 100)
    assert ProblemSpec.parse("diagonal:8").label() == "diagonal:8x8"
    assert ProblemSpec.parse("mm:foo.mtx").path == "foo.mtx"
    for bad in ("cube:3", "laplacian2d:axb", "mm:"):
        with pytest.raises(ContractViolation):
            ProblemSpec.parse(bad)
    with pytest.raises(ContractViolation):
        ProblemSpec(rhs="zeros")


def test_build_problem_rhs(tmp_path):
    A, b = build_problem(ProblemSpec.parse("laplacian2d:4x3"))
    assert A.n == 12 and np.array_equal(b, np.ones(12))
    _, r1 = build_problem(ProblemSpec.parse("diagonal:4x3", rhs="random", seed=5))
    _, r2 = build_problem(ProblemSpec.parse("diagonal:4x3", rhs="random", seed=5))
    assert np.array_equal(r1, r2)
    p = tmp_path / "a.mtx"
    write_matrix_market(p, laplacian_2d(3, 3))
    A2, _ = build_problem(ProblemSpec.parse(f"mm:{p}"))
    assert np.array_equal(A2.to_dense(), load_matrix_market(p).to_dense())
