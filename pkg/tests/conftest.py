import numpy as np


def lanczos(A, v0, m):
    """Reference Lanczos with full reorthogonalization on a dense matrix.

    Returns ``V`` (n x m+1) and ``T`` (m+1 x m).  Independent of the
    solver code: this is what the basis recurrences must reproduce.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    V = np.zeros((n, m + 1))
    T = np.zeros((m + 1, m))
    V[:, 0] = v0 / np.linalg.norm(v0)
    for j in range(m):
        w = A @ V[:, j]
        for _ in range(2):
            w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        T[j, j] = V[:, j] @ A @ V[:, j]
        if j > 0:
            T[j - 1, j] = T[j, j - 1]
        T[j + 1, j] = np.linalg.norm(w)
        V[:, j + 1] = w / T[j + 1, j]
    return V, T


def shifted_bases(A, V, sigma, l):
    """``Z^(k)`` columns built directly from the Lanczos basis.

    ``z^(k)_j = prod_{t<k} (A - sigma_t) v_{j-k}`` for ``j >= k`` and
    ``prod_{t<j} (A - sigma_t) v_0`` below that.
    """
    A = np.asarray(A, dtype=np.float64)
    n, m = V.shape
    out = []
    for k in range(l + 1):
        cols = []
        for j in range(m):
            start, steps = (j - k, k) if j >= k else (0, j)
            z = V[:, start].copy()
            for t in range(steps):
                z = A @ z - sigma[t] * z
            cols.append(z)
        out.append(np.column_stack(cols))
    return out


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
