"""Small dense linear algebra: Kronecker products, pseudoinverse, and the
two matrix equations used throughout (filter Riccati and discrete Lyapunov).

All routines take and return plain ``numpy`` arrays.  Sizes here never
exceed a few hundred rows, so everything is dense and direct.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, NotPsd, SingularInnovation, UnstableCoefficient


@dataclass(frozen=True)
class DareSolution:
    """Steady state of the predictor-form Kalman Riccati recursion.

    Attributes:
        P: steady one-step prediction covariance.
        H: predictor gain ``A P C^T (C P C^T + R)^-1``.
        K: filter gain ``P C^T (C P C^T + R)^-1`` (so that ``H = A K``).
        iterations: fixed-point iterations used.
        residual: scaled residual of the returned ``P`` (see :func:`solve_dare`).
    """

    P: np.ndarray
    H: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float


def as_matrix(m) -> np.ndarray:
    a = np.array(m, dtype=float, ndmin=2)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def kron(a, b) -> np.ndarray:
    return np.kron(as_matrix(a), as_matrix(b))


def pinv(m) -> np.ndarray:
    """Moore-Penrose pseudoinverse with singular values below
    ``1e-12 * sigma_max`` treated as zero."""
    return np.linalg.pinv(as_matrix(m), rcond=1e-12)


def spectral_radius(m) -> float:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {m.shape}")
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def _riccati_map(a, c, q, r, p):
    s = c @ p @ c.T + r
    ap = a @ p
    try:
        corr = ap @ c.T @ np.linalg.solve(s, c @ p @ a.T)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance C P C^T + R is singular") from exc
    nxt = ap @ a.T - corr + q
    return 0.5 * (nxt + nxt.T)


def _scaled_residual(new, old):
    # Entry (i, j) is compared against sqrt(P_ii P_jj), so states living on
    # very different scales (phase ~1e-10 s, frequency ~1e-13) converge alike.
    d = np.abs(np.diag(new))
    top = d.max(initial=0.0)
    if top == 0.0:
        return float(np.max(np.abs(new - old), initial=0.0))
    d = np.sqrt(np.maximum(d, 1e-30 * top))
    return float(np.max(np.abs(new - old) / np.outer(d, d)))


def _doubling(a, c, q, r, max_steps=200):
    """Structure-preserving doubling for the filter Riccati equation.

    Each step squares the underlying symplectic pencil, so convergence is
    quadratic even when the closed-loop error matrix is close to the unit
    circle.  Returns ``None`` if it breaks down.
    """
    scale = float(np.max(np.abs(r)))
    ak = a.T.copy()
    gk = c.T @ np.linalg.solve(r / scale, c)
    hk = q / scale
    eye = np.eye(a.shape[0])
    try:
        for _ in range(max_steps):
            w = eye + gk @ hk
            wa = np.linalg.solve(w, ak)
            wg = np.linalg.solve(w, gk)
            h_next = hk + ak.T @ hk @ wa
            g_next = gk + ak @ wg @ ak.T
            ak = ak @ wa
            h_next = 0.5 * (h_next + h_next.T)
            gk = 0.5 * (g_next + g_next.T)
            top = np.max(np.abs(h_next))
            done = top == 0.0 or np.max(np.abs(h_next - hk)) <= 1e-16 * top
            hk = h_next
            if done:
                break
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(hk)):
        return None
    return hk * scale


def solve_dare(a, c, q, r, tol=1e-12, max_iter=1_000_000, method="doubling") -> DareSolution:
    """Solve ``P = A P A^T - A P C^T (C P C^T + R)^-1 C P A^T + Q``.

    ``P`` is returned only once it is a fixed point of the right-hand side:
    the residual ``RHS(P) - P``, each entry scaled by ``sqrt(P_ii P_jj)``,
    must be at most ``tol``.  With ``method="iterate"`` the fixed-point
    iteration starts from ``P0 = Q``; the default ``"doubling"`` starts it
    from a doubling-algorithm estimate, which usually satisfies the test
    immediately.  ``iterations`` counts fixed-point sweeps only.

    Raises:
        NonConvergence: ``max_iter`` sweeps without meeting ``tol``.
        SingularInnovation: ``R`` or ``C P C^T + R`` cannot be inverted.
    """
    a, c, q, r = (as_matrix(x) for x in (a, c, q, r))
    nx = a.shape[0]
    if a.shape != (nx, nx) or c.shape[1] != nx or q.shape != (nx, nx) or r.shape != (c.shape[0],) * 2:
        raise ValueError("inconsistent DARE dimensions")
    if not np.all(np.isfinite(r)) or np.linalg.cond(r) > 1e15:
        raise SingularInnovation("measurement covariance R is singular")
    if method not in ("doubling", "iterate"):
        raise ValueError(f"unknown method {method!r}")

    p = 0.5 * (q + q.T)
    if method == "doubling":
        guess = _doubling(a, c, q, r)
        if guess is not None:
            p = guess
    it = 0
    residual = _scaled_residual(_riccati_map(a, c, q, r, p), p)
    while residual > tol:
        if it >= max_iter:
            raise NonConvergence(max_iter, residual)
        p = _riccati_map(a, c, q, r, p)
        it += 1
        residual = _scaled_residual(_riccati_map(a, c, q, r, p), p)

    s = c @ p @ c.T + r
    if np.linalg.cond(s) > 1e15:
        raise SingularInnovation("innovation covariance C P C^T + R is singular")
    k = np.linalg.solve(s, c @ p).T
    return DareSolution(P=p, H=a @ k, K=k, iterations=it, residual=residual)


def dare_residual(a, c, q, r, p) -> float:
    """Scaled residual ``|RHS(P) - P|`` of a candidate Riccati solution."""
    nxt = _riccati_map(*(as_matrix(x) for x in (a, c, q, r, p)))
    return _scaled_residual(nxt, as_matrix(p))


def solve_dlyap(m, q) -> np.ndarray:
    """Solve ``M P M^T - P + Q = 0`` by Kronecker vectorisation.

    ``vec(P) = (I - M kron M)^-1 vec(Q)``.  When every diagonal entry of
    ``Q`` is positive the system is first balanced by ``D = sqrt(diag Q)``,
    which keeps mixed-unit states (phase vs. frequency) accurate.
    """
    m, q = as_matrix(m), as_matrix(q)
    n = m.shape[0]
    if m.shape != (n, n) or q.shape != (n, n):
        raise ValueError("solve_dlyap needs square matrices of equal size")
    rho = spectral_radius(m)
    if rho >= 1.0:
        raise UnstableCoefficient(f"spectral radius {rho:.6g} >= 1")

    d = np.sqrt(np.diag(q)) if np.all(np.diag(q) > 0) else np.ones(n)
    ms = m * d[np.newaxis, :] / d[:, np.newaxis]  # D^-1 M D
    qs = q / np.outer(d, d)
    lhs = np.eye(n * n) - np.kron(ms, ms)
    try:
        ps = np.linalg.solve(lhs, qs.reshape(-1)).reshape(n, n)
    except np.linalg.LinAlgError as exc:
        raise UnstableCoefficient("I - M kron M is singular") from exc
    p = ps * np.outer(d, d)
    return 0.5 * (p + p.T)


def psd_factor(q) -> np.ndarray:
    """Return ``L`` with ``L L^T = Q`` for a symmetric PSD ``Q``.

    2x2 inputs (the clock noise covariance) use the closed-form upper
    triangular factor ``[[a, b], [0, c]]`` with ``c = sqrt(q22)``,
    ``b = q12 / c``, ``a = sqrt(q11 - b^2)``; this stays valid when the
    random-walk variance is zero, where Cholesky would fail.  Larger
    inputs go through an eigendecomposition with tiny negative
    eigenvalues clipped to zero.
    """
    q = as_matrix(q)
    n = q.shape[0]
    if q.shape != (n, n):
        raise ValueError("psd_factor needs a square matrix")
    q = 0.5 * (q + q.T)
    tr = float(np.trace(q))
    if n == 0 or not np.any(q):
        return np.zeros_like(q)
    w, v = np.linalg.eigh(q)
    if w.min() < -1e-10 * abs(tr):
        raise NotPsd(f"eigenvalue {w.min():.3e} below tolerance (trace {tr:.3e})")

    if n == 2:
        q11, q12, q22 = q[0, 0], q[0, 1], q[1, 1]
        if q22 > 0:
            c = np.sqrt(q22)
            b = q12 / c
            a = np.sqrt(max(q11 - b * b, 0.0))
        else:
            a, b, c = np.sqrt(max(q11, 0.0)), 0.0, 0.0
        return np.array([[a, b], [0.0, c]])

    w = np.where(w < 0, 0.0, w)
    return v * np.sqrt(w)[np.newaxis, :]
