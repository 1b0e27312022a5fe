"""Steady-state Kalman predictors used by the ensemble and the supervisor.

Every filter here runs in one-step predictor form with a precomputed gain:

    est[k+1] = A est[k] + H (y[k] - C est[k]) + G u[k]

where ``H`` is the predictor gain ``A P C^T (C P C^T + R)^-1`` from the
filter Riccati equation and ``G u`` is the known control contribution.
Estimates may carry leading batch axes (one row per Monte Carlo
replication); all step functions broadcast over them.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .clock import system_matrices
from .errors import DimensionMismatch
from .numerics import as_matrix, solve_dare


@dataclass(eq=False)
class _Predictor:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    gain: np.ndarray  # predictor gain, A @ filter_gain
    filter_gain: np.ndarray
    input_map: np.ndarray
    estimate: np.ndarray

    @property
    def error_matrix(self) -> np.ndarray:
        """Prediction-error transition ``A - H C = A (I - K C)``."""
        return self.A - self.gain @ self.C

    def reset(self, batch=()):
        self.estimate = np.zeros(tuple(batch) + (self.A.shape[0],))


def _design(a, c, q, r, input_map, tol, max_iter):
    sol = solve_dare(a, c, q, r, tol=tol, max_iter=max_iter)
    return dict(A=a, C=c, Q=q, R=r, P=sol.P, gain=sol.H, filter_gain=sol.K,
                input_map=input_map, estimate=np.zeros(a.shape[0]))


def _predict(f, y, u, extra=0.0):
    y = np.asarray(y, dtype=float)
    est = f.estimate
    if y.shape[-1:] != (f.C.shape[0],):
        raise DimensionMismatch(f"measurement has shape {y.shape}, expected (..., {f.C.shape[0]})")
    innov = y - est @ f.C.T + extra
    return est @ f.A.T + innov @ f.gain.T + u


@dataclass(eq=False)
class EdgeFilter(_Predictor):
    """Node ``node``'s estimator of its incoming edge states
    ``xi_i = (V_i kron I2) x``."""

    node: int = 0
    neighbors: tuple = ()


@dataclass(eq=False)
class SupervisorFilter(_Predictor):
    """Supervisor's estimator of the tracking error from the summed GNSS
    edge measurement.  ``gain`` is the predictor gain ``A H_z``; the
    conventional filter gain ``H_z`` is ``filter_gain``.  ``compensation`` is the
    row ``(q_A^T V^+) kron C`` applied to the stacked edge estimates."""

    compensation: np.ndarray = None
    g: int = 1


@dataclass(eq=False)
class GnssEdgeFilter(_Predictor):
    """Estimator of the GNSS edge states ``xi_G = (V_G kron I2) [x; X]``."""


@dataclass(eq=False)
class EdgeFilterBank(_Predictor):
    """All nodes' edge filters run as one block-diagonal predictor over the
    stacked edge state in canonical slot order."""

    nodes: tuple = ()


def stack_edge_filters(filters) -> EdgeFilterBank:
    filters = sorted(filters, key=lambda f: f.node)
    parts = {name: block_diag(*[getattr(f, name) for f in filters])
             for name in ("A", "C", "Q", "R", "P", "gain", "filter_gain")}
    parts["input_map"] = np.vstack([f.input_map for f in filters])
    parts["estimate"] = np.zeros(parts["A"].shape[0])
    return EdgeFilterBank(**parts, nodes=tuple(f.node for f in filters))


def edge_input_map(topology, node, tau):
    _, b, _ = system_matrices(tau)
    return np.kron(topology.V_blocks[node], b)


def design_edge_filter(topology, node, Q, R_i, tau=1.0, *, include_input=True,
                       tol=1e-12, max_iter=1_000_000) -> EdgeFilter:
    """Design node ``node``'s edge filter.

    Args:
        Q: ensemble process covariance, ``2n x 2n``.
        R_i: covariance of node ``node``'s edge measurements,
            ``|N_i| x |N_i|`` (a vector is read as a diagonal).
        include_input: feed the known control term ``(V_i kron B) u`` into
            the prediction.  ``False`` gives the strict input-free filter.
    """
    a, _, c = system_matrices(tau)
    m = len(topology.neighbors[node])
    R_i = np.asarray(R_i, dtype=float)
    R_i = np.diag(R_i) if R_i.ndim == 1 else as_matrix(R_i)
    if R_i.shape != (m, m):
        raise DimensionMismatch(f"R_{node} has shape {R_i.shape}, expected ({m}, {m})")
    vi = np.kron(topology.V_blocks[node], np.eye(2))
    q_bar = vi @ as_matrix(Q) @ vi.T
    a_i = np.kron(np.eye(m), a)
    c_i = np.kron(np.eye(m), c)
    g_map = edge_input_map(topology, node, tau)
    if not include_input:
        g_map = np.zeros_like(g_map)
    parts = _design(a_i, c_i, q_bar, R_i, g_map, tol, max_iter)
    return EdgeFilter(**parts, node=node, neighbors=topology.neighbors[node])


def design_edge_filters(topology, Q, R, tau=1.0, **kw):
    """All nodes' edge filters; ``R`` covers the stacked measurements in
    canonical slot order (vector = diagonal)."""
    R = np.asarray(R, dtype=float)
    R = np.diag(R) if R.ndim == 1 else as_matrix(R)
    return [design_edge_filter(topology, i, Q, R[s, s], tau, **kw)
            for i, s in enumerate(topology.node_slices)]


def edge_filter_step(filt: EdgeFilter, y_i, known_input) -> np.ndarray:
    """Advance ``filt`` one step with measurement ``y_i`` and the known
    input term (``(V_i kron B) u``, see :func:`edge_known_input`)."""
    known_input = np.asarray(known_input, dtype=float)
    if known_input.shape[-1:] != filt.estimate.shape[-1:]:
        raise DimensionMismatch(f"known input shape {known_input.shape} does not match state")
    filt.estimate = _predict(filt, y_i, known_input)
    return filt.estimate


def edge_known_input(filt: _Predictor, u) -> np.ndarray:
    return np.asarray(u, dtype=float) @ filt.input_map.T


def summed_measurement(Y) -> np.ndarray:
    return np.sum(np.asarray(Y, dtype=float), axis=-1)


def averaged_gnss_cov(topology, Q, Q_G) -> np.ndarray:
    """``(q^T kron I2) Q (q kron I2) + (q_G^T kron I2) Q_G (q_G kron I2)``."""
    mq = np.kron(topology.q[np.newaxis, :], np.eye(2))
    mg = np.kron(topology.q_G[np.newaxis, :], np.eye(2))
    return mq @ as_matrix(Q) @ mq.T + mg @ as_matrix(Q_G) @ mg.T


def design_supervisor_filter(topology, Q, Q_G, R_G, tau=1.0, *, tol=1e-12,
                             max_iter=1_000_000) -> SupervisorFilter:
    """Tracking-error estimator driven by ``Ybar = 1^T Y``.

    The measurement matrix is ``-g C``.  The summed measurement noise is
    the scalar ``1^T R_G 1``.
    """
    if topology.g < 1:
        raise DimensionMismatch("supervisor needs at least one GNSS receiver")
    a, b, c = system_matrices(tau)
    R_G = np.asarray(R_G, dtype=float)
    R_G = np.diag(R_G) if R_G.ndim == 1 else as_matrix(R_G)
    if R_G.shape != (topology.g, topology.g):
        raise DimensionMismatch(f"R_G has shape {R_G.shape}, expected ({topology.g}, {topology.g})")
    g = topology.g
    ones = np.ones(g)
    r_bar = np.array([[ones @ R_G @ ones]])
    q_bar = averaged_gnss_cov(topology, Q, Q_G)
    c_eff = -g * c
    input_map = np.kron(topology.q[np.newaxis, :], b)
    comp = np.kron((topology.q_A @ topology.V_pinv)[np.newaxis, :], c)
    parts = _design(a, c_eff, q_bar, r_bar, input_map, tol, max_iter)
    return SupervisorFilter(**parts, compensation=comp, g=g)


def supervisor_filter_step(filt: SupervisorFilter, Ybar, xi_hat_all, u) -> np.ndarray:
    """One step of the supervisor estimator.

    ``z[k+1] = A z + A H_z (Ybar + g C z + (q_A^T V^+ kron C) xi_hat) + (q^T kron B) u``
    """
    Ybar = np.asarray(Ybar, dtype=float)[..., np.newaxis]
    xi_hat_all = np.asarray(xi_hat_all, dtype=float)
    u = np.asarray(u, dtype=float)
    if xi_hat_all.shape[-1] != filt.compensation.shape[1]:
        raise DimensionMismatch(f"stacked edge estimate has {xi_hat_all.shape[-1]} entries, "
                                f"expected {filt.compensation.shape[1]}")
    if u.shape[-1] != filt.input_map.shape[1]:
        raise DimensionMismatch(f"control has {u.shape[-1]} entries, expected {filt.input_map.shape[1]}")
    comp = xi_hat_all @ filt.compensation.T
    filt.estimate = _predict(filt, Ybar, u @ filt.input_map.T, extra=comp)
    return filt.estimate


def gnss_edge_cov(topology, Q, Q_G) -> np.ndarray:
    vg = np.kron(topology.V_G, np.eye(2))
    return vg @ block_diag(as_matrix(Q), as_matrix(Q_G)) @ vg.T


def design_gnss_edge_filter(topology, Q, Q_G, R_G, tau=1.0, *, tol=1e-12,
                            max_iter=1_000_000) -> GnssEdgeFilter:
    a, b, c = system_matrices(tau)
    g = topology.g
    R_G = np.asarray(R_G, dtype=float)
    R_G = np.diag(R_G) if R_G.ndim == 1 else as_matrix(R_G)
    if R_G.shape != (g, g):
        raise DimensionMismatch(f"R_G has shape {R_G.shape}, expected ({g}, {g})")
    a_g = np.kron(np.eye(g), a)
    c_g = np.kron(np.eye(g), c)
    # Only the MAC block of V_G sees the control; receivers are unsteered.
    input_map = np.kron(topology.V_G[:, :topology.n], b)
    parts = _design(a_g, c_g, gnss_edge_cov(topology, Q, Q_G), R_G, input_map, tol, max_iter)
    return GnssEdgeFilter(**parts)


def gnss_edge_filter_step(filt: GnssEdgeFilter, Y, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != filt.input_map.shape[1]:
        raise DimensionMismatch(f"control has {u.shape[-1]} entries, expected {filt.input_map.shape[1]}")
    filt.estimate = _predict(filt, Y, u @ filt.input_map.T)
    return filt.estimate
