"""Gain synthesis and control laws.

* ``F``: distributed synchronisation gain, chosen so that
  ``Pi kron A - L kron B F`` is Schur.
* ``F_B``: tracking gain broadcast by the supervisor every ``s`` steps,
  chosen by minimising the steady RMS tracking error at broadcast instants
  (an H2 criterion over the period map of the closed loop).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import minimize

from .clock import system_matrices
from .errors import (DimensionMismatch, Infeasible, NoFeasiblePoint, NoStabilizingGainFound,
                     UnstableCoefficient)
from .numerics import solve_dlyap, spectral_radius


@dataclass(frozen=True)
class SyncGain:
    F: np.ndarray  # shape (2,)
    achieved_radius: float


@dataclass(frozen=True)
class TrackingGain:
    F_B: np.ndarray  # shape (2,)
    objective: float
    margin: float
    ab_radius: float


@dataclass(frozen=True, eq=False)
class ClosedLoopMatrices:
    """Period-map blocks over ``rho = [z_tilde; e_z; e]``.

    ``Atilde`` is the one-step map at a broadcast step and ``A0tilde``
    the map at every other step.
    """

    Atilde: np.ndarray
    A0tilde: np.ndarray
    Ctilde: np.ndarray
    broadcast_period: int
    Qtilde: np.ndarray = None


# -- synchronisation ---------------------------------------------------------

def sync_matrix(topology, F, tau=1.0) -> np.ndarray:
    a, b, _ = system_matrices(tau)
    F = np.reshape(np.asarray(F, dtype=float), (1, 2))
    return np.kron(topology.Pi, a) - np.kron(topology.laplacian, b @ F)


def _modal_radius(F, mus, a, b):
    bf = b @ np.reshape(F, (1, 2))
    return max(spectral_radius(a - mu * bf) for mu in mus)


def design_sync_gain(topology, tau=1.0, *, grid_size=41, f1_range=(1e-4, 2.0),
                     f2_range=(1e-3, 2.0), polish_rounds=60) -> SyncGain:
    """Pick ``F = [f1, f2]`` minimising the worst modal spectral radius.

    For an undirected graph ``Pi kron A - L kron B F`` is Schur exactly
    when ``A - mu B F`` is Schur for every nonzero Laplacian eigenvalue
    ``mu``.  The search scans a log-spaced grid (``f1`` scaled by
    ``1/tau``), then refines the best point by coordinate descent with
    shrinking multiplicative steps.  Fully deterministic.
    """
    a, b, _ = system_matrices(tau)
    mus = [mu for mu in np.linalg.eigvalsh(topology.laplacian) if mu > 1e-9]
    f1s = np.geomspace(*f1_range, grid_size) / tau
    f2s = np.geomspace(*f2_range, grid_size)
    best, best_f = np.inf, None
    for f1 in f1s:
        for f2 in f2s:
            r = _modal_radius((f1, f2), mus, a, b)
            if r < best:
                best, best_f = r, np.array([f1, f2])
    if best_f is None:
        raise NoStabilizingGainFound("grid search produced no candidate")

    step = 0.5
    for _ in range(polish_rounds):
        improved = False
        for idx in (0, 1):
            for fac in (1 + step, 1 / (1 + step)):
                cand = best_f.copy()
                cand[idx] *= fac
                r = _modal_radius(cand, mus, a, b)
                if r < best - 1e-15:
                    best, best_f, improved = r, cand, True
        if not improved:
            step *= 0.5
            if step < 1e-6:
                break

    achieved = spectral_radius(sync_matrix(topology, best_f, tau))
    if not achieved < 1.0:
        raise NoStabilizingGainFound(f"best gain {best_f} reaches radius {achieved:.6g}")
    return SyncGain(F=best_f, achieved_radius=achieved)


def reverse_estimates(topology, xi_hat) -> np.ndarray:
    """Stack ``xi_hat_ji`` in the slot order of ``xi_hat_ij``."""
    xi = np.asarray(xi_hat, dtype=float)
    e = topology.num_slots
    shaped = xi.reshape(xi.shape[:-1] + (e, 2))
    return shaped[..., topology.reverse, :].reshape(xi.shape)


def _slot_owner(topology):
    owner = np.zeros((topology.n, topology.num_slots))
    for k, (i, _) in enumerate(topology.slots):
        owner[i, k] = 1.0
    return owner


def sync_control(topology, xi_hat, xi_hat_rev, F) -> np.ndarray:
    """``u_i = 1/2 F sum_j (xi_hat_ij - xi_hat_ji)`` for every node."""
    xi_hat = np.asarray(xi_hat, dtype=float)
    xi_hat_rev = np.asarray(xi_hat_rev, dtype=float)
    e = topology.num_slots
    if xi_hat.shape[-1] != 2 * e or xi_hat_rev.shape != xi_hat.shape:
        raise DimensionMismatch(f"edge estimates must have {2 * e} entries, got {xi_hat.shape}")
    F = np.ravel(np.asarray(F, dtype=float))
    diff = (xi_hat - xi_hat_rev).reshape(xi_hat.shape[:-1] + (e, 2))
    per_slot = diff @ F
    return 0.5 * per_slot @ _slot_owner(topology).T


# -- tracking ----------------------------------------------------------------

def tracking_control(z_tilde_hat, F_B, n) -> np.ndarray:
    """Broadcast ``-F_B z_hat`` identically to all ``n`` clocks."""
    val = np.asarray(z_tilde_hat, dtype=float) @ np.ravel(F_B)
    return np.repeat(-val[..., np.newaxis], n, axis=-1)


def alt_tracking_control(xi_G_hat, F_B, n, g) -> np.ndarray:
    """Edge-estimate variant ``(1/g) (1_n 1_g^T kron F_B) xi_G_hat``."""
    xi = np.asarray(xi_G_hat, dtype=float)
    if xi.shape[-1] != 2 * g:
        raise DimensionMismatch(f"GNSS edge estimate must have {2 * g} entries, got {xi.shape}")
    val = xi.reshape(xi.shape[:-1] + (g, 2)) @ np.ravel(F_B)
    return np.repeat(val.mean(axis=-1)[..., np.newaxis], n, axis=-1)


def is_broadcast_step(k, s) -> bool:
    if s < 1:
        raise ValueError("broadcast period must be >= 1")
    return (k + 1) % s == 0


def combined_control(k, s, u_syn, u_G) -> np.ndarray:
    if is_broadcast_step(k, s):
        return np.asarray(u_syn) + np.asarray(u_G)
    return np.asarray(u_syn)


def a_b(gamma, F_B, tau=1.0) -> np.ndarray:
    """``(A - B F_B) A^gamma``."""
    a, b, _ = system_matrices(tau)
    fb = np.reshape(np.asarray(F_B, dtype=float), (1, 2))
    return (a - b @ fb) @ np.array([[1.0, gamma * tau], [0.0, 1.0]])


def tracking_margin(F_B, tau, s) -> float:
    """``4 / (f_b1 tau s + 2 f_b2)``; ``-inf`` when the denominator is not positive."""
    f1, f2 = np.ravel(F_B)
    den = f1 * tau * s + 2.0 * f2
    return 4.0 / den if den > 0 else -np.inf


def assemble_closed_loop(topology, F_B, supervisor, edge_filters, tau, s) -> ClosedLoopMatrices:
    """Block matrices of the tracking-error / estimation-error loop.

    Blocks (row, col): (1,1) ``A - B F_B`` at broadcast and ``A``
    otherwise; (1,2) ``B F_B`` at broadcast; (2,2) the supervisor's
    prediction-error matrix; (2,3) its coupling ``A H_z (q_A^T V^+ kron C)``
    to edge estimation errors; (3,3) ``diag`` of the edge filters'
    prediction-error matrices.
    """
    a, b, _ = system_matrices(tau)
    e2 = 2 * topology.num_slots
    if len(edge_filters) != topology.n or sum(f.A.shape[0] for f in edge_filters) != e2:
        raise DimensionMismatch("edge filters do not match the topology")
    if supervisor.compensation.shape[1] != e2:
        raise DimensionMismatch("supervisor filter does not match the topology")
    fb = np.reshape(np.asarray(F_B, dtype=float), (1, 2))
    dim = 4 + e2
    a0 = np.zeros((dim, dim))
    a0[0:2, 0:2] = a
    a0[2:4, 2:4] = supervisor.error_matrix
    a0[2:4, 4:] = supervisor.gain @ supervisor.compensation
    a0[4:, 4:] = block_diag(*[f.error_matrix for f in edge_filters])
    at = a0.copy()
    at[0:2, 0:2] = a - b @ fb
    at[0:2, 2:4] = b @ fb
    ct = np.zeros((2, dim))
    ct[:, 0:2] = np.eye(2)
    return ClosedLoopMatrices(Atilde=at, A0tilde=a0, Ctilde=ct, broadcast_period=int(s))


def step_noise_cov(topology, supervisor, edge_filters, Q, Q_G, R, R_G) -> np.ndarray:
    """Covariance of the per-step noise ``rho_n`` driving ``rho``.

    ``rho_n = N [v; v_G; w; w_G]`` with
      row 1: ``(q^T kron I2) v - (q_G^T kron I2) v_G``
      row 2: row 1 ``- A H_z 1_g^T w_G``
      row 3: ``(V kron I2) v - H* w``  (``H*`` the stacked predictor gains)
    so the cross blocks between rows come out of the shared sources.
    """
    n, g, e = topology.n, topology.g, topology.num_slots
    R = np.diag(R) if np.ndim(R) == 1 else np.asarray(R, dtype=float)
    R_G = np.diag(R_G) if np.ndim(R_G) == 1 else np.asarray(R_G, dtype=float)
    src = 2 * n + 2 * g + e + g
    nm = np.zeros((4 + 2 * e, src))
    mean_v = np.kron(topology.q[np.newaxis, :], np.eye(2))
    mean_vg = np.kron(topology.q_G[np.newaxis, :], np.eye(2))
    for rows in (slice(0, 2), slice(2, 4)):
        nm[rows, 0:2 * n] = mean_v
        nm[rows, 2 * n:2 * n + 2 * g] = -mean_vg
    nm[2:4, 2 * n + 2 * g + e:] = -supervisor.gain @ np.ones((1, g))
    nm[4:, 0:2 * n] = np.kron(topology.V, np.eye(2))
    nm[4:, 2 * n + 2 * g:2 * n + 2 * g + e] = -block_diag(*[f.gain for f in edge_filters])
    cov = block_diag(np.asarray(Q), np.asarray(Q_G), R, R_G)
    out = nm @ cov @ nm.T
    return 0.5 * (out + out.T)


def _check_finite(m, what):
    if not np.all(np.isfinite(m)):
        raise UnstableCoefficient(f"{what} overflowed")


def inner_noise_sum(a0, sigma, terms) -> np.ndarray:
    """``sum_{m=0}^{terms-1} A0^m Sigma (A0^m)^T`` by the recursion
    ``S <- Sigma + A0 S A0^T`` (one multiply pair per term)."""
    acc = np.zeros_like(sigma)
    for _ in range(terms):
        acc = sigma + a0 @ acc @ a0.T
        _check_finite(acc, "accumulated noise covariance")
    return 0.5 * (acc + acc.T)


def assemble_Qtilde(closed: ClosedLoopMatrices, sigma_rho, s=None) -> np.ndarray:
    """Covariance of the noise accumulated over one broadcast period.

    ``Qtilde = sum_{i=2}^{s} (At A0^{i-2}) S (At A0^{i-2})^T + S``
    with ``S`` the per-step covariance.  Computed as
    ``S + At (sum_{m=0}^{s-2} A0^m S A0^mT) At^T``.
    """
    s = closed.broadcast_period if s is None else int(s)
    sigma_rho = np.asarray(sigma_rho, dtype=float)
    if sigma_rho.shape != closed.Atilde.shape:
        raise DimensionMismatch(f"noise covariance has shape {sigma_rho.shape}, "
                                f"expected {closed.Atilde.shape}")
    if s <= 1:
        return sigma_rho.copy()
    inner = inner_noise_sum(closed.A0tilde, sigma_rho, s - 1)
    at = closed.Atilde
    out = sigma_rho + at @ inner @ at.T
    _check_finite(out, "Qtilde")
    return 0.5 * (out + out.T)


# -- H2 tracking design ------------------------------------------------------

@dataclass(eq=False)
class TrackingContext:
    """Everything the tracking-gain objective needs that does not depend on
    ``F_B``, with the ``F_B``-independent sums precomputed."""

    topology: object
    supervisor: object
    edge_filters: list
    tau: float
    s: int
    sigma_rho: np.ndarray
    qtilde_mode: str = "derived"
    _base: ClosedLoopMatrices = field(init=False, repr=False)
    _a0_pow: np.ndarray = field(init=False, repr=False)
    _inner: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.qtilde_mode not in ("derived", "identity"):
            raise ValueError(f"qtilde mode must be 'derived' or 'identity', got {self.qtilde_mode!r}")
        self._base = assemble_closed_loop(self.topology, np.zeros(2), self.supervisor,
                                          self.edge_filters, self.tau, self.s)
        self._a0_pow = np.linalg.matrix_power(self._base.A0tilde, self.s - 1)
        _check_finite(self._a0_pow, "A0tilde power")
        if self.s > 1:
            self._inner = inner_noise_sum(self._base.A0tilde, self.sigma_rho, self.s - 1)

    @classmethod
    def build(cls, topology, supervisor, edge_filters, Q, Q_G, R, R_G, tau, s, qtilde_mode="derived"):
        sigma = step_noise_cov(topology, supervisor, edge_filters, Q, Q_G, R, R_G)
        return cls(topology, supervisor, edge_filters, float(tau), int(s), sigma, qtilde_mode)

    def closed_loop(self, F_B) -> ClosedLoopMatrices:
        cl = assemble_closed_loop(self.topology, F_B, self.supervisor, self.edge_filters,
                                  self.tau, self.s)
        return ClosedLoopMatrices(cl.Atilde, cl.A0tilde, cl.Ctilde, cl.broadcast_period,
                                  self.qtilde(cl))

    def qtilde(self, cl) -> np.ndarray:
        if self.qtilde_mode == "identity":
            return np.eye(cl.Atilde.shape[0])
        if self.s <= 1:
            return self.sigma_rho.copy()
        out = self.sigma_rho + cl.Atilde @ self._inner @ cl.Atilde.T
        return 0.5 * (out + out.T)

    def period_map(self, cl) -> np.ndarray:
        return cl.Atilde @ self._a0_pow


def h2_objective(f_b1, f_b2, context: TrackingContext) -> float:
    """``sqrt(tr(Ct P Ct^T))`` where ``P`` solves the period-map Lyapunov
    equation ``M P M^T - P + Qtilde = 0``, ``M = At A0^(s-1)``.

    Raises:
        Infeasible: the margin condition fails or ``(A - B F_B) A^(s-1)``
            is not Schur.
    """
    fb = np.array([f_b1, f_b2], dtype=float)
    margin = tracking_margin(fb, context.tau, context.s)
    if not margin > 1.0:
        raise Infeasible(f"F_B={fb} violates the broadcast margin ({margin:.4g} <= 1)")
    ab = spectral_radius(a_b(context.s - 1, fb, context.tau))
    if not ab < 1.0:
        raise Infeasible(f"F_B={fb} leaves (A - B F_B) A^(s-1) unstable (radius {ab:.6g})")
    cl = context.closed_loop(fb)
    try:
        p = solve_dlyap(context.period_map(cl), cl.Qtilde)
    except UnstableCoefficient as exc:
        raise Infeasible(str(exc)) from exc
    val = float(np.trace(cl.Ctilde @ p @ cl.Ctilde.T))
    return float(np.sqrt(max(val, 0.0)))


@dataclass(frozen=True)
class OptimizerConfig:
    """Probe grid is over ``(f_b1 tau s, f_b2)`` inside the stability
    triangle ``a > 0, 0 < f_b2 < 2, a + 2 f_b2 < 4``."""

    grid_size: int = 24
    starts: int = 4
    max_iter: int = 400
    xatol: float = 1e-7
    fatol: float = 1e-12


def probe_grid(config: OptimizerConfig):
    """Grid points ``(a, f_b2)`` used both as Nelder-Mead starts and as the
    reference set the final answer must beat."""
    n = config.grid_size
    pts = []
    for a in (np.arange(n) + 0.5) * (4.0 / n):
        for f2 in (np.arange(n) + 0.5) * (2.0 / n):
            if a + 2 * f2 < 4.0 - 1.0 / n:
                pts.append((float(a), float(f2)))
    return pts


def design_tracking_gain(context: TrackingContext, config: OptimizerConfig = None) -> TrackingGain:
    """Minimise :func:`h2_objective` over ``F_B``.

    Every probe-grid point is evaluated; the ``starts`` best seed
    Nelder-Mead runs in the scaled coordinates ``(f_b1 tau s, f_b2)``
    where infeasible points get a large penalty.  The answer is the best
    feasible point seen (ties: lowest ``(f_b1, f_b2)``), so it is never
    worse than any grid point.
    """
    config = config or OptimizerConfig()
    ts = context.tau * context.s

    def evaluate(a, f2):
        try:
            return h2_objective(a / ts, f2, context)
        except Infeasible:
            return None

    seen = []
    for a, f2 in probe_grid(config):
        val = evaluate(a, f2)
        if val is not None:
            seen.append((val, a / ts, f2))
    if not seen:
        raise NoFeasiblePoint("no feasible tracking gain on the probe grid")
    seen.sort()
    scale = seen[0][0] if seen[0][0] > 0 else 1.0

    def penalised(z):
        val = evaluate(z[0], z[1])
        if val is None:
            return 1e6 + float(np.sum(np.abs(z)))
        seen.append((val, z[0] / ts, float(z[1])))
        return val / scale

    for val, f1, f2 in list(seen[:config.starts]):
        minimize(penalised, np.array([f1 * ts, f2]), method="Nelder-Mead",
                 options=dict(maxiter=config.max_iter, xatol=config.xatol,
                              fatol=config.fatol, initial_simplex=None))

    val, f1, f2 = min(seen)
    fb = np.array([f1, f2])
    return TrackingGain(F_B=fb, objective=val, margin=tracking_margin(fb, context.tau, context.s),
                        ab_radius=spectral_radius(a_b(context.s - 1, fb, context.tau)))
