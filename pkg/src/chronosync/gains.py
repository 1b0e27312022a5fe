"""Synthesised gain set, its JSON form, and the end-to-end design pipeline.

The pipeline runs four stages in order (synchronisation gain, edge
filters, supervisor and GNSS-edge filters, tracking gain).  A failure in
any stage is re-raised as :class:`DesignFailed` naming that stage.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .clock import system_matrices
from .control import (OptimizerConfig, TrackingContext, design_sync_gain, design_tracking_gain)
from .errors import ChronoError, GainModeMismatch
from .estimation import (EdgeFilter, GnssEdgeFilter, SupervisorFilter, design_edge_filters,
                         design_gnss_edge_filter, design_supervisor_filter, edge_input_map,
                         gnss_edge_cov, averaged_gnss_cov)
from .network import Topology


class DesignFailed(ChronoError):
    def __init__(self, stage, cause):
        super().__init__(f"design stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(eq=False)
class GainSet:
    """Everything the closed loop needs at run time.

    ``H_i_star`` maps 0-based node index to that node's predictor gain;
    ``H_ztilde_star`` is the supervisor's filter gain (the loop applies
    ``A @ H_ztilde_star``); ``H_G_star`` is the GNSS-edge predictor gain.
    """

    n: int
    g: int
    tau: float
    s: int
    F: np.ndarray
    sync_radius: float
    H_i_star: dict
    P_i: dict
    H_ztilde_star: np.ndarray = None
    P_ztilde: np.ndarray = None
    H_G_star: np.ndarray = None
    P_G: np.ndarray = None
    F_B: np.ndarray = None
    margin: float = None
    objective: float = None
    ab_radius: float = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(m):
            return None if m is None else np.asarray(m).tolist()

        return {
            "F": arr(self.F),
            "F_B": arr(self.F_B),
            "margin": self.margin,
            "objective": self.objective,
            "ab_radius": self.ab_radius,
            "sync_radius": self.sync_radius,
            "H_i_star": {str(i + 1): arr(h) for i, h in sorted(self.H_i_star.items())},
            "P_i": {str(i + 1): arr(p) for i, p in sorted(self.P_i.items())},
            "H_ztilde_star": arr(self.H_ztilde_star),
            "P_ztilde": arr(self.P_ztilde),
            "H_G_star": arr(self.H_G_star),
            "P_G": arr(self.P_G),
            "meta": dict(self.meta, tau=self.tau, s=self.s, n=self.n, g=self.g),
        }

    @classmethod
    def from_dict(cls, d) -> "GainSet":
        def arr(x):
            return None if x is None else np.array(x, dtype=float)

        try:
            meta = dict(d["meta"])
            extra = {k: v for k, v in meta.items() if k not in ("tau", "s", "n", "g")}
            return cls(
                n=int(meta["n"]), g=int(meta["g"]), tau=float(meta["tau"]), s=int(meta["s"]),
                F=arr(d["F"]), sync_radius=d.get("sync_radius"),
                H_i_star={int(k) - 1: arr(v) for k, v in d["H_i_star"].items()},
                P_i={int(k) - 1: arr(v) for k, v in d.get("P_i", {}).items()},
                H_ztilde_star=arr(d.get("H_ztilde_star")), P_ztilde=arr(d.get("P_ztilde")),
                H_G_star=arr(d.get("H_G_star")), P_G=arr(d.get("P_G")),
                F_B=arr(d.get("F_B")), margin=d.get("margin"), objective=d.get("objective"),
                ab_radius=d.get("ab_radius"), meta=extra,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GainModeMismatch(f"malformed gain set: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "GainSet":
        return cls.from_dict(json.loads(text))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ChronoError as exc:
        raise DesignFailed(name, exc) from exc


def design_gains(scenario, optimizer: OptimizerConfig = None, *, tracking=True,
                 sync_search=None) -> GainSet:
    """Design every gain the scenario's closed loop needs.

    Args:
        scenario: a :class:`chronosync.sim.Scenario`.
        optimizer: tracking-gain optimizer settings.
        tracking: also design the supervisor, GNSS-edge filter and ``F_B``
            (needs at least one GNSS receiver).
        sync_search: keyword overrides for :func:`design_sync_gain`.
    """
    top, tau = scenario.topology, scenario.tau
    Q, Q_G = scenario.Q(), scenario.Q_G()
    R, R_G = scenario.R_matrix(), scenario.R_G_matrix()
    include = scenario.edge_filter_input == "include"

    sync = _stage("sync_gain", design_sync_gain, top, tau, **(sync_search or {}))
    edge = _stage("edge_filters", design_edge_filters, top, Q, R, tau, include_input=include)
    gs = GainSet(n=top.n, g=top.g, tau=tau, s=scenario.s, F=sync.F, sync_radius=sync.achieved_radius,
                 H_i_star={f.node: f.gain for f in edge}, P_i={f.node: f.P for f in edge},
                 meta={"edge_filter_input": scenario.edge_filter_input, "qtilde": scenario.qtilde})
    if not tracking or top.g == 0:
        return gs

    sup = _stage("supervisor_filter", design_supervisor_filter, top, Q, Q_G, R_G, tau)
    gnss = _stage("gnss_edge_filter", design_gnss_edge_filter, top, Q, Q_G, R_G, tau)
    gs.H_ztilde_star, gs.P_ztilde = sup.filter_gain, sup.P
    gs.H_G_star, gs.P_G = gnss.gain, gnss.P

    def tracking_stage():
        ctx = TrackingContext.build(top, sup, edge, Q, Q_G, R, R_G, tau, scenario.s,
                                    qtilde_mode=scenario.qtilde)
        return design_tracking_gain(ctx, optimizer)

    tg = _stage("tracking_gain", tracking_stage)
    gs.F_B, gs.margin, gs.objective, gs.ab_radius = tg.F_B, float(tg.margin), tg.objective, tg.ab_radius
    return gs


def build_filters(scenario, gains: GainSet):
    """Instantiate run-time filters from a gain set.

    Returns ``(edge_filters, supervisor, gnss_filter)``; the last two are
    ``None`` when the gain set carries no gain for them.
    """
    top: Topology = scenario.topology
    tau = scenario.tau
    a, b, c = system_matrices(tau)
    Q, Q_G = scenario.Q(), scenario.Q_G()
    R, R_G = scenario.R_matrix(), scenario.R_G_matrix()
    include = scenario.edge_filter_input == "include"

    edges = []
    for i, sl in enumerate(top.node_slices):
        m = len(top.neighbors[i])
        h = np.asarray(gains.H_i_star[i], dtype=float)
        if h.shape != (2 * m, m):
            raise GainModeMismatch(f"node {i + 1} gain has shape {h.shape}, expected {(2 * m, m)}")
        a_i = np.kron(np.eye(m), a)
        c_i = np.kron(np.eye(m), c)
        vi = np.kron(top.V_blocks[i], np.eye(2))
        g_map = edge_input_map(top, i, tau)
        edges.append(EdgeFilter(
            A=a_i, C=c_i, Q=vi @ Q @ vi.T, R=R[sl, sl],
            P=gains.P_i.get(i, np.full((2 * m, 2 * m), np.nan)),
            gain=h, filter_gain=np.linalg.solve(a_i, h),
            input_map=g_map if include else np.zeros_like(g_map),
            estimate=np.zeros(2 * m), node=i, neighbors=top.neighbors[i]))

    sup = None
    if gains.H_ztilde_star is not None and top.g > 0:
        k = np.reshape(gains.H_ztilde_star, (2, 1))
        ones = np.ones(top.g)
        sup = SupervisorFilter(
            A=a, C=-top.g * c, Q=averaged_gnss_cov(top, Q, Q_G),
            R=np.array([[ones @ R_G @ ones]]),
            P=gains.P_ztilde if gains.P_ztilde is not None else np.full((2, 2), np.nan),
            gain=a @ k, filter_gain=k, input_map=np.kron(top.q[np.newaxis, :], b),
            estimate=np.zeros(2),
            compensation=np.kron((top.q_A @ top.V_pinv)[np.newaxis, :], c), g=top.g)

    gnss = None
    if gains.H_G_star is not None and top.g > 0:
        h = np.asarray(gains.H_G_star, dtype=float)
        if h.shape != (2 * top.g, top.g):
            raise GainModeMismatch(f"GNSS-edge gain has shape {h.shape}")
        a_g = np.kron(np.eye(top.g), a)
        gnss = GnssEdgeFilter(
            A=a_g, C=np.kron(np.eye(top.g), c), Q=gnss_edge_cov(top, Q, Q_G), R=R_G,
            P=gains.P_G if gains.P_G is not None else np.full((2 * top.g,) * 2, np.nan),
            gain=h, filter_gain=np.linalg.solve(a_g, h),
            input_map=np.kron(top.V_G[:, :top.n], b), estimate=np.zeros(2 * top.g))
    return edges, sup, gnss
