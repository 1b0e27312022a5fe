"""Closed-loop simulation of the clock ensemble, its GNSS receivers, the
edge filters, the supervisor and the broadcast tracking control.

Replications are simulated together along a leading batch axis.  Each
replication owns a generator seeded with ``base_seed + r`` and draws, in
this order, ``g`` initial-jitter normals and then one block of standard
normals per step laid out as ``[v (2n), v_G (2g), w (|E|), w_G (g)]``.  The
layout does not depend on the mode, so runs in different modes with the
same seeds see identical noise (the noise tape).

Within step ``k`` the engine
  1. takes the step's noise from the tape,
  2. forms ``y`` and ``Y`` from the current true states,
  3. computes ``u[k]`` from the current (prior) estimates and the
     broadcast schedule,
  4. advances the supervisor, GNSS-edge and edge filters with ``y``,
     ``Y`` and the known ``u[k]``,
  5. advances the true states.
"""

import csv
import gzip
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from .clock import ClockParams, GnssClockParams, process_noise_cov, stacked_noise_cov, system_matrices
from .control import is_broadcast_step, reverse_estimates, sync_control
from .errors import ConfigError, DimensionMismatch, GainModeMismatch
from .estimation import (edge_filter_step, edge_known_input, gnss_edge_filter_step,
                         stack_edge_filters, summed_measurement, supervisor_filter_step)
from .gains import GainSet, build_filters
from .avar import fmt17
from .numerics import psd_factor

MODES = ("free", "sync", "sync_track", "sync_track_alt")
TRACKING_MODES = ("sync_track", "sync_track_alt")
CHUNK = 2048


def _as_cov(m, size, what):
    m = np.asarray(m, dtype=float)
    m = np.diag(m) if m.ndim == 1 else m
    if m.shape != (size, size):
        raise DimensionMismatch(f"{what} must be {size}x{size} (or a length-{size} diagonal), got {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * np.abs(m).max(initial=0.0)):
        raise ConfigError(f"{what} is not symmetric")
    if size and np.linalg.eigvalsh(m).min() <= 0:
        raise ConfigError(f"{what} must be positive definite")
    return m


@dataclass(frozen=True, eq=False)
class Scenario:
    """One closed-loop experiment.

    ``R`` covers the edge measurements in canonical slot order and ``R_G``
    the GNSS-edge measurements; both may be given as diagonals.
    ``noise_scale`` multiplies every draw (0 gives a noiseless run while
    the filters keep their designed gains).
    """

    topology: object
    clocks: tuple
    gnss: tuple
    R: np.ndarray
    R_G: np.ndarray
    tau: float = 1.0
    horizon: int = 1000
    s: int = 1000
    mode: str = "sync_track"
    seed: int = 0
    initial_phases: np.ndarray = None
    gnss_initial_var: float = 0.0
    noise_scale: float = 1.0
    edge_filter_input: str = "include"
    perfect_tracking: bool = False
    qtilde: str = "derived"

    def __post_init__(self):
        top = self.topology
        object.__setattr__(self, "clocks", tuple(self.clocks))
        object.__setattr__(self, "gnss", tuple(
            p if isinstance(p, GnssClockParams) else GnssClockParams(p) for p in self.gnss))
        if len(self.clocks) != top.n or len(self.gnss) != top.g:
            raise DimensionMismatch(f"need {top.n} clocks and {top.g} receivers, got "
                                    f"{len(self.clocks)} and {len(self.gnss)}")
        if not all(isinstance(c, ClockParams) for c in self.clocks):
            raise ConfigError("clocks must be ClockParams")
        object.__setattr__(self, "R", _as_cov(self.R, top.num_slots, "R"))
        object.__setattr__(self, "R_G", _as_cov(self.R_G, top.g, "R_G"))
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if int(self.s) < 1:
            raise ConfigError(f"broadcast period must be >= 1, got {self.s}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.edge_filter_input not in ("include", "ignore"):
            raise ConfigError("edge_filter_input must be 'include' or 'ignore'")
        if self.qtilde not in ("derived", "identity"):
            raise ConfigError("qtilde must be 'derived' or 'identity'")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (self.noise_scale >= 0 and self.gnss_initial_var >= 0):
            raise ConfigError("noise_scale and gnss_initial_var must be >= 0")
        phases = (np.arange(1, top.n + 1) * 1e-10 if self.initial_phases is None
                  else np.asarray(self.initial_phases, dtype=float))
        if phases.shape != (top.n,):
            raise DimensionMismatch(f"need {top.n} initial phases, got shape {phases.shape}")
        object.__setattr__(self, "initial_phases", phases)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "s", int(self.s))

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def Q(self) -> np.ndarray:
        return stacked_noise_cov(self.clocks, self.tau)

    def Q_G(self) -> np.ndarray:
        return stacked_noise_cov([p.params for p in self.gnss], self.tau)

    def R_matrix(self) -> np.ndarray:
        return self.R.copy()

    def R_G_matrix(self) -> np.ndarray:
        return self.R_G.copy()

    @property
    def noise_dim(self) -> int:
        top = self.topology
        return 2 * top.n + 2 * top.g + top.num_slots + top.g


def _factor(m):
    # Cholesky keeps diagonal covariances mapped one normal per entry.
    return np.linalg.cholesky(m) if m.size else m


def noise_factor(scenario: Scenario) -> np.ndarray:
    """``L`` with ``L L^T`` the covariance of one step's noise block."""
    blocks = [psd_factor(process_noise_cov(c, scenario.tau)) for c in scenario.clocks]
    blocks += [psd_factor(process_noise_cov(p.params, scenario.tau)) for p in scenario.gnss]
    blocks += [_factor(scenario.R), _factor(scenario.R_G)]
    return block_diag(*blocks) * scenario.noise_scale


class NoiseTape:
    """Per-replication standard normals, served in step order.

    The stream for replication ``r`` depends only on its seed, so two
    tapes built from the same seeds hand out identical blocks whatever
    the chunking.
    """

    def __init__(self, seeds, dim, g):
        self.seeds = [int(s) for s in seeds]
        self.dim = int(dim)
        self._rngs = [np.random.default_rng(s) for s in self.seeds]
        self.initial = np.stack([r.standard_normal(g) for r in self._rngs])

    def take(self, steps) -> np.ndarray:
        """Next ``steps`` blocks, shape ``(reps, steps, dim)``."""
        return np.stack([r.standard_normal((steps, self.dim)) for r in self._rngs])

    @classmethod
    def full(cls, scenario, seeds=None):
        """Materialise the whole tape (initial draws, step draws)."""
        seeds = [scenario.seed] if seeds is None else seeds
        tape = cls(seeds, scenario.noise_dim, scenario.topology.g)
        return tape.initial, tape.take(scenario.horizon)


@dataclass(eq=False)
class SimTrace:
    """States over ``horizon + 1`` instants and controls over ``horizon``.

    Arrays carry a leading replication axis when produced by
    :func:`run_batch`; :func:`run_simulation` strips it.
    """

    x: np.ndarray  # (..., H+1, n, 2)
    X: np.ndarray  # (..., H+1, g, 2)
    u: np.ndarray  # (..., H, n)
    z_hat: np.ndarray = None  # (..., H+1, 2) supervisor prior estimate
    y: np.ndarray = None  # (..., H, |E|)
    Y: np.ndarray = None  # (..., H, g)
    q: np.ndarray = None
    q_G: np.ndarray = None
    Pi: np.ndarray = None
    tau: float = 1.0

    @property
    def z_tilde(self) -> np.ndarray:
        """``(q^T kron I2) x - (q_G^T kron I2) X``."""
        return np.einsum("i,...ij->...j", self.q, self.x) - np.einsum("j,...jk->...k", self.q_G, self.X)

    @property
    def consensus_error(self) -> np.ndarray:
        """``(Pi kron I2) x``."""
        return np.einsum("ij,...jk->...ik", self.Pi, self.x)

    def mac_phase(self, reference="truth") -> np.ndarray:
        """MAC phases, shape ``(..., H+1, n)``, optionally relative to
        the mean GAC phase."""
        ph = self.x[..., 0]
        if reference == "gac_mean":
            ph = ph - (self.X[..., 0] @ self.q_G)[..., np.newaxis]
        elif reference != "truth":
            raise ValueError(f"unknown reference {reference!r}")
        return ph


def check_gains(scenario: Scenario, gains: GainSet):
    mode = scenario.mode
    if mode == "free":
        return
    if gains is None or gains.F is None:
        raise GainModeMismatch(f"mode {mode!r} needs a synchronisation gain")
    top = scenario.topology
    if gains.n != top.n or gains.g != top.g:
        raise GainModeMismatch(f"gains are for n={gains.n}, g={gains.g}; scenario has n={top.n}, g={top.g}")
    if set(gains.H_i_star) != set(range(top.n)):
        raise GainModeMismatch("gain set lacks edge-filter gains for some nodes")
    if gains.tau != scenario.tau:
        raise GainModeMismatch(f"gains designed for tau={gains.tau}, scenario uses {scenario.tau}")
    if mode in TRACKING_MODES:
        if gains.F_B is None:
            raise GainModeMismatch(f"mode {mode!r} needs a tracking gain F_B")
        if gains.s != scenario.s:
            raise GainModeMismatch(f"F_B designed for s={gains.s}, scenario uses s={scenario.s}")
        if mode == "sync_track" and not scenario.perfect_tracking and gains.H_ztilde_star is None:
            raise GainModeMismatch("sync_track needs the supervisor filter gain")
        if mode == "sync_track_alt" and gains.H_G_star is None:
            raise GainModeMismatch("sync_track_alt needs the GNSS-edge filter gain")


def _sync_matrix(top, F):
    # u_syn is linear in the stacked estimate; precompute its matrix.
    eye = np.eye(2 * top.num_slots)
    return sync_control(top, eye, reverse_estimates(top, eye), F)


def run_batch(scenario: Scenario, gains: GainSet = None, seeds=None, *,
              record_measurements=False, record_estimates=True) -> SimTrace:
    """Simulate one replication per seed, vectorised over replications."""
    check_gains(scenario, gains)
    top, tau, mode = scenario.topology, scenario.tau, scenario.mode
    n, g, e, H = top.n, top.g, top.num_slots, scenario.horizon
    seeds = [scenario.seed] if seeds is None else list(seeds)
    reps = len(seeds)
    a, b, _ = system_matrices(tau)
    bvec = b[:, 0]

    tape = NoiseTape(seeds, scenario.noise_dim, g)
    lt = noise_factor(scenario).T
    iv, ivg = 2 * n, 2 * n + 2 * g
    iw = ivg

    x = np.zeros((reps, n, 2))
    x[:, :, 0] = scenario.initial_phases
    X = np.zeros((reps, g, 2))
    X[:, :, 0] = np.array([p.theta0 for p in scenario.gnss])
    X[:, :, 0] += np.sqrt(scenario.gnss_initial_var) * scenario.noise_scale * tape.initial

    xs = np.empty((reps, H + 1, n, 2))
    Xs = np.empty((reps, H + 1, g, 2))
    us = np.zeros((reps, H, n))
    zh = np.full((reps, H + 1, 2), np.nan) if record_estimates else None
    ys = np.empty((reps, H, e)) if record_measurements else None
    Ys = np.empty((reps, H, g)) if record_measurements else None

    tracking = mode in TRACKING_MODES
    edge = sup = gnss = None
    if mode != "free":
        edge_list, sup, gnss = build_filters(scenario, gains)
        edge = stack_edge_filters(edge_list)
        edge.reset((reps,))
        s_mat = _sync_matrix(top, gains.F)
        if not (tracking and gains.H_ztilde_star is not None):
            sup = None
        if mode != "sync_track_alt":
            gnss = None
        for f in (sup, gnss):
            if f is not None:
                f.reset((reps,))
        fb = np.ravel(gains.F_B) if tracking else None
    slot_i = np.array([i for i, _ in top.slots], dtype=int)
    slot_j = np.array([j for _, j in top.slots], dtype=int)
    att = top.attached_mac
    q, q_G = top.q, top.q_G

    k = 0
    while k < H:
        steps = min(CHUNK, H - k)
        block = tape.take(steps) @ lt
        for t in range(steps):
            nz = block[:, t]
            xs[:, k] = x
            Xs[:, k] = X
            x1 = x[:, :, 0]
            y = x1[:, slot_j] - x1[:, slot_i] + nz[:, iw:iw + e]
            Y = X[:, :, 0] - x1[:, att] + nz[:, iw + e:]
            if record_measurements:
                ys[:, k], Ys[:, k] = y, Y
            if sup is not None and record_estimates:
                zh[:, k] = sup.estimate

            if mode == "free":
                u = np.zeros((reps, n))
            else:
                xi = edge.estimate
                u = xi @ s_mat
                if tracking and is_broadcast_step(k, scenario.s):
                    if scenario.perfect_tracking:
                        zt = q @ x - q_G @ X
                        corr = -(zt @ fb)
                    elif mode == "sync_track":
                        corr = -(sup.estimate @ fb)
                    else:
                        corr = (gnss.estimate.reshape(reps, g, 2) @ fb).mean(axis=1)
                    u = u + corr[:, np.newaxis]
                if sup is not None:
                    supervisor_filter_step(sup, summed_measurement(Y), xi, u)
                if gnss is not None:
                    gnss_edge_filter_step(gnss, Y, u)
                edge_filter_step(edge, y, edge_known_input(edge, u))
            us[:, k] = u

            x = x @ a.T + u[:, :, np.newaxis] * bvec + nz[:, :iv].reshape(reps, n, 2)
            X = X @ a.T + nz[:, iv:ivg].reshape(reps, g, 2)
            k += 1
    xs[:, H] = x
    Xs[:, H] = X
    if sup is not None and record_estimates:
        zh[:, H] = sup.estimate
    if sup is None:
        zh = None
    return SimTrace(x=xs, X=Xs, u=us, z_hat=zh, y=ys, Y=Ys, q=q, q_G=q_G, Pi=top.Pi, tau=tau)


def run_simulation(scenario: Scenario, gains: GainSet = None, *, record_measurements=False) -> SimTrace:
    """Single replication with ``scenario.seed``."""
    tr = run_batch(scenario, gains, [scenario.seed], record_measurements=record_measurements)
    strip = {name: (None if getattr(tr, name) is None else getattr(tr, name)[0])
             for name in ("x", "X", "u", "z_hat", "y", "Y")}
    return replace(tr, **strip)


@dataclass(eq=False)
class MonteCarloSummary:
    """Aggregates over replications ``base_seed .. base_seed + reps - 1``.

    ``z_tilde_mean``/``z_tilde_var`` are per step (sample variance,
    ``ddof=1``; zero for a single replication).  ``mac_phase`` and
    ``gac_phase`` stack the phase traces, shape ``(reps, H+1, .)``, when
    kept.
    """

    reps: int
    base_seed: int
    z_tilde_mean: np.ndarray
    z_tilde_var: np.ndarray
    z_tilde: np.ndarray = None
    mac_phase: np.ndarray = None
    gac_phase: np.ndarray = None
    consensus_phase: np.ndarray = None
    tau: float = 1.0


def _threads():
    raw = os.environ.get("CHRONO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CHRONO_THREADS must be an integer, got {raw!r}")


def monte_carlo(scenario: Scenario, gains: GainSet = None, reps: int = 1, *, base_seed=None,
                batch_size=64, keep_phases=True, keep_consensus=False) -> MonteCarloSummary:
    """Run ``reps`` replications, replication ``r`` seeded ``base_seed + r``.

    Batches may run on ``CHRONO_THREADS`` worker threads; results are
    reduced sequentially in replication order, so the output does not
    depend on the thread count.  Changing ``batch_size`` can move results
    at round-off level (a one-row batch takes a different BLAS path).
    """
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    base = scenario.seed if base_seed is None else int(base_seed)
    seeds = [base + r for r in range(reps)]
    batches = [seeds[i:i + batch_size] for i in range(0, reps, batch_size)]

    def one(batch):
        tr = run_batch(scenario, gains, batch, record_estimates=False)
        out = {"z_tilde": tr.z_tilde}
        if keep_phases:
            out["mac"] = tr.x[..., 0].copy()
            out["gac"] = tr.X[..., 0].copy()
        if keep_consensus:
            out["cons"] = tr.consensus_error[..., 0]
        return out

    threads = min(_threads(), len(batches))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, batches))
    else:
        results = [one(bt) for bt in batches]

    zt = np.concatenate([r["z_tilde"] for r in results])
    # Shifted two-pass reduction in replication order: identical
    # replications give a variance of exactly zero.
    ref = zt[0]
    acc = np.zeros_like(ref)
    for r in range(reps):
        acc += zt[r] - ref
    mean_shift = acc / reps
    var = np.zeros_like(ref)
    if reps > 1:
        for r in range(reps):
            var += (zt[r] - ref - mean_shift) ** 2
        var /= reps - 1
    return MonteCarloSummary(
        reps=reps, base_seed=base, z_tilde_mean=ref + mean_shift, z_tilde_var=var, z_tilde=zt,
        mac_phase=np.concatenate([r["mac"] for r in results]) if keep_phases else None,
        gac_phase=np.concatenate([r["gac"] for r in results]) if keep_phases else None,
        consensus_phase=np.concatenate([r["cons"] for r in results]) if keep_consensus else None,
        tau=scenario.tau)


# -- trace CSV ---------------------------------------------------------------

TRACE_HEADER = ("k", "entity", "x1_s", "x2", "u")


def trace_to_csv(trace: SimTrace) -> str:
    """Rows ``k,entity,x1_s,x2,u`` for ``mac1..``, ``gac1..`` and, when the
    supervisor ran, ``sup`` (its prior estimate).  ``u`` is blank where no
    control applies."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(TRACE_HEADER)
    steps = trace.x.shape[0]
    n, g = trace.x.shape[1], trace.X.shape[1]
    for k in range(steps):
        for i in range(n):
            u = fmt17(trace.u[k, i]) if k < steps - 1 else ""
            out.writerow((k, f"mac{i + 1}", fmt17(trace.x[k, i, 0]), fmt17(trace.x[k, i, 1]), u))
        for j in range(g):
            out.writerow((k, f"gac{j + 1}", fmt17(trace.X[k, j, 0]), fmt17(trace.X[k, j, 1]), ""))
        if trace.z_hat is not None:
            out.writerow((k, "sup", fmt17(trace.z_hat[k, 0]), fmt17(trace.z_hat[k, 1]), ""))
    return buf.getvalue()


def _open_text(path, mode):
    if str(path).endswith(".gz"):
        # No name and mtime=0 in the header keep gzip output byte-identical.
        if "w" in mode:
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            gz.myfileobj = raw  # closed together with the gzip stream
            return io.TextIOWrapper(gz, newline="")
        return io.TextIOWrapper(gzip.open(path, "rb"), newline="")
    return open(path, mode, newline="")


def write_trace_csv(trace: SimTrace, path):
    with _open_text(path, "w") as fh:
        fh.write(trace_to_csv(trace))


def read_trace_rows(path):
    """Parse a trace CSV into ``{entity: (k, x1, x2, u)}`` arrays."""
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRACE_HEADER:
            raise ValueError(f"trace CSV must start with header {','.join(TRACE_HEADER)}")
        cols = {}
        for row in reader:
            if not row:
                continue
            k, ent, x1, x2, u = row
            cols.setdefault(ent, []).append((int(k), float(x1), float(x2), float(u) if u else np.nan))
    out = {}
    for ent, rows in cols.items():
        arr = np.array(rows)
        out[ent] = (arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3])
    return out


def read_trace_csv(path) -> SimTrace:
    """Rebuild the state, control and supervisor columns of a trace file.

    Weights and ``Pi`` are not stored in the file and stay ``None``.
    """
    rows = read_trace_rows(path)

    def names(prefix):
        return sorted((e for e in rows if e.startswith(prefix) and e[len(prefix):].isdigit()),
                      key=lambda e: int(e[len(prefix):]))

    def stack(ents):
        if not ents:
            return None
        cols = []
        for e in ents:
            k, x1, x2, _ = rows[e]
            if not np.array_equal(k, np.arange(len(k))):
                raise ValueError(f"entity {e} has missing or out-of-order steps")
            cols.append(np.stack([x1, x2], axis=-1))
        return np.stack(cols, axis=1)

    macs, gacs = names("mac"), names("gac")
    if not macs:
        raise ValueError("trace has no MAC rows")
    x = stack(macs)
    X = stack(gacs) if gacs else np.zeros((x.shape[0], 0, 2))
    u = np.stack([rows[e][3][:-1] for e in macs], axis=1)
    z_hat = stack(["sup"])[:, 0] if "sup" in rows else None
    return SimTrace(x=x, X=X, u=u, z_hat=z_hat)
