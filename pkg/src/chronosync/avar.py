"""Allan variance: closed forms for free-running clocks and the weighted
ensemble mean, and the fully overlapping estimator on phase series.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .clock import ClockParams
from .errors import InvalidTau, NonIntegerWindow, SeriesTooShort, WeightsNotNormalized

KINDS = ("analytical_free", "analytical_mean", "statistical")
CSV_HEADER = ("tau_s", "avar", "entity", "kind")


def _check_tau(tau):
    if not tau > 0:
        raise InvalidTau(f"averaging time must be > 0, got {tau}")


def avar_analytical(params: ClockParams, tau: float) -> float:
    """``sigma1^2 / tau + tau sigma2^2 / 3`` for an unsteered clock."""
    _check_tau(tau)
    return params.sigma1_sq / tau + tau * params.sigma2_sq / 3.0


def avar_ensemble_mean(params, tau: float, q=None) -> float:
    """AVAR of the weighted mean clock ``q^T x``.

    ``(1/tau^2) q^T Gamma(tau) q`` with ``Gamma = tau S1 + tau^3/3 S2``
    and ``S1``, ``S2`` the diagonal matrices of clock noise variances.

    Args:
        params: one :class:`ClockParams` per clock.
        q: weights summing to one; uniform when omitted.
    """
    _check_tau(tau)
    n = len(params)
    q = np.full(n, 1.0 / n) if q is None else np.asarray(q, dtype=float)
    if q.shape != (n,):
        raise ValueError(f"need {n} weights, got shape {q.shape}")
    if abs(q.sum() - 1.0) > 1e-9:
        raise WeightsNotNormalized(f"weights sum to {q.sum():.12g}, not 1")
    s1 = np.array([p.sigma1_sq for p in params])
    s2 = np.array([p.sigma2_sq for p in params])
    gamma = tau * s1 + tau**3 / 3.0 * s2
    return float(np.sum(q * q * gamma) / tau**2)


def avar_statistical(d, tau: float, w: int):
    """Overlapping AVAR estimate from phase samples spaced ``tau`` apart.

    ``(1/(T-2w)) sum_k (d[k+2w] - 2 d[k+w] + d[k])^2 / (2 (w tau)^2)``

    Args:
        d: phase deviations in seconds, shape ``(..., T)``; leading axes
            are estimated independently.
        tau: sample spacing in seconds.
        w: window in samples; the averaging time is ``w tau``.

    Returns:
        A float for 1-D input, otherwise an array over the leading axes.
    """
    _check_tau(tau)
    d = np.asarray(d, dtype=float)
    w = int(w)
    T = d.shape[-1]
    if w < 1 or T <= 2 * w:
        raise SeriesTooShort(f"need more than {2 * w} samples for window {w}, got {T}")
    second = d[..., 2 * w:] - 2.0 * d[..., w:T - w] + d[..., :T - 2 * w]
    est = np.mean(second**2, axis=-1) / (2.0 * (w * tau) ** 2)
    return float(est) if est.ndim == 0 else est


@dataclass
class AvarCurve:
    entity: str
    kind: str
    points: list = field(default_factory=list)  # (tau_s, avar) pairs

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        taus = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("curve taus must be strictly increasing")

    @property
    def taus(self) -> np.ndarray:
        return np.array([t for t, _ in self.points])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points])

    def at(self, tau) -> float:
        for t, v in self.points:
            if np.isclose(t, tau, rtol=1e-12, atol=0.0):
                return v
        raise KeyError(tau)


def window_for(tau, tau_sample) -> int:
    """Integer window ``tau / tau_sample``; raises :class:`NonIntegerWindow`."""
    _check_tau(tau)
    _check_tau(tau_sample)
    ratio = tau / tau_sample
    w = int(round(ratio))
    if w < 1 or abs(ratio - w) > 1e-9 * max(1.0, ratio):
        raise NonIntegerWindow(f"tau={tau} is not an integer multiple of the sample spacing {tau_sample}")
    return w


def avar_curve(source, taus, *, tau_sample=1.0, q=None, entity="") -> AvarCurve:
    """AVAR over a list of averaging times.

    ``source`` picks the mode: a :class:`ClockParams` gives the free-running
    closed form, a list of them the ensemble-mean closed form (weights
    ``q``), and an array of phases the statistical estimate (averaged over
    any leading axes, e.g. replications).
    """
    taus = [float(t) for t in taus]
    if isinstance(source, ClockParams):
        kind = "analytical_free"
        vals = [avar_analytical(source, t) for t in taus]
    elif isinstance(source, (list, tuple)) and source and isinstance(source[0], ClockParams):
        kind = "analytical_mean"
        vals = [avar_ensemble_mean(list(source), t, q) for t in taus]
    else:
        kind = "statistical"
        d = np.asarray(source, dtype=float)
        vals = [float(np.mean(avar_statistical(d, tau_sample, window_for(t, tau_sample))))
                for t in taus]
    order = np.argsort(taus)
    return AvarCurve(entity=entity, kind=kind, points=[(taus[i], vals[i]) for i in order])


def fmt17(x) -> str:
    """17 significant digits, enough for any double to parse back exactly."""
    return format(float(x), ".17g")


def curves_to_csv(curves) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_HEADER)
    for c in curves:
        for t, v in c.points:
            out.writerow((fmt17(t), fmt17(v), c.entity, c.kind))
    return buf.getvalue()


def curves_from_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"AVAR CSV must start with header {','.join(CSV_HEADER)}")
    curves = {}
    for row in rows[1:]:
        if not row:
            continue
        t, v, entity, kind = row
        key = (entity, kind)
        curves.setdefault(key, []).append((float(t), float(v)))
    return [AvarCurve(entity=e, kind=k, points=pts) for (e, k), pts in curves.items()]


def write_avar_csv(curves, path):
    with open(path, "w", newline="") as fh:
        fh.write(curves_to_csv(curves))


def read_avar_csv(path) -> list:
    with open(path, newline="") as fh:
        return curves_from_csv(fh.read())
