"""Networked atomic clock ensemble: distributed synchronisation, broadcast
GNSS-time tracking, Allan-variance analysis and gain synthesis."""

from .avar import AvarCurve, avar_analytical, avar_curve, avar_ensemble_mean, avar_statistical
from .clock import ClockParams, ClockState, GnssClockParams, process_noise_cov, step_clock
from .control import (OptimizerConfig, SyncGain, TrackingContext, TrackingGain,
                      design_sync_gain, design_tracking_gain)
from .errors import ChronoError
from .gains import GainSet, design_gains
from .network import Topology, build_topology, example_topology
from .numerics import solve_dare, solve_dlyap
from .sim import MonteCarloSummary, Scenario, SimTrace, monte_carlo, run_simulation

__version__ = "0.1.0"
