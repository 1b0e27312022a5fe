"""JSON scenario files: loading, schema validation and conversion to a
:class:`~chronosync.sim.Scenario`.

Clock, edge and receiver indices in files are 1-based; everything is
converted to the 0-based Python API here.
"""

import json
from importlib import resources
from pathlib import Path

import jsonschema

from .clock import ClockParams, GnssClockParams
from .control import OptimizerConfig
from .errors import ConfigError
from .network import build_topology
from .sim import Scenario

BUNDLED = ("paper_fig3.json", "paper_fig4.json", "desk_scale.json")


def _data_text(name) -> str:
    return resources.files("chronosync").joinpath("data", name).read_text()


def schema(name="config.schema.json") -> dict:
    return json.loads(_data_text(name))


def resolve(path) -> Path:
    """A filesystem path, or the bundled copy when only the bare name of a
    bundled scenario is given."""
    p = Path(path)
    if not p.exists() and p.name == str(path) and p.name in BUNDLED:
        return Path(str(resources.files("chronosync").joinpath("data", p.name)))
    return p


def load_config(path) -> dict:
    """Read and validate a scenario file.

    Raises:
        OSError: the file cannot be read.
        ConfigError: invalid JSON or a schema violation.
    """
    text = resolve(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def topology_from_config(cfg):
    ens = cfg["ensemble"]
    gnss = cfg.get("gnss", [])
    edges = [(i - 1, j - 1) for i, j in ens["edges"]]
    attachments = [(k, g["attach"] - 1) for k, g in enumerate(gnss)]
    return build_topology(ens["n"], len(gnss), edges, attachments)


def scenario_from_config(cfg, **overrides) -> Scenario:
    """Build the scenario; keyword overrides replace the file's values
    (``None`` values are ignored)."""
    top = topology_from_config(cfg)
    if len(cfg["clocks"]) != top.n:
        raise ConfigError(f"{len(cfg['clocks'])} clocks listed for n={top.n}")
    clocks = [ClockParams(c["sigma1_sq"], c["sigma2_sq"]) for c in cfg["clocks"]]
    gnss = [GnssClockParams(ClockParams(g["sigma1_sq"], g["sigma2_sq"]), g.get("theta0", 1e-9 * (j + 1)))
            for j, g in enumerate(cfg.get("gnss", []))]
    kw = dict(
        tau=cfg.get("tau", 1.0),
        horizon=cfg.get("horizon", 1000),
        s=cfg.get("broadcast_period", 1000),
        mode=cfg.get("mode", "sync_track"),
        seed=cfg.get("seed", 0),
        initial_phases=cfg.get("initial_phases"),
        gnss_initial_var=cfg.get("gnss_initial_var", 0.0),
        noise_scale=cfg.get("noise_scale", 1.0),
        edge_filter_input=cfg.get("edge_filter_input", "include"),
        qtilde=cfg.get("qtilde", "derived"),
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return Scenario(top, clocks, gnss, cfg["R"], cfg.get("R_G", []), **kw)


def optimizer_from_config(cfg) -> OptimizerConfig:
    return OptimizerConfig(**cfg.get("design", {}))
