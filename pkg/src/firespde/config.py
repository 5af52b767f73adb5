"""Flat ``key = value`` run configuration with environment overrides.

Every key has a typed default; unknown keys are rejected. An environment
variable ``FIRESPDE_<KEY>`` (dots replaced by double underscores, upper
case) overrides the file value, e.g. ``FIRESPDE_STAGE1__ITERATIONS=2000``.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .bivariate import Stage3Config
from .exceptions import ConfigError
from .lgcp import LgcpConfig
from .mesh import MeshConfig
from .occurrence import Stage1Config
from .pipeline import PipelineConfig
from .synthetic import SimConfig

__all__ = ["DEFAULTS", "ENV_PREFIX", "RunConfig", "load_config", "env_key"]

ENV_PREFIX = "FIRESPDE_"

DEFAULTS = {
    "seed": 0,
    "design": "",
    "sim.nx": 20,
    "sim.ny": 20,
    "sim.T": 20,
    "sim.phi_eps": 3.0,
    "sim.r_eps": 0.8,
    "sim.phi_eta": 3.0,
    "sim.r_eta": 0.8,
    "sim.rho_eta": 0.6,
    "sim.p_both": 0.15,
    "sim.p_ba": 0.05,
    "sim.p_cnt": 0.05,
    "sim.missing_period_frac": 0.5,
    "mesh.extension": 0.1,
    "mesh.max_edge": 0.0,
    "mesh.node_ratio": 0.3,
    "mesh.max_nodes": 5000,
    "stage1.iterations": 60000,
    "stage1.burn_in": 10000,
    "stage1.thin": 5,
    "stage1.checkpoint_every": 1000,
    "stage2.grid": "5,9,17",
    "stage3.iterations": 60000,
    "stage3.burn_in": 10000,
    "stage3.thin": 5,
    "stage3.rho_lower": 0.0,
    "stage3.checkpoint_every": 1000,
    "rf.ntree": 200,
    "rf.mtry": 0,
    "rf.n_impute": 20,
    "lgcp.iterations": 250000,
    "lgcp.burn_in": 200000,
    "lgcp.thin": 25,
    "lgcp.batch": 10,
    "lgcp.step_a": 0.5,
    "lgcp.step_c": 1000.0,
    "lgcp.beta_var": 100.0,
    "lgcp.checkpoint_every": 5000,
    "cv.scheme": "fixed-month",
}

_PATH_KEYS = ("design",)


def env_key(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "__").upper()


def _coerce(key, raw):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw).strip()


class RunConfig:
    """Validated configuration values keyed by dotted name."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {k!r}")
            self.values[k] = _coerce(k, v)
        if self.values["cv.scheme"] not in ("fixed-month", "random-month"):
            raise ConfigError(f"cv.scheme must be fixed-month or random-month, got {self.values['cv.scheme']!r}")
        for k in _PATH_KEYS:
            if self.values[k] and not Path(self.values[k]).exists():
                raise ConfigError(f"{k}: path {self.values[k]!r} does not exist")

    def __getitem__(self, key):
        return self.values[key]

    def text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def sim(self) -> SimConfig:
        v = self.values
        return SimConfig(
            nx=v["sim.nx"], ny=v["sim.ny"], T=v["sim.T"], phi_eps=v["sim.phi_eps"], r_eps=v["sim.r_eps"],
            phi_eta=v["sim.phi_eta"], r_eta=v["sim.r_eta"], rho_eta=v["sim.rho_eta"],
            p_both=v["sim.p_both"], p_ba=v["sim.p_ba"], p_cnt=v["sim.p_cnt"],
            missing_period_frac=v["sim.missing_period_frac"], mesh=self.mesh(),
        )

    def mesh(self) -> MeshConfig:
        v = self.values
        return MeshConfig(extension=v["mesh.extension"], max_edge=v["mesh.max_edge"] or None,
                          node_ratio=v["mesh.node_ratio"], max_nodes=v["mesh.max_nodes"])

    def stage1(self) -> Stage1Config:
        v = self.values
        return Stage1Config(iterations=v["stage1.iterations"], burn_in=v["stage1.burn_in"],
                            thin=v["stage1.thin"], checkpoint_every=v["stage1.checkpoint_every"])

    def stage3(self) -> Stage3Config:
        v = self.values
        return Stage3Config(iterations=v["stage3.iterations"], burn_in=v["stage3.burn_in"],
                            thin=v["stage3.thin"], rho_lower=v["stage3.rho_lower"],
                            checkpoint_every=v["stage3.checkpoint_every"])

    def lgcp(self) -> LgcpConfig:
        v = self.values
        return LgcpConfig(iterations=v["lgcp.iterations"], burn_in=v["lgcp.burn_in"], thin=v["lgcp.thin"],
                          batch=v["lgcp.batch"], step_a=v["lgcp.step_a"], step_c=v["lgcp.step_c"],
                          beta_var=v["lgcp.beta_var"], checkpoint_every=v["lgcp.checkpoint_every"])

    def basis_grid(self) -> tuple:
        try:
            return tuple(int(x) for x in self.values["stage2.grid"].split(","))
        except ValueError:
            raise ConfigError("stage2.grid must be comma-separated integers") from None

    def pipeline(self) -> PipelineConfig:
        v = self.values
        return PipelineConfig(mesh=self.mesh(), stage1=self.stage1(), stage3=self.stage3(), lgcp=self.lgcp(),
                              basis_grid=self.basis_grid(), ntree=v["rf.ntree"], mtry=v["rf.mtry"] or None,
                              n_impute=v["rf.n_impute"])


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown configuration key {k!r}")
        out[k] = v
    return out


def load_config(path=None, environ=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path``, then environment, then ``overrides``."""
    environ = os.environ if environ is None else environ
    values = parse_config_text(Path(path).read_text()) if path else {}
    for k in DEFAULTS:
        if env_key(k) in environ:
            values[k] = environ[env_key(k)]
    values.update(overrides or {})
    return RunConfig(values)
