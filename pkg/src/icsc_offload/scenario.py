"""Scenario construction: channel model, default parameters, sweeps and I-CC restriction."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import CostModel, LinkState, RsuBudget, Scenario, TaskProfile

SWEEP_KINDS = ("cycles", "vehicles", "t_max", "data_size")


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1e3


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to build a :class:`Scenario` deterministically.

    Ranges are ``(low, high)`` pairs sampled uniformly per vehicle; a
    degenerate range pins the value.  ``ref_gain=None`` calibrates the
    path-loss constant so that a vehicle at ``calib_distance`` transmitting
    ``calib_power`` sees ``calib_snr_db``.
    """

    vehicle_count: int = 10
    distances: tuple = (300.0, 400.0, 500.0, 600.0)
    pathloss_exp: float = 3.5
    ref_distance: float = 1.0
    ref_gain: float | None = None
    calib_distance: float = 500.0
    calib_power: float = 0.3
    calib_snr_db: float = 10.0
    sigma2_dbm: float = -104.0
    w_rsu: float = 40e6
    f_rsu: float = 1e12
    p_max: float = 0.3
    t_max: float = 0.1
    c_range: tuple = (5e6, 15e6)
    b_range: tuple = (10e6, 30e6)
    b_instr_ratio: float = 0.2
    s_instr: float = 1e3
    f_local_range: tuple = (1e9, 1e9)
    e1: float = 1.0
    e2: float = 1e-25
    mu1: float = 1e-7
    mu2: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("distances", "c_range", "b_range", "f_local_range"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        self.validate()

    def validate(self):
        if int(self.vehicle_count) != self.vehicle_count or self.vehicle_count < 1:
            raise ConfigError("vehicle_count must be an integer >= 1")
        if not self.distances or min(self.distances) <= 0:
            raise ConfigError("distances must be positive")
        for name in ("c_range", "b_range", "f_local_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi and math.isfinite(hi)):
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        for name in ("pathloss_exp", "ref_distance", "calib_distance", "calib_power",
                     "w_rsu", "f_rsu", "p_max", "t_max", "b_instr_ratio", "s_instr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.ref_gain is not None and not self.ref_gain > 0:
            raise ConfigError("ref_gain must be > 0")
        if self.s_instr >= self.c_range[0]:
            raise ConfigError("s_instr must be below the smallest data size")

    @property
    def sigma2(self) -> float:
        return dbm_to_watt(self.sigma2_dbm)

    def gain_at(self, distance) -> np.ndarray | float:
        g0 = self.ref_gain
        if g0 is None:
            snr = 10.0 ** (self.calib_snr_db / 10.0)
            g_cal = snr * self.sigma2 / self.calib_power
            g0 = g_cal * (self.calib_distance / self.ref_distance) ** self.pathloss_exp
        return g0 * (np.asarray(distance, dtype=float) / self.ref_distance) ** (-self.pathloss_exp)

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def load_spec(path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))


def save_spec(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Sample a scenario; vehicle ``i`` depends only on (seed, i), so prefixes are stable."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sigma2 = spec.sigma2
    tasks, links = [], []
    for _ in range(spec.vehicle_count):
        d = spec.distances[rng.integers(len(spec.distances))]
        c = rng.uniform(*spec.c_range)
        b = rng.uniform(*spec.b_range)
        f_local = rng.uniform(*spec.f_local_range)
        tasks.append(TaskProfile(t_max=spec.t_max, c=c, b=b, s_instr=spec.s_instr,
                                 b_instr=spec.b_instr_ratio * b, f_local=f_local))
        links.append(LinkState(g=float(spec.gain_at(d)), sigma2=sigma2, p_max=spec.p_max))
    return Scenario(tasks=tasks, links=links,
                    budget=RsuBudget(w_total=spec.w_rsu, f_total=spec.f_rsu),
                    costs=CostModel(e1=spec.e1, e2=spec.e2, mu1=spec.mu1, mu2=spec.mu2))


def sweep_points(kind: str) -> list:
    """Grid values for a sweep kind, in SI units."""
    if kind == "cycles":
        return [5e6 * k for k in range(1, 9)]
    if kind == "vehicles":
        return list(range(2, 15, 2))
    if kind == "t_max":
        return [1e-3, 50e-3, 100e-3, 150e-3, 200e-3]
    if kind == "data_size":
        return [1e6, 5e6, 10e6, 15e6, 20e6, 25e6, 30e6]
    raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")


def sweep_grid(kind: str, spec: ScenarioSpec) -> list:
    """One spec per grid point, each differing from ``spec`` in a single field."""
    out = []
    for v in sweep_points(kind):
        if kind == "cycles":
            out.append(spec.replace(b_range=(v, v)))
        elif kind == "vehicles":
            out.append(spec.replace(vehicle_count=v))
        elif kind == "t_max":
            out.append(spec.replace(t_max=v))
        else:
            out.append(spec.replace(c_range=(v, v)))
    return out


def restrict_icc(scn: Scenario) -> Scenario:
    """Return the same scenario under the conventional I-CC scheme (DataT mode only)."""
    return dataclasses.replace(scn, icc_only=True)
