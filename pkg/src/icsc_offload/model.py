"""Latency, cost, objective and feasibility formulas for I-CSC task offloading.

Every function here is pure and vectorised: the per-task operations accept
either a single :class:`TaskProfile`/:class:`LinkState` with scalar decision
values, or the batched views ``Scenario.task_batch``/``Scenario.link_batch``
with one array entry per vehicle.

Units are SI throughout (seconds, hertz, watts, bits, cycles); costs are
unitless.  Infinite latency or cost is reported as ``inf`` and only in the
documented case of a zero uplink rate with a positive upload volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError

INF = math.inf


@dataclass(frozen=True)
class TaskProfile:
    """One vehicle's task tuple plus its onboard CPU speed."""

    t_max: float  # s
    c: float  # input data size, bits
    b: float  # task computation, cycles
    s_instr: float  # instruction + coordinate payload, bits
    b_instr: float  # coordinate transformation, cycles
    f_local: float  # onboard CPU, cycles/s

    def __post_init__(self):
        for name in ("t_max", "c", "b", "s_instr", "b_instr", "f_local"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"TaskProfile.{name} must be finite and > 0, got {v!r}")
        if self.s_instr >= self.c:
            raise ConfigError(f"s_instr ({self.s_instr}) must be smaller than c ({self.c})")


@dataclass(frozen=True)
class LinkState:
    g: float  # linear channel gain
    sigma2: float  # noise power, W
    p_max: float  # vehicle transmit-power cap, W

    def __post_init__(self):
        for name in ("g", "sigma2", "p_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"LinkState.{name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class RsuBudget:
    w_total: float  # Hz
    f_total: float  # cycles/s

    def __post_init__(self):
        if not (self.w_total > 0 and self.f_total > 0):
            raise ConfigError("RSU budgets must be strictly positive")


@dataclass(frozen=True)
class CostModel:
    e1: float  # cost per joule of transmission energy
    e2: float  # local computation energy coefficient
    mu1: float  # cost per Hz of bandwidth
    mu2: float  # cost per cycle/s of RSU compute

    def __post_init__(self):
        for name in ("e1", "e2", "mu1", "mu2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"CostModel.{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class TaskBatch:
    """Column view of a list of tasks; field names mirror :class:`TaskProfile`."""

    t_max: np.ndarray
    c: np.ndarray
    b: np.ndarray
    s_instr: np.ndarray
    b_instr: np.ndarray
    f_local: np.ndarray

    @classmethod
    def from_tasks(cls, tasks: Sequence[TaskProfile]) -> "TaskBatch":
        cols = {k: _frozen(np.array([getattr(t, k) for t in tasks], dtype=float))
                for k in ("t_max", "c", "b", "s_instr", "b_instr", "f_local")}
        return cls(**cols)


@dataclass(frozen=True)
class LinkBatch:
    g: np.ndarray
    sigma2: np.ndarray
    p_max: np.ndarray

    @classmethod
    def from_links(cls, links: Sequence[LinkState]) -> "LinkBatch":
        cols = {k: _frozen(np.array([getattr(l, k) for l in links], dtype=float))
                for k in ("g", "sigma2", "p_max")}
        return cls(**cols)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Scenario:
    """Tasks, channels, RSU budgets and prices for ``i_count`` vehicles.

    ``icc_only`` marks the conventional I-CC scheme: every solver pins the
    transmission mode to DataT (``alpha = 1``).
    """

    tasks: tuple
    links: tuple
    budget: RsuBudget
    costs: CostModel
    icc_only: bool = False
    task_batch: TaskBatch = field(init=False, repr=False, compare=False)
    link_batch: LinkBatch = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.tasks) < 1 or len(self.tasks) != len(self.links):
            raise ConfigError("tasks and links must be non-empty and of equal length")
        for t in self.tasks:
            bad = t.c * t.f_local ** 2 * self.costs.e2
            if not math.isfinite(bad):
                raise ConfigError("e2 * c * f_local^2 overflows for a task")
        object.__setattr__(self, "task_batch", TaskBatch.from_tasks(self.tasks))
        object.__setattr__(self, "link_batch", LinkBatch.from_links(self.links))

    @property
    def i_count(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class Allocation:
    """The five decision vectors.

    ``relaxed`` must be set when ``alpha`` holds fractional values (the
    meta-learning solvers keep a relaxed mode variable between roundings).
    """

    alpha: np.ndarray
    eta: np.ndarray
    p: np.ndarray
    w: np.ndarray
    f: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        n = None
        for name in ("alpha", "eta", "p", "w", "f"):
            a = np.array(getattr(self, name), dtype=float).reshape(-1)
            if n is None:
                n = a.size
            elif a.size != n:
                raise ConfigError("allocation vectors must share one length")
            object.__setattr__(self, name, _frozen(a))
        if not self.relaxed and not np.all((self.alpha == 0) | (self.alpha == 1)):
            raise ConfigError("non-binary alpha requires relaxed=True")

    def __len__(self):
        return self.alpha.size

    def replace(self, **changes) -> "Allocation":
        kw = dict(alpha=self.alpha, eta=self.eta, p=self.p, w=self.w, f=self.f,
                  relaxed=self.relaxed)
        kw.update(changes)
        return Allocation(**kw)

    def finalized(self) -> "Allocation":
        """Round a relaxed mode vector at 0.5 (ties go to DataT)."""
        return self.replace(alpha=np.where(self.alpha >= 0.5, 1.0, 0.0), relaxed=False)


@dataclass(frozen=True)
class LatencyBreakdown:
    t_local: np.ndarray
    t_upload: np.ndarray
    t_rsu_compute: np.ndarray
    t_transform: np.ndarray
    t_rsu: np.ndarray
    t_total: np.ndarray


@dataclass(frozen=True)
class CostBreakdown:
    energy_tx: np.ndarray
    energy_local: np.ndarray
    payment: np.ndarray
    total: np.ndarray


def _check_finite(**values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise DomainError(f"{name} must be finite")


def uplink_rate(w_i, p_i, link) -> np.ndarray | float:
    """Shannon rate ``w * log2(1 + p g / sigma2)`` in bits/s."""
    w_i = np.asarray(w_i, dtype=float)
    p_i = np.asarray(p_i, dtype=float)
    _check_finite(w=w_i, p=p_i)
    if np.any(w_i <= 0):
        raise DomainError("bandwidth must be > 0")
    if np.any(p_i < 0):
        raise DomainError("power must be >= 0")
    rate = w_i * np.log2(1.0 + p_i * np.asarray(link.g) / np.asarray(link.sigma2))
    return rate if rate.ndim else float(rate)


def _upload_time(bits, rate):
    # bits > 0 at zero rate is the documented infinite-latency marker
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(bits > 0, np.where(rate > 0, bits / np.where(rate > 0, rate, 1.0), INF), 0.0)
    return t


def latency_breakdown(task, link, alpha_i, eta_i, p_i, w_i, f_i) -> LatencyBreakdown:
    alpha_i, eta_i, f_i = (np.asarray(x, dtype=float) for x in (alpha_i, eta_i, f_i))
    rate = np.asarray(uplink_rate(w_i, p_i, link))
    if np.any(f_i <= 0):
        raise DomainError("RSU compute share must be > 0")
    t_local = (1.0 - eta_i) * task.b / task.f_local
    t_upload = _upload_time(alpha_i * eta_i * task.c, rate)
    t_transform = (1.0 - alpha_i) * eta_i * task.b_instr / f_i
    t_rsu_compute = eta_i * task.b / f_i
    t_rsu = t_upload + t_transform + t_rsu_compute
    return LatencyBreakdown(t_local=t_local, t_upload=t_upload,
                            t_rsu_compute=t_rsu_compute, t_transform=t_transform,
                            t_rsu=t_rsu, t_total=np.maximum(t_rsu, t_local))


def cost_breakdown(task, link, costs: CostModel, alpha_i, eta_i, p_i, w_i, f_i) -> CostBreakdown:
    alpha_i, eta_i, p_i, w_i, f_i = (np.asarray(x, dtype=float)
                                     for x in (alpha_i, eta_i, p_i, w_i, f_i))
    rate = np.asarray(uplink_rate(w_i, p_i, link))
    bits = alpha_i * eta_i * task.c
    with np.errstate(invalid="ignore"):
        energy_tx = costs.e1 * p_i * _upload_time(bits, rate)
    # 0 * inf can only arise when p == 0, which already forced rate == 0
    energy_tx = np.where(np.isnan(energy_tx), INF, energy_tx)
    energy_local = costs.e2 * (1.0 - eta_i) * task.c * task.f_local ** 2
    payment = costs.mu1 * w_i + costs.mu2 * f_i
    return CostBreakdown(energy_tx=energy_tx, energy_local=energy_local,
                         payment=payment, total=energy_tx + energy_local + payment)


def scenario_latency(scn: Scenario, a: Allocation) -> LatencyBreakdown:
    _check_len(scn, a)
    return latency_breakdown(scn.task_batch, scn.link_batch, a.alpha, a.eta, a.p, a.w, a.f)


def scenario_costs(scn: Scenario, a: Allocation) -> CostBreakdown:
    _check_len(scn, a)
    return cost_breakdown(scn.task_batch, scn.link_batch, scn.costs,
                          a.alpha, a.eta, a.p, a.w, a.f)


def _check_len(scn, a):
    if len(a) != scn.i_count:
        raise ConfigError(f"allocation has {len(a)} entries, scenario has {scn.i_count}")


def system_cost(scn: Scenario, a: Allocation) -> float:
    """Total system cost: the sum of per-task cost totals."""
    return float(np.sum(scenario_costs(scn, a).total))


def latency_violation(scn: Scenario, a: Allocation) -> np.ndarray:
    lat = scenario_latency(scn, a)
    return np.maximum(0.0, lat.t_total - scn.task_batch.t_max)


def penalized_cost(scn: Scenario, a: Allocation, q) -> float:
    """System cost plus hinged latency penalties ``q_i * max(0, t_i - t_max_i)``."""
    q = np.broadcast_to(np.asarray(q, dtype=float), (scn.i_count,))
    if np.any(q < 0):
        raise DomainError("penalty weights must be >= 0")
    viol = latency_violation(scn, a)
    with np.errstate(invalid="ignore"):
        pen = np.where(q > 0, q * viol, 0.0)
    return system_cost(scn, a) + float(np.sum(pen))


@dataclass(frozen=True)
class FeasibilityReport:
    """Signed residuals (positive = violated) for each constraint.

    c1..c3, c6a, c6b are per task; c4 (compute budget) and c5 (bandwidth
    budget) are scalars.
    """

    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    c4: float
    c5: float
    c6a: np.ndarray
    c6b: np.ndarray
    feasible: bool

    @property
    def max_latency_residual(self) -> float:
        return float(max(np.max(self.c6a), np.max(self.c6b)))


def check_feasibility(scn: Scenario, a: Allocation, tol: float = 1e-9) -> FeasibilityReport:
    """Evaluate every constraint; ``tol`` is relative to each constraint's scale."""
    tb, lb, bud = scn.task_batch, scn.link_batch, scn.budget
    c1 = np.maximum(-a.eta, a.eta - 1.0)
    c2 = np.minimum(np.abs(a.alpha), np.abs(a.alpha - 1.0))
    if scn.icc_only:
        # only DataT is available; InstrT with nothing offloaded is harmless
        c2 = np.where(a.eta > 0, np.abs(a.alpha - 1.0), c2)
    c3 = np.maximum(-a.p, a.p - lb.p_max)
    c4 = float(np.sum(a.f) - bud.f_total)
    c5 = float(np.sum(a.w) - bud.w_total)
    lat = scenario_latency(scn, a)
    c6a = lat.t_rsu - tb.t_max
    c6b = lat.t_local - tb.t_max
    ok = (np.all(c1 <= tol) and np.all(c2 <= tol) and np.all(c3 <= tol * lb.p_max)
          and c4 <= tol * bud.f_total and c5 <= tol * bud.w_total
          and np.all(c6a <= tol * tb.t_max) and np.all(c6b <= tol * tb.t_max)
          and np.all(a.w > 0) and np.all(a.f > 0))
    return FeasibilityReport(c1=c1, c2=c2, c3=c3, c4=c4, c5=c5, c6a=c6a, c6b=c6b,
                             feasible=bool(ok))


@dataclass(frozen=True)
class PenalizedGradient:
    """Partial derivatives of the penalised cost w.r.t. each decision vector."""

    alpha: np.ndarray
    eta: np.ndarray
    p: np.ndarray
    w: np.ndarray
    f: np.ndarray


def penalized_cost_grad(scn: Scenario, a: Allocation, q) -> PenalizedGradient:
    """Closed-form gradient of the penalised cost with ``alpha`` treated as continuous.

    The cost is affine in ``alpha`` so the continuous extension is exact.  At
    a tie ``t_rsu == t_local`` the RSU branch of the max is differentiated.
    """
    tb, lb, cm = scn.task_batch, scn.link_batch, scn.costs
    al, eta, p, w, f = a.alpha, a.eta, a.p, a.w, a.f
    q = np.broadcast_to(np.asarray(q, dtype=float), al.shape)
    snr = p * lb.g / lb.sigma2
    spec_eff = np.log2(1.0 + snr)  # bits/s/Hz
    if np.any((al * eta > 0) & (spec_eff <= 0)):
        raise DomainError("zero uplink rate with positive upload volume has no gradient")
    d_spec = (lb.g / lb.sigma2) / ((1.0 + snr) * math.log(2.0))
    safe_se = np.where(spec_eff > 0, spec_eff, 1.0)
    up_unit = tb.c / (w * safe_se)  # seconds per unit of alpha*eta

    # energy_tx = e1 * p * alpha * eta * c / (w * se)
    e_unit = cm.e1 * p * up_unit
    g_alpha = e_unit * eta
    g_eta = e_unit * al - cm.e2 * tb.c * tb.f_local ** 2
    g_p = cm.e1 * al * eta * tb.c / w * (safe_se - p * d_spec) / safe_se ** 2
    g_w = -e_unit * al * eta / w + cm.mu1
    g_f = np.full_like(f, cm.mu2)

    lat = latency_breakdown(tb, lb, al, eta, p, w, f)
    active = (lat.t_total > tb.t_max) & (q > 0)
    rsu = active & (lat.t_rsu >= lat.t_local)
    loc = active & ~rsu
    comp_unit = ((1.0 - al) * tb.b_instr + tb.b) / f
    g_alpha = g_alpha + np.where(rsu, q * eta * (up_unit - tb.b_instr / f), 0.0)
    g_eta = g_eta + np.where(rsu, q * (al * up_unit + comp_unit), 0.0)
    g_eta = g_eta + np.where(loc, -q * tb.b / tb.f_local, 0.0)
    g_p = g_p + np.where(rsu, -q * al * eta * up_unit * d_spec / safe_se, 0.0)
    g_w = g_w + np.where(rsu, -q * al * eta * up_unit / w, 0.0)
    g_f = g_f + np.where(rsu, -q * eta * comp_unit / f, 0.0)
    return PenalizedGradient(alpha=g_alpha, eta=g_eta, p=g_p, w=g_w, f=g_f)
