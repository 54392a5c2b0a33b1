"""Alternating-minimisation baseline.

Each outer round solves four block subproblems in turn with the others held
fixed: transmission mode (per-task enumeration), offloading ratio (linear
program on an interval), transmit power (closed form on the binding latency
constraint) and bandwidth/compute shares (Lagrangian dual loop).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ScenarioInfeasibleError
from .model import (Allocation, Scenario, check_feasibility, latency_breakdown,
                    scenario_costs, scenario_latency, system_cost, uplink_rate)
from .trace import ConvergenceTrace, TraceRecord

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class AmConfig:
    """Settings for :func:`am_solve`.

    ``step_rule="adaptive"`` scales each multiplier's step by sign agreement
    of successive residuals (grow on agreement, halve on a flip), starting
    from ``lambda1``/``lambda2`` times a per-constraint price scale.
    ``step_rule="constant"`` applies ``lambda1``/``lambda2`` literally.
    ``warm_start`` carries the multipliers and step sizes across outer rounds
    instead of restarting the dual loop from zero.
    """

    k_outer: int = 50
    n_inner: int = 200
    lambda1: float = 0.5
    lambda2: float = 0.5
    tolerance: float = 1e-9
    tie_break: str = "hi"
    step_rule: str = "adaptive"
    warm_start: bool = False
    eps_w: float = 1.0
    eps_f: float = 1.0
    grow: float = 1.2
    shrink: float = 0.5
    early_stop_rounds: int = 0
    early_stop_tol: float = 0.0

    def __post_init__(self):
        if self.k_outer < 1:
            raise ConfigError("k_outer must be >= 1")
        if self.n_inner < 0:
            raise ConfigError("n_inner must be >= 0")
        if self.tie_break not in ("hi", "lo"):
            raise ConfigError("tie_break must be 'hi' or 'lo'")
        if self.step_rule not in ("adaptive", "constant"):
            raise ConfigError("step_rule must be 'adaptive' or 'constant'")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ConfigError("step sizes must be positive")


@dataclass
class DualState:
    """Multipliers for the compute budget (u), bandwidth budget (v) and latencies (q).

    ``lambda1`` may be a scalar or a ``(u, v)`` pair; ``lambda2`` a scalar or
    one step per task.
    """

    u: float
    v: float
    q: np.ndarray
    lambda1: float | np.ndarray = 1e-20
    lambda2: float | np.ndarray = 1e2

    @classmethod
    def zeros(cls, n: int, lambda1=1e-20, lambda2=1e2) -> "DualState":
        return cls(u=0.0, v=0.0, q=np.zeros(n), lambda1=lambda1, lambda2=lambda2)


# ---------------------------------------------------------------- mode block

def _mode_latency(scn, a, alpha):
    return latency_breakdown(scn.task_batch, scn.link_batch, alpha, a.eta, a.p, a.w, a.f).t_rsu


def mode_objective(scn: Scenario, a: Allocation, alpha) -> np.ndarray:
    """Per-task transmission-energy cost as a function of the mode vector."""
    return scenario_costs(scn, a.replace(alpha=alpha, relaxed=True)).energy_tx


def select_mode(scn: Scenario, a_fixed: Allocation, tol: float = 1e-9):
    """Choose each task's mode by enumerating both options.

    Returns ``(alpha, infeasible)``; where neither option meets the latency
    bound the previous mode is kept and the task flagged.
    """
    n = scn.i_count
    t_max = scn.task_batch.t_max
    if scn.icc_only:
        return np.ones(n), _mode_latency(scn, a_fixed, np.ones(n)) > t_max * (1 + tol)
    zeros, ones = np.zeros(n), np.ones(n)
    obj0 = mode_objective(scn, a_fixed, zeros)
    obj1 = mode_objective(scn, a_fixed, ones)
    ok0 = _mode_latency(scn, a_fixed, zeros) <= t_max * (1 + tol)
    ok1 = _mode_latency(scn, a_fixed, ones) <= t_max * (1 + tol)
    pick1 = ok1 & (~ok0 | (obj1 < obj0))
    alpha = np.where(pick1, 1.0, 0.0)
    infeasible = ~(ok0 | ok1)
    alpha = np.where(infeasible, a_fixed.alpha, alpha)
    return alpha, infeasible


# --------------------------------------------------------------- ratio block

def eta_interval(task, link, alpha_i, p_i, w_i, f_i):
    """Feasible offloading-ratio interval ``(lo, hi)``; empty when ``lo > hi``."""
    alpha_i, p_i, w_i, f_i = (np.asarray(x, dtype=float) for x in (alpha_i, p_i, w_i, f_i))
    lo = np.maximum(0.0, 1.0 - task.t_max * task.f_local / task.b)
    rate = np.asarray(uplink_rate(w_i, p_i, link))
    with np.errstate(divide="ignore"):
        per_bit = np.where(alpha_i > 0, np.where(rate > 0, task.c / np.where(rate > 0, rate, 1.0),
                                                 math.inf), 0.0)
    denom = alpha_i * per_bit + (1.0 - alpha_i) * task.b_instr / f_i + task.b / f_i
    hi = np.minimum(1.0, task.t_max / denom)
    return lo, hi


def ratio_coefficient(task, link, costs, alpha_i, p_i, w_i) -> np.ndarray:
    """Slope of the ratio subproblem's objective in ``eta``."""
    alpha_i, p_i, w_i = (np.asarray(x, dtype=float) for x in (alpha_i, p_i, w_i))
    rate = np.asarray(uplink_rate(w_i, p_i, link))
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(alpha_i * p_i > 0,
                      np.where(rate > 0, p_i * alpha_i * task.c * costs.e1 / np.where(rate > 0, rate, 1.0),
                               math.inf), 0.0)
    return tx - costs.e2 * task.c * task.f_local ** 2


def select_ratio(task, link, costs, alpha_i, p_i, w_i, f_i, tol: float = 1e-12,
                 tie_break: str = "hi"):
    """Interval endpoint minimising the (linear) ratio objective.

    Returns ``(eta, infeasible)``; empty intervals yield ``nan`` and a flag.
    """
    lo, hi = eta_interval(task, link, alpha_i, p_i, w_i, f_i)
    coef = ratio_coefficient(task, link, costs, alpha_i, p_i, w_i)
    scale = costs.e2 * task.c * task.f_local ** 2 + np.abs(coef)
    tie = np.abs(coef) <= tol * scale
    pick_hi = (coef < 0) | (tie & (tie_break == "hi"))
    eta = np.where(pick_hi, hi, lo)
    infeasible = lo > hi
    eta = np.where(infeasible, np.nan, eta)
    return eta, infeasible


# --------------------------------------------------------------- power block

def min_feasible_power(task, link, alpha_i, eta_i, w_i, f_i):
    """Smallest transmit power meeting the RSU latency bound.

    Returns ``(p, infeasible)``.  InstrT tasks (and tasks that upload nothing)
    get zero power.  Infeasible tasks get ``nan``.
    """
    alpha_i, eta_i, w_i, f_i = (np.asarray(x, dtype=float) for x in (alpha_i, eta_i, w_i, f_i))
    t_rem = (task.t_max - (1.0 - alpha_i) * eta_i * task.b_instr / f_i
             - eta_i * task.b / f_i)
    uploads = (alpha_i > 0) & (eta_i > 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        expo = np.where(uploads & (t_rem > 0), eta_i * task.c / (w_i * np.where(t_rem > 0, t_rem, 1.0)), 0.0)
        # 2**expo overflows past ~1024; such powers exceed any cap anyway
        p = np.where(expo < 1000, link.sigma2 * np.expm1(expo * _LN2) / link.g, math.inf)
    p = np.where(uploads, p, 0.0)
    infeasible = uploads & ((t_rem <= 0) | ~(p <= link.p_max))
    return np.where(infeasible, np.nan, p), infeasible


# ------------------------------------------------------- bandwidth / compute

def dual_primal_step(scn: Scenario, a_fixed: Allocation, dual: DualState,
                     eps_w: float = 1.0, eps_f: float = 1.0):
    """Stationary point of the Lagrangian in ``(w, f)`` for given multipliers."""
    tb, lb, cm = scn.task_batch, scn.link_batch, scn.costs
    al, eta, p = a_fixed.alpha, a_fixed.eta, a_fixed.p
    if not (cm.mu1 + dual.v > 0 and cm.mu2 + dual.u > 0):
        raise DomainError("mu1 + v and mu2 + u must be positive")
    se = np.log2(1.0 + p * lb.g / lb.sigma2)
    up = al * eta * tb.c
    if np.any((up > 0) & (se <= 0)):
        raise DomainError("zero spectral efficiency with positive upload volume")
    num_w = p * up * cm.e1 + dual.q * up
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.sqrt(num_w / ((cm.mu1 + dual.v) * np.where(se > 0, se, 1.0)))
    w = np.where(num_w > 0, w, eps_w)
    num_f = dual.q * ((1.0 - al) * eta * tb.b_instr + eta * tb.b)
    f = np.where(num_f > 0, np.sqrt(num_f / (cm.mu2 + dual.u)), eps_f)
    return w, f


def _constraint_residuals(scn, a, w, f):
    tb = scn.task_batch
    t_rsu = latency_breakdown(tb, scn.link_batch, a.alpha, a.eta, a.p, w, f).t_rsu
    return (float(np.sum(f) - scn.budget.f_total), float(np.sum(w) - scn.budget.w_total),
            t_rsu - tb.t_max)


def dual_multiplier_step(scn: Scenario, a: Allocation, dual: DualState) -> DualState:
    """Projected subgradient ascent on the dual function."""
    r_u, r_v, r_q = _constraint_residuals(scn, a, a.w, a.f)
    lam1 = np.broadcast_to(np.asarray(dual.lambda1, dtype=float), (2,))
    return DualState(u=max(0.0, dual.u + lam1[0] * r_u),
                     v=max(0.0, dual.v + lam1[1] * r_v),
                     q=np.maximum(0.0, dual.q + np.asarray(dual.lambda2) * r_q),
                     lambda1=dual.lambda1, lambda2=dual.lambda2)


@dataclass
class _AdaptiveSteps:
    """Sign-agreement step control for the dual loop (one step per multiplier)."""

    step: np.ndarray
    last_sign: np.ndarray
    grow: float
    shrink: float

    def lambdas(self, residual: np.ndarray, multipliers: np.ndarray) -> np.ndarray:
        s = np.sign(residual)
        # multipliers pinned at zero by an inactive constraint carry no history
        pinned = (multipliers <= 0) & (s < 0)
        same = (s == self.last_sign) & (s != 0)
        flip = (s == -self.last_sign) & (s != 0)
        self.step = np.where(same & ~pinned, self.step * self.grow, self.step)
        self.step = np.where(flip, self.step * self.shrink, self.step)
        # forgetting the sign after a flip stops grow/shrink limit cycles
        self.last_sign = np.where(pinned | flip, 0.0, s)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(residual != 0, self.step / np.abs(residual), 0.0)
        return lam


def _price_scales(scn: Scenario, a: Allocation) -> np.ndarray:
    """Reference multiplier magnitudes: (u, v, q_1..q_I)."""
    tb, lb, cm = scn.task_batch, scn.link_batch, scn.costs
    se_max = np.log2(1.0 + lb.p_max * lb.g / lb.sigma2)
    work = cm.mu2 * (tb.b + tb.b_instr) + cm.mu1 * tb.c / se_max + cm.e1 * lb.p_max * tb.t_max
    q_ref = np.maximum(work, 1e-300) / tb.t_max ** 2
    u_ref = max(cm.mu2, 1e-300)
    v_ref = max(cm.mu1, 1e-300)
    return np.concatenate([[u_ref, v_ref], q_ref])


@dataclass
class DualLoopState:
    dual: DualState
    steps: _AdaptiveSteps | None = None


def _dual_loop(scn: Scenario, a_fixed: Allocation, cfg: AmConfig,
               start: DualLoopState | None = None):
    n = scn.i_count
    if start is None:
        if cfg.step_rule == "constant":
            start = DualLoopState(DualState.zeros(n, cfg.lambda1, cfg.lambda2))
        else:
            scales = _price_scales(scn, a_fixed)
            init = np.concatenate([[cfg.lambda1, cfg.lambda1], np.full(n, cfg.lambda2)]) * scales
            steps = _AdaptiveSteps(step=init, last_sign=np.zeros(n + 2),
                                   grow=cfg.grow, shrink=cfg.shrink)
            start = DualLoopState(DualState.zeros(n), steps)
    dual, steps = start.dual, start.steps
    tb, bud = scn.task_batch, scn.budget
    w, f = dual_primal_step(scn, a_fixed, dual, cfg.eps_w, cfg.eps_f)
    for _ in range(cfg.n_inner):
        cur = a_fixed.replace(w=w, f=f)
        if steps is not None:
            r_u, r_v, r_q = _constraint_residuals(scn, cur, w, f)
            # normalised residuals keep the sign logic scale-free
            resid = np.concatenate([[r_u / bud.f_total, r_v / bud.w_total], r_q / tb.t_max])
            mult = np.concatenate([[dual.u, dual.v], dual.q])
            lam = steps.lambdas(resid, mult)
            dual = DualState(u=dual.u, v=dual.v, q=dual.q,
                             lambda1=np.array([lam[0] / bud.f_total, lam[1] / bud.w_total]),
                             lambda2=lam[2:] / tb.t_max)
        dual = dual_multiplier_step(scn, cur, dual)
        w, f = dual_primal_step(scn, a_fixed, dual, cfg.eps_w, cfg.eps_f)
    return w, f, DualLoopState(dual, steps)


def solve_bandwidth_compute(scn: Scenario, a_fixed: Allocation, cfg: AmConfig):
    """Run the dual loop from zero multipliers; returns ``(w, f)``."""
    w, f, _ = _dual_loop(scn, a_fixed, cfg)
    return w, f


def wf_objective(scn: Scenario, a: Allocation) -> float:
    c = scenario_costs(scn, a)
    return float(np.sum(c.energy_tx + c.payment))


def _wf_feasible(scn, a, tol):
    r_u, r_v, r_q = _constraint_residuals(scn, a, a.w, a.f)
    return (r_u <= tol * scn.budget.f_total and r_v <= tol * scn.budget.w_total
            and bool(np.all(r_q <= tol * scn.task_batch.t_max)))


# ----------------------------------------------------------------- outer loop

def initial_allocation(scn: Scenario, relaxed_alpha: float | None = None) -> Allocation:
    """Round-0 point: DataT, half offloaded, half power, equal budget split."""
    n = scn.i_count
    alpha = np.full(n, 1.0 if relaxed_alpha is None else relaxed_alpha)
    return Allocation(alpha=alpha, eta=np.full(n, 0.5), p=scn.link_batch.p_max / 2,
                      w=np.full(n, scn.budget.w_total / n), f=np.full(n, scn.budget.f_total / n),
                      relaxed=relaxed_alpha is not None)


def preflight(scn: Scenario) -> None:
    """Raise unless every task is feasible either locally or fully offloaded on an equal split."""
    tb, lb = scn.task_batch, scn.link_batch
    n = scn.i_count
    local_ok = tb.b <= tb.t_max * tb.f_local
    w = np.full(n, scn.budget.w_total / n)
    f = np.full(n, scn.budget.f_total / n)
    modes = [1.0] if scn.icc_only else [0.0, 1.0]
    off_ok = np.zeros(n, dtype=bool)
    for m in modes:
        t = latency_breakdown(tb, lb, np.full(n, m), np.ones(n), lb.p_max, w, f).t_rsu
        off_ok |= t <= tb.t_max
    if not np.all(local_ok | off_ok):
        bad = np.flatnonzero(~(local_ok | off_ok)).tolist()
        raise ScenarioInfeasibleError(f"tasks {bad} cannot meet their deadline")


@dataclass(frozen=True)
class BlockCheck:
    """Local objective of one block before and after its update in one round."""

    round: int
    block: str
    before: float
    after: float
    before_feasible: bool

    @property
    def violation(self) -> float:
        if not self.before_feasible:
            return 0.0
        return max(0.0, (self.after - self.before) / max(1.0, abs(self.before)))


@dataclass
class AmResult:
    allocation: Allocation
    trace: ConvergenceTrace
    feasible: bool
    block_checks: list = field(default_factory=list)
    infeasible_events: int = 0


def am_solve(scn: Scenario, cfg: AmConfig = AmConfig()) -> AmResult:
    """Alternating minimisation over the four blocks for ``cfg.k_outer`` rounds.

    The returned allocation is the best feasible iterate seen, which guards
    against late dual-loop oscillation.
    """
    preflight(scn)
    tb, lb, cm = scn.task_batch, scn.link_batch, scn.costs
    tol = cfg.tolerance
    a = initial_allocation(scn)
    trace = ConvergenceTrace()
    checks = []
    best, best_cost = None, math.inf
    loop_state = None
    infeasible_events = 0
    t0 = time.perf_counter()
    stall = 0
    for k in range(1, cfg.k_outer + 1):
        # mode
        before = float(np.sum(mode_objective(scn, a, a.alpha)))
        feas_before = bool(np.all(_mode_latency(scn, a, a.alpha) <= tb.t_max * (1 + tol)))
        alpha, bad = select_mode(scn, a, tol)
        infeasible_events += int(np.sum(bad))
        a = a.replace(alpha=alpha)
        checks.append(BlockCheck(k, "mode", before, float(np.sum(mode_objective(scn, a, a.alpha))),
                                 feas_before))

        # ratio
        lo, hi = eta_interval(tb, lb, a.alpha, a.p, a.w, a.f)
        before = _ratio_objective(scn, a)
        feas_before = bool(np.all((a.eta >= lo - tol) & (a.eta <= hi + tol)))
        eta, bad = select_ratio(tb, lb, cm, a.alpha, a.p, a.w, a.f, tie_break=cfg.tie_break)
        infeasible_events += int(np.sum(bad))
        a = a.replace(eta=np.where(bad, a.eta, eta))
        checks.append(BlockCheck(k, "ratio", before, _ratio_objective(scn, a), feas_before))

        # power
        before = float(np.sum(scenario_costs(scn, a).energy_tx))
        lat = scenario_latency(scn, a)
        feas_before = bool(np.all(lat.t_rsu <= tb.t_max * (1 + tol)) and np.all(a.p <= lb.p_max))
        p, bad = min_feasible_power(tb, lb, a.alpha, a.eta, a.w, a.f)
        infeasible_events += int(np.sum(bad))
        # with nothing uploaded every power is optimal; keeping the old one
        # leaves the DataT option open for later rounds
        flat = (a.alpha * a.eta) <= 0
        a = a.replace(p=np.where(bad | flat, a.p, p))
        checks.append(BlockCheck(k, "power", before, float(np.sum(scenario_costs(scn, a).energy_tx)),
                                 feas_before))

        # bandwidth / compute
        before = wf_objective(scn, a)
        feas_before = _wf_feasible(scn, a, tol)
        start = loop_state if cfg.warm_start else None
        w, f, loop_state = _dual_loop(scn, a, cfg, start)
        cand = a.replace(w=w, f=f)
        after = wf_objective(scn, cand)
        # monotone safeguard: never trade a feasible block value for a worse one
        if not (feas_before and after > before):
            a = cand
        checks.append(BlockCheck(k, "wf", before, wf_objective(scn, a), feas_before))

        cost = system_cost(scn, a)
        rep = check_feasibility(scn, a, tol=1e-6)
        if rep.feasible and cost < best_cost:
            best, best_cost = a, cost
        trace.append(TraceRecord(iteration=k, cost=cost, penalized=math.nan,
                                 best_cost=best_cost if best is not None else math.nan,
                                 max_c6=rep.max_latency_residual, c4=rep.c4, c5=rep.c5,
                                 feasible=rep.feasible,
                                 wall_ms=(time.perf_counter() - t0) * 1e3))
        if best is not None and cfg.early_stop_rounds and len(trace) > cfg.early_stop_rounds:
            prev = trace[-1 - cfg.early_stop_rounds].best_cost
            if math.isfinite(prev) and abs(prev - best_cost) <= cfg.early_stop_tol * abs(best_cost):
                break
    return AmResult(allocation=best if best is not None else a, trace=trace,
                    feasible=best is not None, block_checks=checks,
                    infeasible_events=infeasible_events)


def _ratio_objective(scn, a) -> float:
    c = scenario_costs(scn, a)
    return float(np.sum(c.energy_tx + c.energy_local))
