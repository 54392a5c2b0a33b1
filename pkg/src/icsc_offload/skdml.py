"""Meta-learned solvers built from coordinate-wise LSTM optimizers.

:func:`skdml_solve` keeps the block structure of the alternating solver: one
learned optimizer per block (mode, ratio, power, bandwidth/compute), run in
that order each outer iteration, each driven by the gradient of the
penalised cost.  Every ``k_up`` outer iterations the mean penalised cost over
the window is backpropagated through the recorded updates and each network
takes one Adam step.

:func:`unstructured_solve` is the block-free baseline: a single learned
optimizer moves all five variable vectors at once with the same total number
of inner steps.

Variables are updated in working coordinates so that one network sees
comparable scales: ``alpha`` and ``eta`` as is, power as a fraction of the
cap, bandwidth and compute as logs of their share of an equal split.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .am_solver import initial_allocation, preflight
from .errors import ConfigError, NumericError
from .learned_optimizer import (AdamState, OptimizerNet, OptimizerState, TapeStep,
                                adam_step, optimizer_step, unrolled_backward)
from .model import (Allocation, RsuBudget, Scenario, check_feasibility, penalized_cost,
                    penalized_cost_grad, system_cost)
from .trace import ConvergenceTrace, TraceRecord

BLOCKS = ("alpha", "eta", "p", "wf")


@dataclass(frozen=True)
class MetaConfig:
    """Settings shared by :func:`skdml_solve` and :func:`unstructured_solve`.

    ``inner_counts`` are the per-block inner iteration counts in block order.
    ``learn_rates`` are the Adam step sizes per block (the unstructured solver
    uses the first).  ``penalty_scale`` sets the latency penalty weights to
    ``penalty_scale * G(init) / t_max_i`` unless ``penalty_weights`` is given.
    ``pretrained`` maps block names (or ``"joint"``) to networks to start from.
    """

    k_outer: int = 500
    inner_counts: tuple = (5, 5, 5, 5)
    k_up: int = 1
    learn_rates: tuple = (5e-3, 5e-3, 5e-3, 5e-3)
    penalty_scale: float = 10.0
    penalty_weights: Optional[tuple] = None
    hidden_size: int = 20
    layer_count: int = 2
    gain: float = 1e-2
    alpha_init: float = 0.5
    p_floor: float = 1e-3  # fraction of p_max
    eps_w: float = 1.0
    eps_f: float = 1.0
    projection_backward: str = "straight_through"
    meta_grad_clip: float = 1.0
    seed: int = 0
    pretrained: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "inner_counts", tuple(int(x) for x in self.inner_counts))
        object.__setattr__(self, "learn_rates", tuple(float(x) for x in self.learn_rates))
        if self.k_outer < 1 or self.k_up < 1:
            raise ConfigError("k_outer and k_up must be >= 1")
        if self.k_outer % self.k_up:
            raise ConfigError(f"k_outer ({self.k_outer}) must be divisible by k_up ({self.k_up})")
        if len(self.inner_counts) != 4 or min(self.inner_counts) < 1:
            raise ConfigError("inner_counts needs four entries >= 1")
        if len(self.learn_rates) != 4 or min(self.learn_rates) < 0:
            raise ConfigError("learn_rates needs four entries >= 0")
        if not 0 <= self.alpha_init <= 1:
            raise ConfigError("alpha_init must lie in [0, 1]")
        if self.projection_backward not in ("exact", "straight_through"):
            raise ConfigError("projection_backward must be 'exact' or 'straight_through'")
        if not 0 < self.p_floor < 1:
            raise ConfigError("p_floor must lie in (0, 1)")

    def replace(self, **changes) -> "MetaConfig":
        import dataclasses
        return dataclasses.replace(self, **changes)


@dataclass
class SolveArtifacts:
    allocation: Allocation
    trace: ConvergenceTrace
    thetas: dict
    loss_history: list
    meta_steps: dict
    feasible: bool
    final_cost: float
    penalty_weights: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------- projections

def project_alpha(alpha) -> np.ndarray:
    return np.clip(np.asarray(alpha, dtype=float), 0.0, 1.0)


def finalize_alpha(alpha) -> np.ndarray:
    """Round a relaxed mode vector at 0.5; ties go to DataT."""
    return np.where(np.asarray(alpha, dtype=float) >= 0.5, 1.0, 0.0)


def project_eta(eta) -> np.ndarray:
    return np.clip(np.asarray(eta, dtype=float), 0.0, 1.0)


def project_power(p, links) -> np.ndarray:
    p_max = np.asarray(links.p_max if hasattr(links, "p_max")
                       else [l.p_max for l in links], dtype=float)
    return np.clip(np.asarray(p, dtype=float), 0.0, p_max)


def project_budget(w, f, budget: RsuBudget):
    """Scale ``w`` and ``f`` down proportionally when they exceed the RSU budgets."""
    w = np.asarray(w, dtype=float)
    f = np.asarray(f, dtype=float)
    sw, sf = w.sum(), f.sum()
    if sw > budget.w_total:
        w = w * (budget.w_total / sw)
    if sf > budget.f_total:
        f = f * (budget.f_total / sf)
    return w, f


def accumulate_global_loss(window) -> float:
    """Mean of the penalised costs recorded over one meta-update window."""
    window = list(window)
    if not window:
        raise ValueError("empty loss window")
    return float(np.mean(window))


# ------------------------------------------------------- working coordinates

def _box(z, lo, hi):
    zc = np.clip(z, lo, hi)
    inside = (z >= lo) & (z <= hi)
    return zc, (lambda g: g * inside)


def _log_budget(z, w0, total, z_floor):
    """Floor then rescale log-shares so that ``sum(w0 * exp(z)) <= total``."""
    zc = np.maximum(z, z_floor)
    free = z >= z_floor
    x = w0 * np.exp(zc)
    s = x.sum()
    if s > total:
        pi = x / s
        zc = zc - math.log(s / total)

        def vjp(g):
            g = g * 1.0
            g = g - pi * g.sum()
            return g * free
        return zc, vjp
    return zc, (lambda g: g * free)


class _Coords:
    """Maps between an :class:`Allocation` and per-block working vectors."""

    def __init__(self, scn: Scenario, cfg: MetaConfig):
        self.scn = scn
        self.n = scn.i_count
        self.p_max = scn.link_batch.p_max
        self.w0 = scn.budget.w_total / self.n
        self.f0 = scn.budget.f_total / self.n
        self.zw_floor = math.log(cfg.eps_w / self.w0)
        self.zf_floor = math.log(cfg.eps_f / self.f0)
        self.p_floor = cfg.p_floor
        self.icc = scn.icc_only
        self.exact = cfg.projection_backward == "exact"

    def to_work(self, a: Allocation) -> dict:
        return {"alpha": a.alpha.copy(), "eta": a.eta.copy(), "p": a.p / self.p_max,
                "wf": np.concatenate([np.log(a.w / self.w0), np.log(a.f / self.f0)])}

    def to_alloc(self, z: dict) -> Allocation:
        n = self.n
        return Allocation(alpha=z["alpha"], eta=z["eta"], p=z["p"] * self.p_max,
                          w=self.w0 * np.exp(z["wf"][:n]), f=self.f0 * np.exp(z["wf"][n:]),
                          relaxed=True)

    def project(self, block: str, z):
        """Projected working vector and the adjoint map used for meta-gradients.

        In straight-through mode the adjoint map is the identity (zero for a
        pinned mode vector), so iterates resting on a bound still pass
        meta-gradient to the network that pushed them there.
        """
        zp, vjp = self._project_exact(block, z)
        if self.exact or (block == "alpha" and self.icc):
            return zp, vjp
        return zp, None

    def _project_exact(self, block: str, z):
        if block == "alpha":
            if self.icc:
                return np.ones_like(z), (lambda g: np.zeros_like(g))
            return _box(z, 0.0, 1.0)
        if block == "eta":
            return _box(z, 0.0, 1.0)
        if block == "p":
            return _box(z, self.p_floor, 1.0)
        if block == "wf":
            n = self.n
            zw, vw = _log_budget(z[:n], self.w0, self.scn.budget.w_total, self.zw_floor)
            zf, vf = _log_budget(z[n:], self.f0, self.scn.budget.f_total, self.zf_floor)
            return np.concatenate([zw, zf]), (lambda g: np.concatenate([vw(g[:n]), vf(g[n:])]))
        raise ConfigError(f"unknown block {block!r}")

    def grad(self, block: str, a: Allocation, q) -> np.ndarray:
        """Gradient of the penalised cost w.r.t. one block's working vector."""
        g = penalized_cost_grad(self.scn, a, q)
        if block == "alpha":
            return np.zeros(self.n) if self.icc else g.alpha
        if block == "eta":
            return g.eta
        if block == "p":
            return g.p * self.p_max
        if block == "wf":
            return np.concatenate([g.w * a.w, g.f * a.f])
        raise ConfigError(f"unknown block {block!r}")


def _check_finite(v, block, k, j):
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite gradient in block {block!r} at outer {k}, inner {j}")


def inner_block_update(block: str, coords: _Coords, z: dict, net: OptimizerNet,
                       state: OptimizerState, inner_count: int, q, tape=None,
                       outer: int = 0):
    """Run ``inner_count`` learned steps on one block with the others fixed.

    Updates ``z[block]`` in place and returns the new recurrent state.  When
    ``tape`` is a list, one :class:`TapeStep` per inner step is appended.
    """
    for j in range(inner_count):
        a = coords.to_alloc(z)
        g = coords.grad(block, a, q)
        _check_finite(g, block, outer, j)
        delta, state, cache = optimizer_step(net, state, g,
                                             where=f"in block {block!r} at outer {outer}, inner {j}")
        z[block], vjp = coords.project(block, z[block] + delta)
        if tape is not None:
            tape.append(TapeStep(cache, vjp))
    return state


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    """Rescale a meta-gradient to at most ``limit`` in global norm (0 disables)."""
    norm = float(np.linalg.norm(g))
    if limit > 0 and norm > limit:
        return g * (limit / norm)
    return g


def _penalty_weights(scn: Scenario, cfg: MetaConfig, a0: Allocation) -> np.ndarray:
    if cfg.penalty_weights is not None:
        q = np.broadcast_to(np.asarray(cfg.penalty_weights, dtype=float), (scn.i_count,))
        return q.copy()
    g0 = system_cost(scn, a0.finalized())
    return cfg.penalty_scale * g0 / scn.task_batch.t_max


def _initial_point(scn: Scenario, cfg: MetaConfig) -> Allocation:
    a0 = initial_allocation(scn, relaxed_alpha=1.0 if scn.icc_only else cfg.alpha_init)
    return a0


def _make_net(cfg: MetaConfig, key: str, offset: int) -> OptimizerNet:
    if cfg.pretrained and key in cfg.pretrained:
        return cfg.pretrained[key].copy()
    return OptimizerNet.init(cfg.hidden_size, cfg.layer_count, seed=(cfg.seed, offset),
                             gain=cfg.gain)


class _Recorder:
    """Trace bookkeeping and best-feasible incumbent shared by both solvers."""

    def __init__(self, scn, q):
        self.scn, self.q = scn, q
        self.trace = ConvergenceTrace()
        self.best, self.best_cost = None, math.inf
        self.t0 = time.perf_counter()

    def record(self, k: int, a_relaxed: Allocation) -> float:
        a_fin = a_relaxed.finalized()
        cost = system_cost(self.scn, a_fin)
        pen = penalized_cost(self.scn, a_relaxed, self.q)
        rep = check_feasibility(self.scn, a_fin, tol=1e-6)
        if rep.feasible and cost < self.best_cost:
            self.best, self.best_cost = a_fin, cost
        self.trace.append(TraceRecord(
            iteration=k, cost=cost, penalized=pen,
            best_cost=self.best_cost if self.best is not None else math.nan,
            max_c6=rep.max_latency_residual, c4=rep.c4, c5=rep.c5, feasible=rep.feasible,
            wall_ms=(time.perf_counter() - self.t0) * 1e3))
        return pen

    def artifacts(self, last: Allocation, thetas, losses, meta_steps) -> SolveArtifacts:
        final = self.best if self.best is not None else last.finalized()
        return SolveArtifacts(allocation=final, trace=self.trace, thetas=thetas,
                              loss_history=losses, meta_steps=meta_steps,
                              feasible=self.best is not None,
                              final_cost=system_cost(self.scn, final), penalty_weights=self.q)


def skdml_solve(scn: Scenario, cfg: MetaConfig = MetaConfig()) -> SolveArtifacts:
    """Block-structured meta-learned solve; returns the best feasible iterate."""
    preflight(scn)
    coords = _Coords(scn, cfg)
    a0 = _initial_point(scn, cfg)
    q = _penalty_weights(scn, cfg, a0)
    z = coords.to_work(a0)
    nets = {b: _make_net(cfg, b, i) for i, b in enumerate(BLOCKS)}
    adams = {b: AdamState.fresh(nets[b].theta.size, lr=cfg.learn_rates[i])
             for i, b in enumerate(BLOCKS)}
    states = {b: OptimizerState.zeros(nets[b], z[b].size) for b in BLOCKS}
    counts = dict(zip(BLOCKS, cfg.inner_counts))
    learning = any(lr > 0 for lr in cfg.learn_rates)
    tapes = {b: [] for b in BLOCKS}
    loss_grads = {b: [] for b in BLOCKS}
    window, losses = [], []
    meta_steps = {b: 0 for b in BLOCKS}
    rec = _Recorder(scn, q)

    for k in range(1, cfg.k_outer + 1):
        for b in BLOCKS:
            tape = tapes[b] if learning else None
            states[b] = inner_block_update(b, coords, z, nets[b], states[b], counts[b], q,
                                           tape, outer=k)
            if learning:
                loss_grads[b].extend([None] * counts[b])
        a = coords.to_alloc(z)
        window.append(rec.record(k, a))
        if learning:
            for b in BLOCKS:
                # the window loss is a mean, so each end-of-iteration term weighs 1/k_up
                loss_grads[b][-1] = coords.grad(b, a, q) / cfg.k_up
        if k % cfg.k_up == 0:
            losses.append(accumulate_global_loss(window))
            window = []
            for b in BLOCKS:
                if learning:
                    g_theta = _clip(unrolled_backward(nets[b], tapes[b], loss_grads[b]),
                                    cfg.meta_grad_clip)
                else:
                    g_theta = np.zeros_like(nets[b].theta)
                nets[b].theta = adam_step(adams[b], nets[b].theta, g_theta)
                meta_steps[b] += 1
                tapes[b], loss_grads[b] = [], []
    return rec.artifacts(coords.to_alloc(z), {b: nets[b] for b in BLOCKS}, losses, meta_steps)


def _joint_segments(n):
    return {"alpha": slice(0, n), "eta": slice(n, 2 * n), "p": slice(2 * n, 3 * n),
            "wf": slice(3 * n, 5 * n)}


def unstructured_solve(scn: Scenario, cfg: MetaConfig = MetaConfig()) -> SolveArtifacts:
    """One learned optimizer over all variables, same inner-step budget and meta schedule."""
    preflight(scn)
    coords = _Coords(scn, cfg)
    a0 = _initial_point(scn, cfg)
    q = _penalty_weights(scn, cfg, a0)
    z = coords.to_work(a0)
    seg = _joint_segments(coords.n)
    net = _make_net(cfg, "joint", 99)
    adam = AdamState.fresh(net.theta.size, lr=cfg.learn_rates[0])
    state = OptimizerState.zeros(net, 5 * coords.n)
    steps = sum(cfg.inner_counts)
    learning = cfg.learn_rates[0] > 0
    tape, loss_grads, window, losses = [], [], [], []
    meta_steps = {"joint": 0}
    rec = _Recorder(scn, q)

    def joint_grad(a):
        return np.concatenate([coords.grad(b, a, q) for b in BLOCKS])

    for k in range(1, cfg.k_outer + 1):
        for j in range(steps):
            a = coords.to_alloc(z)
            g = joint_grad(a)
            _check_finite(g, "joint", k, j)
            delta, state, cache = optimizer_step(net, state, g,
                                                 where=f"in joint block at outer {k}, inner {j}")
            vjps = {}
            for b in BLOCKS:
                z[b], vjps[b] = coords.project(b, z[b] + delta[seg[b]])
            if learning:
                def vjp(gz, vjps=vjps):
                    return np.concatenate([gz[seg[b]] if vjps[b] is None else vjps[b](gz[seg[b]])
                                           for b in BLOCKS])
                tape.append(TapeStep(cache, vjp))
                loss_grads.append(None)
        a = coords.to_alloc(z)
        window.append(rec.record(k, a))
        if learning:
            loss_grads[-1] = joint_grad(a) / cfg.k_up
        if k % cfg.k_up == 0:
            losses.append(accumulate_global_loss(window))
            window = []
            if learning:
                g_theta = _clip(unrolled_backward(net, tape, loss_grads), cfg.meta_grad_clip)
            else:
                g_theta = np.zeros_like(net.theta)
            net.theta = adam_step(adam, net.theta, g_theta)
            meta_steps["joint"] += 1
            tape, loss_grads = [], []
    return rec.artifacts(coords.to_alloc(z), {"joint": net}, losses, meta_steps)
