"""Brute-force reference solvers for the alternating-minimisation subproblems.

Each oracle re-derives its quantity from the plain latency and cost formulas
below, without calling into the solver under test.
"""

import itertools
import math

import numpy as np

from icsc_offload.model import Allocation, check_feasibility
from icsc_offload.scenario import ScenarioSpec, build_scenario


def rate(w, p, g, sigma2):
    return w * math.log2(1.0 + p * g / sigma2)


def t_rsu(t, l, alpha, eta, p, w, f):
    up = 0.0
    if alpha * eta > 0:
        r = rate(w, p, l.g, l.sigma2)
        up = math.inf if r <= 0 else alpha * eta * t.c / r
    return up + (1 - alpha) * eta * t.b_instr / f + eta * t.b / f


def t_local(t, eta):
    return (1 - eta) * t.b / t.f_local


def task_cost(t, l, cm, alpha, eta, p, w, f):
    e_tx = 0.0
    if alpha * eta > 0:
        e_tx = cm.e1 * p * alpha * eta * t.c / rate(w, p, l.g, l.sigma2)
    e_loc = cm.e2 * (1 - eta) * t.c * t.f_local ** 2
    return e_tx + e_loc + cm.mu1 * w + cm.mu2 * f


# ------------------------------------------------------------------ instances

def random_instance(rng, n_max=4, **spec_kw):
    """Random scenario plus a random allocation for subproblem tests."""
    n = int(rng.integers(1, n_max + 1))
    spec = ScenarioSpec(seed=int(rng.integers(2 ** 31)), vehicle_count=n, **spec_kw)
    scn = build_scenario(spec)
    a = Allocation(alpha=rng.integers(0, 2, n).astype(float), eta=rng.uniform(0, 1, n),
                   p=scn.link_batch.p_max * rng.uniform(0.01, 1, n),
                   w=scn.budget.w_total / n * rng.uniform(0.05, 1, n),
                   f=scn.budget.f_total / n * rng.uniform(0.05, 1, n))
    return scn, a


def feasible_instance(rng, n_range=(2, 10)):
    """Random scenario and allocation that satisfies every constraint on an equal split."""
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        scn = build_scenario(ScenarioSpec(seed=int(rng.integers(2 ** 31)), vehicle_count=n))
        a = Allocation(alpha=rng.integers(0, 2, n).astype(float), eta=rng.uniform(0, 1, n),
                       p=scn.link_batch.p_max * rng.uniform(0.3, 1, n),
                       w=np.full(n, scn.budget.w_total / n), f=np.full(n, scn.budget.f_total / n))
        if check_feasibility(scn, a).feasible:
            return scn, a


# -------------------------------------------------------------------- oracles

def enumerate_modes(scn, a):
    """Exhaustive search over all mode vectors.

    Tasks that meet the deadline in neither mode are left unconstrained.
    Returns the minimal transmission energy and the set of optimal vectors.
    """
    n = scn.i_count
    cm = scn.costs

    def energy(i, m):
        t, l = scn.tasks[i], scn.links[i]
        if m * a.eta[i] == 0:
            return 0.0
        r = rate(a.w[i], a.p[i], l.g, l.sigma2)
        return math.inf if r <= 0 else cm.e1 * a.p[i] * m * a.eta[i] * t.c / r

    def ok(i, m):
        t, l = scn.tasks[i], scn.links[i]
        return t_rsu(t, l, m, a.eta[i], a.p[i], a.w[i], a.f[i]) <= t.t_max * (1 + 1e-9)

    constrained = [ok(i, 0) or ok(i, 1) for i in range(n)]
    best, arg = math.inf, []
    for combo in itertools.product((0, 1), repeat=n):
        if not all(ok(i, m) for i, m in enumerate(combo) if constrained[i]):
            continue
        val = sum(energy(i, m) for i, m in enumerate(combo) if constrained[i])
        if math.isinf(best) or val < best * (1 - 1e-15):
            best, arg = val, [combo]
        elif val <= best * (1 + 1e-15):
            arg.append(combo)
    return best, arg, constrained


def grid_ratio(t, l, cm, alpha, p, w, f, points=100_001):
    """Best feasible offloading ratio on a uniform grid; ``(eta, cost)`` or ``None``."""
    eta = np.linspace(0.0, 1.0, points)
    r = rate(w, p, l.g, l.sigma2)
    up = np.zeros_like(eta) if alpha == 0 else (alpha * eta * t.c / r if r > 0 else np.full_like(eta, math.inf))
    trsu = up + (1 - alpha) * eta * t.b_instr / f + eta * t.b / f
    tloc = (1 - eta) * t.b / t.f_local
    e_tx = np.zeros_like(eta) if alpha == 0 else cm.e1 * p * alpha * eta * t.c / r
    cost = e_tx + cm.e2 * (1 - eta) * t.c * t.f_local ** 2 + cm.mu1 * w + cm.mu2 * f
    ok = (trsu <= t.t_max) & (tloc <= t.t_max)
    if not ok.any():
        return None
    j = int(np.argmin(np.where(ok, cost, np.inf)))
    return float(eta[j]), float(cost[j])


def bisect_power(t, l, alpha, eta, w, f, iters=200):
    """Smallest power meeting the RSU deadline, by bisection on ``[0, p_max]``."""
    if t_rsu(t, l, alpha, eta, l.p_max, w, f) > t.t_max:
        return None
    lo, hi = 0.0, l.p_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if t_rsu(t, l, alpha, eta, mid, w, f) <= t.t_max:
            hi = mid
        else:
            lo = mid
    return hi


def lagrangian(scn, a, dual, w, f):
    """Lagrangian of the bandwidth/compute subproblem at multipliers ``dual``."""
    cm = scn.costs
    val = dual.u * (np.sum(f) - scn.budget.f_total) + dual.v * (np.sum(w) - scn.budget.w_total)
    for i, (t, l) in enumerate(zip(scn.tasks, scn.links)):
        al, eta, p = a.alpha[i], a.eta[i], a.p[i]
        e_tx = 0.0
        if al * eta > 0:
            e_tx = cm.e1 * p * al * eta * t.c / rate(w[i], p, l.g, l.sigma2)
        val += e_tx + cm.mu1 * w[i] + cm.mu2 * f[i]
        val += dual.q[i] * (t_rsu(t, l, al, eta, p, w[i], f[i]) - t.t_max)
    return val


def convex_wf(scn, a):
    """Bandwidth/compute split from a general-purpose constrained solver.

    Solves the convex subproblem with SLSQP on log-shares of an equal split,
    using analytic gradients.  Every constraint is divided by its own scale.
    Returns ``(w, f, objective)`` of transmission energy plus payment.
    """
    from scipy.optimize import minimize

    n = scn.i_count
    cm, bud = scn.costs, scn.budget
    ws, fs = bud.w_total / n, bud.f_total / n
    tb = scn.task_batch
    se = np.log2(1 + a.p * scn.link_batch.g / scn.link_batch.sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(a.alpha * a.eta > 0, a.alpha * a.eta * tb.c / (se * ws), 0.0) / tb.t_max
    work = ((1 - a.alpha) * a.eta * tb.b_instr + a.eta * tb.b) / fs / tb.t_max
    e_coef = cm.e1 * a.p * up * tb.t_max
    scale = n * (cm.mu1 * ws + cm.mu2 * fs)

    def unpack(z):
        return np.exp(z[:n]), np.exp(z[n:])

    def obj(z):
        x, y = unpack(z)
        return float(np.sum(e_coef / x + cm.mu1 * ws * x + cm.mu2 * fs * y)) / scale

    def obj_grad(z):
        x, y = unpack(z)
        return np.concatenate([-e_coef / x + cm.mu1 * ws * x, cm.mu2 * fs * y]) / scale

    active = (up > 0) | (work > 0)
    cons = [
        dict(type="ineq", fun=lambda z: 1.0 - np.sum(unpack(z)[0]) / n,
             jac=lambda z: np.concatenate([-unpack(z)[0] / n, np.zeros(n)])),
        dict(type="ineq", fun=lambda z: 1.0 - np.sum(unpack(z)[1]) / n,
             jac=lambda z: np.concatenate([np.zeros(n), -unpack(z)[1] / n])),
        dict(type="ineq",
             fun=lambda z: (1.0 - up / unpack(z)[0] - work / unpack(z)[1])[active],
             jac=lambda z: np.hstack([np.diag(up / unpack(z)[0]),
                                      np.diag(work / unpack(z)[1])])[active]),
    ]
    # start from the equal split, which the caller guarantees is feasible
    z0 = np.zeros(2 * n)
    res = minimize(obj, z0, jac=obj_grad, constraints=cons, method="SLSQP",
                   bounds=[(-40.0, math.log(n))] * (2 * n),
                   options=dict(maxiter=2000, ftol=1e-14))
    x, y = unpack(res.x)
    return x * ws, y * fs, obj(res.x) * scale


# --------------------------------------------------------- learned optimizer

def theta_gradient_check(seed, hidden, steps, n=3, eps=1e-5, gain=1.0, project=False):
    """Largest relative gap between the unrolled backward pass and central differences.

    The loss is a fixed random linear functional of every iterate.  Relative
    error is ``|a - d| / max(|a|, |d|, 1e-4 * max|d|)`` so entries that are
    pure round-off do not dominate.
    """
    from icsc_offload.learned_optimizer import OptimizerNet, unroll, unrolled_backward

    rng = np.random.default_rng(seed)
    net = OptimizerNet.init(hidden, 2, seed=seed, gain=gain, zero_head=False)
    z0 = rng.uniform(0.2, 0.8, n)
    grads = [rng.normal(0, 1, n) * 10 ** rng.uniform(-3, 3, n) for _ in range(steps)]
    weights = [rng.normal(0, 1, n) for _ in range(steps)]

    def box(z):
        inside = (z >= 0) & (z <= 1)
        return np.clip(z, 0, 1), (lambda g: g * inside)

    proj = box if project else None

    def loss(theta):
        trial = OptimizerNet(theta, hidden, 2, gain)
        zs, _ = unroll(trial, z0, grads, proj)
        return sum(float(w @ z) for w, z in zip(weights, zs))

    _, tape = unroll(net, z0, grads, proj)
    analytic = unrolled_backward(net, tape, weights)
    fd = np.empty_like(net.theta)
    for k in range(net.theta.size):
        up, dn = net.theta.copy(), net.theta.copy()
        up[k] += eps
        dn[k] -= eps
        fd[k] = (loss(up) - loss(dn)) / (2 * eps)
    floor = 1e-4 * np.max(np.abs(fd))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / denom))
