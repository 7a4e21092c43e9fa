"""Counterfactual queries, Probability of Necessity, and the minimum-cost solver.

Observations are full node-ordered vectors ``[x_1..x_d, y]``; intervention
vectors ``x_star`` cover the ``d`` non-target variables only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import FactualNotAbnormal, InterventionOnTarget, LengthMismatch, ShapeMismatch
from .graph import ancestors, screen_effective
from .scm import make_rng


@dataclass
class CostModel:
    costs: Optional[Sequence[float]] = None  # None -> 1 for every variable
    p: int = 2
    l0: float = 0.0

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("distance exponent must be 1 or 2")
        if self.l0 < 0:
            raise ValueError("sparsity penalty must be non-negative")
        if self.costs is not None and np.any(np.asarray(self.costs, float) < 0):
            raise ValueError("unit costs must be non-negative")

    def unit(self, d: int) -> np.ndarray:
        if self.costs is None:
            return np.ones(d)
        c = np.asarray(self.costs, dtype=float)
        if c.shape != (d,):
            raise LengthMismatch(f"{c.size} unit costs for {d} variables")
        return c


@dataclass
class DecisionOpts:
    iota: float = 0.9
    threshold: Optional[float] = None
    samples: int = 64
    tau: Optional[float] = None       # None -> 0.05 * std(y) of the model
    restarts: int = 8
    max_iter: int = 200
    step_tol: float = 1e-6
    constraint_tol: float = 1e-4
    verify_rounds: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.iota <= 1.0:
            raise ValueError("iota must lie in (0, 1]")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.threshold is None:
            raise ValueError("an anomaly threshold is required")
        if self.restarts < 0 or self.max_iter < 1:
            raise ValueError("restarts must be >= 0 and max_iter >= 1")


@dataclass
class InterventionPlan:
    x_star: np.ndarray
    delta: np.ndarray
    effective: list
    cost: float
    pn: float
    pn_stderr: float
    feasible: bool
    iterations: int = 0
    restart: int = -1
    ranking: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "x_star": [float(v) for v in self.x_star],
            "delta": [float(v) for v in self.delta],
            "effective": [int(i) for i in self.effective],
            "cost": float(self.cost),
            "pn": float(self.pn),
            "pn_stderr": float(self.pn_stderr),
            "feasible": bool(self.feasible),
            "iterations": int(self.iterations),
            "restart": int(self.restart),
            "ranking": [int(i) for i in self.ranking],
        }


def _obs(model, obs):
    obs = np.asarray(obs, dtype=float).ravel()
    if obs.size != model.graph.node_count:
        raise ShapeMismatch(f"observation has {obs.size} entries, graph has "
                            f"{model.graph.node_count} nodes")
    return obs


def _check_clamp(model, interventions):
    g = model.graph
    for i in interventions:
        if i == g.target:
            raise InterventionOnTarget("the target cannot be intervened on")
        if not 0 <= i < g.node_count:
            raise ShapeMismatch(f"no node {i}")


def counterfactual(model, obs, u, interventions: Mapping[int, float],
                   eps: Optional[np.ndarray] = None) -> np.ndarray:
    """Abduct, clamp, predict.

    With ``eps`` (shape ``(S, N)``) the noise is drawn from the posterior and
    ``S`` counterfactual rows are returned; otherwise the posterior mean is
    used and a single vector comes back.
    """
    obs = _obs(model, obs)
    _check_clamp(model, interventions)
    if not interventions:
        return obs.copy() if eps is None else np.tile(obs, (len(eps), 1))
    mq, lvq = model.abduct(obs[None], u)
    if eps is None:
        return model.propagate(obs[None], mq, u, dict(interventions))[0]
    z = mq + np.exp(0.5 * lvq) * eps
    rows = np.broadcast_to(obs, z.shape)
    return model.propagate(rows, z, u, dict(interventions))


def cost(cm: CostModel, x_star, x) -> float:
    x_star = np.asarray(x_star, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_star.shape != x.shape:
        raise LengthMismatch(f"lengths differ: {x_star.size} vs {x.size}")
    diff = np.abs(x_star - x)
    c = cm.unit(x.size)
    return float(np.sum(c * diff ** cm.p) + cm.l0 * np.count_nonzero(diff))


class _PnEvaluator:
    """PN of clamp sets for one factual sample, on a fixed set of noise draws."""

    def __init__(self, model, obs, u, threshold: float):
        self.model = model
        self.obs = obs
        self.u = np.atleast_2d(np.asarray(u, dtype=float))
        self.t = threshold
        self.mq, self.lvq = model.abduct(obs[None], self.u)
        self.sd = np.exp(0.5 * self.lvq)
        self.target = model.graph.target

    def draws(self, seed, *keys, n: int):
        eps = make_rng(seed, "pn-draws", *keys).standard_normal((n, self.obs.size))
        return self.mq + self.sd * eps

    def y_star(self, clamp: Mapping[int, float], z) -> np.ndarray:
        if not clamp:
            # the observed row is the factual world; noise draws do not move it
            return np.full(len(z), self.obs[self.target])
        rows = np.broadcast_to(self.obs, z.shape)
        return self.model.propagate(rows, z, self.u, clamp)[:, self.target]

    def hard(self, clamp, z) -> float:
        return float(np.mean(self.y_star(clamp, z) <= self.t))

    def smooth(self, clamp, z, tau) -> float:
        return float(np.mean(expit((self.t - self.y_star(clamp, z)) / tau)))


def _changed(x_star, x, atol=0.0):
    return {int(i): float(x_star[i]) for i in np.flatnonzero(np.abs(x_star - x) > atol)}


def estimate_pn(model, obs, u, x_star, opts: DecisionOpts, eps: Optional[np.ndarray] = None):
    """Return ``(pn, smooth_pn)`` for the intervention that moves ``x`` to ``x_star``.

    Only coordinates that differ from the factual value are clamped.
    """
    obs = _obs(model, obs)
    t = opts.threshold
    if t is None:
        raise ValueError("an anomaly threshold is required")
    if not obs[model.graph.target] > t:
        raise FactualNotAbnormal(f"y = {obs[model.graph.target]:.4g} is not above t = {t:.4g}")
    d = model.graph.d
    x_star = np.asarray(x_star, dtype=float)
    if x_star.size != d:
        raise LengthMismatch(f"x_star has {x_star.size} entries, expected {d}")
    ev = _PnEvaluator(model, obs, u, t)
    if eps is None:
        z = ev.draws(opts.seed, "estimate", n=opts.samples)
    else:
        z = ev.mq + ev.sd * np.asarray(eps, dtype=float)
    clamp = _changed(x_star, obs[:d])
    tau = opts.tau if opts.tau is not None else 0.05 * model.y_std
    return ev.hard(clamp, z), ev.smooth(clamp, z, tau)


def rank_variables(plan: InterventionPlan, cm: CostModel) -> list:
    delta = np.asarray(plan.delta, dtype=float)
    score = cm.unit(delta.size) * np.abs(delta)
    eff = set(int(i) for i in plan.effective)
    key = lambda i: (0 if i in eff else 1, -score[i], i)
    return sorted(range(delta.size), key=key)


# -- solver ---------------------------------------------------------------

def _smooth_cost(c, delta, p):
    if p == 2:
        return float(np.sum(c * delta ** 2))
    # p = 1: a tiny smoothing keeps SLSQP's line search well behaved
    return float(np.sum(c * np.sqrt(delta ** 2 + 1e-12)))


def _optimize_support(ev, support, x, delta0, c, cm, opts, z, tau_final, y_std):
    """SLSQP on the coordinates in ``support`` with a logistic PN constraint."""
    support = list(support)
    iters = 0
    v = np.asarray(delta0, dtype=float).copy()
    if not support:
        return v, 0

    def clamp_of(vec):
        return {i: x[i] + vec[k] for k, i in enumerate(support)}

    # anneal the logistic temperature so the constraint has slope far from the boundary
    taus = sorted({max(tau_final, 0.5 * y_std), max(tau_final, 0.15 * y_std), tau_final},
                  reverse=True)
    for tau in taus:
        res = minimize(
            lambda vec: _smooth_cost(c[support], vec, cm.p), v, method="SLSQP",
            constraints=[{"type": "ineq",
                          "fun": lambda vec, tau=tau: ev.smooth(clamp_of(vec), z, tau) - opts.iota}],
            options={"maxiter": opts.max_iter, "ftol": opts.step_tol ** 2})
        iters += int(res.nit)
        # a steep logistic can throw SLSQP into the flat region; keep the last
        # point that still satisfies the constraint
        if (np.all(np.isfinite(res.x))
                and ev.smooth(clamp_of(res.x), z, tau) >= opts.iota - opts.constraint_tol):
            v = res.x
    return v, iters


def _boundary(ev, x, support, v, z, target, steps=40):
    """Shrink ``v`` toward zero along its ray while the hard PN stays >= target."""
    def pn_at(s):
        return ev.hard({i: x[i] + s * v[k] for k, i in enumerate(support)}, z)

    if pn_at(1.0) < target:
        return None
    lo, hi = 0.0, 1.0
    if pn_at(0.0) >= target:
        return 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if pn_at(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def _finalize(ev, model, x, x_star, cm, opts, seed_keys):
    """Screen, reset dropped coordinates, re-estimate PN on fresh draws."""
    eff = sorted(int(i) for i in screen_effective(model.graph, x, x_star))
    x_clean = x.copy()
    x_clean[eff] = x_star[eff]
    clamp = {int(i): float(x_clean[i]) for i in eff}
    z = ev.draws(opts.seed, "verify", *seed_keys, n=opts.samples)
    pn = ev.hard(clamp, z)
    return x_clean, eff, pn


def _make_plan(x, x_star, eff, pn, n, cm, opts, iters, restart):
    plan = InterventionPlan(
        x_star=x_star, delta=x_star - x, effective=eff, cost=cost(cm, x_star, x), pn=pn,
        pn_stderr=float(np.sqrt(pn * (1.0 - pn) / n)), feasible=bool(pn >= opts.iota),
        iterations=iters, restart=restart)
    plan.ranking = rank_variables(plan, cm)
    return plan


def _candidate_starts(model, x, opts):
    """Factual start over all Y-ancestors, then single-variable warm starts."""
    g = model.graph
    anc = sorted(i for i in ancestors(g, [g.target]) if i != g.target)
    nm = np.asarray(model.normal_mean, dtype=float)[:g.d]
    ns = np.maximum(np.asarray(model.normal_std, dtype=float)[:g.d], 1e-8)
    # most anomalous first when the restart budget is smaller than the pool
    order = sorted(anc, key=lambda i: (-abs(x[i] - nm[i]) / ns[i], i))[:opts.restarts]
    starts = [(tuple(anc), np.zeros(len(anc)))]
    for i in sorted(order):
        starts.append(((i,), np.array([nm[i] - x[i]])))
    return starts


def solve_min_cost(model, obs, u, cm: CostModel, opts: DecisionOpts) -> InterventionPlan:
    """Least-cost intervention whose PN clears ``opts.iota``.

    Returns the cheapest feasible plan over all starts (warm starts themselves
    included as candidates), else the plan with the highest PN, flagged
    infeasible.
    """
    opts.validate()
    obs = _obs(model, obs)
    g = model.graph
    t = opts.threshold
    if not obs[g.target] > t:
        raise FactualNotAbnormal(f"y = {obs[g.target]:.4g} is not above t = {t:.4g}")
    d = g.d
    x = obs[:d].copy()
    c = cm.unit(d)
    ev = _PnEvaluator(model, obs, u, t)
    y_std = float(model.y_std)
    tau = opts.tau if opts.tau is not None else 0.05 * y_std
    z = ev.draws(opts.seed, "solve", n=opts.samples)  # common random numbers

    plans = []
    for r, (support, v0) in enumerate(_candidate_starts(model, x, opts)):
        sup = list(support)
        if len(sup) == 1:
            # the warm start itself competes as a plan
            ws = x.copy()
            ws[sup[0]] += v0[0]
            xs, eff, pn = _finalize(ev, model, x, ws, cm, opts, ("warm", r))
            plans.append(_make_plan(x, xs, eff, pn, opts.samples, cm, opts, 0, r))
        v, iters = _optimize_support(ev, sup, x, v0, c, cm, opts, z, tau, y_std)
        s = _boundary(ev, x, sup, v, z, opts.iota)
        if s is None:
            s = 1.0
        for k in range(max(1, opts.verify_rounds)):
            xs = x.copy()
            xs[sup] += s * v
            xs, eff, pn = _finalize(ev, model, x, xs, cm, opts, ("opt", r, k))
            if pn >= opts.iota or s >= 1.0:
                break
            s = 0.5 * (s + 1.0)  # back off toward the optimizer's point
        plans.append(_make_plan(x, xs, eff, pn, opts.samples, cm, opts, iters, r))

    feasible = [p for p in plans if p.feasible]
    if feasible:
        return min(feasible, key=lambda p: (p.cost, p.restart))
    return max(plans, key=lambda p: (p.pn, -p.cost, -p.restart))


def save_plan(plan: InterventionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True) + "\n")
