"""Competitive-equilibrium solvers and an equilibrium certificate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .economy import FEAS_TOL, ParametricUtility, demand, kkt_demand, linear_demand
from .errors import ContractError

PRICE_FLOOR = 1e-12


@dataclass(frozen=True)
class CECertificate:
    clearing_gap: np.ndarray
    demand_gap: np.ndarray
    eps: float
    is_equilibrium: bool

    def to_dict(self) -> dict:
        return {
            "clearing_gap": self.clearing_gap.tolist(),
            "demand_gap": self.demand_gap.tolist(),
            "eps": self.eps,
            "is_equilibrium": self.is_equilibrium,
        }


@dataclass(frozen=True)
class MarketOutcome:
    """An allocation/price pair, plus solver bookkeeping."""

    allocation: np.ndarray
    prices: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    warning: str | None = None
    certificate: CECertificate | None = field(default=None, compare=False)

    @property
    def certified(self) -> bool:
        return self.certificate is not None and self.certificate.is_equilibrium

    def to_dict(self) -> dict:
        d = {
            "prices": self.prices.tolist(),
            "allocation": self.allocation.tolist(),
            "iterations": self.iterations,
            "residual": self.residual,
            "warning": self.warning,
        }
        if self.certificate is not None:
            d["certificate"] = self.certificate.to_dict()
        return d


def _bid_shares(utilities: Sequence[ParametricUtility], x: np.ndarray) -> np.ndarray:
    # x_ij times the marginal inner utility: theta x (linear), rho theta x^rho (CES),
    # theta x f / (f + (1-f) x)^2 (Amdahl)
    s = np.empty_like(x)
    for i, u in enumerate(utilities):
        s[i] = x[i] * u.theta * u.feature_grad(x[i])
    return s


def solve_ce_proportional_response(
    utilities: Sequence[ParametricUtility],
    endowments: np.ndarray,
    iters: int = 200,
    tol: float = 1e-10,
    init: np.ndarray | None = None,
    init_prices: np.ndarray | None = None,
) -> MarketOutcome:
    """Proportional-response dynamics for an exchange economy.

    Each iteration recomputes budgets ``e_i @ p`` from the current prices,
    splits every budget across goods in proportion to ``x_ij * d(inner u_i)/dx_ij``,
    sets prices to the total bids and hands out each good in proportion to bids.
    Prices stay normalised because total budget equals total price.  Stops
    early when the largest bid change falls below ``tol``.  ``init`` and
    ``init_prices`` warm-start the allocation and price state.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    e = np.asarray(endowments, dtype=float)
    n, m = e.shape
    if len(utilities) != n:
        raise ContractError("one utility per agent required")
    x = e.copy() if init is None else np.asarray(init, dtype=float).copy()
    p = np.full(m, 1.0 / m) if init_prices is None else np.asarray(init_prices, float) / np.sum(init_prices)
    bids = None
    warning = None
    it = 0
    change = np.inf
    for it in range(1, iters + 1):
        budget = e @ p
        s = _bid_shares(utilities, x)
        rows = s.sum(axis=1)
        dead = rows <= 0
        if np.any(dead):
            s[dead] = np.stack([u.theta for u, d in zip(utilities, dead) if d])
            rows = s.sum(axis=1)
        new_bids = budget[:, None] * s / rows[:, None]
        p = new_bids.sum(axis=0)
        idle = p < PRICE_FLOOR
        if np.any(idle):
            warning = "zero-bid good priced at floor"
            p = np.where(idle, PRICE_FLOOR, p)
        x = new_bids / p
        if np.any(idle):
            x[:, idle] = e[:, idle]
        p = p / p.sum()
        if bids is not None:
            change = float(np.max(np.abs(new_bids - bids)))
        bids = new_bids
        if change < tol:
            break
    return MarketOutcome(allocation=x, prices=p, iterations=it, residual=change, warning=warning)


def _auto_demand(u: ParametricUtility, p: np.ndarray, budget: float) -> np.ndarray:
    return linear_demand(u.theta, p, budget) if u.is_linear else kkt_demand(u, p, budget)


def excess_demand(utilities: Sequence[ParametricUtility], endowments: np.ndarray,
                  p: np.ndarray, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(demands, z)`` with ``z = sum_i d_i(p) - 1``."""
    budgets = np.asarray(endowments) @ p
    if method == "auto":
        X = np.stack([_auto_demand(u, p, b) for u, b in zip(utilities, budgets)])
    else:
        X = np.stack([demand(u, p, b, method=method) for u, b in zip(utilities, budgets)])
    return X, X.sum(axis=0) - 1.0


def solve_ce_tatonnement(
    utilities: Sequence[ParametricUtility],
    endowments: np.ndarray,
    step: float = 0.1,
    max_iters: int = 5000,
    tol: float = 1e-6,
    init: np.ndarray | None = None,
    demand_method: str = "auto",
    decay: bool = True,
) -> MarketOutcome:
    """Walrasian price adjustment ``p <- normalise(max(p + step_k z(p), floor))``.

    With ``decay`` the step shrinks as ``step / sqrt(1 + k / 100)`` and the
    reported prices are the running average over the second half of the
    iterates; this damps the chatter of discontinuous (linear) demand.
    Non-convergence is reported through ``warning`` rather than raised.
    """
    e = np.asarray(endowments, dtype=float)
    n, m = e.shape
    p = np.full(m, 1.0 / m) if init is None else np.asarray(init, dtype=float) / np.sum(init)
    X, z = excess_demand(utilities, e, p, demand_method)
    best_p, best_res = p, float(np.max(np.abs(z)))
    avg, n_avg = np.zeros(m), 0
    k = 0
    for k in range(1, max_iters + 1):
        res = float(np.max(np.abs(z)))
        if res < best_res:
            best_p, best_res = p, res
        if res <= tol:
            break
        eta = step / np.sqrt(1.0 + k / 100.0) if decay else step
        p = np.maximum(p + eta * z, PRICE_FLOOR)
        p = p / p.sum()
        if decay and k > max_iters // 2:
            avg += p
            n_avg += 1
        X, z = excess_demand(utilities, e, p, demand_method)
    res = float(np.max(np.abs(z)))
    warning = None
    if res > tol:
        if n_avg:
            p_avg = avg / n_avg
            X_avg, z_avg = excess_demand(utilities, e, p_avg, demand_method)
            p, X, res = p_avg, X_avg, float(np.max(np.abs(z_avg)))
        if best_res < res:
            p = best_p
            X, z = excess_demand(utilities, e, p, demand_method)
            res = float(np.max(np.abs(z)))
        warning = f"tatonnement did not reach tol {tol:g} (residual {res:.3g})" if res > tol else None
    col = X.sum(axis=0)
    scale = np.minimum(1.0, 1.0 / np.where(col > 0, col, 1.0))
    return MarketOutcome(allocation=X * scale, prices=p, iterations=k, residual=res, warning=warning)


def certify_ce(
    outcome: MarketOutcome,
    utilities: Sequence[ParametricUtility],
    endowments: np.ndarray,
    eps: float = 1e-3,
    method: str = "projected_ascent",
) -> CECertificate:
    x = np.asarray(outcome.allocation, dtype=float)
    p = np.asarray(outcome.prices, dtype=float)
    clearing = x.sum(axis=0) - 1.0
    budgets = np.asarray(endowments, dtype=float) @ p
    gap = np.empty(len(utilities))
    for i, (u, b) in enumerate(zip(utilities, budgets)):
        d = demand(u, p, b * (1.0 + FEAS_TOL), method=method)
        gap[i] = float(u(d)) - float(u(x[i]))
    ok = bool(np.max(clearing) <= eps and np.max(gap) <= eps)
    return CECertificate(clearing_gap=clearing, demand_gap=gap, eps=eps, is_equilibrium=ok)


def solve_ce(utilities, endowments, solver: str = "pr", **kwargs) -> MarketOutcome:
    if solver == "pr":
        return solve_ce_proportional_response(utilities, endowments, **kwargs)
    if solver == "tatonnement":
        return solve_ce_tatonnement(utilities, endowments, **kwargs)
    raise ContractError(f"unknown solver {solver!r}")


def reference_equilibrium(utilities, endowments, eps: float = 1e-2, iters: int = 5000) -> MarketOutcome:
    """Solve with proportional response and attach a certificate."""
    out = solve_ce_proportional_response(utilities, endowments, iters=iters)
    cert = certify_ce(out, utilities, endowments, eps=eps)
    return MarketOutcome(out.allocation, out.prices, out.iterations, out.residual, out.warning, cert)
