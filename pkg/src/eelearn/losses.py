"""CE, sharing-incentive, Pareto-efficiency and fair-division losses."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from itertools import product
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .economy import FEAS_TOL, Economy, demand, monte_carlo_search
from .equilibrium import MarketOutcome
from .errors import ContractError

PARETO_TOL = 1e-12
MAX_GRID_POINTS = 40_000_000


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_si: float
    l_pe_upper: float
    l_fd_upper: float
    l_pe_exact: float | None = None
    mc_samples_used: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CumulativeLoss:
    l_ce: np.ndarray
    l_fd_upper: np.ndarray

    @property
    def final_ce(self) -> float:
        return float(self.l_ce[-1]) if self.l_ce.size else 0.0

    @property
    def final_fd(self) -> float:
        return float(self.l_fd_upper[-1]) if self.l_fd_upper.size else 0.0


def _utilities(economy: Economy, x: np.ndarray) -> np.ndarray:
    return np.array([float(u(np.clip(xi, 0.0, 1.0))) for u, xi in zip(economy.utilities, x)])


def ce_gaps(
    economy: Economy,
    outcome: MarketOutcome,
    demand_method: str = "monte_carlo",
    mc_budget: int = 50,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, int]:
    """Per-agent ``(best affordable utility - achieved utility)^+``.

    The candidate set for the best affordable bundle always includes the
    endowment and, when affordable, the current allocation.  Returns the gaps
    and the total number of Monte-Carlo samples accepted.
    """
    x = np.asarray(outcome.allocation, dtype=float)
    p = np.asarray(outcome.prices, dtype=float)
    budgets = economy.budgets(p)
    achieved = _utilities(economy, x)
    if demand_method == "monte_carlo":
        seeds = (rng if rng is not None else np.random.default_rng()).spawn(economy.n)
    gaps = np.empty(economy.n)
    used = 0
    for i, u in enumerate(economy.utilities):
        best = float(u(economy.endowments[i]))
        if p @ x[i] <= budgets[i] * (1.0 + FEAS_TOL):
            best = max(best, achieved[i])
        if demand_method == "monte_carlo":
            _, val, acc = monte_carlo_search(u, p, budgets[i], mc_budget, seeds[i])
            used += acc
        else:
            d = demand(u, p, budgets[i], method=demand_method)
            val = float(u(d))
        best = max(best, val)
        gaps[i] = max(0.0, best - achieved[i])
    return gaps, used


def loss_ce(
    economy: Economy,
    outcome: MarketOutcome,
    demand_method: str = "monte_carlo",
    mc_budget: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    gaps, _ = ce_gaps(economy, outcome, demand_method, mc_budget, rng)
    return float(gaps.sum())


def loss_si(economy: Economy, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    gap = _utilities(economy, economy.endowments) - _utilities(economy, x)
    return float(np.maximum(gap, 0.0).sum())


def loss_pe_upper(economy: Economy, x: np.ndarray, reference: MarketOutcome) -> float:
    """Upper bound on the PE loss: shortfall against a certified equilibrium."""
    if not reference.certified:
        raise ContractError("loss_pe_upper needs a certified equilibrium reference")
    gap = _utilities(economy, reference.allocation) - _utilities(economy, np.asarray(x, float))
    return float(np.maximum(gap, 0.0).sum())


# ---------------------------------------------------------------------------
# Brute-force PE loss on an allocation grid
# ---------------------------------------------------------------------------

def _bundle_grid(m: int, k: int) -> np.ndarray:
    """All integer vectors in {0..k}^m, first coordinate fastest."""
    axes = np.meshgrid(*([np.arange(k + 1)] * m), indexing="ij")
    return np.stack([a.ravel(order="F") for a in axes], axis=1)


def _round(v: np.ndarray) -> np.ndarray:
    return np.round(v / PARETO_TOL) * PARETO_TOL


def _nondominated_2d(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    order = np.lexsort((-u2, -u1))
    a, b = u1[order], u2[order]
    keep = np.ones(a.size, dtype=bool)
    # a point is dominated by an earlier one with larger u1 and u2 >= its own,
    # or by an earlier one with equal u1 and strictly larger u2
    grp = np.concatenate([[True], a[1:] != a[:-1]])
    gid = np.cumsum(grp) - 1
    grp_max = np.maximum.reduceat(b, np.flatnonzero(grp))
    prev = np.concatenate([[-np.inf], np.maximum.accumulate(grp_max)[:-1]])
    keep &= ~(prev[gid] >= b)
    keep &= ~(grp_max[gid] > b)
    out = np.empty(a.size, dtype=bool)
    out[order] = keep
    return out


def _pe_loss_two(U1, U2, bundles, k, target):
    idx_full = _index(np.full_like(bundles, k) - bundles, k)
    u1, u2 = _round(U1), _round(U2[idx_full])
    keep = _nondominated_2d(u1, u2)
    vals = np.maximum(U1 - target[0], 0) + np.maximum(U2[idx_full] - target[1], 0)
    return float(vals[keep].min())


def _index(b: np.ndarray, k: int) -> np.ndarray:
    m = b.shape[-1]
    w = (k + 1) ** np.arange(m)
    return b @ w


def _pe_loss_three(U, bundles, k, target):
    U1, U2, U3 = (_round(u) for u in U)
    # ranks of agent-2 values, 0 = largest
    vals2 = np.unique(U2)[::-1]
    rank2 = np.searchsorted(-vals2, -U2)
    R = vals2.size
    prev_best = np.full(R, -np.inf)  # max u3 at each u2 rank over strictly larger u1
    best = np.inf
    keys1 = np.unique(U1)[::-1]
    for v1 in keys1:
        group = np.flatnonzero(U1 == v1)
        pts_b, pts_c, pts_a = [], [], []
        for a in group:
            room = k - bundles[a]
            sub = np.indices(room + 1).reshape(room.size, -1).T
            bs = _index(sub, k)
            cs = _index(room - sub, k)
            pts_a.append(np.full(bs.size, a))
            pts_b.append(bs)
            pts_c.append(cs)
        a_idx = np.concatenate(pts_a)
        b_idx = np.concatenate(pts_b)
        c_idx = np.concatenate(pts_c)
        r = rank2[b_idx]
        u3 = U3[c_idx]
        here = np.full(R, -np.inf)
        np.maximum.at(here, r, u3)
        dom = np.maximum.accumulate(prev_best)[r] >= u3
        excl = np.concatenate([[-np.inf], np.maximum.accumulate(here)[:-1]])
        dom |= excl[r] >= u3
        dom |= here[r] > u3
        ok = ~dom
        if np.any(ok):
            v = (np.maximum(U[0][a_idx[ok]] - target[0], 0)
                 + np.maximum(U[1][b_idx[ok]] - target[1], 0)
                 + np.maximum(U[2][c_idx[ok]] - target[2], 0))
            best = min(best, float(v.min()))
        np.maximum(prev_best, here, out=prev_best)
    return best


def _compositions(n: int, k: int) -> np.ndarray:
    """All length-n nonnegative integer vectors summing to k."""
    out = []
    for c in product(range(k + 1), repeat=n - 1):
        s = sum(c)
        if s <= k:
            out.append(c + (k - s,))
    return np.array(out, dtype=int)


def _pe_loss_generic(economy: Economy, k: int, target: np.ndarray) -> float:
    # every agent holds a bundle; each good's shares form a composition of k
    comps = _compositions(economy.n, k)
    per_good = [comps] * economy.m
    n_pts = comps.shape[0] ** economy.m
    if n_pts > 200_000:
        raise ContractError("grid too large for the pairwise Pareto filter; use loss_pe_upper")
    allocs = np.array([np.stack(c, axis=1) for c in product(*per_good)]) / k
    U = np.stack([economy.utilities[i](allocs[:, i, :]) for i in range(economy.n)], axis=1)
    Ur = _round(U)
    keep = np.ones(n_pts, dtype=bool)
    for s in range(0, n_pts, 2048):
        blk = Ur[s:s + 2048]
        ge = np.all(Ur[None, :, :] >= blk[:, None, :], axis=2)
        gt = np.any(Ur[None, :, :] > blk[:, None, :], axis=2)
        keep[s:s + 2048] = ~np.any(ge & gt, axis=1)
    vals = np.maximum(U - target, 0.0).sum(axis=1)
    return float(vals[keep].min())


def loss_pe_exact_small(economy: Economy, x: np.ndarray, grid_step: float = 0.05) -> float:
    """PE loss by enumeration: min over grid-Pareto-efficient allocations.

    Only exhaustive allocations are enumerated: with strictly increasing
    utilities every allocation that leaves some resource unassigned is
    dominated by one that hands it out, so the Pareto set is unchanged.
    Domination uses a 1e-12 tolerance.  Limited to ``n * m <= 6``.
    """
    n, m = economy.n, economy.m
    if n * m > 6:
        raise ContractError("loss_pe_exact_small is limited to n*m <= 6; use loss_pe_upper")
    k = int(round(1.0 / grid_step))
    if k < 1 or abs(k * grid_step - 1.0) > 1e-9:
        raise ContractError("grid_step must divide 1")
    target = _utilities(economy, np.asarray(x, float))
    if n == 1:
        u_all = float(economy.utilities[0](np.ones(m)))
        return max(0.0, u_all - target[0])
    bundles = _bundle_grid(m, k)
    if comb(k + n - 1, n - 1) ** m > MAX_GRID_POINTS:
        raise ContractError("grid too large; increase grid_step or use loss_pe_upper")
    X = bundles / k
    if n == 2:
        U = [economy.utilities[i](X) for i in range(2)]
        return _pe_loss_two(U[0], U[1], bundles, k, target)
    if n == 3:
        U = [economy.utilities[i](X) for i in range(3)]
        return _pe_loss_three(U, bundles, k, target)
    return _pe_loss_generic(economy, k, target)


def loss_fd(
    economy: Economy,
    x: np.ndarray,
    reference: MarketOutcome,
    l_ce: float = 0.0,
    mc_samples_used: int = 0,
    pe_grid_step: float | None = None,
) -> LossReport:
    si = loss_si(economy, x)
    pe = loss_pe_upper(economy, x, reference)
    exact = None if pe_grid_step is None else loss_pe_exact_small(economy, x, pe_grid_step)
    return LossReport(l_ce=l_ce, l_si=si, l_pe_upper=pe, l_fd_upper=max(pe, si),
                      l_pe_exact=exact, mc_samples_used=mc_samples_used)


def cumulative(records: Iterable[LossReport]) -> CumulativeLoss:
    recs = list(records)
    ce = np.array([r.l_ce for r in recs], dtype=float)
    fd = np.array([r.l_fd_upper for r in recs], dtype=float)
    return CumulativeLoss(l_ce=_prefix(ce), l_fd_upper=_prefix(fd))


def _prefix(v: Sequence[float]) -> np.ndarray:
    # sequential float addition, matching what the harness writes to CSV
    out = np.empty(len(v))
    acc = 0.0
    for t, a in enumerate(v):
        acc += float(a)
        out[t] = acc
    return out
