"""Exchange-economy primitives: parametric utilities, demand and noisy feedback.

Utilities have the form ``u(x) = mu(theta @ phi(x))`` where ``phi`` acts
coordinatewise on an allocation in ``[0, 1]^m``.  Three families are supported:

* ``linear``: ``phi(x) = x``, ``mu(y) = y``
* ``ces``:    ``phi(x) = x**rho``, ``mu(y) = y**(1/rho)`` with ``rho`` in (0, 1]
* ``amdahl``: ``phi(x) = x / (f + (1 - f) x)``, ``mu(y) = y``
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ContractError, DomainError

FAMILIES = ("linear", "ces", "amdahl")
DEMAND_METHODS = ("exact_linear", "kkt", "projected_ascent", "monte_carlo")

FEAS_TOL = 1e-9
_X_FLOOR = 1e-12
_MC_BATCH = 256
_MC_BATCH_CAP = 16_384
_MC_MAX_PROPOSALS = 100_000


def _frozen(a: Any, shape: tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None:
        arr = np.broadcast_to(arr, shape).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParametricUtility:
    """One agent's utility ``mu(theta @ phi(x))`` with its parameter box."""

    family: str
    theta: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    rho: float = 1.0
    f: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ContractError(f"unknown utility family {self.family!r}")
        theta = _frozen(self.theta)
        if theta.ndim != 1 or theta.size == 0:
            raise ContractError("theta must be a non-empty vector")
        m = theta.size
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_min", _frozen(self.theta_min, (m,)))
        object.__setattr__(self, "theta_max", _frozen(self.theta_max, (m,)))
        if np.any(self.theta_min <= 0):
            raise ContractError("theta_min must be strictly positive")
        if np.any(self.theta_max < self.theta_min):
            raise ContractError("theta_max must be >= theta_min")
        if np.any(theta < self.theta_min - 1e-12) or np.any(theta > self.theta_max + 1e-12):
            raise ContractError(f"theta {theta.tolist()} outside its box")
        if self.family == "ces":
            if not 0.0 < self.rho <= 1.0:
                raise ContractError("CES rho must lie in (0, 1]")
        else:
            object.__setattr__(self, "rho", 1.0)
        if self.family == "amdahl":
            if self.f is None:
                raise ContractError("amdahl utility needs parallel fractions f")
            f = _frozen(self.f, (m,))
            if np.any(f <= 0) or np.any(f >= 1):
                raise ContractError("amdahl fractions must lie in (0, 1)")
            object.__setattr__(self, "f", f)
        else:
            object.__setattr__(self, "f", None)

    @property
    def m(self) -> int:
        return self.theta.size

    @property
    def is_linear(self) -> bool:
        return self.family == "linear" or (self.family == "ces" and self.rho == 1.0)

    def with_theta(self, theta: np.ndarray) -> ParametricUtility:
        return replace(self, theta=np.asarray(theta, dtype=float))

    # -- feature map and link -------------------------------------------------
    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == "linear" or (self.family == "ces" and self.rho == 1.0):
            return x.copy()
        if self.family == "ces":
            return np.power(x, self.rho)
        # rounding can push x / (f + (1 - f) x) a hair above 1 near x = 1
        return np.minimum(x / (self.f + (1.0 - self.f) * x), 1.0)

    def feature_grad(self, x: np.ndarray) -> np.ndarray:
        """Coordinatewise derivative of the feature map."""
        x = np.asarray(x, dtype=float)
        if self.is_linear:
            return np.ones_like(x)
        if self.family == "ces":
            return self.rho * np.power(np.maximum(x, _X_FLOOR), self.rho - 1.0)
        return self.f / (self.f + (1.0 - self.f) * x) ** 2

    def feature_curvature(self, x: np.ndarray) -> np.ndarray:
        """Coordinatewise second derivative of the feature map (all <= 0)."""
        x = np.asarray(x, dtype=float)
        if self.is_linear:
            return np.zeros_like(x)
        if self.family == "ces":
            r = self.rho
            return r * (r - 1.0) * np.power(np.maximum(x, _X_FLOOR), r - 2.0)
        f = self.f
        return -2.0 * f * (1.0 - f) / (f + (1.0 - f) * x) ** 3

    def link(self, y: np.ndarray | float) -> np.ndarray | float:
        if self.family == "ces" and self.rho != 1.0:
            return np.power(np.maximum(y, 0.0), 1.0 / self.rho)
        return y

    def link_grad(self, y: np.ndarray | float) -> np.ndarray | float:
        if self.family == "ces" and self.rho != 1.0:
            r = 1.0 / self.rho
            return r * np.power(np.maximum(y, 0.0), r - 1.0)
        return np.ones_like(np.asarray(y, dtype=float))

    def phi_one(self) -> np.ndarray:
        return self.features(np.ones(self.m))

    def inner(self, x: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return self.features(x) @ th

    def __call__(self, x: np.ndarray) -> np.ndarray | float:
        return self.link(self.inner(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.link_grad(self.inner(x)) * self.theta * self.feature_grad(x)

    def link_constants(self, feature_floor: float | None = None) -> tuple[float, float]:
        """Return ``(C_mu, L_mu)``: bounds on the link derivative over Theta x X.

        For the CES link ``y**(1/rho)`` the derivative vanishes at zero, so the
        lower end of the inner-product range is taken at ``theta_min`` times a
        feature floor (default: the smallest full-allocation feature value).
        """
        if self.family != "ces" or self.rho == 1.0:
            return 1.0, 1.0
        phi1 = self.phi_one()
        floor = float(np.min(phi1)) if feature_floor is None else float(feature_floor)
        y_lo = float(np.min(self.theta_min)) * floor
        y_hi = float(self.theta_max @ phi1)
        return float(self.link_grad(y_lo)), float(self.link_grad(y_hi))

    def to_dict(self) -> dict[str, Any]:
        params: dict[str, Any] = {}
        if self.family == "ces":
            params["rho"] = self.rho
        if self.family == "amdahl":
            params["f"] = self.f.tolist()
        return {
            "family": self.family,
            "params": params,
            "theta": self.theta.tolist(),
            "theta_min": self.theta_min.tolist(),
            "theta_max": self.theta_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ParametricUtility:
        params = d.get("params", {}) or {}
        return cls(
            family=d["family"],
            theta=np.asarray(d["theta"], dtype=float),
            theta_min=np.asarray(d.get("theta_min", 0.01), dtype=float),
            theta_max=np.asarray(d.get("theta_max", 1.0), dtype=float),
            rho=float(params.get("rho", 1.0)),
            f=None if "f" not in params else np.asarray(params["f"], dtype=float),
        )


def linear(theta: Sequence[float], theta_min: float = 0.01, theta_max: float = 1.0) -> ParametricUtility:
    return ParametricUtility("linear", np.asarray(theta, float), theta_min, theta_max)


def ces(theta: Sequence[float], rho: float, theta_min: float = 0.01, theta_max: float = 1.0) -> ParametricUtility:
    return ParametricUtility("ces", np.asarray(theta, float), theta_min, theta_max, rho=rho)


def amdahl(theta: Sequence[float], f: float | Sequence[float], theta_min: float = 0.01,
           theta_max: float = 1.0) -> ParametricUtility:
    return ParametricUtility("amdahl", np.asarray(theta, float), theta_min, theta_max,
                             f=np.asarray(f, float))


@dataclass(frozen=True, eq=False)
class Economy:
    """Agents, their endowments (columns sum to one) and true utilities."""

    endowments: np.ndarray
    utilities: tuple[ParametricUtility, ...]
    sigma: float = 0.0
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self) -> None:
        e = _frozen(self.endowments)
        if e.ndim != 2:
            raise ContractError("endowments must be an n x m matrix")
        object.__setattr__(self, "endowments", e)
        object.__setattr__(self, "utilities", tuple(self.utilities))
        object.__setattr__(self, "n", e.shape[0])
        object.__setattr__(self, "m", e.shape[1])
        if np.any(e < 0):
            raise ContractError("endowments must be nonnegative")
        col = e.sum(axis=0)
        if np.any(np.abs(col - 1.0) > FEAS_TOL):
            raise ContractError(f"each resource's endowments must sum to 1, got {col.tolist()}")
        if len(self.utilities) != self.n:
            raise ContractError(f"expected {self.n} utilities, got {len(self.utilities)}")
        if any(u.m != self.m for u in self.utilities):
            raise ContractError("utility dimension does not match resource count")
        if self.sigma < 0:
            raise ContractError("sigma must be nonnegative")

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([u.theta for u in self.utilities])

    def utility_values(self, x: np.ndarray) -> np.ndarray:
        return np.array([float(u(xi)) for u, xi in zip(self.utilities, np.asarray(x, float))])

    def budgets(self, prices: np.ndarray) -> np.ndarray:
        return self.endowments @ np.asarray(prices, dtype=float)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "m": self.m,
            "endowments": self.endowments.tolist(),
            "agents": [u.to_dict() for u in self.utilities],
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Economy:
        e = np.asarray(d["endowments"], dtype=float)
        if "n" in d and e.shape[0] != int(d["n"]):
            raise ContractError("field n disagrees with endowment rows")
        if "m" in d and e.shape[1] != int(d["m"]):
            raise ContractError("field m disagrees with endowment columns")
        agents = tuple(ParametricUtility.from_dict(a) for a in d["agents"])
        return cls(e, agents, float(d.get("sigma", 0.0)))


def load_economy(path: str | Path) -> Economy:
    with open(path) as fh:
        return Economy.from_dict(json.load(fh))


def save_economy(economy: Economy, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(economy.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# Validators for the bare-array value types
# ---------------------------------------------------------------------------

def check_allocation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ContractError("allocation must be an n x m matrix")
    if np.any(x < -FEAS_TOL) or np.any(x.sum(axis=0) > 1.0 + FEAS_TOL):
        raise ContractError("allocation is infeasible")
    return x


def normalize_prices(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ContractError("prices must be nonnegative")
    s = p.sum()
    if s <= 0:
        raise ContractError("prices must have positive total")
    return p / s


def check_prices(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > FEAS_TOL:
        raise ContractError("prices must be nonnegative and sum to one")
    return p


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def _check_unit_box(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < -FEAS_TOL) or np.any(x > 1.0 + FEAS_TOL) or np.any(np.isnan(x)):
        raise DomainError("allocation coordinates must lie in [0, 1]")
    return np.clip(x, 0.0, 1.0)


def eval_features(u: ParametricUtility, x_i: np.ndarray) -> np.ndarray:
    return u.features(_check_unit_box(x_i))


def eval_utility(u: ParametricUtility, x_i: np.ndarray) -> float:
    return float(u(_check_unit_box(x_i)))


def sample_feedback(economy: Economy, i: int, x_i: np.ndarray, rng: np.random.Generator) -> float:
    """Noisy utility report: true utility plus N(0, sigma^2)."""
    return eval_utility(economy.utilities[i], x_i) + economy.sigma * rng.standard_normal()


def demand(
    u: ParametricUtility,
    p: np.ndarray,
    budget: float,
    method: str = "projected_ascent",
    k: int = 50,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Budget-constrained utility maximiser over ``[0, 1]^m``.

    ``exact_linear`` is the greedy bang-per-buck rule (linear utilities only),
    ``kkt`` solves the separable first-order conditions by bisection on the
    budget multiplier, ``projected_ascent`` runs normalised gradient ascent with
    exact projection onto the box-and-budget polytope, and ``monte_carlo``
    keeps the best of ``k`` budget-feasible simplex samples.
    """
    p = np.asarray(p, dtype=float)
    if budget < 0:
        raise ContractError("budget must be nonnegative")
    if method == "exact_linear":
        if not u.is_linear:
            raise ContractError("exact_linear demand requires a linear utility")
        return linear_demand(u.theta, p, budget)
    if method == "kkt":
        return kkt_demand(u, p, budget)
    if method == "projected_ascent":
        return projected_ascent_demand(u, p, budget)
    if method == "monte_carlo":
        x, _, accepted = monte_carlo_search(u, p, budget, k, rng)
        if accepted == 0:
            warnings.warn("monte_carlo demand accepted no samples", RuntimeWarning, stacklevel=2)
        return x
    raise ContractError(f"unknown demand method {method!r}")


def linear_demand(theta: np.ndarray, p: np.ndarray, budget: float) -> np.ndarray:
    m = theta.size
    x = np.zeros(m)
    free = p <= 0
    x[free & (theta > 0)] = 1.0
    ratio = np.where(free, np.inf, theta / np.where(free, 1.0, p))
    # stable sort keeps the lower index first among equal ratios
    order = np.argsort(-ratio, kind="stable")
    left = float(budget)
    for j in order:
        if free[j] or left <= 0:
            continue
        take = min(1.0, left / p[j])
        x[j] = take
        left -= take * p[j]
    return x


def _kkt_response(u: ParametricUtility, p: np.ndarray, lam: float) -> np.ndarray:
    """Per-coordinate maximiser of theta_j phi_j(x_j) - lam p_j x_j on [0, 1]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if u.family == "ces":
            r = u.rho
            x = np.power(r * u.theta / (lam * p), 1.0 / (1.0 - r))
        else:
            f = u.f
            x = (np.sqrt(u.theta * f / (lam * p)) - f) / (1.0 - f)
    x = np.where(p <= 0, 1.0, x)
    return np.clip(np.nan_to_num(x, nan=1.0, posinf=1.0), 0.0, 1.0)


def kkt_demand(u: ParametricUtility, p: np.ndarray, budget: float, iters: int = 200) -> np.ndarray:
    if u.is_linear:
        return linear_demand(u.theta, p, budget)
    p = np.asarray(p, dtype=float)
    if p[p > 0].sum() <= budget:
        return np.ones(u.m)
    if budget <= 0:
        return np.where(p <= 0, 1.0, 0.0)

    def spend(lam: float) -> float:
        return float(p @ _kkt_response(u, p, lam))

    lo, hi = 1.0, 1.0
    while spend(lo) < budget:
        lo *= 0.5
    while spend(hi) > budget:
        hi *= 2.0
    lo, hi = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if spend(np.exp(mid)) > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return _kkt_response(u, p, float(np.exp(hi)))


def project_budget_box(y: np.ndarray, p: np.ndarray, budget: float,
                       weights: np.ndarray | None = None) -> np.ndarray:
    """Projection onto ``{0 <= x <= 1, p @ x <= budget}``.

    Minimises ``sum_j w_j (x_j - y_j)^2`` (Euclidean when ``weights`` is None).
    The minimiser is ``clip(y - lam p / w, 0, 1)``; its cost is piecewise
    linear in ``lam``, so the breakpoints locate ``lam`` exactly.
    """
    y = np.asarray(y, dtype=float)
    x = np.clip(y, 0.0, 1.0)
    if p @ x <= budget:
        return x
    q = p if weights is None else p / weights
    pos = q > 0
    bps = np.concatenate([(y[pos] - 1.0) / q[pos], y[pos] / q[pos]])
    bps = np.unique(bps[bps > 0])

    def cost(lam: float) -> float:
        return float(p @ np.clip(y - lam * q, 0.0, 1.0))

    lo, c_lo = 0.0, float(p @ x)
    for b in bps:
        c_b = cost(b)
        if c_b <= budget:
            lam = lo if c_lo == c_b else lo + (c_lo - budget) * (b - lo) / (c_lo - c_b)
            out = np.clip(y - lam * q, 0.0, 1.0)
            break
        lo, c_lo = b, c_b
    else:  # pragma: no cover - past the last breakpoint cost is constant
        out = np.clip(y - lo * q, 0.0, 1.0)
    excess = p @ out - budget
    if excess > 0:
        out = out * (budget / (p @ out))
    return out


def projected_ascent_demand(
    u: ParametricUtility,
    p: np.ndarray,
    budget: float,
    iters: int = 200,
    tol: float = 1e-12,
) -> np.ndarray:
    """Projected ascent over the box-and-budget polytope.

    The link is increasing, so the demand maximises the separable concave
    inner function ``theta @ phi(x)``.  Each iteration takes a diagonal
    Newton step, projects it in the metric of the diagonal curvature and
    backtracks along the segment to the projected point (Armijo rule).
    """
    m = u.m
    p = np.asarray(p, dtype=float)
    total = p.sum()
    if total <= budget:
        return np.ones(m)
    theta = u.theta
    x = project_budget_box(np.full(m, budget / total if total > 0 else 1.0), p, budget)
    fx = float(theta @ u.features(x))
    for _ in range(iters):
        g = theta * u.feature_grad(x)
        h = theta * np.abs(u.feature_curvature(x))
        h = np.maximum(h, 1e-9 * max(float(np.max(g)), 1e-12))
        target = project_budget_box(x + g / h, p, budget, weights=h)
        d = target - x
        slope = float(g @ d)
        if slope <= tol * max(abs(fx), 1.0) or float(np.max(np.abs(d))) <= tol:
            break
        step = 1.0
        while True:
            y = x + step * d
            fy = float(theta @ u.features(np.clip(y, 0.0, 1.0)))
            if fy >= fx + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-12:
                return x
        x, fx = np.clip(y, 0.0, 1.0), fy
    return x


def monte_carlo_search(
    u: ParametricUtility,
    p: np.ndarray,
    budget: float,
    k: int,
    rng: np.random.Generator | None,
    max_proposals: int = _MC_MAX_PROPOSALS,
) -> tuple[np.ndarray, float, int]:
    """Best of the first ``k`` budget-feasible draws from the (m+1)-simplex.

    Batch sizes double from 256 and depend only on the batch index, so a
    larger ``k`` with the same generator state sees a superset of the
    candidates of a smaller ``k``.
    Returns ``(best_x, best_u, accepted)``; the zero bundle when nothing fits.
    """
    if rng is None:
        rng = np.random.default_rng()
    p = np.asarray(p, dtype=float)
    m = u.m
    alpha = np.ones(m + 1)
    chunks = []
    accepted = 0
    proposed = 0
    batch = _MC_BATCH
    while accepted < k and proposed < max_proposals:
        size = min(batch, max_proposals - proposed)
        y = rng.dirichlet(alpha, size=size)[:, :m]
        proposed += size
        batch = min(2 * batch, _MC_BATCH_CAP)
        ok = y[y @ p <= budget * (1.0 + FEAS_TOL)]
        if ok.size:
            ok = ok[: k - accepted]
            chunks.append(ok)
            accepted += ok.shape[0]
    if accepted == 0:
        return np.zeros(m), float(u(np.zeros(m))), 0
    cand = np.concatenate(chunks)
    vals = u(cand)
    j = int(np.argmax(vals))
    return cand[j], float(vals[j]), accepted
