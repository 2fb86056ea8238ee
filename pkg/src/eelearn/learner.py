"""Thompson-sampling learner for exchange economies with unknown utilities."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from math import pi

import numpy as np

from .diagnostics import alpha_t as _alpha_t
from .economy import Economy, ParametricUtility
from .equilibrium import MarketOutcome, solve_ce_proportional_response, solve_ce_tatonnement
from .errors import ConfigError, ContractError

RIDGE = 1e-8
EIG_FLOOR = 1e-12
DELTA_KINDS = ("anytime", "finite_horizon")


# ---------------------------------------------------------------------------
# Initialization phase
# ---------------------------------------------------------------------------

def init_length(n: int, m: int) -> int:
    return m * m * max(n, m)


def init_schedule(n: int, m: int, t: int) -> np.ndarray:
    """Allocation for initialization round ``t`` (1-based).

    Rounds come in ``m^2`` sweeps of ``max(n, m)`` rounds.  In round ``k`` of a
    sweep, if ``m < n`` resource ``h`` goes wholly to agent ``(h + k - 2) mod n``;
    otherwise agent ``h`` receives resource ``(h + k - 2) mod m`` (0-based
    results).  Each agent sees every single-resource bundle once per sweep and
    agents left out of a round get nothing.
    """
    if n < 1 or m < 1:
        raise ContractError("n and m must be positive")
    if not 1 <= t <= init_length(n, m):
        raise ContractError(f"init round {t} outside 1..{init_length(n, m)}")
    k = (t - 1) % max(n, m) + 1
    x = np.zeros((n, m))
    for h in range(1, min(n, m) + 1):
        if m < n:
            x[(h + k - 2) % n, h - 1] = 1.0
        else:
            x[h - 1, (h + k - 2) % m] = 1.0
    return x


# ---------------------------------------------------------------------------
# Confidence schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaSchedule:
    kind: str = "finite_horizon"
    delta: float = 0.05
    T: int | None = None
    n: int = 1

    def __post_init__(self) -> None:
        if self.kind not in DELTA_KINDS:
            raise ConfigError(f"delta schedule kind must be one of {DELTA_KINDS}")
        if self.kind == "finite_horizon" and (self.T is None or self.T < 2):
            raise ConfigError("finite_horizon schedule needs T >= 2")
        if self.kind == "anytime" and not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")

    def __call__(self, t: int) -> float:
        return delta_schedule(self.kind, t, delta=self.delta, T=self.T, n=self.n)


def delta_schedule(kind: str, t: int, delta: float = 0.05, T: int | None = None, n: int = 1) -> float:
    """``anytime``: ``2 delta / (n pi^2 t^2)``; ``finite_horizon``: ``1 / T``."""
    if t < 1:
        raise ContractError("t must be >= 1")
    if kind == "anytime":
        return 2.0 * delta / (n * pi * pi * t * t)
    if kind == "finite_horizon":
        if T is None or T < 2:
            raise ContractError("finite_horizon needs T >= 2")
        return 1.0 / T
    raise ContractError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitInfo:
    iterations: int
    score_norm: float
    ridge: bool


def _inverse(Q: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        L = np.linalg.cholesky(Q)
        ridge = False
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(Q + RIDGE * np.eye(Q.shape[0]))
        ridge = True
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, ridge


def fit_quasi_mle(
    features: np.ndarray,
    feedback: np.ndarray,
    Q: np.ndarray,
    utility: ParametricUtility,
    theta0: np.ndarray | None = None,
    max_iter: int = 500,
    tol: float = 1e-10,
) -> tuple[np.ndarray, FitInfo]:
    """Box-constrained minimiser of ``||sum_s phi_s (mu(theta . phi_s) - y_s)||_{Q^-1}``.

    Each iteration first tries a projected Gauss-Newton step on the score
    equation and otherwise takes a projected gradient step on the squared
    score norm (Barzilai-Borwein length, Armijo backtracking).  Starts from
    ``theta0`` (clamped) or from the unconstrained least-squares solution.  Stops once the projected
    gradient or the accepted step falls below ``tol`` in theta units.  A
    singular ``Q`` is regularised with ``1e-8 I`` and flagged.
    """
    Phi = np.asarray(features, dtype=float).reshape(-1, utility.m)
    y = np.asarray(feedback, dtype=float).ravel()
    lo, hi = utility.theta_min, utility.theta_max
    Qinv, ridge = _inverse(np.asarray(Q, dtype=float))
    b = Phi.T @ y
    identity_link = utility.family != "ces" or utility.rho == 1.0

    if identity_link:
        Qm = np.asarray(Q, dtype=float) + (RIDGE * np.eye(utility.m) if ridge else 0.0)

        def score(th):
            return Qm @ th - b

        def evaluate(th):
            s = score(th)
            return float(s @ Qinv @ s), 2.0 * s, s, Qm
    else:
        def score(th):
            return Phi.T @ (utility.link(Phi @ th) - y)

        def evaluate(th):
            z = Phi @ th
            s = Phi.T @ (utility.link(z) - y)
            qs = Qinv @ s
            J = (Phi * utility.link_grad(z)[:, None]).T @ Phi
            return float(s @ qs), 2.0 * (J @ qs), s, J

    if theta0 is None:
        theta0 = Qinv @ b if identity_link else 0.5 * (lo + hi)
    th = np.clip(np.asarray(theta0, dtype=float), lo, hi)
    g, grad, s, J = evaluate(th)
    step = 1.0 / max(float(np.linalg.norm(grad)), 1.0)
    it = 0
    for it in range(1, max_iter + 1):
        pg = th - np.clip(th - grad, lo, hi)
        if float(np.max(np.abs(pg))) <= tol:
            break
        # Gauss-Newton direction first; it solves the score equation in one
        # step for the identity link.  Fall back to a projected gradient step.
        cand = None
        try:
            gn = np.clip(th - np.linalg.solve(J, s), lo, hi)
        except np.linalg.LinAlgError:
            gn = None
        if gn is not None:
            eta = 1.0
            for _ in range(8):
                trial = th + eta * (gn - th)
                g_t, grad_t, s_t, J_t = evaluate(trial)
                if g_t < g:
                    cand = trial
                    break
                eta *= 0.5
        if cand is None:
            eta = step
            for _ in range(60):
                trial = np.clip(th - eta * grad, lo, hi)
                g_t, grad_t, s_t, J_t = evaluate(trial)
                if g_t <= g + 1e-4 * float(grad @ (trial - th)):
                    cand = trial
                    break
                eta *= 0.5
            else:
                break
        s_vec, y_vec = cand - th, grad_t - grad
        sy = float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / sy if sy > 0 else 2.0 * step
        th, g, grad, s, J = cand, g_t, grad_t, s_t, J_t
        if float(np.max(np.abs(s_vec))) <= tol:
            break
    s = score(th)
    return th, FitInfo(iterations=it, score_norm=float(np.sqrt(max(s @ Qinv @ s, 0.0))), ridge=ridge)


def sample_and_project(
    theta_bar: np.ndarray,
    Q: np.ndarray,
    alpha: float,
    lo: np.ndarray,
    hi: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, bool]:
    """Draw ``theta_bar + alpha * chol(Q^-1) z`` and clamp it to the box.

    Returns the sample and whether the eigenvalue fallback was needed.
    """
    if alpha < 0:
        raise ContractError("alpha must be nonnegative")
    m = len(theta_bar)
    z = rng.standard_normal(m)
    fallback = False
    try:
        Qinv = np.linalg.inv(Q)
        Lc = np.linalg.cholesky(0.5 * (Qinv + Qinv.T))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (Q + Q.T))
        Lc = V / np.sqrt(np.maximum(w, EIG_FLOOR))
        fallback = True
    draw = np.asarray(theta_bar, dtype=float) + alpha * (Lc @ z)
    return np.clip(draw, lo, hi), fallback


# ---------------------------------------------------------------------------
# State and rounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearnerConfig:
    schedule: DeltaSchedule
    ce_solver: str = "pr"
    ce_iters: int = 10
    alpha_scale: float = 1.0
    alpha_off_after: int | None = None
    warm_mix: float = 1e-6
    rebuild_every: int = 256
    mle_max_iter: int = 500
    mle_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.ce_solver not in ("pr", "tatonnement"):
            raise ConfigError("ce_solver must be 'pr' or 'tatonnement'")
        if self.ce_iters < 1:
            raise ConfigError("ce_iters must be >= 1")
        if self.alpha_scale < 0:
            raise ConfigError("alpha_scale must be nonnegative")
        if not 0.0 <= self.warm_mix <= 1.0:
            raise ConfigError("warm_mix must lie in [0, 1]")


@dataclass
class LearnerState:
    """Per-agent design matrices, observation history and parameter estimates.

    The history is stored as ``(n, capacity, m)`` feature and ``(n, capacity)``
    feedback buffers whose first ``t`` rows are live.
    """

    n: int
    m: int
    Q: np.ndarray
    feature_buf: np.ndarray
    feedback_buf: np.ndarray
    theta_bar: np.ndarray
    theta_sampled: np.ndarray
    t: int = 0
    last_allocation: np.ndarray | None = None
    last_prices: np.ndarray | None = None
    ridge_used: bool = False
    eig_fallback: bool = False

    @classmethod
    def new(cls, economy: Economy, capacity: int = 256) -> LearnerState:
        n, m = economy.n, economy.m
        mid = np.stack([0.5 * (u.theta_min + u.theta_max) for u in economy.utilities])
        return cls(
            n=n, m=m, Q=np.zeros((n, m, m)),
            feature_buf=np.zeros((n, capacity, m)), feedback_buf=np.zeros((n, capacity)),
            theta_bar=mid.copy(), theta_sampled=mid.copy(),
        )

    @property
    def phase(self) -> str:
        return "init" if self.t < init_length(self.n, self.m) else "learn"

    def copy(self) -> LearnerState:
        return copy.deepcopy(self)

    def history_features(self, i: int) -> np.ndarray:
        return self.feature_buf[i, : self.t]

    def history_feedback(self, i: int) -> np.ndarray:
        return self.feedback_buf[i, : self.t]

    def design_matrix(self, i: int) -> np.ndarray:
        F = self.history_features(i)
        return F.T @ F

    def _grow(self) -> None:
        cap = self.feature_buf.shape[1]
        self.feature_buf = np.concatenate([self.feature_buf, np.zeros_like(self.feature_buf)], axis=1)
        self.feedback_buf = np.concatenate([self.feedback_buf, np.zeros((self.n, cap))], axis=1)

    def observe(self, x: np.ndarray, y: np.ndarray, utilities, rebuild_every: int) -> None:
        """Append one round of allocations and feedback; update ``Q``."""
        if self.t == self.feature_buf.shape[1]:
            self._grow()
        row = self.t
        self.t += 1
        for i, u in enumerate(utilities):
            phi = u.features(x[i])
            self.feature_buf[i, row] = phi
            self.feedback_buf[i, row] = float(y[i])
            if rebuild_every and self.t % rebuild_every == 0:
                self.Q[i] = self.design_matrix(i)
            else:
                self.Q[i] += np.outer(phi, phi)
        self.last_allocation = np.asarray(x, dtype=float).copy()


@dataclass(frozen=True)
class RoundResult:
    """What the learner did in one round, before feedback is drawn."""

    t: int
    phase: str
    outcome: MarketOutcome
    Q: np.ndarray
    theta_bar: np.ndarray
    theta_sampled: np.ndarray
    alpha: float
    delta_t: float


def _draw_feedback(economy: Economy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean = economy.utility_values(x)
    return mean + economy.sigma * rng.standard_normal(economy.n)


def init_round(state: LearnerState, economy: Economy, feedback_rng: np.random.Generator,
               config: LearnerConfig) -> RoundResult:
    t = state.t + 1
    x = init_schedule(state.n, state.m, t)
    p = np.full(state.m, 1.0 / state.m)
    out = MarketOutcome(allocation=x, prices=p)
    res = RoundResult(t, "init", out, state.Q.copy(), state.theta_bar.copy(),
                      state.theta_sampled.copy(), 0.0, config.schedule(t))
    y = _draw_feedback(economy, x, feedback_rng)
    state.observe(x, y, economy.utilities, config.rebuild_every)
    return res


def learning_alpha(state: LearnerState, economy: Economy, config: LearnerConfig, t: int, i: int) -> float:
    u = economy.utilities[i]
    if config.alpha_off_after is not None and t - init_length(state.n, state.m) > config.alpha_off_after:
        return 0.0
    C_mu, _ = u.link_constants()
    phi1 = u.phi_one()
    a = _alpha_t(state.m, t, config.schedule(t), economy.sigma, C_mu, float(phi1 @ phi1))
    return config.alpha_scale * a


def learner_round(
    state: LearnerState,
    economy: Economy,
    config: LearnerConfig,
    sample_rng: np.random.Generator,
    feedback_rng: np.random.Generator,
) -> RoundResult:
    """Play one learning round and fold its feedback into ``state``."""
    if state.phase != "learn":
        raise ContractError("learner_round needs the initialization phase to be complete")
    t = state.t + 1
    n = state.n
    thetas = np.empty((n, state.m))
    alphas = np.empty(n)
    for i, u in enumerate(economy.utilities):
        F = state.history_features(i)
        y = state.history_feedback(i)
        tb, info = fit_quasi_mle(F, y, state.Q[i], u, theta0=state.theta_bar[i],
                                 max_iter=config.mle_max_iter, tol=config.mle_tol)
        state.ridge_used |= info.ridge
        state.theta_bar[i] = tb
        alphas[i] = learning_alpha(state, economy, config, t, i)
        thetas[i], fb = sample_and_project(tb, state.Q[i], alphas[i], u.theta_min, u.theta_max, sample_rng)
        state.eig_fallback |= fb
    state.theta_sampled = thetas
    sampled = tuple(u.with_theta(th) for u, th in zip(economy.utilities, thetas))
    if config.ce_solver == "pr":
        init = prices = None
        if state.last_prices is not None:
            init = (1.0 - config.warm_mix) * state.last_allocation + config.warm_mix * economy.endowments
            prices = state.last_prices
        out = solve_ce_proportional_response(sampled, economy.endowments, iters=config.ce_iters,
                                             init=init, init_prices=prices)
        state.last_prices = out.prices.copy()
    else:
        out = solve_ce_tatonnement(sampled, economy.endowments, max_iters=config.ce_iters)
    res = RoundResult(t, "learn", out, state.Q.copy(), state.theta_bar.copy(), thetas.copy(),
                      float(alphas.max()), config.schedule(t))
    y = _draw_feedback(economy, out.allocation, feedback_rng)
    state.observe(out.allocation, y, economy.utilities, config.rebuild_every)
    return res


def step(state: LearnerState, economy: Economy, config: LearnerConfig,
         sample_rng: np.random.Generator, feedback_rng: np.random.Generator) -> RoundResult:
    """Advance one round in whichever phase the state is in."""
    if state.phase == "init":
        return init_round(state, economy, feedback_rng, config)
    return learner_round(state, economy, config, sample_rng, feedback_rng)
