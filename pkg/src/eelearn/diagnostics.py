"""Confidence-set constants, tail-bound helpers and event tracking."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import e, exp, log, pi, sqrt
from typing import Sequence

import numpy as np

from .errors import ContractError

# Anti-concentration constant: the normal lower bound evaluated at t = sqrt(2).
Q0 = sqrt(2.0 / pi) / (sqrt(2.0) + sqrt(6.0)) / e

BETA2_VARIANTS = ("scaled", "literal")


def kappa(phi_one_norm_sq: float) -> float:
    """Exploration constant ``3 + 2 log(1 + 2 ||phi(1)||^2)``."""
    return 3.0 + 2.0 * log(1.0 + 2.0 * phi_one_norm_sq)


def kappa_self_normalized(c_m: float, lambda0: float) -> float:
    """The self-normalized-bound form ``sqrt(3 + 2 log(1 + 2 c_m^2 / lambda0))``.

    Exposed for comparison only; ``alpha_t`` uses :func:`kappa`.
    """
    if lambda0 <= 0:
        raise ContractError("lambda0 must be positive")
    return sqrt(3.0 + 2.0 * log(1.0 + 2.0 * c_m * c_m / lambda0))


def alpha_t(m: int, t: int, delta_t: float, sigma: float, C_mu: float, phi_one_norm_sq: float) -> float:
    """Sampling scale with ``alpha^2 = 4 kappa^2 sigma^2 / C_mu^2 * m log t log(m / delta_t)``."""
    if t < 1:
        raise ContractError("t must be >= 1")
    if not 0.0 < delta_t < 1.0:
        raise ContractError("delta_t must lie in (0, 1)")
    k = kappa(phi_one_norm_sq)
    a2 = 4.0 * k * k * sigma * sigma / (C_mu * C_mu) * m * log(t) * log(m / delta_t)
    return sqrt(max(a2, 0.0))


@dataclass(frozen=True)
class ConfidenceConstants:
    kappa: float
    alpha_t: float
    beta1_t: float
    beta2_t: float
    beta3_t: float
    gamma2_t: float
    m: int
    t: int
    delta_t: float
    delta2_t: float
    sigma: float
    C_mu: float
    L_mu: float
    phi_one_norm_sq: float


def gamma2(m: int, delta2_t: float) -> float:
    L = log(1.0 / delta2_t)
    return max(8.0 * L, sqrt(8.0 * m * L))


def compute_constants(
    m: int,
    t: int,
    delta_t: float,
    delta2_t: float,
    sigma: float,
    C_mu: float,
    L_mu: float,
    phi_one_norm_sq: float,
    beta2_variant: str = "scaled",
) -> ConfidenceConstants:
    """Evaluate the per-round radii.

    ``beta2_variant="scaled"`` gives ``alpha * sqrt(m + gamma2)``, the radius of
    an ``alpha``-scaled Gaussian in the ``Q`` norm; ``"literal"`` gives
    ``sqrt(alpha * (m + gamma2))``.
    """
    if t < 2:
        raise ContractError("constants need t >= 2 so that log t > 0")
    for name, d in (("delta_t", delta_t), ("delta2_t", delta2_t)):
        if not 0.0 < d < 1.0:
            raise ContractError(f"{name} must lie in (0, 1)")
    if beta2_variant not in BETA2_VARIANTS:
        raise ContractError(f"beta2_variant must be one of {BETA2_VARIANTS}")
    if C_mu <= 0 or L_mu <= 0 or sigma < 0:
        raise ContractError("C_mu, L_mu must be positive and sigma nonnegative")
    k = kappa(phi_one_norm_sq)
    a = alpha_t(m, t, delta_t, sigma, C_mu, phi_one_norm_sq)
    b1 = 2.0 / C_mu * k * sigma * sqrt(2.0 * m * log(t)) * sqrt(log(m / delta_t))
    g2 = gamma2(m, delta2_t)
    b2 = a * sqrt(m + g2) if beta2_variant == "scaled" else sqrt(a * (m + g2))
    return ConfidenceConstants(
        kappa=k, alpha_t=a, beta1_t=b1, beta2_t=b2, beta3_t=L_mu * (b1 + b2), gamma2_t=g2,
        m=m, t=t, delta_t=delta_t, delta2_t=delta2_t, sigma=sigma, C_mu=C_mu, L_mu=L_mu,
        phi_one_norm_sq=phi_one_norm_sq,
    )


def chi_square_tail_bound(m: int, alpha: float) -> float:
    """Bound on ``P(Z > m + alpha)`` for ``Z ~ chi^2_m``."""
    if alpha < 0:
        raise ContractError("alpha must be nonnegative")
    return exp(-alpha / 8.0) if alpha > m else exp(-alpha * alpha / (8.0 * m))


def normal_tail_lower_bound(t: float) -> float:
    """Lower bound on ``P(Z > t)`` for a standard normal ``Z``."""
    if t < 0:
        raise ContractError("t must be nonnegative")
    return sqrt(2.0 / pi) * exp(-t * t / 2.0) / (t + sqrt(t * t + 4.0))


def log_dominance_check(x: float, c: float, rtol: float = 1e-12) -> bool:
    """Whether ``x <= c / log(1 + c) * log(1 + x)`` holds (up to ``rtol``)."""
    if c <= 0 or x < 0 or x > c * (1.0 + rtol):
        raise ContractError("need c > 0 and 0 <= x <= c")
    rhs = c / np.log1p(c) * np.log1p(x)
    return bool(x <= rhs * (1.0 + rtol) + 1e-300)


def q_norm(v: np.ndarray, Q: np.ndarray) -> float:
    v = np.asarray(v, dtype=float)
    return float(sqrt(max(float(v @ Q @ v), 0.0)))


def rho(phi: np.ndarray, Q: np.ndarray) -> float:
    """Uncertainty width ``sqrt(phi^T Q^{-1} phi)``."""
    phi = np.asarray(phi, dtype=float)
    return float(sqrt(max(float(phi @ np.linalg.solve(Q, phi)), 0.0)))


def rho_cap(phi_one: np.ndarray) -> float:
    """Largest possible ``rho`` once ``lambda_min(Q) >= m^2 min_j phi_j(1)^2``."""
    phi_one = np.asarray(phi_one, dtype=float)
    return float(np.linalg.norm(phi_one) / (phi_one.size * np.min(phi_one)))


def elliptical_potential_bound(phi_one: np.ndarray, T: int) -> float:
    """Bound on ``sum_t rho_t^2`` over ``T`` learning rounds after initialization.

    Each ``rho^2`` is at most ``c = ||phi(1)||^2 / (m^2 min_j phi_j(1)^2)`` so the
    log-dominance inequality turns the log-determinant growth into
    ``c / log(1 + c) * m log(1 + ||phi(1)||^2 T / (m^3 min_j phi_j(1)^2))``.
    """
    phi_one = np.asarray(phi_one, dtype=float)
    m = phi_one.size
    n2 = float(phi_one @ phi_one)
    lam0 = m * m * float(np.min(phi_one)) ** 2
    c = n2 / lam0
    return c / log(1.0 + c) * m * log(1.0 + n2 * T / (m * lam0))


@dataclass(frozen=True)
class EventRecord:
    a_holds: np.ndarray
    b_holds: np.ndarray
    rho_at_play: np.ndarray


@dataclass
class EventTrace:
    """Append-only per-round record of the events and the played ``rho``."""

    t: list[int] = field(default_factory=list)
    records: list[EventRecord] = field(default_factory=list)

    def append(self, t: int, rec: EventRecord) -> None:
        self.t.append(t)
        self.records.append(rec)

    def frequencies(self, t_min: int = 100) -> tuple[float, float]:
        a = [r.a_holds for s, r in zip(self.t, self.records) if s >= t_min]
        b = [r.b_holds for s, r in zip(self.t, self.records) if s >= t_min]
        if not a:
            return float("nan"), float("nan")
        return float(np.mean(np.concatenate(a))), float(np.mean(np.concatenate(b)))


def record_events(
    Qs: np.ndarray,
    theta_bar: np.ndarray,
    theta_sampled: np.ndarray,
    true_thetas: np.ndarray,
    constants: ConfidenceConstants | Sequence[ConfidenceConstants],
    played_features: np.ndarray,
    atol: float = 1e-8,
) -> EventRecord:
    """Evaluate the two events for every agent at the start of a round.

    ``Qs`` holds the per-agent design matrices used for fitting and sampling;
    ``played_features`` the features of the allocation handed out this round.
    ``constants`` may be shared or given per agent.
    """
    n = len(Qs)
    if isinstance(constants, ConfidenceConstants):
        constants = [constants] * n
    a = np.empty(n, dtype=bool)
    b = np.empty(n, dtype=bool)
    r = np.empty(n)
    for i in range(n):
        a[i] = q_norm(true_thetas[i] - theta_bar[i], Qs[i]) <= constants[i].beta1_t + atol
        b[i] = q_norm(theta_bar[i] - theta_sampled[i], Qs[i]) <= constants[i].beta2_t + atol
        r[i] = rho(played_features[i], Qs[i])
    return EventRecord(a_holds=a, b_holds=b, rho_at_play=r)
