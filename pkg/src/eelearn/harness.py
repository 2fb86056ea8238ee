"""Experiment configuration, seeded runs and CSV emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .diagnostics import EventTrace, compute_constants, record_events
from .economy import FAMILIES, Economy, amdahl, ces, linear, load_economy
from .equilibrium import reference_equilibrium
from .errors import ConfigError
from .learner import DeltaSchedule, LearnerConfig, LearnerState, init_length, step
from .losses import ce_gaps, loss_pe_exact_small, loss_pe_upper, loss_si

log = logging.getLogger(__name__)

CSV_HEADER = (
    "run_id", "t", "phase", "l_ce", "l_si", "l_pe_upper", "l_fd_upper",
    "cum_l_ce", "cum_l_fd_upper", "a_holds", "b_holds", "rho", "ce_warn",
)
SUMMARY_HEADER = ("t", "n_runs", "mean_cum_l_ce", "stderr_cum_l_ce", "stderr_degenerate")


@dataclass(frozen=True)
class GeneratorSpec:
    family: str
    n: int
    m: int
    rho: float = 1.0
    f: float = 0.5
    theta_low: float = 0.1
    theta_high: float = 1.0
    box_low: float = 0.05
    box_high: float = 1.2
    sigma: float = 0.1
    dirichlet: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be positive")
        if not self.box_low <= self.theta_low < self.theta_high <= self.box_high:
            raise ConfigError("theta draw range must sit inside the box")
        if self.box_low <= 0:
            raise ConfigError("box_low must be positive")
        if self.sigma < 0 or self.dirichlet <= 0:
            raise ConfigError("sigma must be nonnegative and dirichlet positive")


def generate_economy(spec: GeneratorSpec, rng: np.random.Generator) -> Economy:
    """Draw ``theta*`` uniformly in the configured range and Dirichlet endowments."""
    thetas = rng.uniform(spec.theta_low, spec.theta_high, size=(spec.n, spec.m))
    # one symmetric Dirichlet draw per resource, spread across agents
    E = rng.dirichlet(np.full(spec.n, spec.dirichlet), size=spec.m).T
    E = E / E.sum(axis=0, keepdims=True)
    box = dict(theta_min=spec.box_low, theta_max=spec.box_high)
    if spec.family == "linear":
        us = tuple(linear(th, **box) for th in thetas)
    elif spec.family == "ces":
        us = tuple(ces(th, spec.rho, **box) for th in thetas)
    else:
        us = tuple(amdahl(th, spec.f, **box) for th in thetas)
    return Economy(endowments=E, utilities=us, sigma=spec.sigma)


@dataclass(frozen=True)
class ExperimentConfig:
    T: int
    seeds: tuple[int, ...]
    generator: GeneratorSpec | None = None
    economy_file: str | None = None
    schedule: str = "finite_horizon"
    delta: float = 0.05
    mc_budget: int = 50
    ce_solver: str = "pr"
    ce_iters: int = 10
    alpha_scale: float = 1.0
    alpha_off_after: int | None = None
    beta2_variant: str = "scaled"
    warm_mix: float = 1e-6
    pe_grid_step: float | None = None
    out: str | None = None

    def __post_init__(self) -> None:
        if (self.generator is None) == (self.economy_file is None):
            raise ConfigError("give exactly one of generator or economy_file")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.T < 1:
            raise ConfigError("T must be positive")
        if self.mc_budget < 1:
            raise ConfigError("mc_budget must be positive")
        if self.generator is not None and self.schedule == "finite_horizon":
            n, m = self.generator.n, self.generator.m
            if self.T <= max(m ** 3, n * m * m):
                raise ConfigError(f"finite-horizon runs need T > max(m^3, n m^2) = {max(m ** 3, n * m * m)}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "generator" in d and d["generator"] is not None:
            d["generator"] = GeneratorSpec(**d["generator"])
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def learner_config(self, n: int) -> LearnerConfig:
        sched = DeltaSchedule(kind=self.schedule, delta=self.delta,
                              T=self.T if self.schedule == "finite_horizon" else None, n=n)
        return LearnerConfig(schedule=sched, ce_solver=self.ce_solver, ce_iters=self.ce_iters,
                             alpha_scale=self.alpha_scale, alpha_off_after=self.alpha_off_after,
                             warm_mix=self.warm_mix)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class RoundRecord:
    run_id: int
    t: int
    phase: str
    l_ce: float
    l_si: float
    l_pe_upper: float
    l_fd_upper: float
    cum_l_ce: float
    cum_l_fd_upper: float
    a_holds: float | None
    b_holds: float | None
    rho: float | None
    ce_warn: bool
    l_pe_exact: float | None = None


@dataclass
class RunResult:
    run_id: int
    economy: Economy
    records: list[RoundRecord]
    events: EventTrace
    final_state: LearnerState


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult] = field(default_factory=list)

    @property
    def records(self) -> list[RoundRecord]:
        return [r for run in self.runs for r in run.records]


def run_seed(config: ExperimentConfig, seed: int) -> RunResult:
    """One independent run; all randomness derives from ``seed`` alone."""
    econ_ss, fb_ss, samp_ss, loss_ss = np.random.SeedSequence(seed).spawn(4)
    if config.generator is not None:
        economy = generate_economy(config.generator, np.random.default_rng(econ_ss))
    else:
        economy = load_economy(config.economy_file)
    fb_rng, samp_rng, loss_rng = (np.random.default_rng(s) for s in (fb_ss, samp_ss, loss_ss))
    ref = reference_equilibrium(economy.utilities, economy.endowments)
    if not ref.certified:
        raise ConfigError(f"seed {seed}: could not certify the reference equilibrium")
    lcfg = config.learner_config(economy.n)
    state = LearnerState.new(economy)
    trace = EventTrace()
    records: list[RoundRecord] = []
    cum_ce = cum_fd = 0.0
    consts_inputs = [(u.link_constants(), float(u.phi_one() @ u.phi_one())) for u in economy.utilities]
    for _ in range(config.T):
        res = step(state, economy, lcfg, samp_rng, fb_rng)
        out = res.outcome
        x = out.allocation
        gaps, _ = ce_gaps(economy, out, "monte_carlo", config.mc_budget, loss_rng)
        l_ce = float(gaps.sum())
        l_si = loss_si(economy, x)
        l_pe = loss_pe_upper(economy, x, ref)
        l_fd = max(l_pe, l_si)
        cum_ce += l_ce
        cum_fd += l_fd
        a = b = r = None
        if res.phase == "learn" and res.t >= 2:
            consts = [compute_constants(economy.m, res.t, res.delta_t, res.delta_t, economy.sigma,
                                        cm, lm, n2, beta2_variant=config.beta2_variant)
                      for (cm, lm), n2 in consts_inputs]
            feats = np.stack([u.features(xi) for u, xi in zip(economy.utilities, x)])
            ev = record_events(res.Q, res.theta_bar, res.theta_sampled, economy.thetas, consts, feats)
            trace.append(res.t, ev)
            a, b, r = float(ev.a_holds.mean()), float(ev.b_holds.mean()), float(ev.rho_at_play.mean())
        exact = loss_pe_exact_small(economy, x, config.pe_grid_step) if config.pe_grid_step else None
        records.append(RoundRecord(seed, res.t, res.phase, l_ce, l_si, l_pe, l_fd, cum_ce, cum_fd,
                                   a, b, r, out.warning is not None, exact))
    if state.ridge_used or state.eig_fallback:
        log.warning("seed %d: numerical fallback used (ridge=%s, eig=%s)", seed,
                    state.ridge_used, state.eig_fallback)
    return RunResult(seed, economy, records, trace, state)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(config)
    for seed in config.seeds:
        log.info("running seed %d", seed)
        result.runs.append(run_seed(config, seed))
    return result


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records: Iterable[RoundRecord], path: str | Path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def summarize(records: Sequence[RoundRecord]) -> list[tuple[int, int, float, float, bool]]:
    """Per-round mean and standard error of ``cum_l_ce`` across runs."""
    by_t: dict[int, list[float]] = {}
    for r in records:
        by_t.setdefault(r.t, []).append(r.cum_l_ce)
    rows = []
    for t in sorted(by_t):
        v = np.asarray(by_t[t])
        k = v.size
        se = float(v.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0
        rows.append((t, k, float(v.mean()), se, k == 1))
    return rows


def emit_summary(records: Sequence[RoundRecord], path: str | Path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for row in summarize(records):
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def average_loss_curve(result: ExperimentResult) -> np.ndarray:
    """Seed-mean of ``L^CE_t / t`` indexed by ``t - 1``."""
    curves = np.array([[r.cum_l_ce / r.t for r in run.records] for run in result.runs])
    return curves.mean(axis=0)


def init_rounds(config: ExperimentConfig, economy: Economy) -> int:
    return init_length(economy.n, economy.m)
