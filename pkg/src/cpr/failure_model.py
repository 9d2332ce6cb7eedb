"""Failure-time distributions: fitting, MTBF scaling with node count, and schedule sampling."""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, stats


class Family(str, enum.Enum):
    GAMMA = "gamma"
    WEIBULL = "weibull"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"
    UNIFORM_HAZARD = "uniform_hazard"


FITTABLE = (Family.GAMMA, Family.WEIBULL, Family.EXPONENTIAL, Family.LOGNORMAL)

_N_PARAMS = {
    Family.GAMMA: 2,
    Family.WEIBULL: 2,
    Family.EXPONENTIAL: 1,
    Family.LOGNORMAL: 2,
    Family.UNIFORM_HAZARD: 1,
}


class Scaling(str, enum.Enum):
    LINEAR_MTBF = "linear_mtbf"
    INDEPENDENT_NODES = "independent_nodes"


class FitError(ValueError):
    def __init__(self, family: Family, reason: str):
        super().__init__(f"cannot fit {family.value}: {reason}")
        self.family = family
        self.reason = reason


class InfiniteMTBFError(ValueError):
    pass


@dataclass(frozen=True)
class FailureProcess:
    """A parametric time-to-failure model plus the rule for rescaling it to other job sizes.

    ``params`` are (shape, scale) for gamma and Weibull, (rate,) for exponential,
    (mu, sigma) for log-normal and (rate per hour,) for uniform hazard.
    ``node_p`` is only read under ``Scaling.INDEPENDENT_NODES``.
    ``burn_in_multiplier``/``burn_in_fraction`` raise the uniform hazard over the
    start of the horizon; 1.0 disables it.
    """

    family: Family
    params: tuple[float, ...]
    base_nodes: int = 1
    scaling: Scaling = Scaling.LINEAR_MTBF
    node_p: float = 0.0
    burn_in_multiplier: float = 1.0
    burn_in_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if len(self.params) != _N_PARAMS[self.family]:
            raise ValueError(
                f"{self.family.value} takes {_N_PARAMS[self.family]} parameter(s), got {len(self.params)}"
            )
        positive = self.params[1:] if self.family is Family.LOGNORMAL else self.params
        if not all(math.isfinite(p) for p in self.params) or not all(p > 0 for p in positive):
            raise ValueError(f"invalid {self.family.value} parameters {self.params}")
        if self.base_nodes < 1:
            raise ValueError("base_nodes must be >= 1")
        if not 0.0 <= self.node_p <= 1.0:
            raise ValueError("node_p must be a probability")
        if self.burn_in_multiplier <= 0 or not 0.0 <= self.burn_in_fraction <= 1.0:
            raise ValueError("invalid burn-in settings")
        if not (0 < self.mean < math.inf):
            raise ValueError("distribution mean must be finite and positive")

    @classmethod
    def with_mtbf(cls, family: Family | str, mtbf: float, shape: float = 1.0, **kw) -> "FailureProcess":
        """Build a process of the given family whose mean equals ``mtbf`` hours."""
        family = Family(family)
        if family is Family.GAMMA:
            params = (shape, mtbf / shape)
        elif family is Family.WEIBULL:
            params = (shape, mtbf / math.gamma(1.0 + 1.0 / shape))
        elif family in (Family.EXPONENTIAL, Family.UNIFORM_HAZARD):
            params = (1.0 / mtbf,)
        else:
            sigma = shape
            params = (math.log(mtbf) - sigma**2 / 2.0, sigma)
        return cls(family, params, **kw)

    @property
    def mean(self) -> float:
        p = self.params
        if self.family is Family.GAMMA:
            return p[0] * p[1]
        if self.family is Family.WEIBULL:
            return p[1] * math.gamma(1.0 + 1.0 / p[0])
        if self.family in (Family.EXPONENTIAL, Family.UNIFORM_HAZARD):
            return 1.0 / p[0]
        return math.exp(p[0] + p[1] ** 2 / 2.0)

    def frozen(self):
        """The scipy distribution of a single inter-failure gap."""
        return _frozen(self.family, tuple(self.params))

    def scaled_to(self, n: int) -> "FailureProcess":
        """Same family and shape, with the time scale stretched so the mean is ``mtbf_for_nodes(self, n)``."""
        factor = mtbf_for_nodes(self, n) / self.mean
        p = self.params
        if self.family in (Family.GAMMA, Family.WEIBULL):
            params = (p[0], p[1] * factor)
        elif self.family in (Family.EXPONENTIAL, Family.UNIFORM_HAZARD):
            params = (p[0] / factor,)
        else:
            params = (p[0] + math.log(factor), p[1])
        return replace(self, params=params, base_nodes=n)


# freezing a scipy distribution is slow; processes are reused across many seeds
@functools.lru_cache(maxsize=256)
def _frozen(family: Family, params: tuple[float, ...]):
    if family is Family.GAMMA:
        return stats.gamma(params[0], scale=params[1])
    if family is Family.WEIBULL:
        return stats.weibull_min(params[0], scale=params[1])
    if family in (Family.EXPONENTIAL, Family.UNIFORM_HAZARD):
        return stats.expon(scale=1.0 / params[0])
    return stats.lognorm(params[1], scale=math.exp(params[0]))


# ---------------------------------------------------------------------------
# MTBF scaling
# ---------------------------------------------------------------------------


def independent_nodes_mtbf_periods(p: float, n: int) -> float:
    """Mean periods until the first of ``n`` nodes fails, each failing w.p. ``p`` per period."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if p <= 0.0:
        raise InfiniteMTBFError("per-node failure probability is zero; MTBF is infinite")
    # -expm1(n*log1p(-p)) == 1 - (1-p)**n without cancellation for tiny p
    return 1.0 / -math.expm1(n * math.log1p(-p)) if p < 1.0 else 1.0


def mtbf_for_nodes(process: FailureProcess, n: int) -> float:
    """MTBF in hours for a job of ``n`` nodes.

    Under LINEAR_MTBF the product MTBF * nodes is conserved. Under
    INDEPENDENT_NODES the period length is pinned so that the job of
    ``base_nodes`` nodes has the process mean as its MTBF.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if process.scaling is Scaling.LINEAR_MTBF:
        return process.mean * process.base_nodes / n
    period_hours = process.mean / independent_nodes_mtbf_periods(process.node_p, process.base_nodes)
    return period_hours * independent_nodes_mtbf_periods(process.node_p, n)


# ---------------------------------------------------------------------------
# Failure traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FailureTrace:
    events: tuple[tuple[float, float], ...]
    horizon_hours: float

    def __post_init__(self):
        times = [t for t, _ in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("failure times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.horizon_hours):
            raise ValueError("failure times must lie within the horizon")
        if any(not 0.0 < f <= 1.0 for _, f in self.events):
            raise ValueError("lost fractions must lie in (0, 1]")

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.events]

    def __len__(self):
        return len(self.events)

    def to_bytes(self) -> bytes:
        return repr((self.horizon_hours, self.events)).encode()


def _validate_fractions(fraction_set: Iterable[float]) -> tuple[float, ...]:
    fractions = tuple(float(f) for f in fraction_set)
    if not fractions:
        raise ValueError("fraction_set must be non-empty")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    return fractions


def _trace(times: np.ndarray, horizon: float, fractions, rng) -> FailureTrace:
    picks = rng.integers(len(fractions), size=len(times))
    return FailureTrace(tuple((float(t), fractions[i]) for t, i in zip(times, picks)), float(horizon))


def _uniform_hazard_times(process: FailureProcess, horizon: float, rng) -> np.ndarray:
    # Piecewise-constant hazard: unit-rate Poisson arrivals mapped through the inverse cumulative hazard.
    rate = process.params[0]
    t_burn = process.burn_in_fraction * horizon
    m = process.burn_in_multiplier
    total = rate * (m * t_burn + (horizon - t_burn))
    arrivals = []
    acc = rng.exponential()
    while acc < total:
        arrivals.append(acc)
        acc += rng.exponential()
    out = []
    for a in arrivals:
        if a < rate * m * t_burn:
            out.append(a / (rate * m))
        else:
            out.append(t_burn + (a - rate * m * t_burn) / rate)
    return np.asarray(out, dtype=float)


def sample_failure_schedule(
    process: FailureProcess, horizon_hours: float, fraction_set: Iterable[float], seed: int
) -> FailureTrace:
    """Renewal-process failure trace: i.i.d. gaps from ``process`` until the horizon is passed."""
    fractions = _validate_fractions(fraction_set)
    rng = np.random.default_rng(seed)
    if horizon_hours <= 0:
        return FailureTrace((), max(float(horizon_hours), 0.0))
    if process.family is Family.UNIFORM_HAZARD:
        times = _uniform_hazard_times(process, horizon_hours, rng)
    else:
        dist = process.frozen()
        # draw gaps in blocks sized from the expected count
        block = max(8, int(2 * horizon_hours / process.mean) + 8)
        gaps = np.empty(0)
        while gaps.sum() <= horizon_hours:
            gaps = np.concatenate([gaps, dist.rvs(size=block, random_state=rng)])
        times = np.cumsum(gaps)
        times = times[times <= horizon_hours]
    times = _dedupe(times)
    return _trace(times, horizon_hours, fractions, rng)


def inject_uniform_failures(count: int, horizon_hours: float, fraction_set: Iterable[float], seed: int) -> FailureTrace:
    """Exactly ``count`` failures placed uniformly at random over the horizon."""
    fractions = _validate_fractions(fraction_set)
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    if horizon_hours <= 0 or count == 0:
        return FailureTrace((), max(float(horizon_hours), 0.0))
    times = _dedupe(np.sort(rng.uniform(0.0, horizon_hours, size=count)))
    return _trace(times, horizon_hours, fractions, rng)


def _dedupe(times: np.ndarray) -> np.ndarray:
    # coincident draws are measure-zero; keep the trace strictly increasing anyway
    if len(times) < 2:
        return times
    keep = np.concatenate([[True], np.diff(times) > 0])
    return times[keep]


def interarrival_gaps(times: Sequence[float], first_only: bool = False) -> np.ndarray:
    """Time-to-failure samples from failure timestamps of one job.

    ``first_only`` keeps only the time to the first failure, the other common
    way of turning job logs into MTBF statistics.
    """
    t = np.asarray(sorted(times), dtype=float)
    if t.size == 0:
        return t
    gaps = np.diff(np.concatenate([[0.0], t]))
    return gaps[:1] if first_only else gaps


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


LL_TOLERANCE = 1e-8


@dataclass(frozen=True)
class FittedDistribution:
    family: Family
    params: tuple[float, ...]
    survival_rmse: float
    log_likelihood: float
    n: int = field(default=0, compare=False)

    def process(self, **kw) -> FailureProcess:
        return FailureProcess(self.family, self.params, **kw)


def _optimizer(func, x0, args=(), disp=0):
    return optimize.fmin(func, x0, args=args, disp=disp, xtol=1e-10, ftol=LL_TOLERANCE, maxiter=20000, maxfun=40000)


def empirical_survival(samples: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Kaplan-Meier step survival for uncensored data, evaluated at the sorted sample points."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    # right-continuous: S(x_(i)) = fraction strictly greater than x_(i)
    greater = n - np.searchsorted(x, x, side="right")
    return x, greater / n


def survival_rmse(samples: Sequence[float], family: Family, params: Sequence[float]) -> float:
    x, s_emp = empirical_survival(samples)
    s_fit = _frozen(Family(family), tuple(map(float, params))).sf(x)
    return float(np.sqrt(np.mean((s_fit - s_emp) ** 2)))


def fit_distribution(samples: Sequence[float], family: Family | str) -> FittedDistribution:
    """Maximum-likelihood fit of ``family`` to positive time-to-failure samples."""
    family = Family(family)
    if family not in FITTABLE:
        raise FitError(family, "not a fittable family")
    x = np.asarray(samples, dtype=float)
    if x.size < 3:
        raise FitError(family, f"need at least 3 samples, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise FitError(family, "samples must be finite and strictly positive")
    if np.all(x == x[0]):
        raise FitError(family, "all samples identical")

    if family is Family.EXPONENTIAL:
        params = (1.0 / x.mean(),)
    elif family is Family.LOGNORMAL:
        logs = np.log(x)
        params = (logs.mean(), logs.std())
    elif family is Family.GAMMA:
        shape, _, scale = stats.gamma.fit(x, floc=0, optimizer=_optimizer)
        params = (shape, scale)
    else:
        shape, _, scale = stats.weibull_min.fit(x, floc=0, optimizer=_optimizer)
        params = (shape, scale)
    if not all(np.isfinite(params)) or params[-1] <= 0:
        raise FitError(family, "optimizer did not converge")

    ll = float(np.sum(_frozen(family, tuple(map(float, params))).logpdf(x)))
    return FittedDistribution(
        family, tuple(float(p) for p in params), survival_rmse(x, family, params), ll, n=int(x.size)
    )


def fit_all(samples: Sequence[float], families: Iterable[Family | str] = FITTABLE):
    """Fit every family; rows sorted by survival RMSE, failures last as ``(family, FitError)``."""
    fits, errors = [], []
    for fam in families:
        try:
            fits.append(fit_distribution(samples, fam))
        except FitError as exc:
            errors.append((Family(fam), exc))
    fits.sort(key=lambda f: f.survival_rmse)
    return fits, errors


def read_trace_file(path: str | Path) -> np.ndarray:
    """One time-to-failure (hours) per line; blank lines and ``#`` comments ignored."""
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
    return np.asarray(values, dtype=float)


def hazard(process: FailureProcess, t: np.ndarray) -> np.ndarray:
    """Instantaneous failure rate pdf/sf; for gamma with shape < 1 this spikes near t=0."""
    dist = process.frozen()
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return dist.pdf(t) / dist.sf(t)


__all__ = [
    "Family",
    "Scaling",
    "FailureProcess",
    "FailureTrace",
    "FittedDistribution",
    "FitError",
    "InfiniteMTBFError",
    "fit_distribution",
    "fit_all",
    "mtbf_for_nodes",
    "independent_nodes_mtbf_periods",
    "sample_failure_schedule",
    "inject_uniform_failures",
    "interarrival_gaps",
    "read_trace_file",
    "survival_rmse",
    "empirical_survival",
    "hazard",
]
