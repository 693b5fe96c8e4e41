"""Synthetic recurrent-event data.

Covariates are multivariate normal with an AR(1) correlation structure, the
baseline hazard is Weibull (``Lambda0(t) = alpha * t**gamma``), each subject
carries a gamma frailty ``z`` and successive event times are drawn by
inverting the conditional cumulative hazard. A fixed fraction of subjects is
then censored uniformly on ``(0, follow_up)``.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import toeplitz

from .data import RecurrentDataset, Subject, round_half_up

# Calibrated once so that defaults give 2-3 events per subject on average
# (see tests/test_simulate.py::test_default_follow_up_event_density).
DEFAULT_FOLLOW_UP = 1.5

FRAILTY_PARAMETRIZATIONS = ("variance", "shape")


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 100
    p: int = 25
    sparse_rate: float = 0.25
    censoring_rate: float = 0.2
    rho: float = 0.7
    covariate_mean: float = 0.0
    beta_active: float = 0.15
    weibull_scale: float = 1.0
    weibull_shape: float = 2.0
    frailty_variance: float = 0.25
    frailty_parametrization: str = "variance"
    follow_up: float = DEFAULT_FOLLOW_UP
    replicates: int = 1
    seed: int = 20211101

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if not 0 <= self.sparse_rate <= 1:
            raise ValueError("sparse_rate must lie in [0, 1]")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring_rate must lie in [0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.weibull_scale <= 0 or self.weibull_shape <= 0:
            raise ValueError("Weibull scale and shape must be > 0")
        if self.frailty_variance < 0:
            raise ValueError("frailty_variance must be >= 0")
        if self.frailty_parametrization not in FRAILTY_PARAMETRIZATIONS:
            raise ValueError(f"frailty_parametrization must be one of {FRAILTY_PARAMETRIZATIONS}")
        if self.follow_up <= 0:
            raise ValueError("follow_up must be > 0")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @property
    def m(self) -> int:
        """Number of active covariates."""
        return round_half_up(self.sparse_rate * self.p)

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "ScenarioSpec":
        """Build from string or typed values; unknown keys are rejected."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown scenario key {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)


def _coerce(raw, type_name: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw


def read_spec(path: "str | Path", section: str = "scenario") -> ScenarioSpec:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return ScenarioSpec.from_mapping(dict(cp[section]))


def format_spec(spec: ScenarioSpec, section: str = "scenario") -> str:
    lines = [f"[{section}]"]
    for k, v in spec.to_dict().items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class TrueModel:
    beta: np.ndarray
    frailty_draws: np.ndarray = field(repr=False)

    @property
    def active_mask(self) -> np.ndarray:
        return self.beta != 0


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def ar1_correlation(p: int, rho: float) -> np.ndarray:
    return toeplitz(rho ** np.arange(p))


def sample_covariates(
    n: int, p: int, mean: float, rho: float, rng: np.random.Generator
) -> np.ndarray:
    if n < 2 or p < 1:
        raise ValueError("need n >= 2 and p >= 1")
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    try:
        L = np.linalg.cholesky(ar1_correlation(p, rho))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for rho in (0, 1)
        raise RuntimeError("AR(1) correlation matrix is not positive definite") from exc
    return mean + rng.standard_normal((n, p)) @ L.T


def cumulative_hazard(t: float, eta: float, spec: ScenarioSpec, z: float = 1.0) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return z * spec.weibull_scale * t**spec.weibull_shape * math.exp(eta)


def invert_conditional_hazard(
    u: float, t_prev: float, eta: float, spec: ScenarioSpec, z: float = 1.0
) -> float:
    """Gap ``w`` solving ``Lambda(t_prev + w) - Lambda(t_prev) = u``."""
    if not u > 0:
        raise ValueError("u must be > 0")
    if t_prev < 0:
        raise ValueError("t_prev must be >= 0")
    c = z * spec.weibull_scale * math.exp(eta)
    g = spec.weibull_shape
    if t_prev == 0:
        return (u / c) ** (1.0 / g)
    # (t^g + u/c)^(1/g) - t, written to avoid cancellation when u/c << t^g
    return t_prev * math.expm1(math.log1p(u / (c * t_prev**g)) / g)


def sample_event_times(
    eta: float, spec: ScenarioSpec, z: float, rng: np.random.Generator
) -> list[float]:
    times: list[float] = []
    t = 0.0
    while True:
        eps = 1.0 - rng.random()  # (0, 1]
        if eps == 1.0:
            continue
        w = invert_conditional_hazard(-math.log(eps), t, eta, spec, z)
        t_next = t + w
        if t_next > spec.follow_up:
            return times
        if t_next <= t:  # gap below float resolution; treat as no progress
            continue
        t = t_next
        times.append(t)


def apply_censoring(
    subjects: list[Subject], rate: float, tau: float, rng: np.random.Generator
) -> list[Subject]:
    """Censor exactly round(rate * n) randomly drawn subjects on U(0, tau).

    Everybody else is administratively censored at ``tau``. An event that
    coincides with the censoring draw is kept.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    n = len(subjects)
    k = round_half_up(rate * n)
    drawn = rng.choice(n, size=k, replace=False) if k else np.empty(0, dtype=int)
    cut = np.full(n, float(tau))
    for i in drawn:
        c = 0.0
        while c <= 0.0:
            c = rng.uniform(0.0, tau)
        cut[i] = c
    out = []
    for s, c in zip(subjects, cut):
        events = tuple(t for t in s.event_times if t <= c)
        out.append(Subject(s.id, events, c, s.covariates))
    return out


def true_beta(spec: ScenarioSpec) -> np.ndarray:
    beta = np.zeros(spec.p)
    beta[: spec.m] = spec.beta_active
    return beta


def sample_frailty(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    v = spec.frailty_variance
    if v == 0:
        return np.ones(n)
    if spec.frailty_parametrization == "variance":
        shape, scale = 1.0 / v, v
    else:
        shape, scale = v, 1.0 / v
    return rng.gamma(shape, scale, size=n)


def generate_scenario(
    spec: ScenarioSpec, replicate_index: int
) -> tuple[RecurrentDataset, TrueModel]:
    rng = substream(spec.seed, replicate_index)
    X = sample_covariates(spec.n, spec.p, spec.covariate_mean, spec.rho, rng)
    beta = true_beta(spec)
    z = sample_frailty(spec, spec.n, rng)
    eta = X @ beta
    # placeholder censoring time; apply_censoring sets the real one
    subjects = []
    for i in range(spec.n):
        times = sample_event_times(float(eta[i]), spec, float(z[i]), rng)
        subjects.append(Subject(i + 1, tuple(times), spec.follow_up, X[i]))
    subjects = apply_censoring(subjects, spec.censoring_rate, spec.follow_up, rng)
    meta = {"scenario": spec.to_dict(), "replicate": int(replicate_index), "seed": spec.seed}
    data = RecurrentDataset(tuple(subjects), spec.p, beta != 0, meta)
    return data, TrueModel(beta, z)
