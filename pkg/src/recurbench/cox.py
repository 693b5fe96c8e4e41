"""Partial-likelihood fitting for AG, PWP, WLW and gamma-frailty models.

All covariates are fixed over time, so inside a stratum a subject's linear
predictor is constant across its rows. The engine therefore works on
"units" (a subject, or a subject/stratum pair when coefficients are
stratum-specific): every event row gets a row of the at-risk count matrix
``Y[e, u]`` (number of rows of unit ``u`` in the event's stratum with
``start < t_e <= stop``). Breslow's approximation handles ties: each event
row contributes its own term with the shared risk set.

Objectives are written on the ``-2 * loglik`` scale, so a ridge penalty
``s`` minimizes ``-2 L(beta) + s * ||beta||^2`` and lasso minimizes
``-2 L(beta) + s * ||beta||_1``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg, optimize, special, stats

from .data import ModelKind, ModelLayout

ZERO_THRESHOLD = 1e-6
# exp(50) relative risk between two subjects: the likelihood is monotone
DIVERGENCE_SPAN = 50.0
SINGULAR_RCOND = 1e-10
LASSO_KKT_REL = 1e-5
# below this spread of linear predictors a single shift is safe for exp()
GLOBAL_CENTRE_SPAN = 300.0
# a full Newton step this long at a vanishing gradient means a monotone likelihood
RUNAWAY_STEP = 1e-2

OK = "OK"
SINGULAR = "SINGULAR"
DIVERGED = "DIVERGED"
MAX_ITER = "MAX_ITER"
STALLED = "STALLED"
FRAILTY_AT_ZERO = "FRAILTY_AT_ZERO"


class NonFiniteLikelihood(FloatingPointError):
    pass


# -- penalties and configuration --------------------------------------------


@dataclass(frozen=True)
class Penalty:
    kind: str = "none"  # none | lasso | ridge | bar
    strength: float = 0.0  # s for lasso/ridge
    xi: float = 0.0  # ridge initializer of BAR
    theta: float = 0.0  # BAR reweighted-ridge strength
    power: int = 2  # BAR denominator exponent (2, or 1 for the first-power form)

    def __post_init__(self):
        if self.kind not in ("none", "lasso", "ridge", "bar"):
            raise ValueError(f"unknown penalty {self.kind!r}")
        if self.strength < 0 or self.xi < 0 or self.theta < 0:
            raise ValueError("penalty parameters must be >= 0")
        if self.power not in (1, 2):
            raise ValueError("BAR power must be 1 or 2")

    @classmethod
    def none(cls) -> "Penalty":
        return cls()

    @classmethod
    def lasso(cls, s: float) -> "Penalty":
        return cls("lasso", strength=float(s))

    @classmethod
    def ridge(cls, s: float) -> "Penalty":
        return cls("ridge", strength=float(s))

    @classmethod
    def bar(cls, xi: float, theta: float, power: int = 2) -> "Penalty":
        return cls("bar", xi=float(xi), theta=float(theta), power=power)

    def describe(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind in ("lasso", "ridge"):
            return f"{self.kind}(s={self.strength:.6g})"
        return f"bar(xi={self.xi:.6g},theta={self.theta:.6g},power={self.power})"


@dataclass(frozen=True)
class FitConfig:
    penalty: Penalty = field(default_factory=Penalty)
    max_iter: int = 100
    tol: float = 1e-7
    step_halving_max: int = 30
    per_stratum: bool = False
    zero_threshold: float = ZERO_THRESHOLD
    bar_max_iter: int = 500
    bar_tol: float = 1e-6

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1 or self.step_halving_max < 0:
            raise ValueError("invalid iteration limits")

    def with_penalty(self, penalty: Penalty) -> "FitConfig":
        return dataclasses.replace(self, penalty=penalty)


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    selected: np.ndarray
    converged: bool
    iterations: int
    final_loglik: float
    reason: str = OK
    model: str = ""
    penalty: str = "none"
    p_values: np.ndarray | None = None
    n_strata: int = 1
    frailty_variance: float | None = None
    offset: np.ndarray | None = field(default=None, repr=False)
    zero_threshold: float = ZERO_THRESHOLD
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def coefficients(self) -> np.ndarray:
        """Coefficient per covariate; stratum-specific fits are averaged."""
        if self.n_strata == 1:
            return self.beta_hat
        return self.beta_hat.reshape(self.n_strata, -1).mean(axis=0)

    @property
    def selected_covariates(self) -> np.ndarray:
        if self.n_strata == 1:
            return self.selected
        return self.selected.reshape(self.n_strata, -1).any(axis=0)

    def replace(self, **changes) -> "FitResult":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else [float(v) for v in np.ravel(a)]

        payload = {
            "model": self.model,
            "penalty": self.penalty,
            "beta_hat": arr(self.beta_hat),
            "selected": [bool(v) for v in self.selected],
            "p_values": arr(self.p_values),
            "converged": bool(self.converged),
            "reason": self.reason,
            "iterations": int(self.iterations),
            "final_loglik": float(self.final_loglik),
            "n_strata": int(self.n_strata),
            "frailty_variance": self.frailty_variance,
            "zero_threshold": self.zero_threshold,
            "info": self.info,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        d = json.loads(text)
        pv = d.get("p_values")
        return cls(
            beta_hat=np.asarray(d["beta_hat"], dtype=float),
            selected=np.asarray(d["selected"], dtype=bool),
            converged=d["converged"],
            iterations=d["iterations"],
            final_loglik=d["final_loglik"],
            reason=d["reason"],
            model=d["model"],
            penalty=d["penalty"],
            p_values=None if pv is None else np.asarray(pv, dtype=float),
            n_strata=d.get("n_strata", 1),
            frailty_variance=d.get("frailty_variance"),
            zero_threshold=d.get("zero_threshold", ZERO_THRESHOLD),
            info=d.get("info", {}),
        )


# -- risk-set engine ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Problem:
    Y: np.ndarray  # (distinct risk sets, units) at-risk counts
    ev_unit: np.ndarray  # unit of each event
    Z: np.ndarray  # (units, q) design
    unit_subject: np.ndarray  # subject index of each unit
    n_strata: int
    weight: np.ndarray  # number of events sharing each risk set

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def with_design(self, Z: np.ndarray) -> "_Problem":
        return dataclasses.replace(self, Z=Z)


def _build_problem(layout: ModelLayout, per_stratum: bool) -> _Problem:
    X = layout.covariates
    n, p = X.shape
    strata = layout.stratum
    if per_stratum:
        K = int(strata.max())
        pairs = layout.subject * (K + 1) + strata
        keys, unit_of_row = np.unique(pairs, return_inverse=True)
        unit_subject = keys // (K + 1)
        unit_stratum = keys % (K + 1)
        Z = np.zeros((keys.shape[0], p * K))
        for u, (i, k) in enumerate(zip(unit_subject, unit_stratum)):
            Z[u, (k - 1) * p : k * p] = X[i]
        n_strata = K
    else:
        unit_of_row = layout.subject
        unit_subject = np.arange(n)
        Z = np.asarray(X, dtype=float)
        n_strata = 1
    n_units = unit_subject.shape[0]

    ev = np.flatnonzero(layout.status == 1)
    times = np.unique(np.concatenate([layout.start, layout.stop]))
    width = times.shape[0] + 1
    rank_start = np.searchsorted(times, layout.start)
    rank_stop = np.searchsorted(times, layout.stop)
    ev_key = strata[ev] * width + rank_stop[ev]
    order = np.argsort(ev_key, kind="stable")
    ev = ev[order]
    ev_key = ev_key[order]
    lo = np.searchsorted(ev_key, strata * width + rank_start, side="right")
    hi = np.searchsorted(ev_key, strata * width + rank_stop, side="right")
    D = np.zeros((ev.shape[0] + 1, n_units))
    np.add.at(D, (lo, unit_of_row), 1.0)
    np.add.at(D, (hi, unit_of_row), -1.0)
    Y = np.cumsum(D[:-1], axis=0)
    # events with identical risk sets (common in AG between censorings) share a row
    Y, counts = np.unique(Y, axis=0, return_counts=True)
    return _Problem(Y, unit_of_row[ev], Z, unit_subject, n_strata, counts.astype(float))


_PROBLEM_CACHE: "dict[tuple[int, bool], tuple[ModelLayout, _Problem]]" = {}


def _problem(layout: ModelLayout, per_stratum: bool = False) -> _Problem:
    key = (id(layout), per_stratum)
    hit = _PROBLEM_CACHE.get(key)
    if hit is not None and hit[0] is layout:
        return hit[1]
    prob = _build_problem(layout, per_stratum)
    if len(_PROBLEM_CACHE) > 16:
        _PROBLEM_CACHE.clear()
    _PROBLEM_CACHE[key] = (layout, prob)
    return prob


@dataclass
class _Stats:
    loglik: float
    grad_eta: np.ndarray  # dL/d eta_u
    log_s0: np.ndarray
    col: np.ndarray  # risk-set probabilities summed over events, per unit
    hess_eta: np.ndarray | None = None


def _risk_stats(prob: _Problem, eta: np.ndarray, hessian: bool = True) -> _Stats:
    Y = prob.Y
    c = prob.weight
    m = Y.shape[1]
    if Y.shape[0] == 0:
        h = np.zeros((m, m)) if hessian else None
        return _Stats(0.0, np.zeros(m), np.zeros(0), np.zeros(m), h)
    if m and np.ptp(eta) < GLOBAL_CENTRE_SPAN:
        # one shift fits every risk set without underflow
        top = float(eta.max())
        w = np.exp(eta - top)
        s0 = Y @ w
        log_s0 = top + np.log(s0)
        col = (Y.T @ (c / s0)) * w
        Q = (Y * w[None, :]) / s0[:, None] if hessian else None
    else:
        # centre on the largest linear predictor of each risk set
        masked = np.where(Y > 0, eta[None, :], -np.inf)
        top = masked.max(axis=1)
        W = Y * np.exp(masked - top[:, None])
        s0 = W.sum(axis=1)
        log_s0 = top + np.log(s0)
        Q = W / s0[:, None]
        col = c @ Q
    loglik = float(np.sum(eta[prob.ev_unit]) - c @ log_s0)
    if not np.isfinite(loglik):
        raise NonFiniteLikelihood(
            f"partial likelihood is not finite (max |eta| = {np.max(np.abs(eta)):.3g})"
        )
    grad = np.bincount(prob.ev_unit, minlength=m) - col
    h = None
    if hessian:
        h = Q.T @ (c[:, None] * Q)
        h[np.diag_indices_from(h)] -= col
    return _Stats(loglik, grad, log_s0, col, h)


def _unit_offset(prob: _Problem, offset: np.ndarray | None) -> np.ndarray:
    if offset is None:
        return np.zeros(prob.unit_subject.shape[0])
    return np.asarray(offset, dtype=float)[prob.unit_subject]


def _eta(prob: _Problem, beta: np.ndarray, off: np.ndarray) -> np.ndarray:
    return prob.Z @ beta + off


def _check_beta(prob: _Problem, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != prob.q:
        raise ValueError(f"beta has length {beta.shape[0]}, expected {prob.q}")
    return beta


def partial_loglik(
    layout: ModelLayout,
    beta,
    offset: np.ndarray | None = None,
    per_stratum: bool = False,
) -> float:
    """Breslow partial log-likelihood summed over strata.

    ``offset`` is an optional per-subject term added to the linear predictor.
    """
    if layout.n_rows == 0:
        raise ValueError("empty layout")
    prob = _problem(layout, per_stratum)
    beta = _check_beta(prob, beta)
    return _risk_stats(prob, _eta(prob, beta, _unit_offset(prob, offset)), hessian=False).loglik


def gradient_hessian(
    layout: ModelLayout,
    beta,
    offset: np.ndarray | None = None,
    per_stratum: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Score vector and Hessian (negative observed information) of the partial log-likelihood."""
    prob = _problem(layout, per_stratum)
    beta = _check_beta(prob, beta)
    st = _risk_stats(prob, _eta(prob, beta, _unit_offset(prob, offset)))
    Z = prob.Z
    return Z.T @ st.grad_eta, Z.T @ st.hess_eta @ Z


# -- solvers ------------------------------------------------------------------


@dataclass
class _Solve:
    beta: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    reason: str


def _span(eta: np.ndarray) -> float:
    return float(eta.max() - eta.min()) if eta.size else 0.0


def _runaway(info: np.ndarray, grad: np.ndarray) -> bool:
    """Tiny gradient but a large Newton step: the likelihood keeps rising towards infinity."""
    try:
        step = np.linalg.solve(info, grad)
    except np.linalg.LinAlgError:
        return True
    return bool(np.max(np.abs(step)) > RUNAWAY_STEP)


def _newton(
    prob: _Problem,
    off: np.ndarray,
    ridge: float | np.ndarray,
    beta0: np.ndarray,
    config: FitConfig,
) -> _Solve:
    """Minimize -2 L(beta) + sum(ridge * beta**2) by damped Newton."""
    q = prob.q
    Z = prob.Z
    ridge_vec = np.broadcast_to(np.asarray(ridge, dtype=float), (q,))
    penalized = bool(np.any(ridge_vec > 0))
    beta = beta0.copy()

    def objective(b):
        st = _risk_stats(prob, _eta(prob, b, off), hessian=False)
        return -2.0 * st.loglik + float(ridge_vec @ (b * b)), st.loglik

    if q == 0:
        st = _risk_stats(prob, off, hessian=False)
        return _Solve(beta, st.loglik, True, 0, OK)

    f, ll = objective(beta)
    for it in range(1, config.max_iter + 1):
        eta = _eta(prob, beta, off)
        st = _risk_stats(prob, eta)
        grad = -2.0 * (Z.T @ st.grad_eta) + 2.0 * ridge_vec * beta
        info = -2.0 * (Z.T @ st.hess_eta @ Z)
        info = 0.5 * (info + info.T)
        if np.max(np.abs(grad)) < config.tol:
            if not penalized and _runaway(info, grad):
                return _Solve(beta, st.loglik, False, it - 1, DIVERGED)
            return _Solve(beta, st.loglik, True, it - 1, OK)
        if not penalized:
            ev = np.linalg.eigvalsh(info)
            if ev[-1] <= 0 or ev[0] <= SINGULAR_RCOND * ev[-1]:
                return _Solve(beta, st.loglik, False, it, SINGULAR)
        info[np.diag_indices(q)] += 2.0 * ridge_vec
        try:
            step = linalg.cho_solve(linalg.cho_factor(info), -grad)
        except linalg.LinAlgError:
            return _Solve(beta, st.loglik, False, it, SINGULAR)
        t = 1.0
        for _ in range(config.step_halving_max + 1):
            cand = beta + t * step
            try:
                f_new, ll_new = objective(cand)
            except NonFiniteLikelihood:
                f_new = math.inf
            if f_new <= f + 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            return _Solve(beta, ll, False, it, STALLED)
        beta, f, ll = cand, f_new, ll_new
        # a penalized objective is coercive, only the plain likelihood can run off
        if not penalized and _span(_eta(prob, beta, off)) > DIVERGENCE_SPAN:
            return _Solve(beta, ll, False, it, DIVERGED)
    eta = _eta(prob, beta, off)
    st = _risk_stats(prob, eta, hessian=False)
    grad = -2.0 * (Z.T @ st.grad_eta) + 2.0 * ridge_vec * beta
    if np.max(np.abs(grad)) < config.tol:
        return _Solve(beta, st.loglik, True, config.max_iter, OK)
    return _Solve(beta, st.loglik, False, config.max_iter, MAX_ITER)


def _soft(z: float, s: float) -> float:
    if z > s:
        return z - s
    if z < -s:
        return z + s
    return 0.0


def _lasso_kkt(grad: np.ndarray, beta: np.ndarray, s: float) -> float:
    """Largest violation of the lasso optimality conditions."""
    nz = beta != 0
    viol = np.where(nz, np.abs(grad + s * np.sign(beta)), np.maximum(np.abs(grad) - s, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _lasso(
    prob: _Problem, off: np.ndarray, s: float, beta0: np.ndarray, config: FitConfig
) -> _Solve:
    """Cyclic coordinate descent on successive quadratic approximations.

    Each outer step builds the second-order expansion of ``-2 L`` at the
    current point, runs coordinate sweeps with soft-thresholding on it, and
    then halves the step towards that solution until the penalized
    objective does not increase.
    """
    Z = prob.Z
    q = prob.q
    beta = beta0.copy()
    # coordinate descent on a rank-deficient model creeps; judge optimality relative to s
    kkt_tol = max(config.tol, LASSO_KKT_REL * s)

    def objective(b):
        st = _risk_stats(prob, _eta(prob, b, off), hessian=False)
        return -2.0 * st.loglik + s * float(np.abs(b).sum()), st.loglik

    f, ll = objective(beta)
    for it in range(1, config.max_iter + 1):
        st = _risk_stats(prob, _eta(prob, beta, off))
        g = -2.0 * (Z.T @ st.grad_eta)
        if _lasso_kkt(g, beta, s) < kkt_tol:
            return _Solve(beta, st.loglik, True, it - 1, OK)
        H = -2.0 * (Z.T @ st.hess_eta @ Z)
        diag = np.maximum(np.diag(H), 1e-12)
        new = beta.copy()
        r = g.copy()  # gradient of the quadratic model at `new`
        for _ in range(500):
            biggest = 0.0
            for j in range(q):
                old = new[j]
                nj = _soft(diag[j] * old - r[j], s) / diag[j]
                if nj != old:
                    d = nj - old
                    r += H[:, j] * d
                    new[j] = nj
                    biggest = max(biggest, abs(d))
            if biggest < 0.1 * config.tol:
                break
        step = new - beta
        t = 1.0
        for _ in range(config.step_halving_max + 1):
            cand = beta + t * step
            try:
                f_new, ll_new = objective(cand)
            except NonFiniteLikelihood:
                f_new = math.inf
            if f_new <= f + 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            return _Solve(beta, ll, False, it, STALLED)
        moved = float(np.max(np.abs(cand - beta))) if q else 0.0
        beta, f, ll = cand, f_new, ll_new
        if moved < 1e-12:
            break
    st = _risk_stats(prob, _eta(prob, beta, off), hessian=False)
    g = -2.0 * (Z.T @ st.grad_eta)
    if _lasso_kkt(g, beta, s) < kkt_tol:
        return _Solve(beta, st.loglik, True, it, OK)
    return _Solve(beta, st.loglik, False, it, MAX_ITER)


def _bar(
    prob: _Problem,
    off: np.ndarray,
    xi: float,
    theta: float,
    power: int,
    config: FitConfig,
    beta_init: np.ndarray | None = None,
) -> tuple[_Solve, list[int]]:
    """Broken adaptive ridge; returns the final solve and the support size per iteration.

    Iteration w minimizes ``-2 L(b) + theta * sum(b_j**2 / |b_j^(w-1)|**power)``.
    With ``d_j = |b_j^(w-1)|**(power/2)`` that is a plain ridge with strength
    ``theta`` on ``u = b / d`` under the rescaled design ``Z * d``, which
    stays well conditioned as coefficients head to zero.
    """
    q = prob.q
    thr = config.zero_threshold
    if beta_init is None:
        init = _newton(prob, off, xi, np.zeros(q), config)
        if not init.converged:
            init.reason = f"{init.reason}@0"
            return init, [q]
        beta = init.beta.copy()
    else:
        beta = beta_init.copy()
    beta[np.abs(beta) < thr] = 0.0
    support = [int(np.count_nonzero(beta))]
    total_iter = 0
    for w in range(1, config.bar_max_iter + 1):
        active = np.flatnonzero(beta)
        d = np.abs(beta[active]) ** (power / 2.0)
        sub = prob.with_design(prob.Z[:, active] * d)
        res = _newton(sub, off, theta, beta[active] / d, config)
        total_iter += res.iterations
        if not res.converged:
            res.beta = _scatter(q, active, res.beta * d)
            res.reason = f"{res.reason}@{w}"
            res.iterations = total_iter
            return res, support
        new = _scatter(q, active, res.beta * d)
        new[np.abs(new) < thr] = 0.0
        change = float(np.max(np.abs(new - beta))) if q else 0.0
        beta = new
        support.append(int(np.count_nonzero(beta)))
        if change < config.bar_tol:
            ll = _risk_stats(prob, _eta(prob, beta, off), hessian=False).loglik
            return _Solve(beta, ll, True, w, OK), support
    ll = _risk_stats(prob, _eta(prob, beta, off), hessian=False).loglik
    return _Solve(beta, ll, False, config.bar_max_iter, MAX_ITER), support


def _scatter(q: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros(q)
    out[idx] = values
    return out


def _solve(
    prob: _Problem,
    off: np.ndarray,
    config: FitConfig,
    beta0: np.ndarray | None = None,
) -> tuple[_Solve, dict[str, Any]]:
    pen = config.penalty
    start = np.zeros(prob.q) if beta0 is None else beta0
    if pen.kind == "none":
        return _newton(prob, off, 0.0, start, config), {}
    if pen.kind == "ridge":
        return _newton(prob, off, pen.strength, start, config), {}
    if pen.kind == "lasso":
        return _lasso(prob, off, pen.strength, start, config), {}
    res, support = _bar(prob, off, pen.xi, pen.theta, pen.power, config)
    return res, {"support_path": support}


def _result(
    layout: ModelLayout, prob: _Problem, res: _Solve, config: FitConfig, **extra
) -> FitResult:
    beta = res.beta
    return FitResult(
        beta_hat=beta,
        selected=np.abs(beta) > config.zero_threshold,
        converged=res.converged,
        iterations=res.iterations,
        final_loglik=res.loglik,
        reason=res.reason,
        model=layout.model.value,
        penalty=config.penalty.describe(),
        n_strata=prob.n_strata,
        zero_threshold=config.zero_threshold,
        **extra,
    )


def lasso_max_strength(
    layout: ModelLayout, offset: np.ndarray | None = None, per_stratum: bool = False
) -> float:
    """Smallest lasso strength whose solution is all zero: max |grad of -2L at 0|."""
    prob = _problem(layout, per_stratum)
    off = _unit_offset(prob, offset)
    st = _risk_stats(prob, off, hessian=False)
    g = -2.0 * (prob.Z.T @ st.grad_eta)
    return float(np.max(np.abs(g))) if g.size else 0.0


def fit(layout: ModelLayout, config: FitConfig = FitConfig(), offset: np.ndarray | None = None) -> FitResult:
    """Fit the layout's model under ``config.penalty``.

    Unpenalized and ridge fits use Newton-Raphson with step halving, lasso
    uses coordinate descent, BAR is delegated to :func:`fit_bar`. A fit that
    does not reach the gradient tolerance is returned with
    ``converged=False`` and a reason code (SINGULAR, DIVERGED, MAX_ITER or
    STALLED).
    """
    if config.penalty.kind == "bar":
        return fit_bar(layout, config.penalty.xi, config.penalty.theta, config, offset)
    prob = _problem(layout, config.per_stratum)
    res, info = _solve(prob, _unit_offset(prob, offset), config)
    return _result(layout, prob, res, config, offset=offset, info=info)


def fit_bar(
    layout: ModelLayout,
    xi: float,
    theta: float,
    config: FitConfig = FitConfig(),
    offset: np.ndarray | None = None,
) -> FitResult:
    if xi < 0 or theta < 0:
        raise ValueError("xi and theta must be >= 0")
    power = config.penalty.power if config.penalty.kind == "bar" else 2
    config = config.with_penalty(Penalty.bar(xi, theta, power))
    prob = _problem(layout, config.per_stratum)
    res, support = _bar(prob, _unit_offset(prob, offset), xi, theta, power, config)
    return _result(layout, prob, res, config, offset=offset, info={"support_path": support})


# -- gamma frailty --------------------------------------------------------------


@dataclass
class _FrailtyState:
    variance: float
    beta: np.ndarray
    log_z: np.ndarray
    solve: _Solve
    marginal: float
    em_iterations: int


def _marginal_loglik(
    prob: _Problem, beta: np.ndarray, log_z: np.ndarray, variance: float, penalty: float
) -> float:
    """Gamma-frailty marginal log-likelihood with Breslow baseline increments."""
    n = prob.unit_subject.shape[0]
    eta = prob.Z @ beta
    st = _risk_stats(prob, eta + log_z, hessian=False)
    d = np.bincount(prob.ev_unit, minlength=n).astype(float)
    # cumulative hazard of each subject without its frailty
    H = st.col * np.exp(-log_z)
    base = st.loglik - float(np.sum(log_z[prob.ev_unit]))
    if variance <= 0:
        return base - float(H.sum()) - 0.5 * penalty
    k = 1.0 / variance
    terms = (
        special.gammaln(k + d)
        - special.gammaln(k)
        - k * np.log1p(H / k)
        - d * np.log(k + H)
    )
    return base + float(terms.sum()) - 0.5 * penalty


def _penalty_value(pen: Penalty, beta: np.ndarray) -> float:
    if pen.kind == "ridge":
        return pen.strength * float(beta @ beta)
    if pen.kind == "lasso":
        return pen.strength * float(np.abs(beta).sum())
    return 0.0


def _em(
    prob: _Problem,
    variance: float,
    config: FitConfig,
    beta0: np.ndarray,
    log_z0: np.ndarray,
    max_em: int = 500,
    em_tol: float = 1e-6,
) -> _FrailtyState:
    """EM for fixed frailty variance: E-step z = (k + d) / (k + H), M-step Cox with offsets log z."""
    n = prob.unit_subject.shape[0]
    d = np.bincount(prob.ev_unit, minlength=n).astype(float)
    beta, log_z = beta0.copy(), log_z0.copy()
    if variance <= 0:
        log_z = np.zeros(n)
    res = None
    for it in range(1, max_em + 1):
        res, _ = _solve(prob, log_z, config, beta)
        if not res.converged:
            return _FrailtyState(variance, res.beta, log_z, res, -math.inf, it)
        if variance <= 0:
            beta = res.beta
            break
        st = _risk_stats(prob, prob.Z @ res.beta + log_z, hessian=False)
        H = st.col * np.exp(-log_z)
        k = 1.0 / variance
        new_log_z = np.log(k + d) - np.log(k + H)
        delta = max(
            float(np.max(np.abs(new_log_z - log_z))),
            float(np.max(np.abs(res.beta - beta))) if beta.size else 0.0,
        )
        beta, log_z = res.beta, new_log_z
        if delta < em_tol:
            break
    else:
        res = _Solve(beta, res.loglik, False, max_em, MAX_ITER)
        return _FrailtyState(variance, beta, log_z, res, -math.inf, max_em)
    marg = _marginal_loglik(prob, beta, log_z, variance, _penalty_value(config.penalty, beta))
    return _FrailtyState(variance, beta, log_z, res, marg, it)


def _ppl(
    prob: _Problem,
    variance: float,
    config: FitConfig,
    beta0: np.ndarray,
    log_z0: np.ndarray,
) -> _FrailtyState:
    """Joint Newton on the gamma-frailty penalized partial likelihood.

    Maximizes ``L(beta, b) + k * sum(b - exp(b))`` with ``k = 1 / variance``
    and ``b = log z``, minus the ridge penalty on beta if any. Its
    stationary point in ``b`` is the EM update ``z = (k + d) / (k + H)``.
    """
    n = prob.unit_subject.shape[0]
    q = prob.q
    Z = prob.Z
    k = 1.0 / variance
    pen = config.penalty
    ridge = pen.strength if pen.kind == "ridge" else 0.0
    beta, b = beta0.copy(), log_z0.copy()

    def objective(bt, bb):
        st = _risk_stats(prob, Z @ bt + bb, hessian=False)
        return -2.0 * (st.loglik + k * float(np.sum(bb - np.exp(bb)))) + ridge * float(bt @ bt)

    f = objective(beta, b)
    for it in range(1, config.max_iter + 1):
        st = _risk_stats(prob, Z @ beta + b)
        eb = np.exp(b)
        grad = np.concatenate([
            -2.0 * (Z.T @ st.grad_eta) + 2.0 * ridge * beta,
            -2.0 * (st.grad_eta + k * (1.0 - eb)),
        ])
        if np.max(np.abs(grad)) < config.tol:
            res = _Solve(beta, st.loglik, True, it - 1, OK)
            return _FrailtyState(variance, beta, b, res, 0.0, it - 1)
        Hz = st.hess_eta @ Z
        info = np.empty((q + n, q + n))
        info[:q, :q] = -2.0 * (Z.T @ Hz)
        info[:q, q:] = -2.0 * Hz.T
        info[q:, :q] = -2.0 * Hz
        info[q:, q:] = -2.0 * st.hess_eta
        info[q + np.arange(n), q + np.arange(n)] += 2.0 * k * eb
        info = 0.5 * (info + info.T)
        if ridge == 0:
            ev = np.linalg.eigvalsh(info)
            if ev[-1] <= 0 or ev[0] <= SINGULAR_RCOND * ev[-1]:
                res = _Solve(beta, st.loglik, False, it, SINGULAR)
                return _FrailtyState(variance, beta, b, res, -math.inf, it)
        info[np.arange(q), np.arange(q)] += 2.0 * ridge
        try:
            step = linalg.cho_solve(linalg.cho_factor(info), -grad)
        except linalg.LinAlgError:
            res = _Solve(beta, st.loglik, False, it, SINGULAR)
            return _FrailtyState(variance, beta, b, res, -math.inf, it)
        t = 1.0
        for _ in range(config.step_halving_max + 1):
            cb, cz = beta + t * step[:q], b + t * step[q:]
            try:
                f_new = objective(cb, cz)
            except NonFiniteLikelihood:
                f_new = math.inf
            if f_new <= f + 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            res = _Solve(beta, st.loglik, False, it, STALLED)
            return _FrailtyState(variance, beta, b, res, -math.inf, it)
        beta, b, f = cb, cz, f_new
        if ridge == 0 and _span(Z @ beta) > DIVERGENCE_SPAN:
            res = _Solve(beta, st.loglik, False, it, DIVERGED)
            return _FrailtyState(variance, beta, b, res, -math.inf, it)
    res = _Solve(beta, _risk_stats(prob, Z @ beta + b, hessian=False).loglik, False, config.max_iter, MAX_ITER)
    return _FrailtyState(variance, beta, b, res, -math.inf, config.max_iter)


def _frailty_state(
    prob: _Problem, variance: float, config: FitConfig, beta0: np.ndarray, log_z0: np.ndarray
) -> _FrailtyState:
    n = prob.unit_subject.shape[0]
    if variance <= 0:
        res, _ = _solve(prob, np.zeros(n), config, beta0)
        state = _FrailtyState(0.0, res.beta, np.zeros(n), res, -math.inf, res.iterations)
    else:
        state = _ppl(prob, variance, config, beta0, log_z0)
    if state.solve.converged:
        state.marginal = _marginal_loglik(
            prob, state.beta, state.log_z, variance, _penalty_value(config.penalty, state.beta)
        )
    return state


VARIANCE_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def fit_frailty(
    layout: ModelLayout,
    config: FitConfig = FitConfig(),
    variance: float | None = None,
    max_variance: float = 10.0,
) -> FitResult:
    """Shared gamma-frailty model on an AG-shaped layout.

    For a fixed frailty variance, coefficients and per-subject log-frailty
    offsets maximize the gamma-frailty penalized partial likelihood (the
    fixed point of the EM algorithm). The variance maximizes the marginal
    likelihood: an ascending grid scan that stops once the profile drops,
    refined by bounded Brent search around the best grid point. Pass
    ``variance`` to fix it; ``variance=0`` is the plain AG fit.

    Lasso and BAR are profiled with a ridge surrogate (strength ``log p``);
    the final coefficients come from one penalized fit with the frailty
    offsets held fixed.
    """
    if layout.risk_set != "unrestricted" or layout.timescale != "counting-process":
        raise ValueError("frailty models need an AG-shaped layout")
    prob = _problem(layout, False)
    n = prob.unit_subject.shape[0]
    pen = config.penalty
    surrogate = config
    if pen.kind in ("lasso", "bar"):
        surrogate = config.with_penalty(Penalty.ridge(math.log(max(layout.p, 2))))
    zero_state = _frailty_state(prob, 0.0, surrogate, np.zeros(prob.q), np.zeros(n))
    if not zero_state.solve.converged:
        return _frailty_result(layout, prob, config, zero_state, zero_state.solve)

    if variance is not None:
        best = _frailty_state(prob, float(variance), surrogate, zero_state.beta, np.zeros(n))
    else:
        states = {0.0: zero_state}
        warm = zero_state

        def evaluate(v: float) -> _FrailtyState:
            nonlocal warm
            if v not in states:
                states[v] = _frailty_state(prob, v, surrogate, warm.beta, warm.log_z)
                if states[v].solve.converged:
                    warm = states[v]
            return states[v]

        grid = [0.0] + [v for v in VARIANCE_GRID if v <= max_variance]
        for v in grid[1:]:
            if evaluate(v).marginal < states[grid[grid.index(v) - 1]].marginal:
                break
        scanned = [v for v in grid if v in states]
        top = max(scanned, key=lambda v: states[v].marginal)
        i = scanned.index(top)
        lo = scanned[max(i - 1, 0)]
        hi = scanned[min(i + 1, len(scanned) - 1)]
        if hi > lo:
            optimize.minimize_scalar(
                lambda v: -evaluate(float(v)).marginal,
                bounds=(max(lo, 1e-4), hi),
                method="bounded",
                options={"xatol": 1e-3 * max(hi, 0.01)},
            )
        best = max(
            (s for s in states.values() if s.solve.converged),
            key=lambda s: s.marginal,
        )
    if not best.solve.converged:
        return _frailty_result(layout, prob, config, best, best.solve)

    final = best.solve
    if surrogate is not config:
        final, _ = _solve(prob, best.log_z, config)
    return _frailty_result(layout, prob, config, best, final)


def _frailty_result(layout, prob, config, state: _FrailtyState, solve: _Solve) -> FitResult:
    variance = state.variance
    reason = solve.reason
    if solve.converged and variance <= 1e-3:
        reason = FRAILTY_AT_ZERO
    offset = np.zeros(layout.n_subjects)
    offset[prob.unit_subject] = state.log_z
    return FitResult(
        beta_hat=solve.beta,
        selected=np.abs(solve.beta) > config.zero_threshold,
        converged=solve.converged,
        iterations=solve.iterations,
        final_loglik=solve.loglik,
        reason=reason,
        model=ModelKind.FRAILTY.value,
        penalty=config.penalty.describe(),
        frailty_variance=float(variance),
        offset=offset,
        zero_threshold=config.zero_threshold,
        info={"em_iterations": state.em_iterations, "marginal_loglik": state.marginal},
    )


# -- inference ------------------------------------------------------------------


def _wald(info: np.ndarray, beta: np.ndarray) -> np.ndarray | None:
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None
    var = np.diag(cov)
    if np.any(~np.isfinite(var)) or np.any(var <= 0):
        return None
    z = beta / np.sqrt(var)
    return 2.0 * stats.norm.sf(np.abs(z))


def wald_pvalues(
    result: FitResult, layout: ModelLayout, config: FitConfig = FitConfig()
) -> np.ndarray | None:
    """Two-sided Wald p-values, or None when the information is not invertible.

    Penalized fits are refitted without penalty on their selected support;
    coefficients outside the support get p = 1.
    """
    if not result.converged:
        return None
    per_stratum = result.n_strata > 1
    prob = _problem(layout, per_stratum)
    off = _unit_offset(prob, result.offset)
    beta = np.asarray(result.beta_hat, dtype=float)
    if result.penalty != "none":
        support = np.flatnonzero(result.selected)
        pvals = np.ones(prob.q)
        if support.size == 0:
            return pvals
        sub = prob.with_design(prob.Z[:, support])
        refit = _newton(sub, off, 0.0, beta[support], dataclasses.replace(config, penalty=Penalty()))
        if not refit.converged:
            return None
        p_sub = _wald(_information(sub, refit.beta, off), refit.beta)
        if p_sub is None:
            return None
        pvals[support] = p_sub
        return pvals
    return _wald(_information(prob, beta, off), beta)


def _information(prob: _Problem, beta: np.ndarray, off: np.ndarray) -> np.ndarray:
    st = _risk_stats(prob, _eta(prob, beta, off))
    info = -(prob.Z.T @ st.hess_eta @ prob.Z)
    return 0.5 * (info + info.T)


def significant(result: FitResult, p_values: np.ndarray | None, level: float = 0.05) -> np.ndarray:
    """Covariates flagged active: p < level, or the selection mask without p-values."""
    if p_values is None:
        return result.selected_covariates
    flags = p_values < level
    if result.n_strata > 1:
        flags = flags.reshape(result.n_strata, -1).any(axis=0)
    return flags
