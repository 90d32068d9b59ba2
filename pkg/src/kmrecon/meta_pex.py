"""Bayesian hierarchical piecewise-exponential meta-analysis.

Each study s has a constant log-hazard theta[s, k] in interval k. Study
log-hazards scatter around pooled log-hazards beta[k] with spread nu[k];
beta[k] scatters around a latent AR(1) sequence gamma with spread omega.

Sampling runs on an unconstrained vector laid out as::

    theta (S*K, row-major by study) | beta (K) | log nu (K) | gamma (K)
    | log omega | log delta | zeta

with rho = 2 * logistic(zeta) - 1. Treatment arms are fitted independently
and hazard ratios are formed from draws of the two fits.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ValidationError
from .survival_core import IpdSet

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
NU_SCALE = 0.25
OMEGA_SCALE = 0.25
DELTA_SCALE = 1.0


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalGrid:
    cuts: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in self.cuts)
        object.__setattr__(self, "cuts", c)
        if len(c) < 2 or c[0] != 0.0:
            raise ValidationError("grid needs c_0 = 0 and at least one interval")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValidationError("cuts must be strictly increasing")

    @classmethod
    def regular(cls, step: float = 6.0, end: float = 36.0) -> "IntervalGrid":
        n = int(round(end / step))
        return cls(tuple(step * i for i in range(n + 1)))

    @property
    def n_intervals(self) -> int:
        return len(self.cuts) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(np.asarray(self.cuts))

    def labels(self) -> list[str]:
        return [f"{a:g}-{b:g}" for a, b in zip(self.cuts, self.cuts[1:])]


@dataclass
class ExposureTable:
    """Events ``d`` and person-time ``e``, shape (studies, intervals)."""

    d: np.ndarray
    e: np.ndarray
    studies: tuple[str, ...] = ()

    def __post_init__(self):
        self.d = np.atleast_2d(np.asarray(self.d, dtype=float))
        self.e = np.atleast_2d(np.asarray(self.e, dtype=float))
        if self.d.shape != self.e.shape:
            raise ValidationError("events and exposure must have the same shape")
        if np.any(self.d < 0) or np.any(self.e < 0):
            raise ValidationError("events and exposure must be non-negative")
        if np.any((self.e == 0) & (self.d > 0)):
            raise ValidationError("events recorded in a cell without exposure")

    @property
    def n_studies(self) -> int:
        return self.d.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.d.shape[1]

    @classmethod
    def from_ipd(cls, studies, grid: IntervalGrid, names=None) -> "ExposureTable":
        rows = [bin_exposure(ipd, grid) for ipd in studies]
        return cls(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), tuple(names or ()))


def bin_exposure(ipd, grid: IntervalGrid):
    """Per-interval (events, exposure) for one study.

    Intervals are (c_{k-1}, c_k]. Follow-up past the last cut counts as
    censored at the last cut. Returns ``(d, e, n_truncated)``.
    """
    if isinstance(ipd, IpdSet):
        t, ev = ipd.times, ipd.events
    else:
        t, ev = (np.asarray(a) for a in ipd)
    t = np.asarray(t, dtype=float)
    ev = np.asarray(ev, dtype=bool)
    if np.any(t < 0):
        raise ValidationError("negative follow-up time")
    cuts = np.asarray(grid.cuts)
    c_end = cuts[-1]
    beyond = t > c_end
    tt = np.minimum(t, c_end)
    lo, hi = cuts[:-1], cuts[1:]
    e = np.clip(tt[:, None], lo, hi) - lo
    e = e.sum(axis=0)
    k = np.searchsorted(cuts, tt, side="left") - 1
    hit = ev & ~beyond & (t > 0)
    d = np.bincount(k[hit], minlength=grid.n_intervals).astype(float)
    return d, e, int(np.count_nonzero(beyond))


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------


def rho_from_zeta(zeta):
    """rho = 2 * logistic(zeta) - 1, written as tanh(zeta / 2)."""
    return np.tanh(0.5 * np.asarray(zeta, dtype=float))


@njit(cache=True)
def _log_one_minus_rho2(zeta):
    # log(1 - rho^2) = log 4 - |zeta| - 2 log(1 + exp(-|zeta|)), stable for large |zeta|
    a = abs(zeta)
    return math.log(4.0) - a - 2.0 * math.log1p(math.exp(-a))


def n_params(n_studies: int, n_intervals: int) -> int:
    return n_studies * n_intervals + 3 * n_intervals + 3


@dataclass
class MetaParams:
    theta: np.ndarray
    beta: np.ndarray
    nu: np.ndarray
    gamma: np.ndarray
    omega: float
    delta: float
    zeta: float

    @property
    def rho(self) -> float:
        return float(rho_from_zeta(self.zeta))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                np.ravel(self.theta),
                self.beta,
                np.log(self.nu),
                self.gamma,
                [math.log(self.omega), math.log(self.delta), self.zeta],
            ]
        ).astype(float)

    @classmethod
    def from_vector(cls, x, n_studies: int, n_intervals: int) -> "MetaParams":
        s, k = n_studies, n_intervals
        x = np.asarray(x, dtype=float)
        if x.shape != (n_params(s, k),):
            raise ValidationError("parameter vector has the wrong length")
        sk = s * k
        return cls(
            theta=x[:sk].reshape(s, k).copy(),
            beta=x[sk : sk + k].copy(),
            nu=np.exp(x[sk + k : sk + 2 * k]),
            gamma=x[sk + 2 * k : sk + 3 * k].copy(),
            omega=float(np.exp(x[-3])),
            delta=float(np.exp(x[-2])),
            zeta=float(x[-1]),
        )


@njit(cache=True)
def _logpost(x, d, e):
    S, K = d.shape
    sk = S * K
    lp = 0.0
    # Poisson-form likelihood of the piecewise-exponential model
    for s in range(S):
        for k in range(K):
            th = x[s * K + k]
            lp += d[s, k] * th - e[s, k] * math.exp(th)
    log_omega, log_delta, zeta = x[sk + 3 * K], x[sk + 3 * K + 1], x[sk + 3 * K + 2]
    omega = math.exp(log_omega)
    delta = math.exp(log_delta)
    rho = math.tanh(0.5 * zeta)
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for k in range(K):
        beta = x[sk + k]
        log_nu = x[sk + K + k]
        nu = math.exp(log_nu)
        gamma = x[sk + 2 * K + k]
        for s in range(S):
            r = x[s * K + k] - beta
            lp += -log_nu - half_log_2pi - 0.5 * r * r / (nu * nu)
        r = beta - gamma
        lp += -log_omega - half_log_2pi - 0.5 * r * r / (omega * omega)
        # half-normal prior on nu plus the log-Jacobian of nu = exp(log_nu)
        lp += math.log(2.0) - math.log(0.25) - half_log_2pi - 0.5 * (nu / 0.25) ** 2 + log_nu
    # AR(1) latent means with a stationary start
    log_one_m = _log_one_minus_rho2(zeta)
    g1 = x[sk + 2 * K]
    lp += -log_delta + 0.5 * log_one_m - half_log_2pi - 0.5 * g1 * g1 * math.exp(log_one_m) / (delta * delta)
    for k in range(1, K):
        r = x[sk + 2 * K + k] - rho * x[sk + 2 * K + k - 1]
        lp += -log_delta - half_log_2pi - 0.5 * r * r / (delta * delta)
    lp += math.log(2.0) - math.log(0.25) - half_log_2pi - 0.5 * (omega / 0.25) ** 2 + log_omega
    lp += math.log(2.0) - half_log_2pi - 0.5 * delta * delta + log_delta
    lp += -half_log_2pi - 0.5 * zeta * zeta
    return lp


def log_posterior(x, table: ExposureTable) -> float:
    """Log posterior density, normalising constants included, at the unconstrained vector ``x``."""
    x = x.to_vector() if isinstance(x, MetaParams) else np.asarray(x, dtype=float)
    if x.shape != (n_params(table.n_studies, table.n_intervals),):
        raise ValidationError("parameter vector does not match the table")
    return float(_logpost(x, table.d, table.e))


def log_posterior_grad(x, table: ExposureTable) -> np.ndarray:
    """Analytic gradient of :func:`log_posterior`."""
    x = x.to_vector() if isinstance(x, MetaParams) else np.asarray(x, dtype=float)
    S, K = table.n_studies, table.n_intervals
    p = MetaParams.from_vector(x, S, K)
    d, e = table.d, table.e
    rho = p.rho
    g = np.zeros_like(x)
    sk = S * K

    res = p.theta - p.beta[None, :]
    nu2 = p.nu**2
    g_theta = d - e * np.exp(p.theta) - res / nu2[None, :]
    g[:sk] = g_theta.ravel()
    rb = p.beta - p.gamma
    w2 = p.omega**2
    g[sk : sk + K] = res.sum(axis=0) / nu2 - rb / w2
    g[sk + K : sk + 2 * K] = (-1.0 + res**2 / nu2[None, :]).sum(axis=0) - nu2 / NU_SCALE**2 + 1.0

    d2 = p.delta**2
    one_m = math.exp(_log_one_minus_rho2(p.zeta))
    gam = p.gamma
    gg = rb / w2
    gg[0] -= gam[0] * one_m / d2
    ar = gam[1:] - rho * gam[:-1]
    gg[1:] -= ar / d2
    gg[:-1] += rho * ar / d2
    g[sk + 2 * K : sk + 3 * K] = gg

    g[-3] = np.sum(-1.0 + rb**2 / w2) - w2 / OMEGA_SCALE**2 + 1.0
    g[-2] = (-1.0 + gam[0] ** 2 * one_m / d2) + np.sum(-1.0 + ar**2 / d2) - d2 / DELTA_SCALE**2 + 1.0
    # d rho / d zeta = (1 - rho^2) / 2
    g[-1] = -0.5 * rho + 0.5 * one_m * (gam[0] ** 2 * rho + np.sum(ar * gam[:-1])) / d2 - p.zeta
    return g


def initial_vector(table: ExposureTable) -> np.ndarray:
    """Deterministic starting point from crude per-interval rates."""
    S, K = table.n_studies, table.n_intervals
    pooled = np.log((table.d.sum(axis=0) + 0.5) / (table.e.sum(axis=0) + 5.0))
    theta = np.log((table.d + 0.5) / (table.e + 5.0))
    theta = np.where(table.e > 0, theta, pooled[None, :])
    p = MetaParams(theta, pooled, np.full(K, 0.1), pooled.copy(), 0.1, 0.5, 0.0)
    return p.to_vector()


# ----------------------------------------------------------------------------
# Sampler
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class McmcConfig:
    burn_in: int = 2000
    samples: int = 5000
    seed: int = 0
    adapt: bool = True
    batch: int = 50
    target_accept: float = 0.44
    init_scale: float = 0.1

    def __post_init__(self):
        if self.burn_in < 0 or self.samples < 1 or self.batch < 1:
            raise ValidationError("burn_in >= 0, samples >= 1 and batch >= 1 are required")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")


@njit(cache=True)
def _rwm(x0, d, e, scales, burn_in, n_samples, normals, log_u, batch, adapt, target, mv_kind, mv_log, mv_ptr, mv_idx, mv_ctr):
    D = x0.shape[0]
    M = mv_kind.shape[0]
    x = x0.copy()
    lp = _logpost(x, d, e)
    draws = np.empty((n_samples, D))
    acc_batch = np.zeros(D + M)
    acc_post = np.zeros(D + M)
    saved = np.empty(D)
    n_batch = 0
    for it in range(burn_in + n_samples):
        # single-coordinate updates
        for j in range(D):
            old = x[j]
            x[j] = old + scales[j] * normals[it, j]
            lp_new = _logpost(x, d, e)
            if log_u[it, j] < lp_new - lp:
                lp = lp_new
                if it < burn_in:
                    acc_batch[j] += 1.0
                else:
                    acc_post[j] += 1.0
            else:
                x[j] = old
        # joint moves: shared translations and scale changes with their Jacobian
        for m in range(M):
            c = D + m
            eps = scales[c] * normals[it, c]
            lo, hi = mv_ptr[m], mv_ptr[m + 1]
            for q in range(lo, hi):
                saved[q - lo] = x[mv_idx[q]]
            log_jac = 0.0
            if mv_kind[m] == 0:
                for q in range(lo, hi):
                    x[mv_idx[q]] += eps
            else:
                old_log = x[mv_log[m]]
                x[mv_log[m]] = old_log + eps
                f = math.exp(eps)
                for q in range(lo, hi):
                    ctr = 0.0 if mv_ctr[q] < 0 else x[mv_ctr[q]]
                    x[mv_idx[q]] = ctr + (x[mv_idx[q]] - ctr) * f
                log_jac = (hi - lo) * eps
            lp_new = _logpost(x, d, e)
            if log_u[it, c] < lp_new - lp + log_jac:
                lp = lp_new
                if it < burn_in:
                    acc_batch[c] += 1.0
                else:
                    acc_post[c] += 1.0
            else:
                for q in range(lo, hi):
                    x[mv_idx[q]] = saved[q - lo]
                if mv_kind[m] == 1:
                    x[mv_log[m]] = old_log
        if it < burn_in and adapt and (it + 1) % batch == 0:
            n_batch += 1
            step = min(0.5, 1.0 / math.sqrt(n_batch))
            for j in range(D + M):
                if acc_batch[j] / batch > target:
                    scales[j] *= math.exp(step)
                else:
                    scales[j] *= math.exp(-step)
                acc_batch[j] = 0.0
        if it >= burn_in:
            draws[it - burn_in] = x
    return draws, acc_post / max(n_samples, 1), scales


def _joint_moves(S: int, K: int):
    """Translation and scale directions that the coordinate sweep explores slowly.

    Kinds: 0 shifts every listed coordinate by the same step; 1 shifts a
    log-scale coordinate and rescales the listed coordinates about their
    centres (-1 means zero), which costs a Jacobian of exp(count * step).
    """
    sk = S * K
    beta = lambda k: sk + k
    log_nu = lambda k: sk + K + k
    gamma = lambda k: sk + 2 * K + k
    theta = lambda s, k: s * K + k
    kinds, logs, members = [], [], []
    for k in range(K):
        kinds.append(0)
        logs.append(-1)
        members.append([(theta(s, k), -1) for s in range(S)] + [(beta(k), -1), (gamma(k), -1)])
    kinds.append(0)
    logs.append(-1)
    members.append([(i, -1) for i in range(sk)] + [(beta(k), -1) for k in range(K)] + [(gamma(k), -1) for k in range(K)])
    for k in range(K):
        kinds.append(1)
        logs.append(log_nu(k))
        members.append([(theta(s, k), beta(k)) for s in range(S)])
    kinds.append(1)
    logs.append(sk + 3 * K)
    members.append([(beta(k), gamma(k)) for k in range(K)])
    kinds.append(1)
    logs.append(sk + 3 * K + 1)
    members.append([(gamma(k), -1) for k in range(K)])
    ptr = np.concatenate([[0], np.cumsum([len(m) for m in members])]).astype(np.int64)
    idx = np.array([i for m in members for i, _ in m], dtype=np.int64)
    ctr = np.array([c for m in members for _, c in m], dtype=np.int64)
    return np.array(kinds, dtype=np.int64), np.array(logs, dtype=np.int64), ptr, idx, ctr


@dataclass
class PosteriorSamples:
    draws: np.ndarray
    n_studies: int
    grid: IntervalGrid
    seed: int
    acceptance: dict = field(default_factory=dict)
    scales: np.ndarray | None = None

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    def block(self, name: str) -> np.ndarray:
        S, K = self.n_studies, self.n_intervals
        sk = S * K
        sl = {
            "theta": slice(0, sk),
            "beta": slice(sk, sk + K),
            "log_nu": slice(sk + K, sk + 2 * K),
            "gamma": slice(sk + 2 * K, sk + 3 * K),
            "log_omega": slice(sk + 3 * K, sk + 3 * K + 1),
            "log_delta": slice(sk + 3 * K + 1, sk + 3 * K + 2),
            "zeta": slice(sk + 3 * K + 2, sk + 3 * K + 3),
        }[name]
        return self.draws[:, sl]

    @property
    def beta(self) -> np.ndarray:
        return self.block("beta")


def mcmc_sample(table: ExposureTable, grid: IntervalGrid, cfg: McmcConfig = McmcConfig()) -> PosteriorSamples:
    """Adaptive random-walk Metropolis on the unconstrained vector.

    Each iteration updates every coordinate with its own Gaussian step, then
    tries one-dimensional joint moves: a common shift of each interval's
    (theta, beta, gamma), a common shift of all of them, and scale moves
    pairing nu, omega and delta with the deviations they govern. Every step
    size is tuned after each batch during burn-in toward the target
    acceptance rate and frozen afterwards.
    """
    if table.n_intervals != grid.n_intervals:
        raise ValidationError("table and grid disagree on the number of intervals")
    x0 = initial_vector(table)
    D = x0.size
    S, K = table.n_studies, grid.n_intervals
    moves = _joint_moves(S, K)
    M = moves[0].size
    rng = np.random.default_rng(cfg.seed)
    n_it = cfg.burn_in + cfg.samples
    normals = rng.standard_normal((n_it, D + M))
    log_u = np.log(rng.random((n_it, D + M)))
    scales = np.full(D + M, cfg.init_scale)
    draws, acc, scales = _rwm(
        x0, table.d, table.e, scales, cfg.burn_in, cfg.samples, normals, log_u, cfg.batch, cfg.adapt, cfg.target_accept, *moves
    )
    out = PosteriorSamples(draws, S, grid, cfg.seed, scales=scales)
    sk = S * K
    bounds = {
        "theta": (0, sk),
        "beta": (sk, sk + K),
        "log_nu": (sk + K, sk + 2 * K),
        "gamma": (sk + 2 * K, sk + 3 * K),
        "log_omega": (sk + 3 * K, sk + 3 * K + 1),
        "log_delta": (sk + 3 * K + 1, sk + 3 * K + 2),
        "zeta": (sk + 3 * K + 2, sk + 3 * K + 3),
        "joint": (D, D + M),
    }
    out.acceptance = {name: float(acc[a:b].mean()) for name, (a, b) in bounds.items()}
    return out


def split_rhat(chains) -> float:
    """Split-R-hat of one scalar across chains of equal length."""
    chains = [np.asarray(c, dtype=float) for c in chains]
    n = min(len(c) for c in chains) // 2
    if n < 2:
        raise ValidationError("chains are too short")
    parts = np.array([h for c in chains for h in (c[:n], c[n : 2 * n])])
    m = parts.shape[0]
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_hat = (n - 1) / n * w + b / n
    return float(math.sqrt(var_hat / w)) if w > 0 else float("nan")


def mcse(x, n_batches: int | None = None) -> float:
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    nb = n_batches or max(2, int(math.sqrt(len(x))))
    size = len(x) // nb
    if size < 1:
        raise ValidationError("too few draws for batch means")
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))


# ----------------------------------------------------------------------------
# Derived quantities
# ----------------------------------------------------------------------------


def cumulative_hazard(beta_draws, grid: IntervalGrid, times) -> np.ndarray:
    """H(t) per draw with the pooled hazard exp(beta_k) constant within intervals."""
    lam = np.exp(np.atleast_2d(beta_draws))
    cuts = np.asarray(grid.cuts)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > cuts[-1]):
        raise ValidationError("evaluation times must lie within the grid")
    h_cut = np.concatenate([np.zeros((lam.shape[0], 1)), np.cumsum(lam * grid.lengths, axis=1)], axis=1)
    k = np.clip(np.searchsorted(cuts, times, side="left") - 1, 0, grid.n_intervals - 1)
    return h_cut[:, k] + lam[:, k] * (times - cuts[k])


def survival_meta(beta_draws, grid: IntervalGrid, times) -> np.ndarray:
    return np.exp(-cumulative_hazard(beta_draws, grid, times))


def median_from_hazards(beta_draws, grid: IntervalGrid) -> np.ndarray:
    """Per-draw time where S = 0.5; ``inf`` when not reached within the grid."""
    lam = np.exp(np.atleast_2d(beta_draws))
    cuts = np.asarray(grid.cuts)
    h_cut = np.concatenate([np.zeros((lam.shape[0], 1)), np.cumsum(lam * grid.lengths, axis=1)], axis=1)
    target = math.log(2.0)
    out = np.full(lam.shape[0], np.inf)
    for i in range(lam.shape[0]):
        k = int(np.searchsorted(h_cut[i], target, side="left"))
        if k == 0:
            out[i] = 0.0
        elif k <= grid.n_intervals:
            out[i] = cuts[k - 1] + (target - h_cut[i, k - 1]) / lam[i, k - 1]
    return out


def _quantiles(values, qs) -> np.ndarray:
    # inf marks "not reached"; keep it out of the interpolation arithmetic
    v = np.asarray(values, dtype=float)
    big = np.finfo(float).max / 4
    q = np.quantile(np.where(np.isinf(v), big, v), qs)
    return np.where(q >= big, np.inf, q)


@dataclass
class PooledCurve:
    times: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median: tuple[float, float, float]

    def to_json_dict(self) -> dict:
        f = lambda v: None if not math.isfinite(v) else float(v)
        return {
            "times": self.times.tolist(),
            "estimate": self.estimate.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "median": {"estimate": f(self.median[0]), "lower": f(self.median[1]), "upper": f(self.median[2])},
        }


def pooled_curves(samples: PosteriorSamples, times=None, level: float = 0.95) -> PooledCurve:
    """Pooled survival with a pointwise band and the pooled median with its interval."""
    beta = samples.beta
    if beta.shape[0] == 0:
        raise ValidationError("no posterior draws")
    grid = samples.grid
    if times is None:
        times = np.linspace(0.0, grid.cuts[-1], 361)
    times = np.asarray(times, dtype=float)
    a = (1.0 - level) / 2.0
    surv = survival_meta(beta, grid, times)
    q = np.quantile(surv, [0.5, a, 1.0 - a], axis=0)
    med = _quantiles(median_from_hazards(beta, grid), [0.5, a, 1.0 - a])
    return PooledCurve(times, q[0], q[1], q[2], (float(med[0]), float(med[1]), float(med[2])))


@dataclass
class IntervalHR:
    labels: list[str]
    hr: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    significant: np.ndarray
    mode: str


def interval_hr(samples_treat: PosteriorSamples, samples_ctrl: PosteriorSamples, paired: bool = True, rng=None, level: float = 0.95):
    """Per-interval treatment/control hazard ratio from posterior draws.

    ``paired`` matches draws by index; otherwise control draws are shuffled
    before pairing.
    """
    bt, bc = samples_treat.beta, samples_ctrl.beta
    if bt.shape[1] != bc.shape[1]:
        raise ValidationError("arms were fitted on different grids")
    if paired:
        if bt.shape[0] != bc.shape[0]:
            raise ValidationError("paired mode needs equal draw counts")
        mode = "paired"
    else:
        rng = np.random.default_rng(rng)
        n = min(bt.shape[0], bc.shape[0])
        bt = bt[:n]
        bc = bc[rng.permutation(bc.shape[0])[:n]]
        mode = "cross"
    ratio = np.exp(bt - bc)
    a = (1.0 - level) / 2.0
    q = np.quantile(ratio, [0.5, a, 1.0 - a], axis=0)
    sig = (q[2] < 1.0) | (q[1] > 1.0)
    return IntervalHR(samples_treat.grid.labels(), q[0], q[1], q[2], sig, mode)


# ----------------------------------------------------------------------------
# Propagation over labeling ensembles
# ----------------------------------------------------------------------------


@dataclass
class StudyInput:
    """One study: a fixed dataset, or a subgroup drawn from an ensemble.

    With an ensemble, each run picks a member labeling uniformly and uses the
    patients of ``overall`` that it assigns to ``subgroup``.
    """

    name: str
    ipd: IpdSet | None = None
    ensemble: object | None = None
    overall: IpdSet | None = None
    subgroup: int = 1

    def __post_init__(self):
        if (self.ipd is None) == (self.ensemble is None):
            raise ValidationError(f"study {self.name}: give either a dataset or an ensemble")
        if self.ensemble is not None and self.overall is None:
            raise ValidationError(f"study {self.name}: an ensemble needs the overall IPD")

    @property
    def n_choices(self) -> int:
        return 1 if self.ensemble is None else len(self.ensemble.members)

    def dataset(self, member: int) -> IpdSet:
        if self.ensemble is None:
            return self.ipd
        g = np.asarray(self.ensemble.members[member])
        return self.overall.select(g == self.subgroup)


@dataclass(frozen=True)
class PropagationConfig:
    n_runs: int = 500
    grid: IntervalGrid = IntervalGrid.regular()
    mcmc: McmcConfig = McmcConfig()
    paired: bool = True
    arm_names: tuple[str, str] = ("Control", "Treatment")


@dataclass
class RunSummary:
    members: tuple[int, ...]
    medians: dict
    hr: np.ndarray  # (K, 3): estimate, lower, upper


@dataclass
class PropagationResult:
    runs: list[RunSummary]
    grid: IntervalGrid
    arm_names: tuple[str, str]
    # pooled curves and interval hazard ratios of the first run
    pooled: tuple = ()
    first_hr: IntervalHR | None = None

    def median_table(self) -> list[tuple]:
        rows = []
        for a, name in enumerate(self.arm_names):
            vals = np.array([r.medians[a] for r in self.runs])
            for j, metric in enumerate(("Estimate", "Lower CI", "Upper CI")):
                rows.append((name, metric) + _min_mean_max(vals[:, j]))
        return rows

    def hr_table(self) -> list[tuple]:
        rows = []
        vals = np.array([r.hr for r in self.runs])
        for k, label in enumerate(self.grid.labels()):
            for j, metric in enumerate(("Estimate", "Lower CI", "Upper CI")):
                rows.append((label, metric) + _min_mean_max(vals[:, k, j]))
        return rows


def _min_mean_max(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=float)
    lo = float(v.min())
    if not math.isfinite(lo):
        return lo, float(np.mean(v)), float(v.max())
    # offsetting by the minimum keeps the mean exact when all runs agree
    return lo, lo + float(np.mean(v - lo)), float(v.max())


def fit_arm(datasets, grid: IntervalGrid, cfg: McmcConfig) -> PosteriorSamples:
    table = ExposureTable.from_ipd(datasets, grid)
    return mcmc_sample(table, grid, cfg)


def propagate(studies, cfg: PropagationConfig = PropagationConfig(), master_seed: int = 0) -> PropagationResult:
    """Monte Carlo over ensemble members, refitting the meta-analysis each run.

    Each run draws one member per ensemble study from its own stream. The
    sampler seed depends only on (master seed, arm), so runs that draw the
    same members give identical fits, which are cached.
    """
    studies = list(studies)
    for st in studies:
        if st.n_choices == 0:
            raise ValidationError(f"study {st.name}: empty ensemble")
    arm_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([master_seed, 1]).spawn(2)]
    run_seqs = np.random.SeedSequence([master_seed, 0]).spawn(cfg.n_runs)
    cache: dict = {}
    runs = []
    first = None
    for seq in run_seqs:
        rng = np.random.default_rng(seq)
        members = tuple(int(rng.integers(st.n_choices)) if st.n_choices > 1 else 0 for st in studies)
        if members not in cache:
            data = [st.dataset(m) for st, m in zip(studies, members)]
            fits = []
            for a in (0, 1):
                mc = replace(cfg.mcmc, seed=arm_seeds[a])
                fits.append(fit_arm([d.arm(a) for d in data], cfg.grid, mc))
            pooled = tuple(pooled_curves(f) for f in fits)
            ihr = interval_hr(fits[1], fits[0], paired=cfg.paired, rng=arm_seeds[0])
            cache[members] = (pooled, ihr)
        pooled, ihr = cache[members]
        meds = {a: pooled[a].median for a in (0, 1)}
        runs.append(RunSummary(members, meds, np.column_stack([ihr.hr, ihr.lower, ihr.upper])))
        if first is None:
            first = (pooled, ihr)
    return PropagationResult(runs, cfg.grid, cfg.arm_names, first[0], first[1])


def format_table_csv(rows, first_column: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([first_column, "metric", "min", "mean", "max"])
    for row in rows:
        w.writerow([row[0], row[1]] + [f"{v:.6g}" for v in row[2:]])
    return buf.getvalue()


def write_table_csv(path, rows, first_column: str):
    with open(path, "w", newline="") as f:
        f.write(format_table_csv(rows, first_column))


# ----------------------------------------------------------------------------
# Figures
# ----------------------------------------------------------------------------


def render_pooled_svg(curves: dict, width: float = 640.0, height: float = 400.0) -> bytes:
    """Pooled survival curves with their bands; ``curves`` maps name to PooledCurve."""
    pad = 40.0
    t_max = max(float(c.times[-1]) for c in curves.values())
    px = lambda t: pad + (width - 2 * pad) * t / t_max
    py = lambda s: height - pad - (height - 2 * pad) * s
    colors = ("#0072b2", "#d55e00", "#009e73", "#cc79a7")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">']
    out.append(f'<line x1="{pad}" y1="{py(0)}" x2="{px(t_max)}" y2="{py(0)}" stroke="#000000"/>')
    out.append(f'<line x1="{pad}" y1="{py(0)}" x2="{pad}" y2="{py(1)}" stroke="#000000"/>')
    for i, (name, c) in enumerate(curves.items()):
        col = colors[i % len(colors)]
        upper = " ".join(f"{px(t):.3f},{py(s):.3f}" for t, s in zip(c.times, c.upper))
        lower = " ".join(f"{px(t):.3f},{py(s):.3f}" for t, s in zip(c.times[::-1], c.lower[::-1]))
        out.append(f'<polygon points="{upper} {lower}" fill="{col}" fill-opacity="0.2" stroke="none"/>')
        est = " ".join(f"{px(t):.3f},{py(s):.3f}" for t, s in zip(c.times, c.estimate))
        out.append(f'<polyline points="{est}" fill="none" stroke="{col}"><title>{name}</title></polyline>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


def render_hr_svg(ihr: IntervalHR, width: float = 640.0, height: float = 300.0) -> bytes:
    """Per-interval hazard ratios with intervals on a log axis; significant ones in blue."""
    pad = 40.0
    vals = np.concatenate([ihr.lower, ihr.upper, [1.0]])
    lo, hi = math.log(vals.min()), math.log(vals.max())
    span = hi - lo if hi > lo else 1.0
    py = lambda v: height - pad - (height - 2 * pad) * (math.log(v) - lo) / span
    step = (width - 2 * pad) / len(ihr.labels)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">']
    out.append(f'<line x1="{pad}" y1="{py(1.0):.3f}" x2="{width - pad}" y2="{py(1.0):.3f}" stroke="#888888"/>')
    for k, label in enumerate(ihr.labels):
        x = pad + step * (k + 0.5)
        col = "#0072b2" if ihr.significant[k] else "#555555"
        out.append(f'<line x1="{x:.3f}" y1="{py(ihr.lower[k]):.3f}" x2="{x:.3f}" y2="{py(ihr.upper[k]):.3f}" stroke="{col}"/>')
        out.append(f'<circle cx="{x:.3f}" cy="{py(ihr.hr[k]):.3f}" r="3" fill="{col}"><title>{label}</title></circle>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")
