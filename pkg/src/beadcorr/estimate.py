"""Per-array parameter estimation: maximum likelihood, moments, plug-in.

The likelihood of an array is the sum of per-gene log marginal densities plus
the log density of the negative controls under the noise component.  For the
GB families the printed likelihood equations estimate the noise block from
the negative controls alone, so maximum likelihood runs in two stages: noise
from the controls, then signal from the gene marginals with noise fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize as _opt
from scipy import special as _sp

from . import correct, series, specfun
from .dists import (ExpGamma, ExpLognormal, ExpNormal, ExpParams,
                    GammaLognormal, GammaNormal, GammaParams, GBGB, GBNormal,
                    GBParams, LognormalParams, MODEL_KINDS, ModelSpec,
                    NormalParams, dist_logpdf, gb_from_gamma, gb_support_upper)
from .errors import (BeadcorrError, DegenerateControlsError, DomainError,
                     InvalidParameterError, UnsupportedMethodError)


@dataclass(frozen=True)
class EstimationProblem:
    """One array's data: regular gene intensities and negative controls."""

    observed: np.ndarray
    negatives: np.ndarray
    model_kind: str
    series_cfg: series.SeriesConfig = series.SeriesConfig()

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float)
        neg = np.asarray(self.negatives, dtype=float)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "negatives", neg)
        if obs.size < 1:
            raise InvalidParameterError("need at least one observed intensity")
        if np.any(obs <= 0) or np.any(neg <= 0):
            raise InvalidParameterError("all intensities must be positive")
        if self.model_kind not in MODEL_KINDS:
            raise InvalidParameterError(f"unknown model kind {self.model_kind!r}")

    def __hash__(self):
        return hash((self.model_kind, self.observed.tobytes(), self.negatives.tobytes()))


@dataclass(frozen=True)
class FitResult:
    params: ModelSpec
    loglik: float
    converged: bool
    iterations: int
    method: str
    gradient_norm: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FitBudget:
    n_starts: int = 5
    max_iter: int = 500
    seed: int = 0
    jitter: float = 0.15
    polish: bool = False


# ---------------------------------------------------------------------------
# Marginal log densities per model (vectorized over p)
# ---------------------------------------------------------------------------

def _log_marginal_exp_normal(p, e: ExpParams, b: NormalParams):
    p = np.asarray(p, dtype=float)
    mu_sp = p - b.mu - b.sigma ** 2 * e.theta
    a = mu_sp / b.sigma
    bb = (p - mu_sp) / b.sigma
    la = _sp.log_ndtr(a)
    lmb = _sp.log_ndtr(-bb)
    with np.errstate(divide="ignore", invalid="ignore"):
        ldiff = la + np.log(-np.expm1(np.minimum(lmb - la, 0.0)))
    ldiff = np.where(np.isnan(ldiff), -np.inf, ldiff)
    return (math.log(e.theta) + e.theta ** 2 * b.sigma ** 2 / 2.0
            - (p - b.mu) * e.theta + ldiff)


def _log_marginal_exp_gamma(p, e: ExpParams, g: GammaParams):
    p = np.asarray(p, dtype=float)
    lam = 1.0 / g.beta - e.theta
    core = np.array([correct.log_truncated_gamma_integral(g.alpha, lam, pi)
                     for pi in p])
    return (math.log(e.theta) - e.theta * p - g.alpha * math.log(g.beta)
            - _sp.gammaln(g.alpha) + core)


def _log_marginal_gamma_normal(p, g: GammaParams, b: NormalParams):
    """Grid-convolution marginal (bounded-density shapes); quadrature catches the rest."""
    p = np.asarray(p, dtype=float)
    if g.alpha >= 1.0:
        try:
            from scipy.signal import fftconvolve
            h = min(b.sigma, g.beta) / 48.0
            s_max = float(_sp.gammaincinv(g.alpha, 1.0 - 1e-13)) * g.beta
            s_max = max(s_max, float(np.max(p)) - b.mu + 12.0 * b.sigma)
            n_s = int(s_max / h) + 1
            if n_s <= (1 << 21):
                s = np.arange(n_s) * h
                fs = np.exp(dist_logpdf(g, s))
                b_lo = b.mu - 12.0 * b.sigma
                n_b = int(24.0 * b.sigma / h) + 1
                fb = np.exp(dist_logpdf(b, b_lo + np.arange(n_b) * h))
                den = fftconvolve(fs, fb) * h
                p_grid = b_lo + np.arange(den.size) * h
                vals = np.interp(p, p_grid, den)
                with np.errstate(divide="ignore"):
                    return np.log(np.maximum(vals, 0.0))
        except MemoryError:
            pass
    from . import oracle
    q = oracle.QuadConfig()
    return np.array([oracle.marginal_log_pdf_quadrature(pi, GammaNormal(g, b), q)
                     for pi in p])


def _log_marginal_series(p, m: ModelSpec, cfg):
    """Per-gene series marginals for the lognormal-noise and GB families.

    The GB families use a batched evaluation: one adaptive run at the
    worst-case observation fixes the truncation box (expansion ratios are
    monotone in p, so that box is conservative for every gene), then all
    genes are evaluated on it with shared coefficient tables.
    """
    p = np.asarray(p, dtype=float)
    kind = m.kind
    if kind == "gb_gb":
        return _gb_pair_marginal_log_batch(p, m.signal, m.noise, cfg)
    if kind == "gb_normal":
        return _gb_normal_marginal_log_batch(p, m.signal, m.noise, cfg)
    out = np.empty(p.shape)
    off_region = []
    for i, pi in enumerate(p):
        pi = float(pi)
        if pi <= 0:
            out[i] = -np.inf
            continue
        if not series.convergence_ok(m, pi, cfg):
            off_region.append(i)
            continue
        try:
            if kind == "exp_lognormal":
                den = series.exp_lognormal_den_series(pi, m.signal, m.noise, cfg)
                out[i] = (math.log(m.signal.theta) - m.signal.theta * pi
                          + den.log_abs)
            elif kind == "gamma_lognormal":
                g = m.signal
                den = series.gamma_lognormal_den_series(pi, g, m.noise, cfg)
                out[i] = ((g.alpha - 1.0) * math.log(pi) - pi / g.beta
                          - g.alpha * math.log(g.beta) - _sp.gammaln(g.alpha)
                          + den.log_abs)
            else:
                raise InvalidParameterError(f"no series marginal for {kind}")
        except DomainError:
            out[i] = -np.inf
    if off_region:
        out[off_region] = _quadrature_marginal_log(p[off_region], m)
    return out


def _quadrature_marginal_log(p_vals, m):
    # likelihood fallback: looser tolerance than the referee, never fatal
    from . import oracle
    q = oracle.QuadConfig(abs_tol=1e-12, rel_tol=1e-6, max_subdivisions=300)
    out = np.empty(len(p_vals))
    for i, pi in enumerate(p_vals):
        try:
            out[i] = oracle.marginal_log_pdf_quadrature(float(pi), m, q)
        except BeadcorrError:
            out[i] = -np.inf
    return out


def _gb_pair_marginal_log_batch(p, s: GBParams, b: GBParams, cfg):
    out = np.full(p.shape, -np.inf)
    upper = gb_support_upper(s) + gb_support_upper(b)
    inside = (p > 0) & (p < upper)
    model = GBGB(s, b)
    ok = inside.copy()
    for i in np.nonzero(inside)[0]:
        if not series.convergence_ok(model, float(p[i]), cfg):
            ok[i] = False
    hard = inside & ~ok
    if np.any(hard):
        # marginal exists but the expansion does not converge: quadrature
        out[hard] = _quadrature_marginal_log(p[hard], model)
    if not np.any(ok):
        return out
    pk = p[ok]
    p_ref = float(np.max(pk))
    ref = series.gb_pair_den_series(p_ref, s, b, cfg)
    cap = cfg.max_terms_per_index
    L, M, N, R = (min(t + 4, cap) for t in ref.terms_used)

    ws = series._gb_pair_workspace(s, b, 0, 0)
    lc1 = math.log1p(-s.c) if s.c < 1 else -math.inf
    lc2 = math.log1p(-b.c) if b.c < 1 else -math.inf
    ln1 = math.log(s.c) if s.c > 0 else -math.inf
    ln2 = math.log(b.c) if b.c > 0 else -math.inf
    a1 = series._gb_axis_arrays(ws.fall1, False, L, lc1)
    a3 = series._gb_axis_arrays(ws.rise1, True, N, ln1)
    a2 = series._gb_axis_arrays(ws.fall2, False, M, lc2)
    a4 = series._gb_axis_arrays(ws.rise2, True, R, ln2)
    v1, m1 = series._scaled_exp(*a1)
    v3, m3 = series._scaled_exp(*a3)
    v2, m2 = series._scaled_exp(*a2)
    v4, m4 = series._scaled_exp(*a4)
    conv13 = np.convolve(v1, v3)
    conv24 = np.convolve(v2, v4)
    E, gmax = ws.lbeta_grid_exp(conv13.size, conv24.size)
    scale = m1 + m3 + m2 + m4 + gmax

    lx1 = s.a * (np.log(pk) - math.log(s.d))
    lx2 = b.a * (np.log(pk) - math.log(b.d))
    with np.errstate(under="ignore"):
        X1 = np.exp(np.outer(lx1, np.arange(conv13.size)))
        X2 = np.exp(np.outer(lx2, np.arange(conv24.size)))
    sand = (X1 * conv13) @ E
    tot = np.einsum("ij,ij->i", sand, X2 * conv24)
    log_k1 = (math.log(s.a) + math.log(b.a)
              - s.a * s.u * math.log(s.d) - b.a * b.u * math.log(b.d)
              - specfun.log_beta(s.u, s.v) - specfun.log_beta(b.u, b.v))
    vals = np.full(pk.shape, -np.inf)
    good = tot > 0
    vals[good] = (log_k1 + (s.a * s.u + b.a * b.u - 1.0) * np.log(pk[good])
                  + np.log(tot[good]) + scale)
    out[ok] = vals
    return out


def _gb_normal_marginal_log_batch(p, s: GBParams, b: NormalParams, cfg):
    out = np.full(p.shape, -np.inf)
    model = GBNormal(s, b)
    inside = p > 0
    ok = inside.copy()
    for i in np.nonzero(inside)[0]:
        if not series.convergence_ok(model, float(p[i]), cfg):
            ok[i] = False
    hard = inside & ~ok
    if np.any(hard):
        out[hard] = _quadrature_marginal_log(p[hard], model)
    if not np.any(ok):
        return out
    pk = p[ok]
    p_ref = float(np.max(pk))
    ref = series.gb_normal_den_series(p_ref, s, b, cfg)
    cap = cfg.max_terms_per_index
    L, M, N = (min(t + 4, cap) for t in ref.terms_used)

    ws = series._gb_normal_workspace(s, 0)
    lc = math.log1p(-s.c) if s.c < 1 else -math.inf
    lm = math.log(s.c) if s.c > 0 else -math.inf
    a1 = series._gb_axis_arrays(ws.fall, False, L, lc)
    a2 = series._gb_axis_arrays(ws.rise, True, M, lm)
    v1, m1 = series._scaled_exp(*a1)
    v2, m2 = series._scaled_exp(*a2)
    conv12 = np.convolve(v1, v2)
    Gm, gmax = ws.binom_grid_exp(conv12.size, N)
    scale = m1 + m2 + gmax

    pm = pk - b.mu
    ly = s.a * (np.log(pm) - math.log(s.d))
    with np.errstate(under="ignore"):
        Y = np.exp(np.outer(ly, np.arange(conv12.size)))
    # per-gene Gaussian moment columns I_n over [-(p-mu)/sigma, mu/sigma]
    lo = -pm / b.sigma
    hi = b.mu / b.sigma
    tab = np.zeros((N, pk.size))
    for gi in range(pk.size):
        tab[:, gi] = specfun.gaussian_moment_table(N, float(lo[gi]), hi)
    with np.errstate(under="ignore"):
        t_pow = np.exp(np.outer(np.arange(N), np.log(b.sigma) - np.log(pm)))
    vn = (t_pow * tab).T  # genes x N
    sand = (Y * conv12) @ Gm
    tot = np.einsum("ij,ij->i", sand, vn)
    log_k2 = (math.log(s.a) - s.a * s.u * math.log(s.d)
              - specfun.log_beta(s.u, s.v) - 0.5 * math.log(2.0 * math.pi))
    vals = np.full(pk.shape, -np.inf)
    good = tot > 0
    vals[good] = (log_k2 + (s.a * s.u - 1.0) * np.log(pm[good])
                  + np.log(tot[good]) + scale)
    out[ok] = vals
    return out


def log_marginal(m: ModelSpec, p, cfg: series.SeriesConfig = series.SeriesConfig()):
    """log f_P(p) under model m; -inf outside support.  Vectorized over p."""
    kind = m.kind
    if kind == "exp_normal":
        return _log_marginal_exp_normal(p, m.signal, m.noise)
    if kind == "exp_gamma":
        return _log_marginal_exp_gamma(p, m.signal, m.noise)
    if kind == "gamma_normal":
        return _log_marginal_gamma_normal(p, m.signal, m.noise)
    return _log_marginal_series(p, m, cfg)


def noise_loglik(m: ModelSpec, problem: EstimationProblem) -> float:
    """Negative-control part of the likelihood (the printed noise equations
    are derivatives of exactly this sum)."""
    if problem.negatives.size == 0:
        return 0.0
    return float(np.sum(dist_logpdf(m.noise, problem.negatives)))


def loglik(params: ModelSpec, problem: EstimationProblem) -> float:
    """Full log-likelihood: gene marginals plus negative-control noise terms."""
    lm = log_marginal(params, problem.observed, problem.series_cfg)
    total = float(np.sum(lm)) + noise_loglik(params, problem)
    return total if not math.isnan(total) else -math.inf


# ---------------------------------------------------------------------------
# Analytic scores for the GB families
# ---------------------------------------------------------------------------

def _gb_density_grad(b_vals, g: GBParams):
    """Rows: d log f_GB(b)/d (a, c, d, u, v), summed over b_vals."""
    b_vals = np.asarray(b_vals, dtype=float)
    t = (b_vals / g.d) ** g.a
    ltd = np.log(b_vals / g.d)
    one_m = 1.0 - (1.0 - g.c) * t
    one_p = 1.0 + g.c * t
    da = (1.0 / g.a + g.u * np.log(b_vals)
          - (g.v - 1.0) * (1.0 - g.c) * ltd * t / one_m
          - g.u * math.log(g.d)
          - (g.u + g.v) * g.c * ltd * t / one_p)
    dc = (g.v - 1.0) * t / one_m - (g.u + g.v) * t / one_p
    dt_dd = -(g.a / g.d) * t
    dd = (-(g.a * g.u / g.d)
          - (g.v - 1.0) * (1.0 - g.c) * dt_dd / one_m
          - (g.u + g.v) * g.c * dt_dd / one_p)
    du = (g.a * np.log(b_vals) - g.a * math.log(g.d)
          - (_sp.psi(g.u) - _sp.psi(g.u + g.v)) - np.log(one_p))
    dv = (np.log(one_m) - (_sp.psi(g.v) - _sp.psi(g.u + g.v)) - np.log(one_p))
    return np.array([da.sum(), dc.sum(), dd.sum(), du.sum(), dv.sum()])


def _check_interior(g: GBParams, label):
    if g.c in (0.0, 1.0):
        raise DomainError(
            f"{label}: score is singular at the mixture boundary c={g.c}; "
            f"use derivative-free steps there")


def score_gb(params: GBGB, problem: EstimationProblem) -> np.ndarray:
    """Ten likelihood-equation values, ordered noise block then signal block:
    (a2, c2, d2, u2, v2, a1, c1, d1, u1, v1).

    The noise block differentiates the negative-control sum (as printed); the
    signal block differentiates the gene-marginal sum.  Valid at interior
    points; at integer u/v the binomial axes truncate and one-sided
    derivative corrections are not applied.
    """
    s, b = params.signal, params.noise
    _check_interior(s, "score_gb")
    _check_interior(b, "score_gb")
    noise_part = (_gb_density_grad(problem.negatives, b)
                  if problem.negatives.size else np.zeros(5))

    sig = np.zeros(5)
    if problem.observed.size:
        for p in problem.observed:
            _, grad = series.gb_pair_den_series_with_grad(
                float(p), s, b, problem.series_cfg)
            sig += grad
        n = problem.observed.size
        lp_sum = float(np.sum(np.log(problem.observed)))
        struct = np.zeros(5)
        struct[0] = n * (1.0 / s.a - s.u * math.log(s.d)) + s.u * lp_sum
        struct[2] = -n * s.a * s.u / s.d
        struct[3] = (s.a * lp_sum - n * s.a * math.log(s.d)
                     - n * (_sp.psi(s.u) - _sp.psi(s.u + s.v)))
        struct[4] = -n * (_sp.psi(s.v) - _sp.psi(s.u + s.v))
        sig = sig + struct
    return np.concatenate([noise_part, sig])


def score_gb_normal(params: GBNormal, problem: EstimationProblem) -> np.ndarray:
    """Seven likelihood-equation values, ordered (mu, sigma, a, c, d, u, v).

    mu and sigma differentiate the negative-control sum (closed form zeros at
    the control mean and biased variance); the GB block differentiates the
    gene-marginal sum.
    """
    s, b = params.signal, params.noise
    _check_interior(s, "score_gb_normal")
    neg = problem.negatives
    if neg.size:
        d_mu = float(np.sum(neg - b.mu) / b.sigma ** 2)
        d_sigma = float(np.sum((neg - b.mu) ** 2 / b.sigma ** 3 - 1.0 / b.sigma))
    else:
        d_mu = d_sigma = 0.0

    sig = np.zeros(5)
    if problem.observed.size:
        for p in problem.observed:
            _, grad = series.gb_normal_den_series_with_grad(
                float(p), s, b, problem.series_cfg)
            sig += grad
        n = problem.observed.size
        lpm_sum = float(np.sum(np.log(problem.observed - b.mu)))
        struct = np.zeros(5)
        struct[0] = n * (1.0 / s.a - s.u * math.log(s.d)) + s.u * lpm_sum
        struct[2] = -n * s.a * s.u / s.d
        struct[3] = (s.a * lpm_sum - n * s.a * math.log(s.d)
                     - n * (_sp.psi(s.u) - _sp.psi(s.u + s.v)))
        struct[4] = -n * (_sp.psi(s.v) - _sp.psi(s.u + s.v))
        sig = sig + struct
    return np.concatenate([[d_mu, d_sigma], sig])


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _control_moments(problem):
    neg = problem.negatives
    if neg.size < 2:
        raise DegenerateControlsError(
            f"need at least 2 negative controls, got {neg.size}")
    m = float(np.mean(neg))
    v = float(np.var(neg))
    if v <= 0.0:
        raise DegenerateControlsError("negative controls have zero variance")
    return m, v


def _noise_block(problem, kind):
    m, v = _control_moments(problem)
    neg = problem.negatives
    if kind in ("exp_normal", "gamma_normal", "gb_normal"):
        return NormalParams(m, math.sqrt(v))
    if kind == "exp_gamma":
        return GammaParams(alpha=m * m / v, beta=v / m)
    if kind in ("exp_lognormal", "gamma_lognormal"):
        logs = np.log(neg)
        sd = float(np.std(logs))
        if sd <= 0:
            raise DegenerateControlsError("log negative controls have zero variance")
        return LognormalParams(float(np.mean(logs)), sd)
    if kind == "gb_gb":
        return gb_from_gamma(GammaParams(alpha=m * m / v, beta=v / m), v_big=1e3)
    raise InvalidParameterError(f"unknown model kind {kind!r}")


def _signal_block(problem, kind):
    m, _ = _control_moments(problem)
    diffs = problem.observed - m
    pos = diffs[diffs > 0]
    # floor at the 1% quantile of the positive differences so the shifted
    # sample stays positive without distorting its moments
    eps = float(np.quantile(pos, 0.01)) if pos.size else 1e-3 * float(np.mean(problem.observed))
    shifted = np.maximum(diffs, eps)
    sm = float(np.mean(shifted))
    sv = max(float(np.var(shifted)), 1e-12 * sm * sm)
    if kind in ("exp_normal", "exp_gamma", "exp_lognormal"):
        return ExpParams(1.0 / sm)
    if kind in ("gamma_normal", "gamma_lognormal"):
        return GammaParams(alpha=sm * sm / sv, beta=sv / sm)
    if kind in ("gb_gb", "gb_normal"):
        return gb_from_gamma(GammaParams(alpha=sm * sm / sv, beta=sv / sm), v_big=1e3)
    raise InvalidParameterError(f"unknown model kind {kind!r}")


_MODEL_BUILDERS = {
    "exp_normal": ExpNormal, "exp_gamma": ExpGamma, "gamma_normal": GammaNormal,
    "exp_lognormal": ExpLognormal, "gamma_lognormal": GammaLognormal,
    "gb_gb": GBGB, "gb_normal": GBNormal,
}


def init_params(problem: EstimationProblem) -> ModelSpec:
    """Starting parameters: noise from control moments, signal from the
    control-mean-subtracted observations (floored at the 1% quantile)."""
    kind = problem.model_kind
    return _MODEL_BUILDERS[kind](_signal_block(problem, kind),
                                 _noise_block(problem, kind))


# ---------------------------------------------------------------------------
# Parameter vector transforms for the optimizer
# ---------------------------------------------------------------------------

_LOGIT_CLIP = 6.9  # c confined to ~(0.001, 0.999)


def _logit(c):
    c = min(max(c, 1e-3), 1.0 - 1e-3)
    return min(max(math.log(c / (1.0 - c)), -_LOGIT_CLIP), _LOGIT_CLIP)


def _inv_logit(x):
    return 1.0 / (1.0 + math.exp(-min(max(x, -_LOGIT_CLIP), _LOGIT_CLIP)))


def _gb_to_vec(g: GBParams):
    return [math.log(min(g.a, 50.0)), _logit(g.c), math.log(g.d),
            math.log(g.u), math.log(min(g.v, 1e4))]


def _gb_from_vec(x):
    return GBParams(a=min(math.exp(x[0]), 50.0), c=_inv_logit(x[1]),
                    d=math.exp(x[2]), u=math.exp(x[3]),
                    v=min(math.exp(x[4]), 1e4))


_GB_BOUNDS = [(math.log(0.02), math.log(50.0)), (-_LOGIT_CLIP, _LOGIT_CLIP),
              (None, None), (math.log(1e-2), math.log(1e4)),
              (math.log(1e-2), math.log(1e4))]


def _family_codec(kind):
    """(to_vec(model) -> list, from_vec(list) -> model, bounds) for NM space."""
    if kind == "exp_normal":
        return (lambda m: [math.log(m.signal.theta), m.noise.mu, math.log(m.noise.sigma)],
                lambda x: ExpNormal(ExpParams(math.exp(x[0])),
                                    NormalParams(float(x[1]), math.exp(x[2]))),
                [(None, None)] * 3)
    if kind == "exp_gamma":
        return (lambda m: [math.log(m.signal.theta), math.log(m.noise.alpha),
                           math.log(m.noise.beta)],
                lambda x: ExpGamma(ExpParams(math.exp(x[0])),
                                   GammaParams(math.exp(x[1]), math.exp(x[2]))),
                [(None, None)] * 3)
    if kind == "gamma_normal":
        return (lambda m: [math.log(m.signal.alpha), math.log(m.signal.beta),
                           m.noise.mu, math.log(m.noise.sigma)],
                lambda x: GammaNormal(GammaParams(math.exp(x[0]), math.exp(x[1])),
                                      NormalParams(float(x[2]), math.exp(x[3]))),
                [(None, None)] * 4)
    if kind == "exp_lognormal":
        return (lambda m: [math.log(m.signal.theta), m.noise.mu, math.log(m.noise.sigma)],
                lambda x: ExpLognormal(ExpParams(math.exp(x[0])),
                                       LognormalParams(float(x[1]), math.exp(x[2]))),
                [(None, None)] * 3)
    if kind == "gamma_lognormal":
        return (lambda m: [math.log(m.signal.alpha), math.log(m.signal.beta),
                           m.noise.mu, math.log(m.noise.sigma)],
                lambda x: GammaLognormal(GammaParams(math.exp(x[0]), math.exp(x[1])),
                                         LognormalParams(float(x[2]), math.exp(x[3]))),
                [(None, None)] * 4)
    raise InvalidParameterError(f"no joint codec for {kind}")


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _nm_maximize(objective, x0, bounds, budget, rng):
    """Multi-start Nelder-Mead on -objective in transformed space."""
    def neg(x):
        try:
            v = objective(x)
        except (BeadcorrError, OverflowError, FloatingPointError):
            return 1e100
        if math.isnan(v):
            return 1e100
        return -v if v > -1e100 else 1e100

    best = None
    total_nfev = 0
    starts = [np.asarray(x0, dtype=float)]
    for _ in range(budget.n_starts - 1):
        starts.append(np.asarray(x0) + rng.normal(0.0, budget.jitter, len(x0)))
    lo = np.array([-np.inf if b_ is None or b_[0] is None else b_[0] for b_ in bounds])
    hi = np.array([np.inf if b_ is None or b_[1] is None else b_[1] for b_ in bounds])
    starts = [np.clip(st, lo, hi) for st in starts]
    for start in starts:
        res = _opt.minimize(neg, start, method="Nelder-Mead", bounds=bounds,
                            options={"maxiter": budget.max_iter,
                                     "xatol": 1e-7, "fatol": 1e-9,
                                     "adaptive": len(x0) > 4})
        total_nfev += res.nfev
        if best is None or res.fun < best.fun:
            best = res
    # profile flatness from the winning simplex
    verts = best.final_simplex[0]
    flat = float(np.max(np.ptp(verts, axis=0)))
    return best, total_nfev, flat


def fit_mle(problem: EstimationProblem, budget: FitBudget = FitBudget()) -> FitResult:
    """Maximize the likelihood from the moment-based start.

    Classical families optimize all parameters jointly; GB families estimate
    the noise block from the controls first (as the likelihood equations
    prescribe), then the signal block from the gene marginals.
    """
    rng = np.random.default_rng(budget.seed)
    kind = problem.model_kind
    start = init_params(problem)

    if kind in ("gb_gb", "gb_normal"):
        return _fit_mle_gb(problem, start, budget, rng)

    to_vec, from_vec, bounds = _family_codec(kind)

    def objective(x):
        return loglik(from_vec(x), problem)

    best, nfev, flat = _nm_maximize(objective, to_vec(start), bounds, budget, rng)
    params = from_vec(best.x)
    ll = -best.fun
    return FitResult(params=params, loglik=ll, converged=bool(best.success),
                     iterations=nfev, method="mle",
                     diagnostics={"profile_flatness": flat})


def _gb_chain(x):
    """d(natural params)/d(transformed coords) for the GB block."""
    a, c, d, u, v = (math.exp(x[0]), _inv_logit(x[1]), math.exp(x[2]),
                     math.exp(x[3]), math.exp(x[4]))
    return np.array([a, c * (1.0 - c), d, u, v])


def _polish_gb(objective_and_grad, x0, budget):
    """Short analytic-gradient ascent from the simplex optimum."""
    def neg(x):
        try:
            v, g = objective_and_grad(x)
        except (BeadcorrError, OverflowError, FloatingPointError):
            return 1e100, np.zeros(len(x))
        if math.isnan(v):
            return 1e100, np.zeros(len(x))
        return -v, -np.asarray(g)

    res = _opt.minimize(neg, x0, method="L-BFGS-B", jac=True, bounds=_GB_BOUNDS,
                        options={"maxiter": 60, "ftol": 1e-13, "gtol": 1e-9})
    return res


def _fit_mle_gb(problem, start, budget, rng):
    kind = problem.model_kind
    cfg = problem.series_cfg

    # Stage 1: noise from the negative controls
    if kind == "gb_normal":
        neg = problem.negatives
        if neg.size < 2:
            raise DegenerateControlsError("gb_normal fit needs >= 2 controls")
        noise = NormalParams(float(np.mean(neg)), math.sqrt(float(np.var(neg))))
        noise_iters, noise_ok = 0, True
    else:
        def noise_obj(x):
            return float(np.sum(dist_logpdf(_gb_from_vec(x), problem.negatives)))

        def noise_obj_grad(x):
            g = _gb_from_vec(x)
            return noise_obj(x), _gb_density_grad(problem.negatives, g) * _gb_chain(x)

        x0 = _gb_to_vec(start.noise)
        best_n, noise_iters, _ = _nm_maximize(noise_obj, x0, _GB_BOUNDS, budget, rng)
        xn = best_n.x
        if budget.polish:
            pol = _polish_gb(noise_obj_grad, xn, budget)
            if -pol.fun >= -best_n.fun:
                xn = pol.x
            noise_iters += pol.nfev
        noise = _gb_from_vec(xn)
        noise_ok = bool(best_n.success)

    # Stage 2: signal from the gene marginals with noise fixed
    builder = _MODEL_BUILDERS[kind]

    def signal_obj(x):
        m = builder(_gb_from_vec(x), noise)
        return float(np.sum(log_marginal(m, problem.observed, cfg)))

    def signal_obj_grad(x):
        m = builder(_gb_from_vec(x), noise)
        score = (score_gb_normal(m, problem)[2:] if kind == "gb_normal"
                 else score_gb(m, problem)[5:])
        return signal_obj(x), score * _gb_chain(x)

    best_s, sig_iters, flat = _nm_maximize(signal_obj, _gb_to_vec(start.signal),
                                           _GB_BOUNDS, budget, rng)
    xs = best_s.x
    if budget.polish:
        pol = _polish_gb(signal_obj_grad, xs, budget)
        if -pol.fun >= -best_s.fun:
            xs = pol.x
        sig_iters += pol.nfev
    params = builder(_gb_from_vec(xs), noise)
    ll = loglik(params, problem)

    grad_norm = None
    interior = (0.0 < params.signal.c < 1.0 and
                (kind == "gb_normal" or 0.0 < params.noise.c < 1.0))
    if interior:
        try:
            score = (score_gb_normal(params, problem) if kind == "gb_normal"
                     else score_gb(params, problem))
            grad_norm = float(np.linalg.norm(score))
        except (BeadcorrError, FloatingPointError):
            grad_norm = None

    return FitResult(params=params, loglik=ll,
                     converged=bool(best_s.success) and noise_ok,
                     iterations=noise_iters + sig_iters, method="mle",
                     gradient_norm=grad_norm,
                     diagnostics={"profile_flatness": flat})


def fit_moments(problem: EstimationProblem) -> FitResult:
    """Method of moments: noise from control moments, signal from the
    mean/variance differences implied by additivity."""
    kind = problem.model_kind
    if kind in ("gb_gb", "gb_normal"):
        raise UnsupportedMethodError(
            "GB families are not moment-identifiable (five parameters); "
            "use MLE or plug-in")
    mB, vB = _control_moments(problem)
    obs = problem.observed
    dm = float(np.mean(obs)) - mB
    dv = float(np.var(obs)) - vB
    clamped = False
    eps_m = float(np.quantile(obs, 0.01))
    if dm <= 0:
        dm, clamped = eps_m, True
    if dv <= 0:
        dv, clamped = eps_m ** 2, True

    if kind in ("exp_normal", "exp_gamma", "exp_lognormal"):
        signal = ExpParams(1.0 / dm)
    else:
        signal = GammaParams(alpha=dm * dm / dv, beta=dv / dm)

    neg = problem.negatives
    if kind in ("exp_normal", "gamma_normal"):
        noise = NormalParams(mB, math.sqrt(vB))
    elif kind == "exp_gamma":
        noise = GammaParams(alpha=mB * mB / vB, beta=vB / mB)
    else:
        sig2 = math.log1p(vB / (mB * mB))
        noise = LognormalParams(math.log(mB) - sig2 / 2.0, math.sqrt(sig2))

    params = _MODEL_BUILDERS[kind](signal, noise)
    return FitResult(params=params, loglik=loglik(params, problem),
                     converged=True, iterations=0, method="moments",
                     diagnostics={"variance_clamped": clamped})


def fit_plugin(problem: EstimationProblem) -> FitResult:
    """Plug-in: control statistics as noise parameters, moment-matched signal,
    no optimization."""
    params = init_params(problem)
    return FitResult(params=params, loglik=loglik(params, problem),
                     converged=True, iterations=0, method="plugin")
