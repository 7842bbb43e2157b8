"""Analytic and Monte Carlo study of gradient covariance under time-step
mixing versus whole-sample batch mixing.

The gradient model: per-frame gradients have modality-specific means and
variances (mu_a, Sigma_a / mu_e, Sigma_e), time-index-invariant temporal
covariances within each segment (R_a, R_e), and a cross-segment
covariance R_ae. A sequence holds n_a = (1-alpha)T static frames then
n_e = alpha*T event frames; the batch-mixing comparator assigns each
whole sample to one modality with probability alpha.

Sampling uses a Gaussian latent-factor construction: one shared draw
(u_a, u_e) per sample from the block covariance [[R_a, R_ae],
[R_ae^T, R_e]], plus independent per-frame residuals with covariance
Sigma - R. This realizes exactly the assumed second-order structure and
requires Sigma_a - R_a and Sigma_e - R_e to be PSD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DomainError

PSD_TOL = 1e-9


def _check_psd(mat: np.ndarray, name: str) -> None:
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ConfigError(f"{name} must be symmetric")
    min_eig = np.linalg.eigvalsh(mat)[0]
    if min_eig < -PSD_TOL:
        raise ConfigError(f"{name} must be PSD; min eigenvalue {min_eig:.3e}")


def _psd_factor(mat: np.ndarray) -> np.ndarray:
    """Factor F with F F^T = mat, tolerant of zero eigenvalues."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


@dataclass
class GradientModel:
    dim: int
    mu_a: np.ndarray
    mu_e: np.ndarray
    sigma_a: np.ndarray
    sigma_e: np.ndarray
    r_a: np.ndarray
    r_e: np.ndarray
    r_ae: np.ndarray
    alpha: float
    timesteps: int
    batch: int

    def __post_init__(self):
        d = self.dim
        for name in ("mu_a", "mu_e", "sigma_a", "sigma_e", "r_a", "r_e", "r_ae"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.mu_a.shape != (d,) or self.mu_e.shape != (d,):
            raise ConfigError("means must be d-vectors")
        for name in ("sigma_a", "sigma_e", "r_a", "r_e", "r_ae"):
            if getattr(self, name).shape != (d, d):
                raise ConfigError(f"{name} must be {d}x{d}")
        if self.timesteps < 1 or self.batch < 1:
            raise ConfigError("timesteps and batch must be positive")
        n_e = self.alpha * self.timesteps
        if abs(n_e - round(n_e)) > 1e-9:
            raise ConfigError(f"alpha*T = {n_e} must be an integer")
        block = np.block([[self.r_a, self.r_ae], [self.r_ae.T, self.r_e]])
        _check_psd(block, "temporal covariance block [[R_a,R_ae],[R_ae^T,R_e]]")
        _check_psd(self.sigma_a - self.r_a, "Sigma_a - R_a")
        _check_psd(self.sigma_e - self.r_e, "Sigma_e - R_e")

    @property
    def n_e(self) -> int:
        return int(round(self.alpha * self.timesteps))

    @property
    def n_a(self) -> int:
        return self.timesteps - self.n_e

    @classmethod
    def from_dict(cls, payload: dict) -> "GradientModel":
        return cls(**{k: payload[k] for k in (
            "dim", "mu_a", "mu_e", "sigma_a", "sigma_e",
            "r_a", "r_e", "r_ae", "alpha", "timesteps", "batch")})

    def to_dict(self) -> dict:
        out = {}
        for k in ("dim", "mu_a", "mu_e", "sigma_a", "sigma_e",
                  "r_a", "r_e", "r_ae", "alpha", "timesteps", "batch"):
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def analytic_cov_tsm(model: GradientModel) -> np.ndarray:
    """Covariance of the time-step-mixed batch gradient estimator."""
    a, T, B = model.alpha, model.timesteps, model.batch
    cov = (
        (1 - a) * model.sigma_a
        + a * model.sigma_e
        + (1 - a) * ((1 - a) * T - 1) * model.r_a
        + a * (a * T - 1) * model.r_e
        + (1 - a) * (a * T) * (model.r_ae + model.r_ae.T)
    )
    return cov / (B * T)


def analytic_cov_bm(model: GradientModel) -> np.ndarray:
    """Covariance of the batch-mixing estimator (law of total covariance)."""
    a, T, B = model.alpha, model.timesteps, model.batch
    within = ((1 - a) * (model.sigma_a + (T - 1) * model.r_a)
              + a * (model.sigma_e + (T - 1) * model.r_e)) / (B * T)
    dmu = model.mu_e - model.mu_a
    between = (a * (1 - a) / B) * np.outer(dmu, dmu)
    return within + between


def estimator_mean(model: GradientModel) -> np.ndarray:
    """Shared expectation of both estimators: (1-alpha) mu_a + alpha mu_e."""
    return (1 - model.alpha) * model.mu_a + model.alpha * model.mu_e


def cov_difference(model: GradientModel):
    """Analytic Cov(BM) - Cov(TSM) plus its trace identity and min eigenvalue.

    Returns (diff, trace_lhs, trace_rhs, min_eig) where trace_lhs is the
    trace of the direct covariance difference and trace_rhs the closed
    form (alpha(1-alpha)/B) (||dmu||^2 + tr(R_a + R_e - R_ae - R_ae^T)).
    """
    a, B = model.alpha, model.batch
    dmu = model.mu_e - model.mu_a
    r_sum = model.r_a + model.r_e - model.r_ae - model.r_ae.T
    diff = (a * (1 - a) / B) * (np.outer(dmu, dmu) + r_sum)
    trace_lhs = float(np.trace(analytic_cov_bm(model) - analytic_cov_tsm(model)))
    trace_rhs = float((a * (1 - a) / B) * (dmu @ dmu + np.trace(r_sum)))
    min_eig = float(np.linalg.eigvalsh(diff)[0])
    return diff, trace_lhs, trace_rhs, min_eig


def sample_frame_gradients(model: GradientModel, n: int, rng: np.random.Generator):
    """Draw literal per-frame gradients for n independent samples.

    Returns (g_a, g_e) of shapes (n, T, d): a full static-track and a
    full event-track per sample, sharing one latent (u_a, u_e) draw so
    that any frame subset has the assumed covariance structure.
    """
    d, T = model.dim, model.timesteps
    f_block = _psd_factor(np.block([[model.r_a, model.r_ae],
                                    [model.r_ae.T, model.r_e]]))
    f_res_a = _psd_factor(model.sigma_a - model.r_a)
    f_res_e = _psd_factor(model.sigma_e - model.r_e)
    u = rng.standard_normal((n, 2 * d)) @ f_block.T
    u_a, u_e = u[:, :d], u[:, d:]
    eps_a = rng.standard_normal((n, T, d)) @ f_res_a.T
    eps_e = rng.standard_normal((n, T, d)) @ f_res_e.T
    g_a = model.mu_a + u_a[:, None, :] + eps_a
    g_e = model.mu_e + u_e[:, None, :] + eps_e
    return g_a, g_e


@dataclass
class MCResult:
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    replications: int


def mc_estimate(
    model: GradientModel,
    estimator: str,
    replications: int,
    seed: int,
    n_groups: int = 100,
) -> MCResult:
    """Monte Carlo mean/covariance of a batch gradient estimator.

    ``estimator`` is "tsm" or "bm". Standard errors come from splitting
    the replications into groups: the covariance is estimated per group
    (unbiased normalization) and the spread across groups gives the SE
    of each matrix element.
    """
    if estimator not in ("tsm", "bm"):
        raise ConfigError(f"estimator must be 'tsm' or 'bm', got {estimator!r}")
    if replications < 1:
        raise DomainError("replications must be >= 1")
    d, T, B = model.dim, model.timesteps, model.batch
    n_groups = max(1, min(n_groups, replications))
    bounds = np.linspace(0, replications, n_groups + 1).astype(int)
    rng = np.random.default_rng(seed)

    sum_g = np.zeros(d)
    sum_outer = np.zeros((d, d))
    group_covs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        n = (hi - lo) * B
        if n == 0:
            continue
        g_a, g_e = sample_frame_gradients(model, n, rng)
        if estimator == "tsm":
            z = (g_a[:, :model.n_a].sum(axis=1) + g_e[:, model.n_a:].sum(axis=1)) / T
        else:
            pick_event = rng.random(n) < model.alpha
            z = np.where(pick_event[:, None], g_e.mean(axis=1), g_a.mean(axis=1))
        g = z.reshape(hi - lo, B, d).mean(axis=1)     # batch estimator per replication
        sum_g += g.sum(axis=0)
        sum_outer += g.T @ g
        if hi - lo >= 2:
            group_covs.append(np.cov(g, rowvar=False, ddof=1).reshape(d, d))

    mean = sum_g / replications
    cov = (sum_outer - replications * np.outer(mean, mean)) / max(replications - 1, 1)
    if len(group_covs) >= 2:
        stack = np.stack(group_covs)
        cov_se = stack.std(axis=0, ddof=1) / np.sqrt(len(group_covs))
    else:
        cov_se = np.full((d, d), np.nan)
    mean_se = np.sqrt(np.clip(np.diag(cov), 0.0, None) / replications)
    return MCResult(mean=mean, cov=cov, mean_se=mean_se, cov_se=cov_se,
                    replications=replications)


def random_model(
    rng: np.random.Generator,
    dim: int | None = None,
    timesteps: int | None = None,
    batch: int | None = None,
) -> GradientModel:
    """A random model satisfying every invariant by construction."""
    d = dim or int(rng.integers(1, 5))
    T = timesteps or int(rng.integers(1, 9))
    B = batch or int(rng.integers(1, 17))
    n_e = int(rng.integers(0, T + 1))
    block = rng.standard_normal((2 * d, 2 * d + 2))
    block = block @ block.T / (2 * d + 2)
    r_a, r_ae, r_e = block[:d, :d], block[:d, d:], block[d:, d:]
    infl_a = rng.standard_normal((d, d + 1))
    infl_e = rng.standard_normal((d, d + 1))
    return GradientModel(
        dim=d,
        mu_a=rng.normal(0.0, 1.5, d),
        mu_e=rng.normal(0.0, 1.5, d),
        sigma_a=r_a + infl_a @ infl_a.T / (d + 1),
        sigma_e=r_e + infl_e @ infl_e.T / (d + 1),
        r_a=r_a,
        r_e=r_e,
        r_ae=r_ae,
        alpha=n_e / T,
        timesteps=T,
        batch=B,
    )


@dataclass
class CovReport:
    cov_tsm_analytic: np.ndarray
    cov_bm_analytic: np.ndarray
    cov_tsm_mc: np.ndarray
    cov_bm_mc: np.ndarray
    diff_analytic: np.ndarray
    diff_mc: np.ndarray
    trace_identity_lhs: float
    trace_identity_rhs: float
    min_eig_diff: float
    replications: int

    def to_json(self) -> str:
        payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                   for k, v in asdict(self).items()}
        return json.dumps(payload, indent=1)


def build_report(model: GradientModel, replications: int, seed: int) -> CovReport:
    cov_tsm = analytic_cov_tsm(model)
    cov_bm = analytic_cov_bm(model)
    _, tr_lhs, tr_rhs, min_eig = cov_difference(model)
    mc_tsm = mc_estimate(model, "tsm", replications, seed)
    mc_bm = mc_estimate(model, "bm", replications, seed + 1)
    return CovReport(
        cov_tsm_analytic=cov_tsm,
        cov_bm_analytic=cov_bm,
        cov_tsm_mc=mc_tsm.cov,
        cov_bm_mc=mc_bm.cov,
        diff_analytic=cov_bm - cov_tsm,
        diff_mc=mc_bm.cov - mc_tsm.cov,
        trace_identity_lhs=tr_lhs,
        trace_identity_rhs=tr_rhs,
        min_eig_diff=min_eig,
        replications=replications,
    )
