# Линейная смешанная модель: маргинальное правдоподобие и подгонка для инициализации
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from jmstate import log_action, logger
from jmstate.errors import NumericalError, ValidationError
from jmstate.params import chol_from_covariance, covariance_from_chol
from jmstate.workers import parallel_map

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LMMFit:
    beta: np.ndarray
    log_sigma: float
    d_chol: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    message: str = ""
    flags: list = field(default_factory=list)


def longitudinal_blocks(dataset, spec):
    """(X_i, Z_i, y_i) по субъектам"""
    evaluator = spec.evaluator
    blocks = []
    for subject_id in dataset.subject_ids:
        records = dataset.records_for(subject_id)
        t = np.array([r.t for r in records], dtype=float)
        covs = {name: np.array([r.covariates[name] for r in records]) for name in records[0].covariates}
        blocks.append((evaluator.fixed(t, covs), evaluator.random(t, covs),
                       np.array([r.y for r in records], dtype=float)))
    return blocks


def _marginal_factor(Z, D, sigma2):
    V = Z @ D @ Z.T + sigma2 * np.eye(Z.shape[0])
    try:
        return cho_factor(V, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("singular marginal covariance") from None


def _subject_term(block, beta, D, sigma2):
    X, Z, y = block
    factor = _marginal_factor(Z, D, sigma2)
    resid = y - X @ beta
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return -0.5 * (y.size * LOG_2PI + log_det + resid @ cho_solve(factor, resid))


def lmm_marginal_loglik(beta, log_sigma, d_chol, dataset, spec, blocks=None, threads=None):
    """Сумма log N(y_i; X_i beta, Z_i D Z_i' + sigma^2 I)"""
    blocks = blocks if blocks is not None else longitudinal_blocks(dataset, spec)
    beta = np.asarray(beta, dtype=float)
    D = covariance_from_chol(d_chol) if len(d_chol) else np.zeros((0, 0))
    sigma2 = math.exp(2.0 * log_sigma)
    terms = parallel_map(lambda block: _subject_term(block, beta, D, sigma2), blocks, threads)
    return float(np.sum(terms))


def gls_beta(blocks, D, sigma2):
    """Обобщённый МНК для beta при заданных (sigma, D)"""
    p = blocks[0][0].shape[1]
    lhs = np.zeros((p, p))
    rhs = np.zeros(p)
    for X, Z, y in blocks:
        factor = _marginal_factor(Z, D, sigma2)
        lhs += X.T @ cho_solve(factor, X)
        rhs += X.T @ cho_solve(factor, y)
    return np.linalg.solve(lhs, rhs)


def fit_lmm(dataset, spec, maxiter=500, gtol=1e-6, threads=None):
    """ML-подгонка (beta, log sigma, D) квазиньютоновским методом"""
    p, q = spec.p, spec.q
    n_chol = q * (q + 1) // 2
    blocks = longitudinal_blocks(dataset, spec)
    n_obs = sum(block[2].size for block in blocks)
    if n_obs < p + n_chol + 1:
        raise ValidationError("not enough longitudinal observations for the mixed model",
                              {'observations': n_obs, 'parameters': p + n_chol + 1})

    X_all = np.vstack([block[0] for block in blocks])
    y_all = np.concatenate([block[2] for block in blocks])
    beta0, *_ = np.linalg.lstsq(X_all, y_all, rcond=None)
    resid_sd = float(np.sqrt(np.mean((y_all - X_all @ beta0) ** 2)))
    start = np.concatenate([beta0, [math.log(max(resid_sd, 1e-8))],
                            chol_from_covariance(0.1 * np.eye(q)) if q else np.zeros(0)])

    def objective(theta):
        try:
            value = lmm_marginal_loglik(theta[:p], theta[p], theta[p + 1:], dataset, spec, blocks, threads)
        except (NumericalError, OverflowError):
            return 1e300
        return -value if np.isfinite(value) else 1e300

    result = minimize(objective, start, method='BFGS', jac='3-point',
                      options={'gtol': gtol, 'maxiter': maxiter})
    theta = result.x
    log_sigma, d_chol = float(theta[p]), theta[p + 1:]
    D = covariance_from_chol(d_chol) if q else np.zeros((0, 0))
    sigma2 = math.exp(2.0 * log_sigma)

    try:
        beta = gls_beta(blocks, D, sigma2)
    except (NumericalError, np.linalg.LinAlgError):
        beta = theta[:p]
    loglik = lmm_marginal_loglik(beta, log_sigma, d_chol, dataset, spec, blocks, threads)

    flags = []
    if math.exp(log_sigma) < 1e-5:
        flags.append("sigma_boundary")
    if q and np.min(np.linalg.eigvalsh(D)) < 1e-8:
        flags.append("D_degenerate")
    grad_norm = float(np.max(np.abs(result.jac))) if result.jac is not None else float('nan')

    fit = LMMFit(beta=beta, log_sigma=log_sigma, d_chol=np.asarray(d_chol, dtype=float), loglik=loglik,
                 converged=bool(result.success), iterations=int(result.nit), grad_norm=grad_norm,
                 message=str(result.message), flags=flags)
    if not fit.converged:
        logger.warning(f"Mixed model fit did not converge: {fit.message}")
    log_action("LMM_FIT", f"loglik={loglik:.6f} iterations={fit.iterations} flags={flags}")
    return fit
