"""Augmented Dickey-Fuller unit-root testing on top of a small OLS solver.

The ADF regression is the constant, no-trend variant

    diff(x)_t = c + gamma * x_{t-1} + sum_i phi_i * diff(x)_{t-i} + e_t

with the lag order bounded by the Schwert rule and reduced by AIC, and
p-values from the MacKinnon response-surface approximation.  Rejection of
the unit root (small p) is read as stationarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["OlsResult", "AdfResult", "ols", "adf_test", "mackinnon_pvalue"]


@dataclass
class OlsResult:
    params: np.ndarray
    bse: np.ndarray
    aic: float
    rss: float
    nobs: int

    def tvalues(self) -> np.ndarray:
        return self.params / self.bse


@dataclass
class AdfResult:
    statistic: float
    p_value: float
    lags_used: int
    n_obs: int


def ols(X: np.ndarray, y: np.ndarray) -> OlsResult:
    """Least squares via QR, with classical standard errors and Gaussian AIC.

    Raises on rank deficiency and on n <= k.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"ols: need X (n, k) and y (n,), got {X.shape} and {y.shape}")
    n, k = X.shape
    if n <= k:
        raise ValueError(f"ols: need more observations than regressors (n={n}, k={k})")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, k) * np.finfo(np.float64).eps * diag.max():
        raise np.linalg.LinAlgError("ols: design matrix is rank deficient")
    params = np.linalg.solve(r, q.T @ y)
    resid = y - X @ params
    rss = float(resid @ resid)
    sigma2 = rss / (n - k)
    r_inv = np.linalg.inv(r)
    bse = np.sqrt(sigma2 * np.sum(r_inv * r_inv, axis=1))
    if rss > 0.0:
        # Gaussian log-likelihood AIC: -2*llf + 2*k.
        llf = -0.5 * n * (math.log(2.0 * math.pi) + math.log(rss / n) + 1.0)
        aic = -2.0 * llf + 2.0 * k
    else:
        aic = -math.inf  # perfect fit
    return OlsResult(params=params, bse=bse, aic=aic, rss=rss, nobs=n)


# MacKinnon response-surface coefficients for the ADF t-statistic, constant
# regression, one I(1) series.  Small-p/large-p polynomials and validity
# bounds from MacKinnon (1994, JBES 12, 167-176) as updated in MacKinnon
# (2010, Queen's Economics Dept working paper 1227).  p = Phi(poly(stat)).
_TAU_MAX_C = 2.74
_TAU_MIN_C = -18.83
_TAU_STAR_C = -1.61
_TAU_C_SMALLP = (2.1659, 1.4412, 0.038269)
_TAU_C_LARGEP = (1.7339, 0.93202, -0.12745, -0.010368)


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def mackinnon_pvalue(statistic: float) -> float:
    """Approximate p-value for an ADF t-statistic (constant regression)."""
    if statistic > _TAU_MAX_C:
        return 1.0
    if statistic < _TAU_MIN_C:
        return 0.0
    coeffs = _TAU_C_SMALLP if statistic <= _TAU_STAR_C else _TAU_C_LARGEP
    poly = 0.0
    for c in reversed(coeffs):
        poly = poly * statistic + c
    return _norm_cdf(poly)


def _lagged_design(xdiff: np.ndarray, x: np.ndarray, lags: int):
    """Regressor block [x_{t-1}, diff lags 1..lags] plus the response vector."""
    nobs = xdiff.shape[0] - lags
    cols = [x[-nobs - 1: -1]]
    for i in range(1, lags + 1):
        cols.append(xdiff[lags - i: lags - i + nobs])
    return np.column_stack(cols), xdiff[lags:]


def default_max_lags(n: int) -> int:
    """Schwert-rule bound, capped so the trimmed sample keeps >= 15 points."""
    schwert = int(math.ceil(12.0 * (n / 100.0) ** 0.25))
    return min(schwert, n // 2 - 2, n - 16)


def adf_test(x: np.ndarray, max_lags: int | None = None) -> AdfResult:
    """ADF unit-root test (constant regression, AIC lag selection).

    The statistic is the t-ratio on the lagged level; small p-values reject
    the unit root, i.e. indicate stationarity.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.shape[0]
    if n < 16:
        raise ValueError(f"adf_test: series too short (n={n}, need >= 16)")
    if np.max(x) == np.min(x):
        raise ValueError("adf_test: constant series gives a degenerate regression")
    if max_lags is None:
        max_lags = default_max_lags(n)
    else:
        max_lags = int(max_lags)
        if max_lags < 0:
            raise ValueError("adf_test: max_lags must be >= 0")
    if n - 1 - max_lags < 15:
        raise ValueError(f"adf_test: max_lags={max_lags} leaves fewer than 15 observations")

    xdiff = np.diff(x)

    # Lag order by AIC over a common trimmed sample, ties to the smaller lag.
    best_lag = 0
    best_aic = math.inf
    design_full, response = _lagged_design(xdiff, x, max_lags)
    ones = np.ones((response.shape[0], 1))
    for lag in range(0, max_lags + 1):
        design = np.hstack([ones, design_full[:, : 1 + lag]])
        try:
            aic = ols(design, response).aic
        except np.linalg.LinAlgError:
            continue  # collinear candidate (deterministic series); skip
        if aic < best_aic:
            best_aic = aic
            best_lag = lag

    design, response = _lagged_design(xdiff, x, best_lag)
    design = np.hstack([design, np.ones((response.shape[0], 1))])
    fit = ols(design, response)
    if fit.bse[0] == 0.0:
        statistic = math.copysign(math.inf, fit.params[0])
    else:
        statistic = float(fit.params[0] / fit.bse[0])
    return AdfResult(
        statistic=statistic,
        p_value=mackinnon_pvalue(statistic),
        lags_used=best_lag,
        n_obs=fit.nobs,
    )
