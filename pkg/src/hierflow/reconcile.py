"""Coherent forecasts: bottom-up aggregation plus closed-form reconciliation baselines."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DataError, NumericError
from .hierarchy import HierarchyTree, coherency_error

METHODS = ("naive-bu", "mint-ols", "mint-shr", "hier-e2e-proj")


@dataclass
class ForecastEnsemble:
    """Sample paths of shape (count, horizon, n), coherent at every step."""

    samples: np.ndarray
    tree: HierarchyTree
    timestamps: list[str] | None = field(default=None)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3 or self.samples.shape[-1] != self.tree.n:
            raise DataError(
                f"ensemble must be (count, horizon, {self.tree.n}), got {self.samples.shape}"
            )

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def coherency_error(self) -> float:
        return coherency_error(self.samples, self.tree)

    def step_coherency(self) -> np.ndarray:
        """Max constraint violation per (sample, step)."""
        A = self.tree.A().astype(float)
        if A.shape[0] == 0:
            return np.zeros(self.samples.shape[:2])
        return np.abs(self.samples @ A.T).max(axis=-1)


def _S(S_or_tree) -> np.ndarray:
    if isinstance(S_or_tree, HierarchyTree):
        return S_or_tree.S().astype(float)
    return np.asarray(S_or_tree, dtype=float)


def bottom_up(bottom_samples, S_or_tree, timestamps=None):
    """Aggregate bottom-level draws of shape (count, horizon, m) through S.

    Returns a :class:`ForecastEnsemble` when given a tree, otherwise the raw array.
    """
    S = _S(S_or_tree)
    b = np.asarray(bottom_samples, dtype=float)
    if b.shape[-1] != S.shape[1]:
        raise DataError(f"bottom samples have {b.shape[-1]} series, S expects {S.shape[1]}")
    y = b @ S.T
    if isinstance(S_or_tree, HierarchyTree):
        if y.ndim == 2:
            y = y[None]
        return ForecastEnsemble(y, S_or_tree, timestamps)
    return y


def naive_bu(bottom_point_forecasts, S_or_tree) -> np.ndarray:
    """Sum independent bottom point forecasts (horizon x m) into all levels (horizon x n)."""
    S = _S(S_or_tree)
    b = np.asarray(bottom_point_forecasts, dtype=float)
    if b.ndim != 2 or b.shape[1] != S.shape[1]:
        raise DataError(f"expected (horizon, {S.shape[1]}) bottom forecasts, got {b.shape}")
    return b @ S.T


def seasonal_naive(history, horizon: int, period: int) -> np.ndarray:
    """Repeat the last observed season: step k copies ``history[T - period + (k mod period)]``."""
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    T = history.shape[0]
    if period < 1 or T < period:
        raise DataError(f"seasonal naive needs at least {period} observations, got {T}")
    idx = T - period + (np.arange(horizon) % period)
    return history[idx]


def mean_forecast(history, horizon: int) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    return np.repeat(history.mean(axis=0, keepdims=True), horizon, axis=0)


def seasonal_naive_residuals(history, period: int) -> np.ndarray:
    """In-sample one-step errors of the seasonal naive forecaster."""
    history = np.asarray(history, dtype=float)
    if history.shape[0] <= period:
        raise DataError(f"need more than {period} observations for naive residuals")
    return history[period:] - history[:-period]


def _cholesky(W: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        return linalg.cho_factor(W, lower=True), False
    except linalg.LinAlgError:
        pass
    jitter = 1e-8 * np.trace(W) / W.shape[0]
    try:
        factor = linalg.cho_factor(W + jitter * np.eye(W.shape[0]), lower=True)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh(W)
        k = int(np.argmin(eig))
        raise NumericError(
            f"W is not positive definite: eigenvalue {k} = {eig[k]:.3e} (after jitter {jitter:.1e})"
        ) from None
    warnings.warn(f"W not positive definite; added jitter {jitter:.3e}", RuntimeWarning)
    return factor, True


def _solve_spd(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with a column-pivoted QR fallback."""
    try:
        return linalg.cho_solve(linalg.cho_factor(G, lower=True), rhs)
    except linalg.LinAlgError:
        Q, R, piv = linalg.qr(G, pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.min() <= 1e-14 * diag.max():
            raise NumericError(
                f"normal matrix singular: pivot {int(piv[np.argmin(diag)])} ~ {diag.min():.2e}"
            ) from None
        x = linalg.solve_triangular(R, Q.T @ rhs)
        out = np.empty_like(x)
        out[piv] = x
        return out


def mint_projection(S, W) -> np.ndarray:
    """``P = (S' W^-1 S)^-1 S' W^-1`` (m x n)."""
    S = _S(S)
    W = np.asarray(W, dtype=float)
    n = S.shape[0]
    if W.shape != (n, n):
        raise DataError(f"W must be {n}x{n}, got {W.shape}")
    if not np.allclose(W, W.T, rtol=1e-10, atol=1e-12):
        raise NumericError("W is not symmetric")
    factor, _ = _cholesky(W)
    WinvS = linalg.cho_solve(factor, S)
    return _solve_spd(S.T @ WinvS, WinvS.T)


def ols_projection(S) -> np.ndarray:
    S = _S(S)
    return mint_projection(S, np.eye(S.shape[0]))


def shrinkage_covariance(residuals) -> tuple[np.ndarray, float]:
    """Schafer-Strimmer shrinkage of the residual covariance toward its diagonal.

    Returns ``(W, lambda)`` with ``W = lambda * diag(C) + (1 - lambda) * C``.
    """
    e = np.asarray(residuals, dtype=float)
    T, n = e.shape
    ec = e - e.mean(axis=0)
    cov = ec.T @ ec / (T - 1)
    sd = np.sqrt(np.diag(cov))
    safe = np.where(sd > 0, sd, 1.0)
    xs = ec / safe
    corr = xs.T @ xs / (T - 1)
    w = xs[:, :, None] * xs[:, None, :]
    w_mean = w.mean(axis=0)
    var_corr = (T / (T - 1) ** 3) * ((w - w_mean) ** 2).sum(axis=0)
    off = ~np.eye(n, dtype=bool)
    denom = (corr[off] ** 2).sum()
    lam = 1.0 if denom == 0 else float(np.clip(var_corr[off].sum() / denom, 0.0, 1.0))
    W = lam * np.diag(np.diag(cov)) + (1.0 - lam) * cov
    return W, lam


def mint_weights(residuals, mode: str = "shr") -> np.ndarray:
    """Error covariance for MinT: identity (``ols``) or the shrinkage estimate (``shr``)."""
    e = np.asarray(residuals, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2:
        raise DataError(f"need a T x n residual matrix with T >= 2, got shape {e.shape}")
    if mode == "ols":
        return np.eye(e.shape[1])
    if mode == "shr":
        return shrinkage_covariance(e)[0]
    raise DataError(f"unknown MinT mode {mode!r}")


def hier_e2e_projection(A) -> np.ndarray:
    """``M = I - A' (A A')^-1 A``: orthogonal projection onto the null space of A."""
    A = np.asarray(A, dtype=float)
    n = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(n)
    G = A @ A.T
    try:
        X = linalg.cho_solve(linalg.cho_factor(G, lower=True), A)
    except linalg.LinAlgError:
        raise NumericError("A A' is singular: A lacks full row rank") from None
    return np.eye(n) - A.T @ X


def reconcile(base, tree: HierarchyTree, method: str, residuals=None) -> np.ndarray:
    """Apply a baseline reconciler to base forecasts with last axis n."""
    base = np.asarray(base, dtype=float)
    if base.shape[-1] != tree.n:
        raise DataError(f"base forecasts have {base.shape[-1]} series, hierarchy has {tree.n}")
    S = tree.S().astype(float)
    if method == "naive-bu":
        return base[..., tree.r:] @ S.T
    if method == "hier-e2e-proj":
        return base @ hier_e2e_projection(tree.A()).T
    if method in ("mint-ols", "mint-shr"):
        if method == "mint-ols":
            W = np.eye(tree.n)
        else:
            if residuals is None:
                raise DataError("mint-shr needs in-sample residuals")
            W = mint_weights(residuals, "shr")
        P = mint_projection(S, W)
        return base @ (S @ P).T
    raise DataError(f"unknown reconciler {method!r}; choose from {METHODS}")
