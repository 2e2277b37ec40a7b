"""Fixed-point estimators ``Y = (1/n) sum_i f(x_i^T Y) x_i`` and the
leave-one-out prediction of their mean and covariance.

The predictor works on Gaussian columns.  Writing ``z_i = x_i^T Y_{-i}``, the
scalar map ``zeta_i`` solves ``zeta = z_i + Delta_i f(zeta)`` and
``xi_i = f o zeta_i``.  Expectations of ``xi_i``, ``xi_i'`` and ``xi_i^2``
under ``z_i ~ N(mu_i, nu_i)`` drive a coupled fixed point for
``(mu, nu, m_Y, C_Y)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import ContractionError, ConvergenceError, EstimationError
from .model import ColumnLaw, DataModel, SampleMatrix, derive_seed, sample
from .parallel import imap_trials
from .resolvent import resolvent_weighted

CONTRACTION_MARGIN = 1e-3
ZETA_MARGIN = 1e-6


# -- nonlinearities -------------------------------------------------------------

@dataclass(frozen=True)
class Nonlinearity:
    """A scalar map with its first two derivatives and declared sup-norms."""

    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    deriv2: Callable[[np.ndarray], np.ndarray]
    sup_deriv: float
    sup_deriv2: float
    name: str = "f"

    def __call__(self, t):
        return self.eval(t)

    def audit(self, lo: float = -50.0, hi: float = 50.0, points: int = 10_000) -> None:
        """Check the declared bounds and ``deriv`` against finite differences."""
        t = np.linspace(lo, hi, points)
        d1, d2 = np.asarray(self.deriv(t)), np.asarray(self.deriv2(t))
        if np.max(np.abs(d1)) > self.sup_deriv + 1e-12:
            raise ValueError(f"{self.name}: |f'| exceeds declared bound {self.sup_deriv}")
        if np.max(np.abs(d2)) > self.sup_deriv2 + 1e-12:
            raise ValueError(f"{self.name}: |f''| exceeds declared bound {self.sup_deriv2}")
        h = 1e-5
        fd = (np.asarray(self.eval(t + h)) - np.asarray(self.eval(t - h))) / (2 * h)
        scale = np.maximum(np.abs(d1), max(self.sup_deriv, 1e-300))
        err = np.max(np.abs(fd - d1) / scale)
        if err > 1e-6:
            raise ValueError(f"{self.name}: derivative disagrees with finite differences ({err:.2e})")

    @classmethod
    def constant(cls, c: float) -> "Nonlinearity":
        zero = lambda t: np.zeros_like(np.asarray(t, dtype=float))
        return cls(lambda t: np.full_like(np.asarray(t, dtype=float), c), zero, zero,
                   0.0, 0.0, name=f"const({c})")

    @classmethod
    def zero(cls) -> "Nonlinearity":
        return cls.constant(0.0)

    @classmethod
    def linear(cls, a: float) -> "Nonlinearity":
        zero = lambda t: np.zeros_like(np.asarray(t, dtype=float))
        return cls(lambda t: a * np.asarray(t, dtype=float),
                   lambda t: np.full_like(np.asarray(t, dtype=float), a), zero,
                   abs(a), 0.0, name=f"linear({a})")

    @classmethod
    def logistic(cls, lam: float = 1.0) -> "Nonlinearity":
        """``t -> (1/lam) / (1 + e^t)``."""
        def f(t):
            return np.exp(-np.logaddexp(0.0, t)) / lam

        def df(t):
            s = np.exp(-np.logaddexp(0.0, t))
            return -s * (1.0 - s) / lam

        def d2f(t):
            s = np.exp(-np.logaddexp(0.0, t))
            return s * (1.0 - s) * (1.0 - 2.0 * s) / lam

        # max |s(1-s)(1-2s)| = 1/(6 sqrt 3)
        return cls(f, df, d2f, 0.25 / lam, 1.0 / (6.0 * np.sqrt(3.0) * lam),
                   name=f"logistic(lambda={lam})")


def logistic_model(m, C, n: int, lam: float, epsilon: float = 0.25):
    """Balanced two-class logistic regression recast as a fixed point.

    With ``x_i = y_i z_i`` and ``z_i ~ N(y_i m, C)`` every column follows
    ``N(m, C)``; the regularizer is absorbed into ``f = logistic / lam``.
    The resolvent margin does not apply here (the relevant contraction is
    ``sup|f'| ||XX^T|| / n``), so the model is built unchecked.
    """
    law = ColumnLaw(m, C)
    return DataModel.shared(law, n, epsilon=epsilon, check=False), Nonlinearity.logistic(lam)


# -- solving for Y ----------------------------------------------------------------

@dataclass
class RegressionSolution:
    y: np.ndarray
    residual: float
    iterations: int
    contraction_bound: float


def _data(X) -> np.ndarray:
    return X.data if isinstance(X, SampleMatrix) else np.asarray(X, dtype=float)


def contraction_bound(X, f: Nonlinearity) -> float:
    A = _data(X)
    return f.sup_deriv * np.linalg.norm(A, 2) ** 2 / A.shape[1]


def _picard_Y(A: np.ndarray, f: Nonlinearity, tol: float, bound: float, y0=None):
    n = A.shape[1]
    if bound > 1.0 - CONTRACTION_MARGIN:
        raise ContractionError(f"contraction bound {bound:.4f} exceeds 1 - {CONTRACTION_MARGIN}",
                               bound=bound)
    max_iter = 50 + (int(np.ceil(np.log(tol) / np.log(bound))) if bound > 0 else 0)
    y = np.zeros(A.shape[0]) if y0 is None else np.array(y0, dtype=float)
    for it in range(max_iter + 1):
        fy = A @ f(A.T @ y) / n
        r = float(np.linalg.norm(y - fy))
        if r <= tol:
            return RegressionSolution(y, r, it, bound)
        y = fy
    raise ConvergenceError(f"Y iteration stalled at residual {r:.3e}", residual=r,
                           iterations=max_iter, last=y)


def solve_Y(X, f: Nonlinearity, tol: float = 1e-10) -> RegressionSolution:
    """Picard iteration of ``Y -> (1/n) X f(X^T Y)`` from zero."""
    A = _data(X)
    return _picard_Y(A, f, tol, contraction_bound(A, f))


def _without(A: np.ndarray, i: int) -> np.ndarray:
    B = A.copy()
    B[:, i] = 0.0
    return B


def solve_Y_loo(X, i: int, f: Nonlinearity, tol: float = 1e-10) -> RegressionSolution:
    """``Y_{-i}``: the same fixed point with column ``i`` zeroed (``n`` unchanged)."""
    return solve_Y(_without(_data(X), i), f, tol)


def Q_minus_i(X, y_loo, i: int, f: Nonlinearity) -> np.ndarray:
    """``(I_p - (1/n) sum_{j != i} f'(x_j^T Y_{-i}) x_j x_j^T)^{-1}``."""
    A = _data(X)
    gamma = np.asarray(f.deriv(A.T @ np.asarray(y_loo)), dtype=float)
    gamma[i] = 0.0
    return resolvent_weighted(A, gamma, 1.0)


def w_residuals(X, f: Nonlinearity, indices=None, tol: float = 1e-10) -> np.ndarray:
    """``||Y - Y_{-i} - (1/n) f(x_i^T Y) Q_{-i} x_i||`` for each index."""
    A = _data(X)
    n = A.shape[1]
    sol = solve_Y(A, f, tol)
    y = sol.y
    indices = range(n) if indices is None else indices
    out = []
    for i in indices:
        B = _without(A, i)
        yi = _picard_Y(B, f, tol, sol.contraction_bound).y
        x = A[:, i]
        Qi = Q_minus_i(A, yi, i, f)
        w = y - yi - float(f(x @ y)) * (Qi @ x) / n
        out.append(np.linalg.norm(w))
    return np.array(out)


def w_residual(X, i: int, f: Nonlinearity, tol: float = 1e-10) -> float:
    return float(w_residuals(X, f, [i], tol)[0])


# -- scalar machinery --------------------------------------------------------------

def _zeta_check(delta: float, f: Nonlinearity):
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta * f.sup_deriv > 1.0 - ZETA_MARGIN:
        raise ContractionError(f"delta * sup|f'| = {delta * f.sup_deriv:.6g} is not < 1",
                               bound=delta * f.sup_deriv)


def zeta_array(v, delta: float, f: Nonlinearity):
    """Vectorised solution of ``z = v + delta f(z)`` and ``dz/dv``."""
    _zeta_check(delta, f)
    v = np.asarray(v, dtype=float)
    z = v + delta * f(v)
    for _ in range(100):
        g = z - v - delta * f(z)
        if np.all(np.abs(g) <= 1e-14 * np.maximum(1.0, np.abs(v))):
            break
        z = z - g / (1.0 - delta * f.deriv(z))
    g = z - v - delta * f(z)
    bad = np.abs(g) > 1e-12 * np.maximum(1.0, np.abs(v))
    if np.any(bad):
        # Picard fallback; contraction factor delta*sup|f'| < 1
        zb, vb = z[bad], v[bad]
        for _ in range(100_000):
            zn = vb + delta * f(zb)
            if np.all(np.abs(zn - zb) <= 1e-15 * np.maximum(1.0, np.abs(vb))):
                zb = zn
                break
            zb = zn
        z[bad] = zb
    return z, 1.0 / (1.0 - delta * f.deriv(z))


def zeta(v: float, delta: float, f: Nonlinearity):
    """Solve ``z = v + delta f(z)``; returns ``(z, 1 / (1 - delta f'(z)))``."""
    z, dz = zeta_array(np.array([float(v)]), delta, f)
    return float(z[0]), float(dz[0])


@lru_cache(maxsize=None)
def _hermgauss(nodes: int):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def gauss_expect(g: Callable, mu: float, var: float, nodes: int = 64) -> float:
    """Gauss-Hermite estimate of ``E[g(mu + sqrt(var) xi)]``, ``xi ~ N(0, 1)``."""
    if not var > 0:
        raise ValueError(f"variance must be positive, got {var}")
    if nodes < 2:
        raise ValueError("need at least two nodes")
    x, w = _hermgauss(int(nodes))
    return float(w @ np.asarray(g(mu + np.sqrt(var) * x), dtype=float))


def _nodes(mu: float, var: float, nodes: int):
    # degenerate variance collapses to a point mass
    if var <= 0:
        return np.array([mu]), np.array([1.0])
    x, w = _hermgauss(nodes)
    return mu + np.sqrt(var) * x, w


# -- Stein identities --------------------------------------------------------------

@dataclass
class SteinSide:
    lhs_mc: float
    rhs_quadrature: float
    mc_stderr: float

    @property
    def z_score(self) -> float:
        diff = abs(self.lhs_mc - self.rhs_quadrature)
        return 0.0 if diff == 0 else diff / self.mc_stderr if self.mc_stderr > 0 else np.inf


@dataclass
class SteinResult:
    linear: SteinSide
    quadratic: SteinSide


def stein_rhs(mu, C, w, u, f: Nonlinearity, A=None, nodes: int = 64):
    """Closed forms of ``E[f(w^T x) u^T x]`` and ``E[f(w^T x) x^T A x]`` for ``x ~ N(mu, C)``."""
    mu, C, w, u = (np.asarray(a, dtype=float) for a in (mu, C, w, u))
    A = np.outer(u, u) if A is None else np.asarray(A, dtype=float)
    t, wt = _nodes(float(w @ mu), float(w @ C @ w), nodes)
    e0, e1, e2 = (float(wt @ np.asarray(h(t), dtype=float)) for h in (f.eval, f.deriv, f.deriv2))
    Cw = C @ w
    lin = e0 * (u @ mu) + e1 * (u @ Cw)
    quad = (e0 * np.trace(A @ (np.outer(mu, mu) + C))
            + e1 * (Cw @ (A + A.T) @ mu)
            + e2 * (Cw @ A @ Cw))
    return float(lin), float(quad)


def stein_check(mu, C, w, u, f: Nonlinearity, trials: int, seed: int, A=None,
                nodes: int = 64, chunk: int = 100_000) -> SteinResult:
    """Monte-Carlo left-hand sides of both Stein identities next to their quadratures."""
    mu, C, w, u = (np.asarray(a, dtype=float) for a in (mu, C, w, u))
    A = np.outer(u, u) if A is None else np.asarray(A, dtype=float)
    root = ColumnLaw(mu, C).sqrt_cov
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    lin, quad = [], []
    for start in range(0, trials, chunk):
        k = min(chunk, trials - start)
        x = mu + rng.standard_normal((k, mu.size)) @ root
        fx = np.asarray(f(x @ w), dtype=float)
        lin.append(fx * (x @ u))
        quad.append(fx * np.einsum("ij,jk,ik->i", x, A, x))
    lin, quad = np.concatenate(lin), np.concatenate(quad)
    r_lin, r_quad = stein_rhs(mu, C, w, u, f, A, nodes)

    def side(vals, rhs):
        return SteinSide(float(vals.mean()), rhs, float(vals.std(ddof=1) / np.sqrt(vals.size)))

    return SteinResult(side(lin, r_lin), side(quad, r_quad))


# -- prediction ---------------------------------------------------------------------

def theta(B, Ct, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Solve ``T = B + Ct T Ct`` by successive substitution."""
    B, Ct = np.asarray(B, dtype=float), np.asarray(Ct, dtype=float)
    if np.linalg.norm(Ct, 2) >= 1.0:
        raise ContractionError("||C_tilde|| must be < 1 for Theta to be defined")
    T = B.copy()
    scale = max(1.0, np.linalg.norm(B))
    for _ in range(max_iter):
        Tn = B + Ct @ T @ Ct
        if np.linalg.norm(Tn - T) <= tol * scale:
            return Tn
        T = Tn
    raise ConvergenceError("Theta iteration did not converge")


@dataclass
class PredictDiagnostics:
    outer_iterations: int = 0
    change_history: list = field(default_factory=list)
    spectral_history: list = field(default_factory=list)


@dataclass
class PredictedStats:
    mu: np.ndarray
    nu: np.ndarray
    m_y: np.ndarray
    c_y: np.ndarray
    delta: np.ndarray
    diagnostics: PredictDiagnostics


def _expectations(mu, var, delta, f: Nonlinearity, nodes: int):
    """``E[xi], E[xi'], E[xi^2]`` for ``z ~ N(mu, var)``."""
    t, w = _nodes(mu, var, nodes)
    z, dz = zeta_array(t, delta, f)
    xi = np.asarray(f(z), dtype=float)
    dxi = np.asarray(f.deriv(z), dtype=float) * dz
    return float(w @ xi), float(w @ dxi), float(w @ xi**2)


def predict_stats(model: DataModel, f: Nonlinearity, tol: float = 1e-8, max_outer: int = 200,
                  nodes: int = 64, covariance: str = "sandwich") -> PredictedStats:
    """Predicted mean and centered covariance of ``Y`` for Gaussian columns.

    Each outer step maps ``(mu_i, nu_i)`` to ``e_i = E[xi_i]``,
    ``d_i = E[xi_i']``, ``s_i = E[xi_i^2]`` and then

    * ``m_Y = (I - C~)^{-1} m~`` with ``m~ = (1/n) sum e_i m_i``, ``C~ = (1/n) sum d_i C_i``
    * ``C_Y = (1/n) R Sigma~ R`` with ``R = (I - C~)^{-1}`` and
      ``Sigma~ = (1/n) sum s_i Sigma_i`` (``covariance="sandwich"``), or
      ``C_Y = (1/n) Theta(Sigma~)`` (``covariance="theta"``)
    * ``mu_i = m_i^T m_Y``, ``nu_i = tr(Sigma_i C_Y) + m_Y^T C_i m_Y``

    The sandwich applies the linear response ``Y ~ m~ + C~ Y + noise`` that
    yields ``m_Y`` to the fluctuations as well.  The ``Theta`` recursion
    keeps only ``C~ C_Y C~`` and overstates the covariance as ``|C~|`` grows.

    ``nu_i`` is the variance (not the second moment) of ``x_i^T Y_{-i}``.
    """
    if covariance not in ("sandwich", "theta"):
        raise ValueError(f"unknown covariance form {covariance!r}")
    laws, wts, n = model.laws, model.weights, model.n
    G = len(laws)
    delta = model.traces / n
    for g in range(G):
        try:
            _zeta_check(delta[g], f)
        except ContractionError as exc:
            raise ContractionError(f"column law {g}: {exc}", bound=exc.bound) from exc
    means = np.stack([law.mean for law in laws])
    covs = np.stack([law.cov for law in laws])
    seconds = np.stack([law.second_moment for law in laws])
    p = model.p

    mu = np.zeros(G)
    var = np.zeros(G)
    m_y = np.zeros(p)
    c_y = np.zeros((p, p))
    diag = PredictDiagnostics()
    for step in range(1, max_outer + 1):
        ex = np.array([_expectations(mu[g], var[g], delta[g], f, nodes) for g in range(G)])
        e, d, s = ex.T
        bound = np.linalg.norm(np.tensordot(wts * d, seconds, axes=1), 2)
        diag.spectral_history.append(float(bound))
        if not bound < 1.0:
            raise ContractionError(
                f"outer step {step}: ||(1/n) sum d_i Sigma_i|| = {bound:.4f} is not < 1", bound=bound)
        m_t = (wts * e) @ means
        C_t = np.tensordot(wts * d, covs, axes=1)
        S_t = np.tensordot(wts * s, seconds, axes=1)
        R = np.linalg.inv(np.eye(p) - C_t)
        m_new = R @ m_t
        c_new = (R @ S_t @ R if covariance == "sandwich" else theta(S_t, C_t)) / n
        c_new = 0.5 * (c_new + c_new.T)
        mu_new = means @ m_new
        var_new = np.einsum("gij,ji->g", seconds, c_new) + np.einsum("i,gij,j->g", m_new, covs, m_new)
        change = float(max(np.max(np.abs(mu_new - mu)), np.max(np.abs(var_new - var)),
                           np.max(np.abs(m_new - m_y), initial=0.0)))
        mu, var, m_y, c_y = mu_new, var_new, m_new, c_new
        diag.change_history.append(change)
        diag.outer_iterations = step
        if change <= tol:
            a = model.assignment
            return PredictedStats(mu[a], var[a], m_y, c_y, delta[a], diag)
    raise ConvergenceError(f"outer loop did not converge in {max_outer} steps "
                           f"(last change {change:.3e})", residual=change, iterations=max_outer)


# -- Monte-Carlo oracle ------------------------------------------------------------

@dataclass
class RegressionStats:
    mean: np.ndarray
    cov: np.ndarray
    discard_count: int
    trials: int

    @property
    def discard_rate(self) -> float:
        return self.discard_count / self.trials

    @property
    def flagged(self) -> bool:
        return self.discard_rate > 0.2


def empirical_regression_stats(model: DataModel, f: Nonlinearity, trials: int, seed: int,
                               tol: float = 1e-10, threads: int = 1) -> RegressionStats:
    """Sample mean and covariance of ``Y`` over draws satisfying the contraction bound."""
    if trials < 2:
        raise ValueError("need at least two trials")

    def one(t):
        X = sample(model, derive_seed(seed, t))
        try:
            return solve_Y(X, f, tol).y
        except ContractionError:
            return None

    ys = [y for y in imap_trials(one, trials, threads) if y is not None]
    if len(ys) < 2:
        raise EstimationError("fewer than two trials satisfied the contraction bound")
    Y = np.stack(ys)
    return RegressionStats(Y.mean(axis=0), np.atleast_2d(np.cov(Y, rowvar=False)),
                           trials - len(ys), trials)
