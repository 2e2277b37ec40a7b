"""Resolvents of sample covariance matrices and their deterministic equivalents.

Conventions: ``Q^z = (z I_p - X X^T / n)^{-1}`` and, for a diagonal ``D``,
``tilde_Q^z(D) = (z I_p - Sigma_D)^{-1}`` with
``Sigma_D = (1/n) sum_i D_i Sigma_i``.  The Stieltjes transform of the
spectral measure is ``m(z) = -(1/p) tr Q^z``.

Columns sharing a law are exchangeable, so the diagonal ``Lambda^z`` is
constant on each law; the solvers work with one unknown per law and expand
to the ``n`` columns at the end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cplx_diag import SolveDiagnostics, as_diag, chi, solve_contractive
from .errors import ConditioningError, ConvergenceError, DomainError, EstimationError, RmtError
from .model import DataModel, SampleMatrix, derive_seed, sample
from .parallel import KahanSum, imap_trials

COND_MAX = 1e14
QUERY_MIN_DIST = 1e-6
POLE_GUARD = 1e-12


def segment_distance(z: complex, epsilon: float) -> float:
    """Distance from ``z`` to the segment ``[0, 1 - epsilon]``."""
    z = complex(z)
    x = min(max(z.real, 0.0), 1.0 - epsilon)
    return abs(z - x)


@dataclass(frozen=True)
class ResolventQuery:
    z: complex
    model: DataModel

    def __post_init__(self):
        z = complex(self.z)
        object.__setattr__(self, "z", z)
        d = segment_distance(z, self.model.epsilon)
        if d < QUERY_MIN_DIST:
            raise DomainError(f"z = {z} lies within {d:.2e} of [0, 1 - epsilon]")


@dataclass
class DeterministicEquivalent:
    z: complex
    lam: np.ndarray
    tilde_q: np.ndarray
    stieltjes: complex
    diagnostics: SolveDiagnostics


# -- tilde Q and the I^z map ----------------------------------------------------

class _GroupOps:
    """Per-law building blocks; diagonal second moments use an O(p) path."""

    def __init__(self, model: DataModel):
        self.model = model
        self.weights = model.weights
        self.diagonal = all(law.is_diagonal for law in model.laws)
        if self.diagonal:
            self.S = np.stack([np.diag(law.second_moment) for law in model.laws])
        else:
            self.S = np.stack([law.second_moment for law in model.laws])

    def resolvent(self, z: complex, coef: np.ndarray):
        """``(z I - sum_g coef_g Sigma_g)^{-1}``; a p-vector on the diagonal path."""
        if self.diagonal:
            a = z - coef @ self.S
            amin = np.min(np.abs(a))
            cond = np.inf if amin == 0 else np.max(np.abs(a)) / amin
            if not cond < COND_MAX:
                raise ConditioningError(f"z I - Sigma_D is singular (condition {cond:.3e})",
                                        condition=cond)
            return 1.0 / a
        A = z * np.eye(self.model.p) - np.tensordot(coef, self.S, axes=1)
        return _checked_inverse(A)

    def traces(self, Q) -> np.ndarray:
        """``tr(Sigma_g Q)`` for every law."""
        if self.diagonal:
            return self.S @ Q
        return np.einsum("gij,ji->g", self.S, Q)

    def full(self, Q) -> np.ndarray:
        return np.diag(Q) if self.diagonal else Q

    def trace(self, Q) -> complex:
        return complex(np.sum(Q) if self.diagonal else np.trace(Q))

    def pair_traces(self, Q) -> np.ndarray:
        """``tr(Sigma_g Q Sigma_h Q)`` for all pairs of laws."""
        if self.diagonal:
            return (self.S * Q**2) @ self.S.T
        M = np.einsum("ij,gjk->gik", Q, self.S)
        return np.einsum("gij,hji->gh", M, M)


def _checked_inverse(A: np.ndarray) -> np.ndarray:
    try:
        Q = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"singular system: {exc}", condition=np.inf) from exc
    cond = np.linalg.norm(A, 1) * np.linalg.norm(Q, 1)
    if not cond < COND_MAX:
        raise ConditioningError(f"ill-conditioned system (condition {cond:.3e})", condition=cond)
    return Q


def _column_coefficients(D, model: DataModel) -> np.ndarray:
    d = as_diag(D)
    if d.size != model.n:
        raise DomainError(f"diagonal has {d.size} entries, model has n = {model.n}")
    coef = np.zeros(len(model.laws), dtype=complex)
    np.add.at(coef, model.assignment, d)
    return coef / model.n


def tilde_Q(z: complex, D, model: DataModel) -> np.ndarray:
    """``(z I_p - (1/n) sum_i D_i Sigma_i)^{-1}`` as a dense p x p matrix."""
    ops = _GroupOps(model)
    return ops.full(ops.resolvent(complex(z), _column_coefficients(D, model)))


def I_z(z: complex, D, model: DataModel) -> np.ndarray:
    """``diag((1/n) tr(Sigma_i tilde_Q^z(D)))``."""
    ops = _GroupOps(model)
    Q = ops.resolvent(complex(z), _column_coefficients(D, model))
    return (ops.traces(Q) / model.n)[model.assignment]


# -- Lambda^z -----------------------------------------------------------------

class _LambdaSystem:
    """The per-law fixed point ``L = I^z(chi(L))``."""

    def __init__(self, model: DataModel, z: complex):
        self.ops = _GroupOps(model)
        self.model = model
        self.z = complex(z)

    def resolvent(self, L):
        return self.ops.resolvent(self.z, self.ops.weights * chi(L))

    def __call__(self, L):
        return self.ops.traces(self.resolvent(L)) / self.model.n

    def initial(self) -> np.ndarray:
        return (self.model.traces / (self.z * self.model.n)).astype(complex)

    def jacobian(self, L) -> np.ndarray:
        """Jacobian of ``L - I^z(chi(L))``."""
        c = chi(L)
        Q = self.resolvent(L)
        T = self.ops.pair_traces(Q) / self.model.n
        return np.eye(L.size) - T * (self.ops.weights * c**2)[None, :]


def _right_half(L, z) -> bool:
    # Lambda^z lies in the half-plane opposite to z
    if z.imag < 0:
        return bool(np.all(L.imag > 0))
    if z.imag > 0:
        return bool(np.all(L.imag < 0))
    return True


def _newton(system: _LambdaSystem, L0, tol: float, max_iter: int = 100):
    L = as_diag(L0).copy()
    diag = SolveDiagnostics(method="newton")
    F = L - system(L)
    r = float(np.max(np.abs(F)))
    diag.residual_history.append(r)
    while r > tol:
        if diag.iterations >= max_iter:
            raise ConvergenceError(f"Newton did not converge (residual {r:.3e})",
                                   residual=r, iterations=diag.iterations, last=L)
        step = np.linalg.solve(system.jacobian(L), F)
        t = 1.0
        for _ in range(40):
            try:
                Ln = L - t * step
                Fn = Ln - system(Ln)
                rn = float(np.max(np.abs(Fn)))
            except (DomainError, ConditioningError):
                rn = np.inf
            if rn < r or rn <= tol:
                break
            t *= 0.5
        else:
            raise ConvergenceError("Newton line search failed", residual=r,
                                   iterations=diag.iterations, last=L)
        L, F, r = Ln, Fn, rn
        diag.iterations += 1
        diag.residual_history.append(r)
    diag.final_residual = r
    return L, diag


def _solve_groups(model: DataModel, z: complex, tol: float = 1e-12, max_iter: int = 1000,
                  method: str = "auto", init=None, damping: float = 1.0):
    system = _LambdaSystem(model, z)
    L0 = system.initial() if init is None else as_diag(init).copy()
    domain = "upper" if z.imag < 0 else None

    def accept(L, diag):
        if np.min(np.abs(1.0 - L)) < POLE_GUARD:
            raise DomainError("Lambda is within 1e-12 of the chi pole at 1")
        return L, diag

    if method == "newton":
        L, diag = _newton(system, L0, tol)
        if not _right_half(L, z):
            raise ConvergenceError("Newton converged to a spurious branch",
                                   residual=diag.final_residual, last=L)
        return accept(L, diag)
    if method not in ("auto", "picard"):
        raise ValueError(f"unknown method {method!r}")
    try:
        return accept(*solve_contractive(system, L0, tol=tol, max_iter=max_iter,
                                         damping=damping, domain=domain))
    except ConvergenceError as exc:
        if method == "picard":
            raise
        first = exc
    last = first.last
    if z.imag == 0:
        # continue from z - 0.5i back to the real axis
        try:
            zs = [z - 0.5j * (1 - k / 5) for k in range(6)]
            L = system.initial() if init is None else L0
            for zk in zs:
                L, diag = solve_contractive(_LambdaSystem(model, zk), L, tol=tol,
                                            max_iter=max_iter, damping=damping)
            return accept(L, diag)
        except (ConvergenceError, DomainError, ConditioningError) as exc:
            last = getattr(exc, "last", None) if getattr(exc, "last", None) is not None else last
    try:
        L, diag = _newton(system, last, tol)
    except (ConvergenceError, np.linalg.LinAlgError):
        raise first
    if not _right_half(L, z):
        raise first
    return accept(L, diag)


def compute_Lambda(z: complex, model: DataModel, tol: float = 1e-12, max_iter: int = 1000,
                   method: str = "auto", init=None, damping: float = 1.0):
    """Solve ``Lambda = I^z(chi(Lambda))``; returns ``(Lambda, diagnostics)``.

    ``method`` is ``"picard"`` (plain damped iteration), ``"newton"`` or
    ``"auto"``: Picard first, then on failure a continuation from
    ``z - 0.5i`` (real ``z`` only) and finally Newton from the last iterate.
    ``init`` is a per-law starting point (defaults to ``tr(Sigma_i)/(z n)``).
    """
    z = complex(ResolventQuery(z, model).z)
    L, diag = _solve_groups(model, z, tol, max_iter, method, init, damping)
    return L[model.assignment], diag


def deterministic_equivalent(query: ResolventQuery, **opts) -> DeterministicEquivalent:
    model, z = query.model, query.z
    L, diag = _solve_groups(model, z, **opts)
    ops = _GroupOps(model)
    Q = ops.resolvent(z, ops.weights * chi(L))
    m = -ops.trace(Q) / model.p
    return DeterministicEquivalent(z, L[model.assignment], ops.full(Q), m, diag)


def stieltjes(model: DataModel, z: complex, **opts) -> complex:
    """``m(z) = -(1/p) tr tilde_Q^z(chi(Lambda^z))``."""
    return deterministic_equivalent(ResolventQuery(z, model), **opts).stieltjes


def stieltjes_sweep(model: DataModel, zs, **opts) -> list[dict]:
    rows = []
    for z in zs:
        de = deterministic_equivalent(ResolventQuery(z, model), **opts)
        rows.append(dict(re_z=de.z.real, im_z=de.z.imag, re_m=de.stieltjes.real,
                         im_m=de.stieltjes.imag, iterations=de.diagnostics.iterations,
                         residual=de.diagnostics.final_residual))
    return rows


def spectral_density(model: DataModel, grid, eta: float, tol: float = 1e-12) -> np.ndarray:
    """Density of the deterministic spectral measure on ``grid``.

    ``density(x) = Im m(x + i eta) / pi``.  Each point is solved at the
    conjugate ``x - i eta``; Newton is warm-started from the previous grid
    point and falls back to a cold Picard solve.  Returns an (N, 2) array of
    ``(x, density)``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    ops = _GroupOps(model)
    out = np.empty((len(grid), 2))
    L = None
    for k, x in enumerate(np.asarray(grid, dtype=float)):
        z = complex(ResolventQuery(complex(x, -eta), model).z)
        solved = None
        if L is not None:
            try:
                solved = _solve_groups(model, z, tol, method="newton", init=L)[0]
            except (ConvergenceError, DomainError, ConditioningError, np.linalg.LinAlgError):
                solved = None
        if solved is None:
            solved = _solve_groups(model, z, tol, max_iter=100000, method="auto")[0]
        L = solved
        Q = ops.resolvent(z, ops.weights * chi(L))
        rho = ops.trace(Q).imag / (np.pi * model.p)
        if rho < -1e-12:
            raise RmtError(f"negative density {rho:.3e} at x = {x}")
        out[k] = x, max(rho, 0.0)
    return out


# -- empirical resolvents ---------------------------------------------------------

def _data(X) -> np.ndarray:
    return X.data if isinstance(X, SampleMatrix) else np.asarray(X, dtype=float)


def resolvent_weighted(X, Gamma, z: complex) -> np.ndarray:
    """``(z I_p - (1/n) X diag(Gamma) X^T)^{-1}`` by a dense solve."""
    A = _data(X)
    p, n = A.shape
    g = np.asarray(Gamma, dtype=float).reshape(-1)
    if g.size != n:
        raise ValueError(f"Gamma has {g.size} entries, expected {n}")
    M = (A * g) @ A.T / n
    dtype = complex if complex(z).imag != 0 else float
    z = complex(z) if dtype is complex else complex(z).real
    return _checked_inverse(z * np.eye(p, dtype=dtype) - M)


def empirical_resolvent(X, z: complex, epsilon: float):
    """``Q^z`` of one draw and whether the draw lies in the event ``||XX^T/n|| <= 1 - epsilon``."""
    if segment_distance(z, epsilon) < QUERY_MIN_DIST:
        raise DomainError(f"z = {z} is too close to [0, 1 - epsilon]")
    A = _data(X)
    n = A.shape[1]
    top = np.linalg.norm(A, 2) ** 2 / n if A.size else 0.0
    Q = resolvent_weighted(A, np.ones(n), z)
    return Q, bool(top <= 1.0 - epsilon)


def schur_check(X, z: complex, i: int):
    """Residual norms of the two rank-one (Schur) identities linking ``Q`` and ``Q_{-i}``."""
    A = _data(X)
    p, n = A.shape
    Q = resolvent_weighted(A, np.ones(n), z)
    g = np.ones(n)
    g[i] = 0.0
    Qi = resolvent_weighted(A, g, z)
    x = A[:, i]
    Qix = Qi @ x
    den = 1.0 - (x @ Qix) / n
    if abs(den) < 1e-10:
        raise ConditioningError(f"Schur denominator {den} is too close to zero")
    res_mat = np.linalg.norm(Q - Qi - np.outer(Qix, Qix) / (n * den))
    res_vec = np.linalg.norm(Q @ x - Qix / den)
    return float(res_mat), float(res_vec)


def leave_one_out_quadratic(X, z: complex) -> np.ndarray:
    """``D_i = (1/n) x_i^T Q_{-i} x_i`` for every column, via one resolvent.

    Uses ``(1/n) x_i^T Q x_i = D_i / (1 - D_i)``.
    """
    A = _data(X)
    n = A.shape[1]
    Q = resolvent_weighted(A, np.ones(n), z)
    a = np.einsum("ji,jk,ki->i", A, Q, A) / n
    return a / (1.0 + a)


@dataclass
class DeltaEstimate:
    delta: np.ndarray
    discard_rate: float
    kept: int


def empirical_Delta(model: DataModel, z: complex, trials: int, seed: int,
                    threads: int = 1) -> DeltaEstimate:
    """Average of ``D^z`` over draws in the event ``||XX^T/n|| <= 1 - epsilon``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    z = ResolventQuery(z, model).z

    def one(t):
        X = sample(model, derive_seed(seed, t))
        top = np.linalg.norm(X.data, 2) ** 2 / model.n
        if top > 1.0 - model.epsilon:
            return None
        return leave_one_out_quadratic(X, z)

    acc = KahanSum()
    for D in imap_trials(one, trials, threads):
        if D is not None:
            acc.add(D)
    if acc.count == 0:
        raise EstimationError("every trial fell outside the event ||XX^T/n|| <= 1 - epsilon")
    return DeltaEstimate(acc.mean(), 1.0 - acc.count / trials, acc.count)


__all__ = [
    "ResolventQuery", "DeterministicEquivalent", "segment_distance", "tilde_Q", "I_z",
    "compute_Lambda", "deterministic_equivalent", "stieltjes", "stieltjes_sweep",
    "spectral_density", "resolvent_weighted", "empirical_resolvent", "schur_check",
    "leave_one_out_quadratic", "empirical_Delta", "DeltaEstimate",
]
