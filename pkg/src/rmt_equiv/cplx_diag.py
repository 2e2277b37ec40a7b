"""Arithmetic on complex diagonal matrices.

A diagonal matrix is represented by the 1-D complex array of its entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, DomainError

POLE_DIST = 1e-300
OSCILLATION_WINDOW = 10


def as_diag(D) -> np.ndarray:
    d = np.atleast_1d(np.asarray(D, dtype=complex))
    if d.ndim != 1 or d.size < 1:
        raise DomainError("a complex diagonal needs at least one entry")
    return d


def in_upper_half_plane(D) -> bool:
    return bool(np.all(np.imag(D) > 0))


def chi(D) -> np.ndarray:
    """Entrywise ``1 / (1 - d)``."""
    d = as_diag(D)
    gap = np.abs(1.0 - d)
    bad = np.flatnonzero(gap < POLE_DIST)
    if bad.size:
        raise DomainError(f"chi has a pole at entry {bad[0]} (value {d[bad[0]]})",
                          index=int(bad[0]))
    return 1.0 / (1.0 - d)


def stable_distance(D, Dp) -> float:
    """``sup_i |D_i - D'_i| / sqrt(Im D_i Im D'_i)`` on upper-half-plane diagonals."""
    d, dp = as_diag(D), as_diag(Dp)
    if d.shape != dp.shape:
        raise DomainError(f"length mismatch {d.size} != {dp.size}")
    for arr in (d, dp):
        bad = np.flatnonzero(arr.imag <= 0)
        if bad.size:
            raise DomainError(f"entry {bad[0]} has non-positive imaginary part",
                              index=int(bad[0]))
    return float(np.max(np.abs(d - dp) / (np.sqrt(d.imag) * np.sqrt(dp.imag))))


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    final_residual: float = np.inf
    ds_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    damping: float = 1.0
    method: str = "picard"


def solve_contractive(f: Callable[[np.ndarray], np.ndarray], D0, tol: float = 1e-10,
                      max_iter: int = 1000, damping: float = 1.0, domain: str | None = None,
                      auto_damp: bool = True):
    """Damped Picard iteration ``D <- (1 - a) D + a f(D)``.

    Stops when ``||D - f(D)||_inf <= tol`` and returns ``(D, diagnostics)``.
    With ``domain="upper"`` every iterate must keep strictly positive
    imaginary parts.  If the residual fails to decrease for
    ``OSCILLATION_WINDOW`` consecutive steps at ``damping == 1`` the iteration
    continues once at damping 0.5 (disable with ``auto_damp=False``).
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if domain not in (None, "upper"):
        raise ValueError(f"unknown domain tag {domain!r}")
    D = as_diag(D0).copy()
    diag = SolveDiagnostics(damping=damping)

    def check_domain(X, what):
        if domain == "upper":
            bad = np.flatnonzero(X.imag <= 0)
            if bad.size:
                raise DomainError(f"{what} left the upper half-plane at entry {bad[0]} "
                                  f"after {diag.iterations} iterations", index=int(bad[0]))

    check_domain(D, "initial value")
    stalled = 0
    prev_r = np.inf
    while True:
        F = as_diag(f(D))
        check_domain(F, "map image")
        r = float(np.max(np.abs(D - F)))
        diag.final_residual = r
        diag.residual_history.append(r)
        if r <= tol:
            return D, diag
        if not np.isfinite(r):
            raise ConvergenceError("iteration diverged (non-finite residual)",
                                   residual=r, iterations=diag.iterations, last=D)
        if diag.iterations >= max_iter:
            raise ConvergenceError(
                f"no convergence after {max_iter} iterations (residual {r:.3e})",
                residual=r, iterations=diag.iterations, last=D)
        stalled = stalled + 1 if r >= prev_r else 0
        prev_r = r
        if auto_damp and stalled >= OSCILLATION_WINDOW and diag.damping == 1.0:
            diag.damping = 0.5
            stalled = 0
        a = diag.damping
        Dn = F if a == 1.0 else (1.0 - a) * D + a * F
        check_domain(Dn, "iterate")
        if in_upper_half_plane(D) and in_upper_half_plane(Dn):
            diag.ds_history.append(stable_distance(D, Dn))
        D = Dn
        diag.iterations += 1
