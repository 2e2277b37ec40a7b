"""Monte-Carlo checks of concentration behaviour.

Scalar observables are summarised by their observable diameter (a robust
scale) and a tail exponent ``q`` fitted to
``P(|v - median| >= t) ~ exp(-(t / sigma)^q)``.  The rate experiments
measure how deterministic equivalents and quadratic forms fluctuate as the
dimension grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EstimationError
from .model import ColumnLaw, DataModel, derive_seed, sample, sample_bounded
from .parallel import KahanSum, imap_trials
from .resolvent import ResolventQuery, deterministic_equivalent, resolvent_weighted

MAD_TO_SIGMA = 1.4826


@dataclass
class ObservableSamples:
    values: np.ndarray
    meta: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)


def _values(samples) -> np.ndarray:
    if isinstance(samples, ObservableSamples):
        return samples.values
    return np.asarray(samples, dtype=float).reshape(-1)


def observable_diameter(samples) -> float:
    """``1.4826 * median(|v - median(v)|)``."""
    v = _values(samples)
    if v.size < 100:
        raise ValueError(f"need at least 100 samples, got {v.size}")
    mad = np.median(np.abs(v - np.median(v)))
    if not mad > 0:
        raise EstimationError("degenerate samples: median absolute deviation is zero")
    return float(MAD_TO_SIGMA * mad)


@dataclass
class TailFit:
    q_hat: float
    sigma_hat: float
    r2: float
    t_grid: np.ndarray
    tail_prob: np.ndarray


def fit_tail_exponent(samples, max_prob: float = 0.2, min_count: int = 10,
                      grid_points: int = 50) -> TailFit:
    """Least-squares slope of ``log(-log P(|v - median| >= t))`` against ``log t``.

    The grid spans the deviations whose empirical tail probability lies in
    ``[min_count / N, max_prob]``.
    """
    v = _values(samples)
    N = v.size
    if N < 10_000:
        raise ValueError(f"need at least 10^4 samples, got {N}")
    dev = np.sort(np.abs(v - np.median(v)))
    lo_p = min_count / N
    t_lo = dev[int(np.floor((1.0 - max_prob) * N))]
    t_hi = dev[N - min_count]
    t = np.linspace(t_lo, t_hi, grid_points)
    prob = 1.0 - np.searchsorted(dev, t, side="left") / N
    ok = (t > 0) & (prob >= lo_p) & (prob <= max_prob)
    t, prob = t[ok], prob[ok]
    t, idx = np.unique(t, return_index=True)
    prob = prob[idx]
    if t.size < 5:
        raise EstimationError(f"only {t.size} usable tail points (need 5)")
    x, y = np.log(t), np.log(-np.log(prob))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 0.0
    if not slope > 0:
        raise EstimationError(f"non-positive tail slope {slope:.3g}")
    return TailFit(float(slope), float(np.exp(-intercept / slope)), float(max(r2, 0.0)), t, prob)


# -- deterministic-equivalent rate ---------------------------------------------------

def two_group_family(variances=(0.1, 0.2), epsilon: float = 0.25, generator: str = "gaussian"):
    """``(n, p) -> DataModel``: two equal zero-mean groups with covariances ``v * I``."""
    def family(n: int, p: int) -> DataModel:
        half = n // 2
        groups = [(half, ColumnLaw.isotropic(p, variances[0])),
                  (n - half, ColumnLaw.isotropic(p, variances[1]))]
        return DataModel.from_groups(groups, epsilon=epsilon, generator=generator)
    return family


@dataclass
class RateRow:
    n: int
    p: int
    trials: int
    kept: int
    discard_rate: float
    error: float
    rate: float
    noise_floor: float


@dataclass
class RateTable:
    rows: list = field(default_factory=list)

    @property
    def slope(self) -> float:
        """Log-log slope of error against ``sqrt(log n / n)``."""
        if len(self.rows) < 2:
            return float("nan")
        x = np.log([r.rate for r in self.rows])
        y = np.log([r.error for r in self.rows])
        return float(np.polyfit(x, y, 1)[0])


def frobenius_rate_experiment(model_family: Callable[[int, int], DataModel], z: complex,
                              sizes: Sequence[tuple[int, int]], trials: int, seed: int,
                              threads: int = 1) -> RateTable:
    """``||mean(Q^z) - tilde_Q^z(chi(Lambda^z))||_F`` per size, averaging only draws
    with ``||XX^T/n|| <= 1 - epsilon``.

    ``noise_floor`` estimates the Monte-Carlo part of the error,
    ``sqrt(sum of entry variances / kept)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    table = RateTable()
    last_n = 0
    for row, (n, p) in enumerate(sizes):
        if n <= last_n:
            raise ValueError("sizes must have strictly increasing n")
        last_n = n
        model = model_family(n, p)
        tq = deterministic_equivalent(ResolventQuery(z, model)).tilde_q

        def one(t, model=model, row=row):
            X = sample(model, derive_seed(seed, row, t)).data
            M = X @ X.T / n
            if np.linalg.eigvalsh(M)[-1] > 1.0 - model.epsilon:
                return None
            return resolvent_weighted(X, np.ones(n), z)

        acc, acc2 = KahanSum(), KahanSum()
        for Q in imap_trials(one, trials, threads):
            if Q is not None:
                acc.add(Q)
                acc2.add(np.abs(Q) ** 2)
        if acc.count == 0:
            raise EstimationError(f"size (n={n}, p={p}): every trial was discarded")
        mean = acc.mean()
        err = float(np.linalg.norm(mean - tq))
        k = acc.count
        if k > 1:
            var = np.sum(acc2.mean() - np.abs(mean) ** 2) * k / (k - 1)
            noise = float(np.sqrt(max(var, 0.0) / k))
        else:
            noise = float("nan")
        table.rows.append(RateRow(n, p, trials, k, 1.0 - k / trials, err,
                                  float(np.sqrt(np.log(n) / n)), noise))
    return table


# -- Hanson-Wright ------------------------------------------------------------------

@dataclass
class HansonWrightRow:
    frobenius: float
    std: float

    @property
    def ratio(self) -> float:
        return self.std / self.frobenius if self.frobenius > 0 else float("nan")


def hanson_wright_experiment(p: int, matrices, trials: int, seed: int,
                             chunk: int = 20_000) -> list[HansonWrightRow]:
    """Empirical std of ``Z^T A W`` for independent standard Gaussian ``Z, W``."""
    rows = []
    for k, A in enumerate(matrices):
        A = np.asarray(A, dtype=float)
        if A.shape != (p, p):
            raise ValueError(f"matrix {k} has shape {A.shape}, expected {(p, p)}")
        rng = np.random.Generator(np.random.Philox(derive_seed(seed, k)))
        vals = []
        for start in range(0, trials, chunk):
            m = min(chunk, trials - start)
            Z = rng.standard_normal((m, p))
            W = rng.standard_normal((m, p))
            vals.append(np.einsum("ti,ij,tj->t", Z, A, W))
        vals = np.concatenate(vals)
        rows.append(HansonWrightRow(float(np.linalg.norm(A)), float(vals.std(ddof=1))))
    return rows


# -- convex concentration (bounded entries) --------------------------------------------

@dataclass
class ScalingRow:
    p: int
    std: float
    mean: float
    kept: int
    event_failure_rate: float

    @property
    def flagged(self) -> bool:
        return self.event_failure_rate > 0.1


def convex_concentration_experiment(sizes: Sequence[int], trials: int, seed: int, A=None,
                                    aspect: float = 2.0, scale: float = 0.5,
                                    epsilon: float = 0.1, z: float = -1.0,
                                    threads: int = 1) -> list[ScalingRow]:
    """Std of ``(1/p) tr(A Q^z)`` for ``X = scale * (bounded independent entries)``.

    ``A`` is ``None`` (identity) or a callable ``p -> p x p`` matrix with
    ``||A|| <= 1``; ``n = aspect * p``.  Draws with
    ``||XX^T/n|| > 1 - epsilon`` are discarded and counted.
    """
    rows = []
    for k, p in enumerate(sizes):
        n = int(round(aspect * p))
        Ap = np.eye(p) if A is None else np.asarray(A(p), dtype=float)

        def one(t, p=p, n=n, Ap=Ap, k=k):
            X = scale * sample_bounded(p, n, derive_seed(seed, k, t)).data
            lam, V = np.linalg.eigh(X @ X.T / n)
            if lam[-1] > 1.0 - epsilon:
                return None
            a = np.einsum("ik,ij,jk->k", V, Ap, V)
            return float(np.sum(a / (z - lam)) / p)

        vals = np.array([v for v in imap_trials(one, trials, threads) if v is not None])
        if vals.size < 2:
            raise EstimationError(f"p = {p}: fewer than two trials inside the event")
        rows.append(ScalingRow(p, float(vals.std(ddof=1)), float(vals.mean()), vals.size,
                               1.0 - vals.size / trials))
    return rows
