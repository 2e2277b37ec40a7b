"""Statistical model of the data matrix and reproducible sampling.

A :class:`DataModel` describes ``n`` independent columns ``x_i`` in ``R^p``,
each with its own mean ``mu_i`` and centered covariance ``C_i``.  Columns
sharing a law are stored once; ``assignment[i]`` gives the index of the law
of column ``i``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ModelError

GENERATORS = ("gaussian", "lipschitz_of_gaussian", "bounded_independent")

SYM_TOL = 1e-12
PSD_RTOL = 1e-10
TRACE_FLOOR = 1e-6
BOUNDED_HALF_WIDTH = np.sqrt(3.0)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed of ``seed`` indexed by ``keys``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def column_rng(seed: int, column: int) -> np.random.Generator:
    """Counter-based stream for one column; independent of iteration order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(column),))
    return np.random.Generator(np.random.Philox(ss))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ColumnLaw:
    """Mean and centered covariance of one column."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape != (mean.size, mean.size):
            raise ModelError(
                f"cov has shape {cov.shape}, expected {(mean.size, mean.size)}",
                field="cov")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "cov", _readonly(cov))

    @classmethod
    def isotropic(cls, p: int, variance: float, mean=None) -> "ColumnLaw":
        mean = np.zeros(p) if mean is None else mean
        return cls(mean, variance * np.eye(p))

    @property
    def p(self) -> int:
        return self.mean.size

    @cached_property
    def second_moment(self) -> np.ndarray:
        """``Sigma = C + mu mu^T``."""
        return _readonly(self.cov + np.outer(self.mean, self.mean))

    @cached_property
    def is_diagonal(self) -> bool:
        c = self.second_moment
        return bool(np.all(c == np.diag(np.diag(c))))

    def check(self) -> None:
        """Raise ``ModelError`` if ``cov`` is not symmetric PSD."""
        c = self.cov
        if np.max(np.abs(c - c.T), initial=0.0) > SYM_TOL:
            raise ModelError("covariance is not symmetric", field="cov")
        self._eig()

    def _eig(self):
        c = 0.5 * (self.cov + self.cov.T)
        try:
            w, v = np.linalg.eigh(c)
        except np.linalg.LinAlgError as exc:
            raise ModelError(f"eigendecomposition failed: {exc}", field="cov") from exc
        tol = PSD_RTOL * max(np.trace(c), 0.0) / self.p
        if w.size and w[0] < -tol:
            raise ModelError(
                f"covariance is indefinite (smallest eigenvalue {w[0]:.3e})", field="cov")
        return np.clip(w, 0.0, None), v

    @cached_property
    def sqrt_cov(self) -> np.ndarray:
        """Symmetric square root of ``cov`` with tiny negative eigenvalues clamped."""
        w, v = self._eig()
        return _readonly((v * np.sqrt(w)) @ v.T)


@dataclass(frozen=True)
class ValidationReport:
    top_eigenvalue: float
    spectral_bound: float
    min_trace: float
    spectral_ok: bool
    trace_ok: bool

    @property
    def passed(self) -> bool:
        return self.spectral_ok and self.trace_ok


@dataclass(frozen=True, eq=False)
class DataModel:
    """Independent columns with per-column laws.

    Use :meth:`shared`, :meth:`from_groups` or :meth:`from_laws` rather than
    the raw constructor.  With ``check=True`` (default) construction fails
    unless :func:`validate_model` passes.
    """

    p: int
    n: int
    laws: tuple
    assignment: np.ndarray
    generator: str = "gaussian"
    epsilon: float = 0.25
    lipschitz_map: Callable[[np.ndarray], np.ndarray] = field(default=np.tanh, repr=False)
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        if int(self.p) < 1 or int(self.n) < 1:
            raise ModelError("p and n must be positive integers", field="p" if self.p < 1 else "n")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "n", int(self.n))
        laws = tuple(self.laws)
        if not laws:
            raise ModelError("at least one law is required", field="laws")
        for k, law in enumerate(laws):
            if law.p != self.p:
                raise ModelError(f"law {k} has dimension {law.p}, expected {self.p}", field="laws")
        object.__setattr__(self, "laws", laws)
        a = np.asarray(self.assignment, dtype=np.intp).reshape(-1)
        if a.size != self.n or a.min() < 0 or a.max() >= len(laws):
            raise ModelError("assignment must map each of the n columns to a law", field="laws")
        object.__setattr__(self, "assignment", _readonly(a.copy()))
        if self.generator not in GENERATORS:
            raise ModelError(f"unknown generator {self.generator!r}", field="generator")
        eps = float(self.epsilon)
        if not 0.0 < eps <= 0.5:
            raise ModelError(f"epsilon must lie in (0, 1/2], got {eps}", field="epsilon")
        object.__setattr__(self, "epsilon", eps)
        if self.check:
            report = validate_model(self)
            if not report.spectral_ok:
                raise ModelError(
                    f"largest eigenvalue of mean second moment {report.top_eigenvalue:.6g} "
                    f"exceeds 1 - 2*epsilon = {report.spectral_bound:.6g}", field="epsilon")
            if not report.trace_ok:
                raise ModelError(
                    f"min_i tr(Sigma_i)/n = {report.min_trace:.3e} below floor {TRACE_FLOOR}",
                    field="laws")

    @classmethod
    def shared(cls, law: ColumnLaw, n: int, **kw) -> "DataModel":
        return cls(law.p, n, (law,), np.zeros(n, dtype=np.intp), **kw)

    @classmethod
    def from_groups(cls, groups: Sequence[tuple[int, ColumnLaw]], **kw) -> "DataModel":
        """Consecutive blocks of columns: ``[(count, law), ...]``."""
        counts = [int(c) for c, _ in groups]
        if any(c < 1 for c in counts):
            raise ModelError("group counts must be positive", field="groups")
        laws = [law for _, law in groups]
        assignment = np.repeat(np.arange(len(laws)), counts)
        return cls(laws[0].p, sum(counts), tuple(laws), assignment, **kw)

    @classmethod
    def from_laws(cls, laws: Sequence[ColumnLaw], **kw) -> "DataModel":
        laws = tuple(laws)
        return cls(laws[0].p, len(laws), laws, np.arange(len(laws)), **kw)

    def law(self, i: int) -> ColumnLaw:
        return self.laws[self.assignment[i]]

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.laws))

    @cached_property
    def weights(self) -> np.ndarray:
        """Fraction of columns following each law."""
        return self.counts / self.n

    @cached_property
    def mean_second_moment(self) -> np.ndarray:
        """``(1/n) sum_i Sigma_i``."""
        return sum(w * law.second_moment for w, law in zip(self.weights, self.laws))

    @cached_property
    def means(self) -> np.ndarray:
        """p x n matrix of column means."""
        m = np.stack([law.mean for law in self.laws], axis=1)
        return m[:, self.assignment]

    @cached_property
    def traces(self) -> np.ndarray:
        """``tr(Sigma_g)`` per law."""
        return np.array([np.trace(law.second_moment) for law in self.laws])

    def first_column(self, g: int) -> int:
        return int(np.flatnonzero(self.assignment == g)[0])

    def replace(self, **changes) -> "DataModel":
        kw = dict(p=self.p, n=self.n, laws=self.laws, assignment=self.assignment,
                  generator=self.generator, epsilon=self.epsilon,
                  lipschitz_map=self.lipschitz_map, check=self.check)
        kw.update(changes)
        return DataModel(**kw)


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    data: np.ndarray
    seed: int
    model: DataModel | None = None

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2:
            raise ValueError("sample data must be a p x n matrix")
        if self.model is not None and d.shape != (self.model.p, self.model.n):
            raise ValueError(f"sample shape {d.shape} does not match model "
                             f"({self.model.p}, {self.model.n})")
        object.__setattr__(self, "data", _readonly(d))

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]


def validate_model(model: DataModel) -> ValidationReport:
    """Check the spectral margin and the per-column trace floor."""
    for g, law in enumerate(model.laws):
        try:
            law.check()
        except ModelError as exc:
            col = model.first_column(g) if np.any(model.assignment == g) else None
            raise ModelError(f"column {col}: {exc}", column=col, field="cov") from exc
    top = float(np.linalg.eigvalsh(model.mean_second_moment)[-1])
    bound = 1.0 - 2.0 * model.epsilon
    used = model.counts > 0
    min_trace = float(np.min(model.traces[used]) / model.n)
    return ValidationReport(top, bound, min_trace, top <= bound, min_trace >= TRACE_FLOOR)


def _sqrt_factor(model: DataModel, g: int) -> np.ndarray:
    try:
        return model.laws[g].sqrt_cov
    except ModelError as exc:
        col = model.first_column(g)
        raise ModelError(f"column {col}: {exc}", column=col, field="cov") from exc


def sample(model: DataModel, seed: int) -> SampleMatrix:
    """Draw X column by column; column ``i`` uses the stream ``(seed, i)``."""
    p, n = model.p, model.n
    roots = [_sqrt_factor(model, g) if np.any(model.assignment == g) else None
             for g in range(len(model.laws))]
    out = np.empty((p, n))
    for i in range(n):
        g = model.assignment[i]
        rng = column_rng(seed, i)
        if model.generator == "bounded_independent":
            w = rng.uniform(-BOUNDED_HALF_WIDTH, BOUNDED_HALF_WIDTH, size=p)
        else:
            w = rng.standard_normal(p)
        w = roots[g] @ w
        if model.generator == "lipschitz_of_gaussian":
            w = model.lipschitz_map(w)
        out[:, i] = model.laws[g].mean + w
    return SampleMatrix(out, int(seed), model)


def sample_bounded(p: int, n: int, seed: int) -> SampleMatrix:
    """Independent entries uniform on [-sqrt 3, sqrt 3] (mean 0, variance 1)."""
    if p < 1 or n < 1:
        raise ValueError("p and n must be positive")
    out = np.empty((p, n))
    for i in range(n):
        out[:, i] = column_rng(seed, i).uniform(-BOUNDED_HALF_WIDTH, BOUNDED_HALF_WIDTH, size=p)
    return SampleMatrix(out, int(seed))


# -- model files -------------------------------------------------------------

def _law_from_dict(d: dict, p: int, where: str) -> ColumnLaw:
    if not isinstance(d, dict):
        raise ModelError(f"{where}: expected an object", field=where)
    mean = d.get("mean", [0.0] * p)
    if np.ndim(mean) != 1 or len(mean) != p:
        raise ModelError(f"{where}: mean must be a list of p = {p} numbers", field=f"{where}.mean")
    if "cov" in d:
        cov = d["cov"]
    elif "variance" in d:
        cov = float(d["variance"]) * np.eye(p)
    else:
        raise ModelError(f"{where}: needs 'cov' or 'variance'", field=f"{where}.cov")
    try:
        law = ColumnLaw(mean, cov)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{where}: {exc}", field=where) from exc
    if law.p != p:
        raise ModelError(f"{where}: dimension {law.p} does not match p = {p}", field=f"{where}.mean")
    return law


def model_from_dict(d: dict, check: bool = True) -> DataModel:
    """Build a model from the JSON file layout.

    Exactly one of ``laws`` (one entry per column), ``shared_law`` or
    ``groups`` (``[{count, law}]``) must be present.  A law is
    ``{mean: [...], cov: [[...]]}``; ``{variance: s}`` is accepted as a
    shorthand for ``s * I`` and a missing mean defaults to zero.
    """
    for key in ("p", "epsilon"):
        if key not in d:
            raise ModelError(f"missing field '{key}'", field=key)
    try:
        p = int(d["p"])
        eps = float(d["epsilon"])
    except (TypeError, ValueError) as exc:
        raise ModelError(f"field 'p' or 'epsilon' is not numeric: {exc}",
                         field="epsilon") from exc
    kw = dict(generator=d.get("generator", "gaussian"), epsilon=eps, check=check)
    kinds = [k for k in ("laws", "shared_law", "groups") if k in d]
    if len(kinds) != 1:
        raise ModelError("exactly one of 'laws', 'shared_law', 'groups' is required",
                         field="laws")
    kind = kinds[0]
    if kind == "laws":
        laws = [_law_from_dict(x, p, f"laws[{i}]") for i, x in enumerate(d["laws"])]
        model = DataModel.from_laws(laws, **kw)
    elif kind == "shared_law":
        if "n" not in d:
            raise ModelError("missing field 'n'", field="n")
        model = DataModel.shared(_law_from_dict(d["shared_law"], p, "shared_law"), int(d["n"]), **kw)
    else:
        groups = []
        for k, grp in enumerate(d["groups"]):
            if "count" not in grp or "law" not in grp:
                raise ModelError(f"groups[{k}] needs 'count' and 'law'", field=f"groups[{k}]")
            groups.append((int(grp["count"]), _law_from_dict(grp["law"], p, f"groups[{k}].law")))
        model = DataModel.from_groups(groups, **kw)
    if "n" in d and int(d["n"]) != model.n:
        raise ModelError(f"n = {d['n']} disagrees with the {model.n} declared columns", field="n")
    return model


def _law_to_dict(law: ColumnLaw) -> dict:
    return {"mean": law.mean.tolist(), "cov": law.cov.tolist()}


def model_to_dict(model: DataModel) -> dict:
    d = {"p": model.p, "n": model.n, "epsilon": model.epsilon, "generator": model.generator}
    if len(model.laws) == 1:
        d["shared_law"] = _law_to_dict(model.laws[0])
        return d
    a = model.assignment
    breaks = np.flatnonzero(np.diff(a)) + 1
    starts = np.concatenate([[0], breaks])
    stops = np.concatenate([breaks, [model.n]])
    d["groups"] = [{"count": int(e - s), "law": _law_to_dict(model.laws[a[s]])}
                   for s, e in zip(starts, stops)]
    return d


def load_model(path, check: bool = True) -> DataModel:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: line {exc.lineno}: {exc.msg}", field=None) from exc
    return model_from_dict(d, check=check)


def save_model(model: DataModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))
