"""Batch experiment runner.

``rmt-equiv <command> --model model.json --out results/ [options]``

Each run writes one CSV per result table plus ``manifest.json``.  The
manifest is written first and marked ``running``; data files are produced
under temporary names and only moved into place after the manifest has
been completed, so an interrupted run never leaves a partial CSV behind.

Exit codes: 0 success, 1 configuration or model error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .concentration import (convex_concentration_experiment, fit_tail_exponent,
                            frobenius_rate_experiment, observable_diameter)
from .errors import ModelError, RmtError
from .model import ColumnLaw, DataModel, derive_seed, load_model, model_to_dict, sample
from .parallel import imap_trials
from .regression import Nonlinearity, empirical_regression_stats, predict_stats
from .resolvent import spectral_density, stieltjes_sweep

COMMANDS = ("spectrum", "equivalent", "rate", "concentration", "regression", "predict")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": ".",
    "z": [[-1.0, 0.0]],
    "grid": None,
    "eta": 1e-3,
    "sizes": None,
    "trials": None,
    "lambda": 1.0,
    "tol": None,
    "nodes": 64,
    "f": "logistic",
}

# default trial counts per command
TRIALS = {"rate": 200, "concentration": 10_000, "regression": 500}

# keys that do not influence the data files
_UNHASHED = ("out", "threads")


class ConfigError(ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


# -- config parsing ------------------------------------------------------------------

def _floats(text, field, count=None):
    try:
        vals = [float(s) for s in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"{field}: cannot parse {text!r} as numbers", field) from None
    if count is not None and len(vals) != count:
        raise ConfigError(f"{field}: expected {count} comma-separated values, got {text!r}", field)
    return vals


def _parse_z(value, field="z"):
    if isinstance(value, (int, float)):
        return [float(value), 0.0]
    if isinstance(value, str):
        vals = _floats(value, field)
        if len(vals) == 1:
            vals.append(0.0)
        if len(vals) != 2:
            raise ConfigError(f"{field}: expected 're,im', got {value!r}", field)
        return vals
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return [float(value[0]), float(value[1])]
    raise ConfigError(f"{field}: cannot interpret {value!r} as a complex number", field)


def _parse_grid(value):
    if isinstance(value, str):
        lo, hi, steps = _floats(value, "grid", 3)
    elif isinstance(value, (list, tuple)) and len(value) == 3:
        lo, hi, steps = value
    else:
        raise ConfigError(f"grid: expected 'lo,hi,steps', got {value!r}", "grid")
    if not steps == int(steps) or int(steps) < 2:
        raise ConfigError("grid: steps must be an integer >= 2", "grid")
    if not hi > lo:
        raise ConfigError("grid: need hi > lo", "grid")
    return [float(lo), float(hi), int(steps)]


def _parse_sizes(value):
    if isinstance(value, str):
        pairs = []
        for item in value.split(","):
            parts = item.split(":")
            if len(parts) != 2:
                raise ConfigError(f"sizes: expected 'n:p', got {item!r}", "sizes")
            try:
                pairs.append([int(parts[0]), int(parts[1])])
            except ValueError:
                raise ConfigError(f"sizes: non-integer entry {item!r}", "sizes") from None
    else:
        try:
            pairs = [[int(n), int(p)] for n, p in value]
        except (TypeError, ValueError):
            raise ConfigError(f"sizes: expected a list of [n, p], got {value!r}", "sizes") from None
    if not pairs or any(n < 1 or p < 1 for n, p in pairs):
        raise ConfigError("sizes: need at least one pair of positive integers", "sizes")
    return pairs


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config file {path}: {exc.strerror}", "config") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}", "config") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object", "config")
    return d


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and command-line flags."""
    cfg = dict(DEFAULTS)
    cfg["model"] = None
    if args.config:
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(cfg) - {"command"}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"{args.config}: unknown field '{key}'", key)
        if "command" in file_cfg and file_cfg["command"] != args.command:
            raise ConfigError(f"config command '{file_cfg['command']}' does not match "
                              f"'{args.command}'", "command")
        cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
        if isinstance(cfg.get("model"), str) and not os.path.isabs(cfg["model"]):
            cfg["model"] = str(Path(args.config).parent / cfg["model"])
    for key in DEFAULTS.keys() | {"model"}:
        val = getattr(args, key.replace("lambda", "lam"), None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    return _normalise(cfg)


def _normalise(cfg: dict) -> dict:
    if not cfg.get("model"):
        raise ConfigError("missing field 'model' (use --model)", "model")
    try:
        cfg["seed"] = int(cfg["seed"])
        cfg["threads"] = int(cfg["threads"])
        cfg["eta"] = float(cfg["eta"])
        cfg["lambda"] = float(cfg["lambda"])
        cfg["nodes"] = int(cfg["nodes"])
        if cfg["trials"] is not None:
            cfg["trials"] = int(cfg["trials"])
        if cfg["tol"] is not None:
            cfg["tol"] = float(cfg["tol"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"non-numeric parameter: {exc}", "params") from exc
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1", "threads")
    if not cfg["eta"] > 0:
        raise ConfigError("eta must be positive", "eta")
    if not cfg["lambda"] > 0:
        raise ConfigError("lambda must be positive", "lambda")
    if cfg["nodes"] < 1:
        raise ConfigError("nodes must be >= 1", "nodes")
    if cfg["tol"] is not None and not cfg["tol"] > 0:
        raise ConfigError("tol must be positive", "tol")
    if cfg["trials"] is not None and cfg["trials"] < 1:
        raise ConfigError("trials must be >= 1", "trials")
    zs = cfg["z"]
    if isinstance(zs, (str, int, float)) or (isinstance(zs, (list, tuple)) and len(zs) == 2
                                             and all(isinstance(v, (int, float)) for v in zs)):
        zs = [zs]
    cfg["z"] = [_parse_z(v) for v in zs]
    if cfg["grid"] is not None:
        cfg["grid"] = _parse_grid(cfg["grid"])
    if cfg["sizes"] is not None:
        cfg["sizes"] = _parse_sizes(cfg["sizes"])
    if cfg["trials"] is None and cfg["command"] in TRIALS:
        cfg["trials"] = TRIALS[cfg["command"]]
    cfg["model"] = str(cfg["model"])
    cfg["out"] = str(cfg["out"])
    return cfg


def make_nonlinearity(name_arg: str, lam: float) -> Nonlinearity:
    """``logistic`` (scaled by ``lambda``), ``zero``, ``constant:c`` or ``linear:a``."""
    name, _, arg = str(name_arg).partition(":")
    if name == "logistic" and not arg:
        return Nonlinearity.logistic(lam)
    if name == "zero" and not arg:
        return Nonlinearity.zero()
    try:
        if name == "constant":
            return Nonlinearity.constant(float(arg))
        if name == "linear":
            return Nonlinearity.linear(float(arg))
    except ValueError:
        pass
    raise ConfigError(f"f: unknown nonlinearity {name_arg!r} "
                      "(logistic, zero, constant:c, linear:a)", "f")


# -- output ------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class RunOutput:
    """Collects tables in temporary files and publishes them after the manifest."""

    def __init__(self, out_dir: Path, manifest: dict):
        self.dir = out_dir
        self.manifest = manifest
        self.pending: list[tuple[Path, Path]] = []

    def write_manifest(self) -> None:
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.dir / "manifest.json")

    def table(self, name: str, header, rows) -> None:
        final = self.dir / name
        tmp = self.dir / (name + ".partial")
        with open(tmp, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        self.pending.append((tmp, final))
        self.manifest.setdefault("files", []).append(name)

    def publish(self) -> None:
        for tmp, final in self.pending:
            os.replace(tmp, final)
        self.pending.clear()

    def discard(self) -> None:
        for tmp, _ in self.pending:
            tmp.unlink(missing_ok=True)
        self.pending.clear()


def config_hash(cfg: dict, model: DataModel) -> str:
    payload = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    payload["model"] = model_to_dict(model)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- commands ------------------------------------------------------------------------

def _complex_points(cfg) -> list[complex]:
    return [complex(re, im) for re, im in cfg["z"]]


def _default_grid(model: DataModel) -> list:
    top = max(float(np.linalg.eigvalsh(law.cov)[-1]) for law in model.laws)
    hi = 1.1 * top * (1.0 + np.sqrt(model.p / model.n)) ** 2
    return [0.0, hi, 400]


def cmd_spectrum(cfg, model, out: RunOutput) -> None:
    lo, hi, steps = cfg["grid"] or _default_grid(model)
    grid = np.linspace(lo, hi, steps)
    kw = {} if cfg["tol"] is None else {"tol": cfg["tol"]}
    dens = spectral_density(model, grid, cfg["eta"], **kw)
    out.table("spectrum.csv", ("x", "density"), dens)
    out.manifest["results"] = {"grid": [lo, hi, steps], "eta": cfg["eta"],
                               "mass": float(np.sum(np.diff(dens[:, 0]) * 0.5 * (dens[1:, 1] + dens[:-1, 1])))}


def cmd_equivalent(cfg, model, out: RunOutput) -> None:
    kw = {} if cfg["tol"] is None else {"tol": cfg["tol"]}
    rows = stieltjes_sweep(model, _complex_points(cfg), **kw)
    keys = ("re_z", "im_z", "re_m", "im_m", "iterations", "residual")
    out.table("equivalent.csv", keys, ([r[k] for k in keys] for r in rows))


def _isotropic_summary(law: ColumnLaw, g: int):
    v = float(np.trace(law.cov)) / law.p
    if not np.allclose(law.cov, v * np.eye(law.p), atol=1e-12):
        raise ModelError(f"groups[{g}]: resizing needs an isotropic covariance", field="sizes")
    if not np.allclose(law.mean, law.mean[0], atol=1e-12):
        raise ModelError(f"groups[{g}]: resizing needs a constant mean", field="sizes")
    return v, float(law.mean[0])


def resized_family(model: DataModel):
    """``(n, p) -> DataModel`` keeping the group proportions of ``model``.

    Laws are reused when ``p`` matches; otherwise each law must be
    isotropic with a constant mean and is rebuilt at the new dimension.
    """
    props = model.counts / model.n
    summaries = None

    def family(n: int, p: int) -> DataModel:
        nonlocal summaries
        counts = np.floor(props * n).astype(int)
        counts[-1] = n - counts[:-1].sum()
        if p == model.p:
            laws = list(model.laws)
        else:
            if summaries is None:
                summaries = [_isotropic_summary(law, g) for g, law in enumerate(model.laws)]
            laws = [ColumnLaw.isotropic(p, v, np.full(p, m)) for v, m in summaries]
        groups = [(int(c), law) for c, law in zip(counts, laws) if c > 0]
        return DataModel.from_groups(groups, epsilon=model.epsilon, generator=model.generator)
    return family


def cmd_rate(cfg, model, out: RunOutput) -> None:
    if cfg["sizes"] is None:
        raise ConfigError("rate: missing field 'sizes' (use --sizes n:p,...)", "sizes")
    z = _complex_points(cfg)[0]
    table = frobenius_rate_experiment(resized_family(model), z, [tuple(s) for s in cfg["sizes"]],
                                      cfg["trials"], cfg["seed"], cfg["threads"])
    out.table("rate.csv", ("n", "p", "trials", "discard_rate", "error", "rate"),
              ((r.n, r.p, r.trials, r.discard_rate, r.error, r.rate) for r in table.rows))
    out.manifest["discard_rates"] = [r.discard_rate for r in table.rows]
    out.manifest["results"] = {"slope": table.slope,
                               "noise_floor": [r.noise_floor for r in table.rows]}


def _trace_observable(model: DataModel, z: complex, trials: int, seed: int, threads: int):
    """``(1/p) tr Re Q^z`` per draw, skipping draws outside the spectral event."""
    def one(t):
        X = sample(model, derive_seed(seed, t)).data
        lam = np.linalg.eigvalsh(X @ X.T / model.n)
        if lam[-1] > 1.0 - model.epsilon:
            return None
        return float(np.mean((1.0 / (z - lam)).real))
    vals = [v for v in imap_trials(one, trials, threads) if v is not None]
    return np.array(vals), 1.0 - len(vals) / trials


def cmd_concentration(cfg, model, out: RunOutput) -> None:
    z = _complex_points(cfg)[0]
    vals, discard = _trace_observable(model, z, cfg["trials"], cfg["seed"], cfg["threads"])
    fit = fit_tail_exponent(vals)
    out.table("tail.csv", ("t", "tail_prob"), zip(fit.t_grid, fit.tail_prob))
    rates = [discard]
    results = {"observable": "(1/p) tr Re Q^z", "z": [z.real, z.imag], "kept": int(vals.size),
               "diameter": observable_diameter(vals), "q_hat": fit.q_hat,
               "sigma_hat": fit.sigma_hat, "r2": fit.r2}
    if cfg["sizes"]:
        rows = []
        for k, (n, p) in enumerate(cfg["sizes"]):
            row, = convex_concentration_experiment([p], cfg["trials"], derive_seed(cfg["seed"], k),
                                                   aspect=n / p, epsilon=model.epsilon,
                                                   z=z.real, threads=cfg["threads"])
            rows.append(row)
        out.table("scaling.csv", ("p", "std"), ((r.p, r.std) for r in rows))
        rates += [r.event_failure_rate for r in rows]
        results["scaling_flagged"] = [r.flagged for r in rows]
    out.manifest["discard_rates"] = rates
    out.manifest["results"] = results


def cmd_predict(cfg, model, out: RunOutput) -> None:
    f = make_nonlinearity(cfg["f"], cfg["lambda"])
    st = predict_stats(model, f, tol=cfg["tol"] or 1e-8, nodes=cfg["nodes"])
    out.table("predict.csv", ("i", "mu", "nu", "delta"),
              zip(range(model.n), st.mu, st.nu, st.delta))
    out.table("m_y.csv", ("coord", "m_y_pred"), enumerate(st.m_y))
    out.manifest["results"] = {"outer_iterations": st.diagnostics.outer_iterations,
                               "trace_c_y": float(np.trace(st.c_y))}


def cmd_regression(cfg, model, out: RunOutput) -> None:
    f = make_nonlinearity(cfg["f"], cfg["lambda"])
    st = predict_stats(model, f, tol=cfg["tol"] or 1e-8, nodes=cfg["nodes"])
    emp = empirical_regression_stats(model, f, cfg["trials"], cfg["seed"], threads=cfg["threads"])
    out.table("regression.csv", ("coord", "m_y_pred", "m_y_emp"),
              zip(range(model.p), st.m_y, emp.mean))
    norm_emp = np.linalg.norm(emp.mean)
    tr_emp = np.trace(emp.cov)
    summary = {
        "frobenius_error_cov": float(np.linalg.norm(st.c_y - emp.cov)),
        "rel_error_mean": float(np.linalg.norm(st.m_y - emp.mean) / norm_emp) if norm_emp > 0 else float("nan"),
        "rel_error_trace_cov": float(abs(np.trace(st.c_y) - tr_emp) / tr_emp) if tr_emp > 0 else float("nan"),
        "discard_rate": emp.discard_rate,
    }
    out.table("regression_summary.csv", ("metric", "value"), summary.items())
    out.manifest["discard_rates"] = [emp.discard_rate]
    out.manifest["results"] = dict(summary, flagged=emp.flagged)


HANDLERS = {
    "spectrum": cmd_spectrum,
    "equivalent": cmd_equivalent,
    "rate": cmd_rate,
    "concentration": cmd_concentration,
    "regression": cmd_regression,
    "predict": cmd_predict,
}


# -- entry point ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rmt-equiv", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file; flags override its fields")
    ap.add_argument("--model", help="JSON model file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--z", action="append", help="complex point 're,im' (repeatable)")
    ap.add_argument("--grid", help="'lo,hi,steps' for the density grid")
    ap.add_argument("--eta", type=float)
    ap.add_argument("--sizes", help="'n:p,n:p,...'")
    ap.add_argument("--trials", type=int)
    ap.add_argument("--lambda", dest="lam", type=float, help="logistic regularisation")
    ap.add_argument("--tol", type=float)
    ap.add_argument("--nodes", type=int, help="Gauss-Hermite nodes")
    ap.add_argument("--f", help="nonlinearity: logistic, zero, constant:c, linear:a")
    return ap


def run(cfg: dict, stderr=None) -> int:
    """Execute a resolved configuration; returns the exit status."""
    stderr = stderr or sys.stderr
    start = time.perf_counter()
    out_dir = Path(cfg["out"])
    try:
        # the spectral margin conditions resolvents; regression relies on its own contraction check
        model = load_model(cfg["model"], check=cfg["command"] not in ("predict", "regression"))
        out_dir.mkdir(parents=True, exist_ok=True)
    except FileNotFoundError:
        print(f"error [model]: model file {cfg['model']} not found", file=stderr)
        return 1
    except ModelError as exc:
        print(f"error [{exc.field or 'model'}]: {exc}", file=stderr)
        return 1
    except OSError as exc:
        print(f"error [out]: {exc}", file=stderr)
        return 1
    manifest = {
        "status": "running",
        "command": cfg["command"],
        "config": cfg,
        "config_hash": config_hash(cfg, model),
        "versions": {"rmt_equiv": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "discard_rates": [],
    }
    out = RunOutput(out_dir, manifest)
    out.write_manifest()
    try:
        HANDLERS[cfg["command"]](cfg, model, out)
    except (ConfigError, ModelError) as exc:
        code, msg = 1, f"error [{exc.field or 'config'}]: {exc}"
    except (RmtError, np.linalg.LinAlgError) as exc:
        code, msg = 2, f"numerical failure ({type(exc).__name__}): {exc}"
        for attr in ("residual", "iterations", "index", "bound", "condition"):
            if getattr(exc, attr, None) is not None:
                msg += f"\n  {attr} = {getattr(exc, attr)}"
    except BaseException:
        out.discard()
        raise
    else:
        code, msg = 0, None
    manifest["wall_time"] = time.perf_counter() - start
    if code:
        out.discard()
        manifest["status"] = "failed"
        manifest["error"] = msg
        manifest.pop("files", None)
        out.write_manifest()
        print(msg, file=stderr)
        return code
    manifest["status"] = "complete"
    out.write_manifest()
    out.publish()
    return 0


def _attach_values(argv):
    """Rewrite ``--z -1,0`` as ``--z=-1,0`` so negative values are not taken for flags."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in ("--z", "--grid"):
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_attach_values(argv))
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error [{exc.field or 'config'}]: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
