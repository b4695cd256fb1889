"""Command-line runner: one ``key = value`` config file per run.

Outputs land in ``--out`` as CSV tables (a ``# config_sha256=...`` comment
line, then a header) plus a ``manifest.json`` whose headline numbers are
computed from exactly the arrays written to the CSVs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence

from . import __version__
from .effective import NoRootError, bidc_real_space_profile, solve_bidc_condition
from .hilbert import NormDriftError, assemble_hamiltonian
from .model import CONFIG_KEYS, ModelParams, parse_key_values
from .open_system import DivergentRateError, PositivityError, decay_rates, optimal_cutoff
from .spectral import (
    BidcNotFound,
    EigensolveError,
    bidc_diagnostics,
    classify_branches,
    eigensolve,
    find_bidc,
)

log = logging.getLogger("bidc")

ENV_PREFIX = "BIDC_"
TASKS = ("spectrum", "bidc", "effective-compare", "prepare", "transfer", "rates", "sweep")
CONVENTIONS = ("stark", "bare")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 <= x <= 1


# key -> (type, default, check)
OPTIONS: dict[str, dict[str, tuple]] = {
    "spectrum": {"count": (int, 40, _positive), "center_offset": (float, 1e-7, None)},
    "bidc": {"count": (int, 40, _positive), "margin": (int, 5, _nonneg)},
    "effective-compare": {
        "duration": (float, 5e3, _positive),
        "samples": (int, 200, _positive),
        "dt_max": (float, 1.0, _positive),
    },
    "prepare": {
        "alpha": (float, 1 / math.sqrt(2), None),
        "beta": (float, -1 / math.sqrt(2), None),
        "eta": (float, 3e-5, _nonneg),
        "t0": (float, 7.3e4, _positive),
        "t_final": (float, 0.0, _nonneg),
        "samples": (int, 400, _positive),
        "reference": (float, 0.1, _positive),
        "optimize_t0": (int, 1, lambda x: x in (0, 1)),
    },
    "transfer": {
        "backend": (str, "effective", lambda x: set(x.split(",")) <= {"full", "effective", "lindblad"}),
        "duration": (float, 5e3, _positive),
        "samples": (int, 200, _positive),
        "g12_start": (float, 0.05, _nonneg),
        "g12_end": (float, 0.2, _nonneg),
        "g34_start": (float, 0.2, _nonneg),
        "g34_end": (float, 0.05, _nonneg),
        "frame": (str, "lab", lambda x: x in ("lab", "rotating")),
        "overlap": (int, 1, lambda x: x in (0, 1)),
        "dt_max": (float, 0.0, _nonneg),
    },
    "rates": {},
    "sweep": {
        "sweep_task": (str, "rates", lambda x: x in TASKS and x != "sweep"),
        "sweep_key": (str, "g", None),
        "sweep_values": (str, "0.05,0.1,0.15", None),
    },
}
# the child task's options are also accepted by a sweep
SWEEP_PASSTHROUGH = {k: v for name in TASKS if name != "sweep" for k, v in OPTIONS[name].items()}


@dataclass(frozen=True)
class RunConfig:
    task: str
    convention: str = "stark"
    model: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def params(self) -> ModelParams:
        try:
            return ModelParams.from_config(self.model, self.convention)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def serialize(self) -> str:
        lines = [f"task = {self.task}", f"convention = {self.convention}"]
        lines += [f"{k} = {self.model[k]!r}" for k in sorted(self.model)]
        lines += [f"{k} = {self.options[k]}" for k in sorted(self.options)]
        return "\n".join(lines) + "\n"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


def _convert(key: str, raw: str, spec: tuple):
    typ, _, check = spec
    try:
        value = typ(float(raw)) if typ is int else typ(raw)
        if typ is int and float(raw) != value:
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{key}: value {raw!r} out of range")
    return value


_MODEL_RANGES = {
    "n_sites": lambda x: x >= 2,
    "hopping": _positive,
    "interaction": _nonneg,
    "site_1": _nonneg,
    "site_2": _nonneg,
    "g_12": _nonneg,
    "g_34": _nonneg,
}


def config_from_mapping(values: dict[str, str], env: dict[str, str] | None = None) -> RunConfig:
    """Validate raw strings; environment entries ``BIDC_<KEY>`` override file values."""
    values = dict(values)
    env = os.environ if env is None else env
    task = env.get(ENV_PREFIX + "TASK", values.pop("task", None))
    values.pop("task", None)
    if task is None:
        raise ConfigError("task: missing required key")
    if task not in TASKS:
        raise ConfigError(f"task: unknown task {task!r}; expected one of {TASKS}")
    convention = env.get(ENV_PREFIX + "CONVENTION", values.pop("convention", "stark"))
    values.pop("convention", None)
    if convention not in CONVENTIONS:
        raise ConfigError(f"convention: expected one of {CONVENTIONS}, got {convention!r}")
    specs = dict(OPTIONS[task])
    if task == "sweep":
        specs.update(SWEEP_PASSTHROUGH)
    allowed = set(CONFIG_KEYS) | set(specs)
    for key in allowed:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = env[env_key]
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key for task {task!r}")
    model = {}
    for key in CONFIG_KEYS:
        if key in values:
            typ = int if key in ("n_sites", "site_1", "site_2") else float
            v = _convert(key, values[key], (typ, None, _MODEL_RANGES.get(key)))
            model[key] = v
    options = {}
    for key, spec in specs.items():
        options[key] = _convert(key, values[key], spec) if key in values else spec[1]
    cfg = RunConfig(task, convention, model, options)
    cfg.params()  # cross-field validation (site order, band position)
    return cfg


def parse_config(path: str | Path, env: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        raw = parse_key_values(text)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc
    return config_from_mapping(raw, env)


# ---------------------------------------------------------------- output


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(columns: dict[str, np.ndarray | list], config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_sha256={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(names)
    n = len(next(iter(columns.values())))
    for i in range(n):
        w.writerow([_fmt(columns[c][i]) for c in names])
    return buf.getvalue()


def read_csv(path: str | Path) -> dict[str, list[str]]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return {name: [r[i] for r in rows[1:]] for i, name in enumerate(rows[0])}


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class TaskOutput:
    tables: dict[str, dict] = field(default_factory=dict)
    headline: dict = field(default_factory=dict)
    extra_files: dict[str, str] = field(default_factory=dict)


def _real(x):
    return float(np.real(x))


# ---------------------------------------------------------------- tasks


def task_spectrum(cfg: RunConfig) -> TaskOutput:
    p = cfg.params()
    H = assemble_hamiltonian(p)
    states = eigensolve(H, count=cfg.options["count"], center=2 * p.omega + cfg.options["center_offset"])
    labels = classify_branches(states, p)
    cols = {
        "index": list(range(len(states))),
        "energy": [s.energy for s in states],
        "energy_minus_2omega": [s.energy - 2 * p.omega for s in states],
        "atomic_excitation": [s.atomic_excitation for s in states],
        "branch": labels,
        "alpha_12": [_real(s.alpha[(1, 2)]) for s in states],
        "alpha_34": [_real(s.alpha[(3, 4)]) for s in states],
        "residual": [s.residual for s in states],
    }
    pe = np.array(cols["atomic_excitation"])
    head = {"n_states": len(states), "max_atomic_excitation": float(pe.max()) if pe.size else 0.0}
    return TaskOutput({"spectrum.csv": cols}, head)


def task_bidc(cfg: RunConfig) -> TaskOutput:
    p = cfg.params()
    H = assemble_hamiltonian(p)
    states = eigensolve(H, count=cfg.options["count"], center=2 * p.omega + 1e-7)
    margin = cfg.options["margin"]
    found = True
    try:
        st, diag = find_bidc(states, p, margin=margin)
    except BidcNotFound as exc:
        if exc.best is None:
            raise
        log.warning("%s; reporting the best-scoring candidate", exc)
        st, diag = exc.best
        found = False
    p_one, p_two = st.photon_profile
    cols = {"site": list(range(p.n_sites)), "p_one": p_one, "p_two": p_two}
    head = {
        "found": found,
        "energy": st.energy,
        "energy_minus_2omega": st.energy - 2 * p.omega,
        "atomic_excitation": diag.atomic_excitation,
        "dark_mismatch": diag.mismatch,
        "localization": diag.localization,
        "passes": diag.passes,
    }
    try:
        root = solve_bidc_condition(p)
        prof = bidc_real_space_profile(p, root)
        cols["p_two_analytic"] = prof.p_two
        head["analytic_energy_minus_2omega"] = root.energy - 2 * p.omega
        head["profile_deviation"] = float(np.linalg.norm(prof.p_two - p_two) / np.linalg.norm(p_two))
    except NoRootError as exc:
        log.warning("no analytic root: %s", exc)
    return TaskOutput({"bidc_profile.csv": cols}, head)


def task_effective_compare(cfg: RunConfig) -> TaskOutput:
    from .protocols import ProtocolSchedule, run_state_transfer

    p = cfg.params()
    o = cfg.options
    sched = ProtocolSchedule.constant(p.couplings[0], p.couplings[2], o["duration"], o["samples"])
    full = run_state_transfer(p, sched, "full", dt_max=o["dt_max"], convention=cfg.convention)
    eff = run_state_transfer(p, sched, "effective", convention=cfg.convention)
    cols = {"time": full.times, "ce2_full": full.ce2, "ce2_effective": eff.ce2, "cpe2_full": full.cpe2, "cpe2_effective": eff.cpe2}
    dev = max(np.max(np.abs(full.ce2 - eff.ce2)), np.max(np.abs(full.cpe2 - eff.cpe2)))
    return TaskOutput({"effective_compare.csv": cols}, {"max_deviation": float(dev)})


def task_prepare(cfg: RunConfig) -> TaskOutput:
    from .protocols import prepare_entangled_state

    p = cfg.params()
    o = cfg.options
    res = prepare_entangled_state(
        p, o["alpha"], o["beta"], eta=o["eta"], t0=o["t0"], t_final=o["t_final"] or None, samples=o["samples"],
        reference=o["reference"],
    )
    pops = res.populations
    cols = {"time": res.times, "F": res.fidelity, "p_G": pops[:, 0], "p_eegg": pops[:, 1], "p_ggee": pops[:, 2], "p_eeee": pops[:, 3]}
    head = {
        "long_time_F": float(res.fidelity[-1]),
        "peak_F": float(np.max(res.fidelity)),
        "g_12": res.couplings[0],
        "g_34": res.couplings[1],
        "delta_n": res.delta_n,
        "t0": o["t0"],
        "gamma_1": res.lparams.gamma_1,
        "gamma_2": res.lparams.gamma_2,
    }
    if o["optimize_t0"]:
        t_opt, f_opt = optimal_cutoff(res.lparams, res.target, 4 * o["t0"])
        head["optimal_t0"] = t_opt
        head["optimal_long_time_F"] = f_opt
    return TaskOutput({"prepare.csv": cols}, head)


def task_transfer(cfg: RunConfig) -> TaskOutput:
    from .protocols import ProtocolSchedule, TransferNotFound, bidc_overlap_trace, run_state_transfer, transfer_phase_and_time

    p = cfg.params()
    o = cfg.options
    sched = ProtocolSchedule.linear_ramp(
        o["duration"], (o["g12_start"], o["g34_start"]), (o["g12_end"], o["g34_end"]), o["samples"]
    )
    cols = {k: [] for k in ("time", "ce2", "cpe2", "theta", "P", "backend")}
    head = {}
    for backend in o["backend"].split(","):
        r = run_state_transfer(p, sched, backend, frame=o["frame"], dt_max=o["dt_max"] or None,
                               convention=cfg.convention, keep_states=bool(o["overlap"]))
        P = np.full(r.times.size, np.nan)
        if o["overlap"] and backend != "lindblad":
            P = bidc_overlap_trace(r, p, sched, convention=cfg.convention)
        theta = r.theta if r.theta is not None else np.full(r.times.size, np.nan)
        for k, v in (("time", r.times), ("ce2", r.ce2), ("cpe2", r.cpe2), ("theta", theta), ("P", P)):
            cols[k].extend(v.tolist())
        cols["backend"].extend([backend] * r.times.size)
        h = {"max_cpe2": float(np.max(r.cpe2)), "final_cpe2": float(r.cpe2[-1])}
        if not np.all(np.isnan(P)):
            h["min_P"] = float(np.nanmin(P))
        if r.theta is not None:
            try:
                tm = transfer_phase_and_time(r, p.omega)
                h.update(t_star=tm.t_star, transfer_at_t_star=tm.transfer)
            except TransferNotFound as exc:
                h["t_star"] = None
                log.warning("%s", exc)
        head[backend] = h
    return TaskOutput({"transfer.csv": cols}, head)


def task_rates(cfg: RunConfig) -> TaskOutput:
    p = cfg.params()
    lp = decay_rates(p)
    rec = {
        "gamma_1": lp.gamma_1,
        "gamma_2": lp.gamma_2,
        "gamma_c": lp.gamma_c,
        "gamma_prime": lp.gamma_prime,
        "k0": lp.k0,
        "cos_k0_dn": lp.cos_phase,
    }
    return TaskOutput({}, rec, {"rates.json": json.dumps(rec, indent=2, sort_keys=True) + "\n"})


TASK_FUNCS = {
    "spectrum": task_spectrum,
    "bidc": task_bidc,
    "effective-compare": task_effective_compare,
    "prepare": task_prepare,
    "transfer": task_transfer,
    "rates": task_rates,
}


def _child_configs(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    o = cfg.options
    child_task = o["sweep_task"]
    key = o["sweep_key"]
    try:
        values = [v.strip() for v in o["sweep_values"].split(",") if v.strip()]
    except AttributeError:
        raise ConfigError("sweep_values: expected a comma-separated list") from None
    if not values:
        raise ConfigError("sweep_values: empty list")
    own = {k: v for k, v in o.items() if k in OPTIONS[child_task]}
    base = {"task": child_task, "convention": cfg.convention}
    base.update({k: repr(v) for k, v in cfg.model.items()})
    base.update({k: str(v) for k, v in own.items()})
    out = []
    for v in values:
        raw = dict(base)
        if key == "g":
            raw["g_12"] = raw["g_34"] = v
        elif key in CONFIG_KEYS or key in OPTIONS[child_task]:
            raw[key] = v
        else:
            raise ConfigError(f"sweep_key: {key!r} is not a key of task {child_task!r}")
        out.append((f"{key}={v}", config_from_mapping(raw, env={})))
    return out


def _run_child(args):
    name, cfg, out = args
    return name, run_task(cfg, Path(out))


def run_task(cfg: RunConfig, out_dir: Path, workers: int = 1) -> dict:
    """Run one config, write its files atomically, and return the manifest."""
    start = dt.datetime.now(dt.timezone.utc).isoformat()
    out_dir = Path(out_dir)
    files: dict[str, str] = {}
    if cfg.task == "sweep":
        children = _child_configs(cfg)
        jobs = [(name, c, str(out_dir / name)) for name, c in children]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_child, jobs))
        else:
            results = [_run_child(j) for j in jobs]
        keys = sorted({k for _, m in results for k, v in m["headline"].items() if isinstance(v, (int, float))})
        table = {"child": [n for n, _ in results]}
        for k in keys:
            table[k] = [m["headline"].get(k, float("nan")) for _, m in results]
        files["summary.csv"] = csv_text(table, cfg.sha256)
        headline = {"children": [n for n, _ in results]}
    else:
        res = TASK_FUNCS[cfg.task](cfg)
        for name, cols in res.tables.items():
            files[name] = csv_text(cols, cfg.sha256)
        files.update(res.extra_files)
        headline = res.headline
    files["config.txt"] = cfg.serialize()
    # everything is computed before the first file appears
    for name, text in files.items():
        atomic_write(out_dir / name, text)
    manifest = {
        "task": cfg.task,
        "config_sha256": cfg.sha256,
        "code_version": __version__,
        "started": start,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": sorted(files) + ["manifest.json"],
        "headline": _jsonable(headline),
    }
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


NUMERIC_ERRORS = (
    EigensolveError,
    ArpackNoConvergence,
    NormDriftError,
    PositivityError,
    NoRootError,
    BidcNotFound,
    DivergentRateError,
    np.linalg.LinAlgError,
)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="bidc", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="key = value run configuration")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--workers", type=int, default=1, help="parallel sweep children")
    ap.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        manifest = run_task(cfg, Path(args.out), args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(manifest["headline"], sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
