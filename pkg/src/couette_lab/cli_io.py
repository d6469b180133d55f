"""Command line, run configuration and output files.

Configurations are JSON documents.  Every key is checked against the schema
below, so a misspelt key is an error rather than a silently ignored setting.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .params_grid import FlowParams, Grid1D, ParamError, build_grid, validate_params

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class ConfigError(ValueError):
    """Bad configuration; ``path`` names the offending key (dotted)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class InitialConfig:
    kind: str = "full"
    masses: tuple = (1.0, -1.0)
    layout: str = "wave"
    width: float = 0.15
    band_k: int = 1
    band_eta: float = 2.0
    nonzero_weight: float = 1.0
    norm_target: float = 1.0
    psi1_zero_mode: bool = False


@dataclass(frozen=True)
class SolverConfig:
    nonlinear: bool = True
    lift_up: bool = True
    acoustic_gate: bool = True
    drop_tol: float = 0.0
    max_phase: float = 0.1
    dt_target: float = 0.1
    dt_growth: float = 0.0
    dt_max: float = 1.0


@dataclass(frozen=True)
class ChecksConfig:
    mach: bool = True
    alpha: bool = True
    wrap: bool = True


@dataclass(frozen=True)
class ScanConfig:
    mus: tuple = (1e-2, 3e-3, 1e-3)
    alphas: tuple = (3.7,)
    seeds: tuple = (0, 1, 2)
    horizon_factor: float = 10.0
    workers: int | None = None


@dataclass(frozen=True)
class WavesConfig:
    masses: tuple = (1.0, -1.0)
    times: tuple = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
    eps: float = 2e-3
    h_max: float = 2.0


@dataclass(frozen=True)
class ResidualConfig:
    amplitude: float = 1e-8
    n_samples: int = 9
    order: int = 4


@dataclass(frozen=True)
class RunConfig:
    mu: float
    mach: float
    alpha: float
    nx: int
    ny: int
    ly: float
    t_final: float
    # None means "same as mu"
    lam: float | None = None
    gamma_law: float = 2.0
    dealias: float = 2.0 / 3.0
    dt: float | None = None
    seed: int = 0
    sample_every: float | None = None
    sample_spacing: str = "linear"
    observers: str = "basic"
    inflation_limit: float = 10.0
    output_dir: str | None = None
    initial: InitialConfig = field(default_factory=InitialConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    waves: WavesConfig = field(default_factory=WavesConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)

    @property
    def lam_value(self) -> float:
        return self.mu if self.lam is None else self.lam

    def flow_params(self, check: bool = True) -> FlowParams:
        p = FlowParams(mu=self.mu, lam=self.lam_value, mach=self.mach, gamma_law=self.gamma_law,
                       alpha=self.alpha)
        if not check:
            return p
        return validate_params(p, check_mach=self.checks.mach, check_alpha=self.checks.alpha)

    def grid(self):
        return build_grid(self.nx, self.ny, self.ly, self.dealias)

    def n_samples(self) -> int:
        every = self.sample_every if self.sample_every is not None else self.t_final / 100.0
        return int(round(self.t_final / every)) + 1

    def config_hash(self) -> str:
        return hashlib.sha256(serialize(self, indent=None).encode()).hexdigest()[:16]


# JSON names that differ from the Python attribute
_ALIASES = {"lam": "lambda"}
_REQUIRED = ("mu", "mach", "alpha", "nx", "ny", "ly", "t_final")


def _json_name(name: str) -> str:
    return _ALIASES.get(name, name)


def _coerce(path: str, value, typ):
    """Check a JSON value against the annotation string of a config field."""
    t = typ.replace(" ", "")
    optional = t.endswith("|None")
    if optional:
        t = t[: -len("|None")]
        if value is None:
            return None
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        v = float(value)
        if not math.isfinite(v):
            raise ConfigError(path, "must be finite")
        return v
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if t == "tuple":
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(path, f"unsupported field type {typ}")  # pragma: no cover


def _build(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a JSON object")
    known = {_json_name(f.name): f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", f"unknown key {key!r}")
    kw = {}
    for jname, f in known.items():
        path = f"{prefix}{jname}"
        if jname not in data:
            if cls is RunConfig and f.name in _REQUIRED:
                raise ConfigError(path, "required key is missing")
            continue
        value = data[jname]
        if isinstance(f.type, str) and f.type.endswith("Config"):
            kw[f.name] = _build(globals()[f.type], value, path + ".")
        else:
            kw[f.name] = _coerce(path, value, f.type)
    return cls(**kw)


def parse_config(text: str) -> RunConfig:
    """JSON text to a validated :class:`RunConfig` with defaults applied."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    cfg = _build(RunConfig, data)
    if cfg.lam is None:
        cfg = replace(cfg, lam=cfg.mu)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    for name in ("mu", "mach", "ly", "t_final"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(name, "must be positive")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError("dt", "must be positive")
    if cfg.sample_every is not None and not cfg.sample_every > 0:
        raise ConfigError("sample_every", "must be positive")
    if cfg.sample_spacing not in ("linear", "log"):
        raise ConfigError("sample_spacing", "must be 'linear' or 'log'")
    if cfg.observers not in ("basic", "energy", "waves"):
        raise ConfigError("observers", "must be 'basic', 'energy' or 'waves'")
    if cfg.initial.kind not in ("full", "zero_only", "nonzero_only"):
        raise ConfigError("initial.kind", f"unknown kind {cfg.initial.kind!r}")
    if cfg.initial.layout not in ("wave", "centered"):
        raise ConfigError("initial.layout", f"unknown layout {cfg.initial.layout!r}")
    if len(cfg.initial.masses) != 2 or len(cfg.waves.masses) != 2:
        raise ConfigError("masses", "exactly two wave masses are needed")
    if cfg.residual.order not in (2, 4):
        raise ConfigError("residual.order", "must be 2 or 4")
    try:
        cfg.grid()
        cfg.flow_params(check=False)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from exc


def to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[_json_name(f.name)] = v
    return out


def serialize(cfg: RunConfig, indent: int | None = 1) -> str:
    """Canonical JSON (sorted keys, every default written out)."""
    return json.dumps(to_dict(cfg), indent=indent, sort_keys=True)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {path}")
    return parse_config(p.read_text())


# ---------------------------------------------------------------- output files


def metadata(cfg: RunConfig | None = None, **extra) -> dict:
    meta = {"code_version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "config_hash": cfg.config_hash() if cfg is not None else "none"}
    meta.update(extra)
    return meta


def write_series_csv(path, ns, meta: dict) -> None:
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}: {meta[k]}\n")
    names = ns.names()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + names)
    for i, t in enumerate(ns.times):
        w.writerow([repr(float(t))] + [repr(float(ns[n][i])) for n in names])
    Path(path).write_text(buf.getvalue())


def read_series_csv(path):
    from .diagnostics import NormSeries

    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path}: empty series file")
    head, body = rows[0], np.array([[float(x) for x in r] for r in rows[1:]])
    if head[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    return NormSeries(Path(path).stem, body[:, 0], {n: body[:, j + 1] for j, n in enumerate(head[1:])})


def write_json(path, payload: dict, meta: dict) -> None:
    Path(path).write_text(json.dumps({"meta": meta, **payload}, indent=1, sort_keys=False,
                                     default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if is_dataclass(o):
        return asdict(o)
    return str(o)


def _clean(obj):
    """Replace non-finite floats so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# ---------------------------------------------------------------- run helpers


def run_spec(cfg: RunConfig, observers: str | None = None):
    from .scan_orchestrator import RunSpec
    from .spectral_solver import InitialSpec, StepOptions, cfl_limit, lattice_dt

    p = cfg.flow_params()
    grid = cfg.grid()
    s = cfg.solver
    step = StepOptions(nonlinear=s.nonlinear, lift_up=s.lift_up, acoustic_gate=s.acoustic_gate,
                       drop_tol=s.drop_tol, max_phase=s.max_phase)
    init = InitialSpec(**asdict(cfg.initial))
    dt_target = s.dt_target
    if cfg.dt is None and s.acoustic_gate:
        # an automatic step never trips the gate: take the largest lattice step below it
        from .spectral_solver import State2D

        zero = State2D(0.0, "moving", np.zeros((3,) + (grid.n_x, grid.n_y // 2 + 1), complex))
        gate = cfl_limit(zero, p, grid, True)
        d = lattice_dt(grid, 0.0)
        # below one lattice step the generic (untabulated) propagators take over
        dt_target = min(dt_target, math.floor(gate / d) * d if gate >= d else gate)
    return RunSpec(params=p, grid=grid, t_final=cfg.t_final, dt=cfg.dt, dt_target=dt_target,
                   dt_growth=s.dt_growth, dt_max=s.dt_max, seed=cfg.seed,
                   n_samples=cfg.n_samples(), sample_spacing=cfg.sample_spacing, initial=init,
                   step=step, observers=observers or cfg.observers,
                   run_id=f"run_{cfg.config_hash()}", check_wrap=cfg.checks.wrap,
                   inflation_limit=cfg.inflation_limit)


def _out_dir(args, cfg: RunConfig | None) -> Path:
    d = args.out or (cfg.output_dir if cfg is not None else None) or "."
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    from .scan_orchestrator import run_single

    cfg = load_config(args.config)
    spec = run_spec(cfg)
    out = _out_dir(args, cfg)
    ns, meta = run_single(spec)
    head = metadata(cfg, run_id=spec.run_id, status=meta["status"],
                    classification=meta["classification"])
    write_series_csv(out / "series.csv", ns, head)
    write_json(out / "run.json", {"config": to_dict(cfg), "result": _clean(meta)}, head)
    summary = {"status": meta["status"], "classification": meta["classification"],
               "final_t": meta["final_t"], "out": str(out)}
    print(json.dumps(summary))
    if meta["status"] != "completed":
        _error(EXIT_ABORT, "numerical_abort", meta.get("message", meta["status"]),
               status=meta["status"], t=meta.get("t_abort"))
        return EXIT_ABORT
    return EXIT_OK


def cmd_waves(args) -> int:
    from .zero_mode_waves import WaveMarcher, hopf_cole_theta, lp_norm

    cfg = load_config(args.config)
    p = cfg.flow_params()
    g1 = Grid1D(cfg.ny, cfg.ly)
    wv = cfg.waves
    times = [t for t in wv.times if t <= cfg.t_final]
    if not times:
        raise ConfigError("waves.times", "no time lies inside (0, t_final]")
    if cfg.checks.wrap:
        from .params_grid import check_no_wrap

        check_no_wrap(p, g1, max(times))
    m = WaveMarcher(p, g1, wv.masses, eps=wv.eps, h_max=wv.h_max)
    names = ["L2_theta1", "Linf_theta1", "mass_xi1", "mass_xi2", "Linf_xi_tilde1",
             "Linf_xi_tilde2", "Linf_theta_A"]
    rows = []
    for t in times:
        m.advance(t)
        th = hopf_cole_theta(1, wv.masses[0], p, g1.y, t)
        xi, xt = m.xi(), m.xi_tilde()
        rows.append([t, lp_norm(th, g1.dy, 2), lp_norm(th, g1.dy, math.inf),
                     float(xi[0].sum() * g1.dy), float(xi[1].sum() * g1.dy),
                     float(np.max(np.abs(xt[0]))), float(np.max(np.abs(xt[1]))),
                     float(np.max(np.abs(m.theta_A())))])
    out = _out_dir(args, cfg)
    buf = io.StringIO()
    for k, v in sorted(metadata(cfg).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + names)
    for r in rows:
        w.writerow([repr(float(x)) for x in r])
    (out / "waves.csv").write_text(buf.getvalue())
    print(json.dumps({"rows": len(rows), "out": str(out / "waves.csv")}))
    return EXIT_OK


def cmd_symbols(args) -> int:
    from .multipliers import MultiplierConfig, check_multiplier_prop

    if not args.mu > 0:
        raise ConfigError("mu", "must be positive")
    cfg = MultiplierConfig(mu=args.mu, mach=args.mach, vartheta=args.vartheta, delta=args.delta)
    rep = check_multiplier_prop(cfg, k_max=args.k_max, eta_max=args.eta_max, deta=args.deta,
                                t_max=args.t_max, dt=args.dt)
    rep["verdict"] = "PASS" if rep["pass"] else "FAIL"
    text = json.dumps(_clean({"meta": metadata(), **rep}), indent=1)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "symbols.json").write_text(text)
    print(text)
    print(rep["verdict"])
    return EXIT_OK if rep["pass"] else EXIT_INVALID


def cmd_residual(args) -> int:
    from .moving_frame_helmholtz import residual_new_variable
    from .spectral_solver import InitialSpec, State2D, evolve, make_initial_data

    cfg = load_config(args.config)
    p = cfg.flow_params()
    grid = cfg.grid()
    r = cfg.residual
    state, _ = make_initial_data(p, grid, cfg.seed, InitialSpec(**asdict(cfg.initial)))
    scale = r.amplitude / max(float(np.max(np.abs(state.coeffs))), 1e-300)
    state = State2D(state.t, state.frame, state.coeffs * scale)
    spec = run_spec(cfg)
    dt = spec.dt if spec.dt is not None else spec.dt_target
    times = np.linspace(0.0, cfg.t_final, r.n_samples)
    traj = evolve(state, p, grid, cfg.t_final, dt, sample_times=times, store_states=True,
                  opts=spec.step, check_wrap=cfg.checks.wrap)
    rep = residual_new_variable(traj, p, grid, order=r.order)
    rep["status"] = traj.meta["status"]
    out = _out_dir(args, cfg)
    write_json(out / "residual.json", _clean(rep), metadata(cfg))
    print(json.dumps(_clean(rep)))
    return EXIT_OK if traj.meta["status"] == "completed" else EXIT_ABORT


def cmd_fit(args) -> int:
    from .diagnostics import fit_exponential, fit_power

    ns = read_series_csv(args.series)
    if args.name not in ns.series:
        raise ConfigError("name", f"series has no column {args.name!r}; columns: {ns.names()}")
    fn = fit_power if args.model == "power" else fit_exponential
    window = tuple(args.window) if args.window else None
    res = fn(ns.times, ns[args.name], window, log_values=args.log_values, name=args.name,
             run_id=ns.run_id)
    payload = {"meta": metadata(source=str(args.series)), "fit": _clean(res.to_dict())}
    payload["fit"].pop("series", None)
    print(json.dumps(payload, indent=1, default=_json_default))
    return EXIT_OK


def cmd_scan(args) -> int:
    from .scan_orchestrator import run_matrix

    cfg = load_config(args.config)
    spec = run_spec(cfg)
    out = _out_dir(args, cfg)
    sc = cfg.scan
    records = run_matrix(sc.mus, sc.alphas, sc.seeds, spec, horizon_factor=sc.horizon_factor,
                         out_dir=out, workers=sc.workers, check_alpha=cfg.checks.alpha)
    counts: dict = {}
    for r in records:
        counts[r.classification] = counts.get(r.classification, 0) + 1
    print(json.dumps({"cells": len(records), "counts": counts, "out": str(out / "scan.csv")}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .scan_orchestrator import read_scan_csv, render_table

    path = Path(args.scan)
    if path.is_dir():
        path = path / "scan.csv"
    if not path.is_file():
        raise ConfigError("scan", f"no scan table at {path}")
    print(render_table(read_scan_csv(path)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="couette-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=False, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.set_defaults(func=fn)
        return sp

    with_config("simulate", cmd_simulate, "evolve one configuration, write series.csv and run.json")
    with_config("waves", cmd_waves, "march the zero-mode wave ansatz (1-D)")
    with_config("residual", cmd_residual, "check a short trajectory against the (R, A, Omega) system")
    with_config("scan", cmd_scan, "run the (mu, alpha, seed) matrix of the scan section")

    sp = sub.add_parser("symbols", help="check the multiplier inequalities on a lattice")
    sp.add_argument("--mu", type=float, required=True)
    sp.add_argument("--mach", type=float, default=1.0)
    sp.add_argument("--vartheta", type=float, default=1024.0)
    sp.add_argument("--delta", type=float, default=0.5)
    sp.add_argument("--k-max", type=int, default=32)
    sp.add_argument("--eta-max", type=float, default=200.0)
    sp.add_argument("--deta", type=float, default=0.05)
    sp.add_argument("--t-max", type=float, default=300.0)
    sp.add_argument("--dt", type=float, default=0.05)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_symbols)

    sp = sub.add_parser("fit", help="fit a power law or exponential to a series column")
    sp.add_argument("--series", required=True, help="series.csv written by simulate")
    sp.add_argument("--name", required=True)
    sp.add_argument("--model", choices=("power", "exp"), default="power")
    sp.add_argument("--window", type=float, nargs=2)
    sp.add_argument("--log-values", action="store_true")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("report", help="plain-text table of a scan")
    sp.add_argument("--scan", required=True, help="scan.csv or the directory holding it")
    sp.set_defaults(func=cmd_report)
    return ap


def _error(code: int, kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message, "exit_code": code}
    payload.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(_clean(payload)), file=sys.stderr)


def main(argv=None) -> int:
    """Run one subcommand; the return value is the process exit status."""
    from .spectral_solver import NumericalAbort

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        code = exc.code if isinstance(exc.code, int) else EXIT_INVALID
        if code != 0:
            _error(EXIT_INVALID, "usage", "invalid command line")
            return EXIT_INVALID
        return EXIT_OK
    if getattr(args, "config", "unset") is None:
        _error(EXIT_INVALID, "config", "missing --config")
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        _error(EXIT_INVALID, "config", str(exc), key=exc.path or None)
        return EXIT_INVALID
    except ParamError as exc:
        _error(EXIT_INVALID, "validation", str(exc))
        return EXIT_INVALID
    except NumericalAbort as exc:
        _error(EXIT_ABORT, "numerical_abort", str(exc), status=getattr(exc, "kind", None))
        return EXIT_ABORT
    except (ValueError, FileNotFoundError) as exc:
        _error(EXIT_INVALID, "validation", str(exc))
        return EXIT_INVALID


def entry() -> None:
    sys.exit(main())
