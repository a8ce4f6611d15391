"""Command-line front end: configuration, dispatch and run directories.

Configuration is a JSON object, optionally read from a file, overridden by
dotted-key flags (``--set numerics.T=0.1``).  Flags win over the file and
every override is recorded in the run's provenance.

Exit codes: 0 all checks passed, 2 a quantitative check failed, 1 error
(invalid configuration, numerical precondition, or an incomplete sweep).
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from . import experiments as ex
from .geometry import ManifoldParams

__all__ = ["ConfigError", "RunConfig", "EXPERIMENTS", "parse_config", "dispatch", "main", "OUTPUT_ENV"]

OUTPUT_ENV = "DEGTRAP_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


# experiment id -> (description, sweep name, default sweep, numerics defaults)
EXPERIMENTS: dict[str, tuple[str, str, list, dict]] = {
    "local-smoothing": (
        "weighted time integral of the evolved quasimode vs h, target slope 1/(m+1) (local smoothing estimate)",
        "h", [float(v) for v in np.geomspace(1e-3, 1e-1, 6)],
        {"T": 0.05, "data": "quasimode", "R0": 10.0, "width": 4.0, "nt": 200, "kn": 2.0, "dt": None},
    ),
    "saturation": (
        "mixed norm of the evolved mode-form quasimode vs k, target (m(n-2)-n)/(2n(m+1)) (near-sharpness corollary)",
        "k", [50, 100, 200, 400, 800, 1600],
        {"epsilon": 0.4, "alpha": 1.0, "mu": 1.0, "nt": 64, "kn": 2.0, "cfl": 0.5, "tol": 0.05, "dt": None},
    ),
    "dispersion": (
        "(ht)^{1/2} sup|kernel| of the WKB parametrix vs h, bounded in h (dispersive estimate near the trap)",
        "h", [1e-3, 1e-2, 1e-1],
        {"t_max": None, "eta_max": 20.0, "x_half": 1.0, "K": 4, "free": False, "bound_factor": 3.0,
         "resolution": {"nt": 5, "neta": 321, "ny": 192, "margin": 32}},
    ),
    "strichartz": (
        "mixed norm over k^{(n-2)/(pn)}, slope <= 0.1 (Strichartz estimate with loss, upper bound only)",
        "k", [25, 50, 100, 200, 400],
        {"T": 0.05, "data": ["quasimode", "gaussian"], "nt": 64, "kn": 2.0, "cfl": 0.5, "dt": None},
    ),
    "quasimode-scaling": (
        "residual, norm and phase constants of the cutoff quasimode vs h (model-operator quasimode)",
        "h", [float(v) for v in np.geomspace(1e-4, 1e-1, 8)],
        {"q_list": [4, 6], "N": 1024},
    ),
    "flow-bounds": (
        "Liouville determinant, dyadic exit times, partition count and non-trapping (flow lemmas)",
        "m", [],
        {"omega": 2.0, "delta": 0.1, "epsilon": 0.1, "a": None, "b": 0.05, "h_range": [1e-14, 1e-2],
         "n_h": 25, "h_exit": 1e-4, "nontrap_epsilon": 0.05},
    ),
    "sogge": (
        "L^q/L^2 ratio of zonal harmonics vs k at the critical q (eigenfunction bound on spheres)",
        "k", [10, 20, 40, 80, 120, 160, 200],
        {"d_list": [2, 3]},
    ),
    "nontrapping": (
        "monotonicity of the modified warp and escape of sampled geodesics (non-trapping perturbation)",
        "m", [],
        {"epsilon": 0.05, "n_samples": 100_000},
    ),
}

_TOP_KEYS = ("experiment", "m", "n", "sweep", "numerics", "output", "workers")


def _available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class RunConfig:
    experiment: str
    m: int
    n: int
    sweep: list
    numerics: dict
    output: str | None = None
    workers: int = 1
    provenance: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"experiment": self.experiment, "m": self.m, "n": self.n, "sweep": list(self.sweep),
                "numerics": copy.deepcopy(self.numerics), "output": self.output, "workers": self.workers}

    def hash(self) -> str:
        d = self.as_dict()
        d.pop("output")
        d.pop("workers")  # results do not depend on the pool size
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def _get_dotted(d: dict, key: str):
    cur = d
    for p in key.split("."):
        if not isinstance(cur, dict) or p not in cur:
            return None
        cur = cur[p]
    return cur


def _check_keys(given: dict, allowed: Sequence[str], where: str):
    bad = sorted(set(given) - set(allowed))
    if bad:
        raise ConfigError(f"unknown key(s) {bad} in {where}; valid keys: {sorted(allowed)}")


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: RunConfig):
    e = cfg.experiment
    _require(isinstance(cfg.m, int) and not isinstance(cfg.m, bool) and cfg.m >= 1,
             f"m must be an integer >= 1 (got {cfg.m!r})")
    _require(isinstance(cfg.n, int) and not isinstance(cfg.n, bool) and cfg.n >= 2,
             f"n must be an integer >= 2 (got {cfg.n!r})")
    _require(isinstance(cfg.workers, int) and cfg.workers >= 1, f"workers must be an integer >= 1 (got {cfg.workers!r})")
    sweep_name = EXPERIMENTS[e][1]
    sw = cfg.sweep
    _require(isinstance(sw, list) and len(sw) >= 1, "sweep must be a non-empty list")
    if sweep_name == "k":
        for k in sw:
            _require(isinstance(k, int) and not isinstance(k, bool) and k >= 1,
                     f"sweep values k must be integers >= 1 (got {k!r})")
    elif sweep_name == "h":
        for h in sw:
            _require(isinstance(h, (int, float)) and 0 < h < 1, f"sweep values h must lie in (0, 1) (got {h!r})")
    else:
        for m in sw:
            _require(isinstance(m, int) and m >= 1, f"sweep values m must be integers >= 1 (got {m!r})")
    if sweep_name in ("h", "k"):
        _require(len(sw) >= 3, f"{e} fits an exponent and needs at least 3 sweep values")
    num = cfg.numerics
    for key in ("T", "epsilon", "alpha", "mu", "t_max", "eta_max", "x_half", "R0", "width", "kn", "cfl", "tol",
                "omega", "delta", "b", "h_exit", "nontrap_epsilon", "bound_factor"):
        if key in num and not (key == "t_max" and num[key] is None):
            _require(isinstance(num[key], (int, float)) and num[key] > 0, f"numerics.{key} must be > 0 (got {num[key]!r})")
    if num.get("dt") is not None:
        _require(isinstance(num["dt"], (int, float)) and num["dt"] > 0, f"numerics.dt must be > 0 (got {num['dt']!r})")
    for key in ("nt", "N", "n_h", "n_samples", "K"):
        if key in num:
            _require(isinstance(num[key], int) and num[key] >= (0 if key == "K" else 2),
                     f"numerics.{key} must be a positive integer (got {num[key]!r})")
    if e == "strichartz":
        data = num["data"] if isinstance(num["data"], list) else [num["data"]]
        for d in data:
            _require(d in ("quasimode", "gaussian"), f"numerics.data entries must be 'quasimode' or 'gaussian' (got {d!r})")
    if e == "local-smoothing":
        _require(num["data"] in ("quasimode", "gaussian", "gaussian-off"),
                 f"numerics.data must be 'quasimode', 'gaussian' or 'gaussian-off' (got {num['data']!r})")
        _require(cfg.n >= 2, "n must be >= 2")
    if e == "flow-bounds":
        _require(num["omega"] > 1, "numerics.omega must be > 1")
        _require(0 < num["h_exit"] < 1, "numerics.h_exit must lie in (0, 1)")
    if e == "sogge":
        for d in num["d_list"]:
            _require(isinstance(d, int) and d >= 2, f"numerics.d_list entries must be integers >= 2 (got {d!r})")


def parse_config(path: str | None = None, overrides: Sequence[tuple[str, object]] = (),
                 base: dict | None = None) -> RunConfig:
    """Resolve a configuration from a JSON file (or ``base``) and dotted overrides.

    ``overrides`` are ``(dotted_key, value)`` pairs applied in order; they
    take precedence over file values and are recorded in ``provenance``.
    Defaults are filled for every missing numerics field.
    """
    raw: dict = {}
    source = "defaults"
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        source = os.path.abspath(path)
    elif base is not None:
        raw = copy.deepcopy(base)
        source = "inline"
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    overridden = []
    for key, value in overrides:
        prev = _get_dotted(raw, key)
        _set_dotted(raw, key, value)
        overridden.append({"key": key, "value": value, "replaced": prev})
    _check_keys(raw, _TOP_KEYS, "config")
    e = raw.get("experiment")
    if e not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)} (got {e!r})")
    _, sweep_name, default_sweep, num_defaults = EXPERIMENTS[e]
    num_given = raw.get("numerics", {}) or {}
    if not isinstance(num_given, dict):
        raise ConfigError("numerics must be an object")
    _check_keys(num_given, num_defaults, f"numerics for {e}")
    numerics = copy.deepcopy(num_defaults)
    for k, v in num_given.items():
        if isinstance(numerics.get(k), dict) and isinstance(v, dict):
            _check_keys(v, numerics[k], f"numerics.{k}")
            numerics[k].update(v)
        else:
            numerics[k] = v
    m = raw.get("m", 2)
    n = raw.get("n", 3)
    sweep = raw.get("sweep")
    if sweep is None:
        sweep = [m] if sweep_name == "m" else list(default_sweep)
    elif not isinstance(sweep, list):
        sweep = [sweep]
    cfg = RunConfig(e, m, n, sweep, numerics, raw.get("output"), raw.get("workers", _available_workers()),
                    {"source": source, "overrides": overridden,
                     "defaults_applied": sorted(set(num_defaults) - set(num_given))
                     + [k for k in ("m", "n", "sweep", "workers") if k not in raw]})
    _validate(cfg)
    return cfg


def _run(cfg: RunConfig) -> ex.SweepReport:
    e, num, sw, w = cfg.experiment, dict(cfg.numerics), cfg.sweep, cfg.workers
    p = ManifoldParams(cfg.m, cfg.n)
    if e == "local-smoothing":
        return ex.run_local_smoothing(p, sw, workers=w, **num)
    if e == "saturation":
        return ex.run_saturation(p, sw, workers=w, **num)
    if e == "dispersion":
        return ex.run_dispersion_scan(p, sw, workers=w, **num)
    if e == "strichartz":
        return ex.run_strichartz_bound(p, sw, workers=w, **num)
    if e == "quasimode-scaling":
        return ex.run_quasimode_scaling(cfg.m, sw, workers=w, **num)
    if e == "flow-bounds":
        return ex.run_flow_bounds(sw, **num)
    if e == "sogge":
        return ex.run_sogge(num["d_list"], sw, workers=w)
    if e == "nontrapping":
        return ex.run_nontrapping(sw, **num)
    raise ConfigError(f"unknown experiment {e!r}")


def _versions() -> dict:
    return {"degtrap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _run_dir(cfg: RunConfig) -> str:
    root = cfg.output or os.environ.get(OUTPUT_ENV) or "runs"
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = os.path.join(root, f"{cfg.experiment}-{stamp}")
    path, i = base, 1
    while os.path.exists(path):
        path = f"{base}-{i}"
        i += 1
    return path


def _write_manifest(directory: str, cfg: RunConfig, status: str, exit_code: int, report=None, error=None):
    samples = []
    if report is not None:
        for s in report.samples:
            rec = {"param": s.get("param"), "status": s.get("status")}
            if "error" in s:
                rec["error"] = s["error"]
            samples.append(rec)
    man = {"experiment": cfg.experiment, "config": cfg.as_dict(), "config_hash": cfg.hash(),
           "provenance": cfg.provenance, "versions": _versions(), "status": status, "exit_code": exit_code,
           "complete": report is not None and report.complete, "samples": samples,
           "written": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    if error is not None:
        man["error"] = error
    with open(os.path.join(directory, "MANIFEST"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(man, f, indent=2, default=ex._json_default)
        f.write("\n")


def dispatch(cfg: RunConfig, stream=None) -> tuple[int, str]:
    """Run the configured experiment and write its run directory.

    Returns ``(exit_code, run_directory)``.  Partial results are kept when
    samples fail; the MANIFEST marks them and the exit code is 1.
    """
    stream = sys.stdout if stream is None else stream
    directory = _run_dir(cfg)
    os.makedirs(directory)
    try:
        report = _run(cfg)
    except Exception as e:  # a driver-level failure still leaves a MANIFEST behind
        msg = f"{type(e).__name__}: {e}"
        _write_manifest(directory, cfg, "error", 1, error=msg)
        print(f"ERROR {cfg.experiment}: {msg}", file=stream)
        return 1, directory
    report.config["config_hash"] = cfg.hash()
    ex.write_outputs(report, directory)
    if not report.complete:
        code, status = 1, "incomplete"
        for s in report.samples:
            if s.get("status") != "ok":
                print(f"ERROR {cfg.experiment} sample {s.get('param')}: {s.get('error')}", file=stream)
    elif report.passed:
        code, status = 0, "pass"
    else:
        code, status = 2, "fail"
    _write_manifest(directory, cfg, status, code, report)
    for line in report.summary_lines():
        print(line, file=stream)
    print(f"{status.upper()} {cfg.experiment} -> {directory}", file=stream)
    return code, directory


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors: exit 1, not 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    epilog = "experiments:\n" + "\n".join(f"  {k:18s} {v[0]}" for k, v in EXPERIMENTS.items())
    epilog += (f"\n\nexit codes: 0 pass, 2 quantitative failure, 1 error.\n"
               f"output root: --output, the config's 'output', ${OUTPUT_ENV}, or ./runs")
    parser = _Parser(prog="degtrap", description="Numerical sweeps for Schroedinger evolution near a degenerate trap.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"degtrap {__version__}")
    sub = parser.add_subparsers(dest="experiment", metavar="EXPERIMENT", parser_class=_Parser)
    for name, (desc, sweep_name, default_sweep, num) in EXPERIMENTS.items():
        sp = sub.add_parser(name, help=desc, description=desc,
                            epilog="numerics defaults: " + json.dumps(num),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, value parsed as JSON (e.g. numerics.T=0.1); repeatable")
        sp.add_argument("-m", type=int, help="degeneracy order m >= 1")
        sp.add_argument("-n", type=int, help="manifold dimension n >= 2")
        sp.add_argument("--sweep", type=str, help=f"comma-separated {sweep_name} values")
        sp.add_argument("--output", help="output root directory")
        sp.add_argument("--workers", type=int, help="worker processes (default: available CPUs)")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.experiment:
        parser.print_help()
        return 1
    overrides: list[tuple[str, object]] = [("experiment", args.experiment)]
    for item in args.set:
        if "=" not in item:
            print(f"degtrap: error: --set expects KEY=VALUE (got {item!r})", file=sys.stderr)
            return 1
        k, v = item.split("=", 1)
        overrides.append((k.strip(), _parse_value(v)))
    if args.m is not None:
        overrides.append(("m", args.m))
    if args.n is not None:
        overrides.append(("n", args.n))
    if args.sweep:
        overrides.append(("sweep", [_parse_value(v) for v in args.sweep.split(",") if v.strip()]))
    if args.output:
        overrides.append(("output", args.output))
    if args.workers is not None:
        overrides.append(("workers", args.workers))
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as e:
        print(f"degtrap: config error: {e}", file=sys.stderr)
        return 1
    if args.dry_run:
        print(json.dumps({"config": cfg.as_dict(), "config_hash": cfg.hash(), "provenance": cfg.provenance},
                         indent=2, default=ex._json_default))
        return 0
    code, _ = dispatch(cfg)
    return code


if __name__ == "__main__":
    sys.exit(main())
