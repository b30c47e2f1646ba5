"""Command-line front end: ``asdlab <command> [flags]``.

Exit codes: 0 pass or converged, 1 verification failure, 2 usage or
hypothesis error, 3 negative certificate, 4 converged but derived checks
failed, 5 not converged.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__, conformal, geometry, suites
from .calculus import Calc, sup
from .deformation import asd_index
from .models import GEOMETRIES, DegenerateMetricError, NonFiniteFieldError, make_background
from .solver import (SPHERE_YAMABE, ConfigurationError, SolverConfig, four_d_phi, maximize_phi)

log = logging.getLogger("asdlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NEGATIVE, EXIT_CHECKS, EXIT_NOT_CONVERGED = range(6)
CONFIG_KEYS = {"geometry": str, "sites": str, "extent": float, "seed": int, "epsilon": float}
DEFAULTS = {"geometry": "s3xs1", "sites": "8", "extent": None, "seed": 0, "epsilon": 0.05}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def read_config(path: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{n}: unknown key {key!r}")
            try:
                out[key] = CONFIG_KEYS[key](value)
            except ValueError as exc:
                raise UsageError(f"{path}:{n}: bad value for {key}: {value!r}") from exc
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["geometry"] not in GEOMETRIES:
        raise UsageError(f"unknown geometry {cfg['geometry']!r}; expected one of {', '.join(GEOMETRIES)}")
    cfg["sites"] = parse_sites(cfg["sites"])
    return cfg


def parse_sites(value) -> tuple:
    if isinstance(value, (tuple, list)):
        parts = [int(v) for v in value]
    else:
        try:
            parts = [int(v) for v in str(value).replace("x", ",").split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --sites value {value!r}") from exc
    if len(parts) == 1:
        parts = parts * 4
    if len(parts) != 4 or min(parts) < 1:
        raise UsageError("--sites takes one positive integer or four separated by commas")
    return tuple(parts)


def background(cfg: dict):
    return make_background(cfg["geometry"], cfg["extent"], cfg["epsilon"], cfg["seed"])


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return str(obj)


def atomic_write(path: str, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def field_rows(index_shape: tuple, values: np.ndarray, component_names: Sequence[str]):
    """Rows ``i0,i1,i2,i3,component,value`` of a per-site field."""
    flat = values.reshape(len(values), -1)
    for site in range(len(values)):
        idx = np.unravel_index(site, index_shape)
        for c, name in enumerate(component_names):
            yield (*[int(i) for i in idx], name, float(flat[site, c]))


def tensor_components(shape: tuple) -> list:
    if not shape:
        return ["0"]
    return ["".join(str(i) for i in ix) for ix in np.ndindex(*shape)]


class Run:
    """Manifest bookkeeping and deferred writes for one command."""

    def __init__(self, command: str, args: argparse.Namespace, cfg: dict, tolerances: dict):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.tolerances = tolerances
        self.started = getattr(args, "_started", None) or time.time()
        self.files = {}

    def manifest(self, lattice) -> dict:
        return {"command": self.command,
                "config_path": os.path.abspath(self.args.config) if getattr(self.args, "config", None) else None,
                "seed": self.cfg.get("seed"), "lattice": lattice, "tolerances": self.tolerances,
                "version": __version__,
                "wall_clock": {"started": _dt.datetime.fromtimestamp(self.started, _dt.timezone.utc).isoformat(),
                               "elapsed_s": round(time.time() - self.started, 3)}}

    def report(self, body: dict, lattice) -> str:
        doc = {"manifest": self.manifest(lattice)}
        doc.update(body)
        return json.dumps(jsonable(doc), indent=2, sort_keys=False, allow_nan=False) + "\n"

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def flush(self, main_json: str) -> None:
        out = getattr(self.args, "out", None)
        if out is None:
            sys.stdout.write(main_json)
            return
        atomic_write(os.path.join(out, f"{self.command}.json"), main_json)
        for name, text in self.files.items():
            atomic_write(os.path.join(out, name), text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    cfg = resolve(args)
    bg = background(cfg)
    lat = bg.lattice(cfg["sites"])
    calc = Calc(bg, depth=2)
    x = lat.points
    mask = lat.interior_mask(0)

    def site(xs):
        p = geometry.curvature_pack(calc, xs)
        return {"R": p.Rscal, "J": p.J, "Wp2": p.norm2(p.Wplus), "Wm2": p.norm2(p.Wminus),
                "W_sup": np.abs(p.W).reshape(len(xs), -1).max(axis=1),
                "reassembly": np.abs(p.reassembly_residual()).reshape(len(xs), -1).max(axis=1),
                "vol": p.vol, "P": p.P, "W": p.W}

    s = geometry.map_sites(site, x[mask])
    body = {"geometry": bg.describe(),
            "R": {"min": float(s["R"].min()), "max": float(s["R"].max())},
            "J": {"min": float(s["J"].min()), "max": float(s["J"].max())},
            "Wplus_l2": math.sqrt(max(lat.integrate(s["Wp2"], s["vol"]), 0.0)),
            "Wminus_l2": math.sqrt(max(lat.integrate(s["Wm2"], s["vol"]), 0.0)),
            "W_sup": float(s["W_sup"].max()),
            "reassembly_residual_sup": float(s["reassembly"].max())}
    run = Run("decompose", args, cfg, {"reassembly": 1e-8})
    for name in args.dump or ():
        if name not in ("R", "J", "P", "W"):
            raise UsageError(f"cannot dump {name!r}; choose from R, J, P, W")
        vals = s[name]
        run.add(f"decompose_{name}.csv", csv_text(("i0", "i1", "i2", "i3", "component", "value"),
                                                  field_rows(lat.shape, vals, tensor_components(vals.shape[1:]))))
    run.flush(run.report(body, {"geometry": bg.name, "sites": list(lat.shape)}))
    log.info("R in [%.9g, %.9g], J in [%.9g, %.9g], sup|W| = %.3e, reassembly %.3e",
             body["R"]["min"], body["R"]["max"], body["J"]["min"], body["J"]["max"], body["W_sup"],
             body["reassembly_residual_sup"])
    return EXIT_OK


class _CorruptedBackground:
    """Proxy returning NaN metric entries at one chart point (negative tests)."""

    def __init__(self, bg, point: np.ndarray):
        self._bg = bg
        self._point = point

    def __getattr__(self, name):
        return getattr(self._bg, name)

    def metric(self, x):
        g = self._bg.metric(x)
        hit = np.all(np.isclose(x, self._point[None, :], rtol=0.0, atol=1e-12), axis=1)
        g[hit] = np.nan
        return g


def cmd_verify(args) -> int:
    cfg = resolve(args)
    bg = background(cfg)
    if args.inject_nan is not None:
        lat = bg.lattice(cfg["sites"])
        idx = lat.sample(args.samples, cfg["seed"])
        if not 0 <= args.inject_nan < len(idx):
            raise UsageError(f"--inject-nan takes a sample number below {len(idx)}")
        bg = _CorruptedBackground(bg, lat.points[idx[args.inject_nan]])
    rep = suites.run(bg, args.suite, cfg["sites"], args.samples, cfg["seed"], args.tol,
                     quadrature=not args.no_quadrature)
    run = Run("verify", args, cfg, {"identity_default": args.tol, "stencil_factor": suites.STENCIL_FACTOR})
    run.flush(run.report({"suite": rep["suite"], "pass": rep["pass"], "failed": rep["failed"],
                          "checks": rep["checks"]}, rep["lattice"]))
    for rec in rep["checks"]:
        if not rec["pass"]:
            log.error("FAIL %s: residual %.3e above tolerance %.3e", rec["identity"], rec["residual_sup"],
                      rec["tolerance"])
    return EXIT_OK if rep["pass"] else EXIT_FAIL


def _gammas(args, yamabe: float) -> tuple:
    if args.gammas is None:
        return (0.0, 0.0, -6.0, -0.5, -2.0 * yamabe)
    parts = [float(v) for v in args.gammas.split(",")]
    if len(parts) != 5:
        raise UsageError("--gammas takes five comma separated numbers")
    return tuple(parts)


def cmd_functional(args) -> int:
    cfg = resolve(args)
    bg = background(cfg)
    lat = bg.lattice(cfg["sites"])
    geo = conformal.LatticeGeometry.build(Calc(bg, depth=2), lat)
    rng = np.random.default_rng(cfg["seed"])
    w = bg.random_function(rng, args.amplitude) if args.amplitude > 0 else (lambda y: np.zeros(len(y)))
    wf = conformal.ConformalFactorField(w, geo)
    yamabe = args.yamabe if args.yamabe is not None else SPHERE_YAMABE
    rep = conformal.phi(wf, _gammas(args, yamabe))
    body = {"geometry": bg.describe(), "amplitude": args.amplitude, "yamabe": yamabe, "report": rep.to_dict()}
    run = Run("functional", args, cfg, {})
    run.flush(run.report(body, geo.describe()))
    log.info("Phi = %.12g", rep.Phi)
    return EXIT_OK


def _solve_checks(res, tol: float) -> dict:
    c = res.checks
    return {"J_positive": bool(c["J_positive"]), "keyPDE": bool(c["keyPDE_ok"]),
            "keymu": bool(c["keymu_ok"]),
            "el_residual": bool(res.el_residual_sup < 1e-6),
            "unit_volume": bool(abs(res.volume_hat - 1.0) < 1e-8),
            "mu_integral_identity": bool(c["mu_integral_identity"]["rel_diff"] < tol)}


def cmd_solve(args) -> int:
    cfg = resolve(args)
    cfg["seed"] = args.seed  # None selects the deterministic cosine start
    yamabe = args.yamabe if args.yamabe is not None else SPHERE_YAMABE
    config = SolverConfig(geometry=cfg["geometry"], reduction=args.reduction, yamabe=yamabe,
                          gammas=_gammas(args, yamabe) if args.gammas else None, max_iters=args.max_iters,
                          grad_tol=args.tol if args.tol is not None else 1e-7, nodes=args.nodes,
                          extent=cfg["extent"], seed=args.seed)
    trace_rows = []
    res = maximize_phi(config, on_step=lambda *row: trace_rows.append(row))
    checks = _solve_checks(res, 1e-6)
    cross = None
    if res.problem.name.startswith("s3xs1") and res.problem.dims == 1 and not args.no_cross_check:
        cross = four_d_phi(res.problem, res.coefficients, res.gammas)
        cross.pop("report")
        checks["four_d_phi"] = bool(cross["rel_diff"] < 1e-6)
    body = {"result": res.summary(), "pass": checks, "four_d_cross_check": cross}
    run = Run("solve", args, cfg, {"grad_tol": config.grad_tol, "el_residual": 1e-6, "volume": 1e-8,
                                   "keyPDE": 1e-6, "mu_identity": 1e-6, "four_d_phi": 1e-6})
    run.add("solve_trace.csv", csv_text(("iter", "phi", "grad_norm", "step"), trace_rows))
    pb = res.problem
    w = res.w_star.reshape(pb.shape)
    shape4 = pb.shape if pb.dims == 4 else (1, 1, 1) + pb.shape
    run.add("solve_w.csv", csv_text(("i0", "i1", "i2", "i3", "component", "value"),
                                    field_rows(shape4, w.reshape(-1, 1), ["w"])))
    run.flush(run.report(body, pb.describe()))
    if not res.converged:
        log.error("not converged after %d iterations: grad %.3e", res.iterations, res.grad_norm)
        return EXIT_NOT_CONVERGED
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        log.error("converged, but derived checks failed: %s", ", ".join(failed))
        return EXIT_CHECKS
    log.info("converged in %d iterations: Phi = %.12g, mu = %.12g", res.iterations, res.phi_value, res.mu)
    return EXIT_OK


def cmd_certify(args) -> int:
    if args.chi is None or args.tau is None or args.yamabe is None:
        raise UsageError("certify needs --chi, --tau and --yamabe")
    rep = conformal.certify(args.chi, args.tau, args.yamabe)
    rep["asd_index"] = str(asd_index(args.chi, args.tau))
    run = Run("certify", args, {"seed": None}, {})
    text = run.report({"chi": args.chi, "tau": args.tau, "yamabe": args.yamabe, "certificate": rep}, None)
    print(rep["verdict"])
    if args.out is not None:
        run.flush(text)
    return EXIT_OK if rep["unobstructed"] else EXIT_NEGATIVE


def cmd_invariants(args) -> int:
    cfg = resolve(args)
    bg = background(cfg)
    lat = bg.lattice(cfg["sites"])
    calc = Calc(bg, depth=2)
    geo = conformal.LatticeGeometry.build(calc, lat)
    inv = conformal.total_invariants(geo)
    body = {"geometry": bg.describe(), "invariants": inv, "adams": conformal.adams_check(inv["totalQ"])}
    if bg.euler_characteristic is not None:
        body["expected"] = {"chi": bg.euler_characteristic, "tau": bg.signature,
                            "totalQ": 2.0 * math.pi ** 2 * (2 * bg.euler_characteristic + 3 * bg.signature)}
    if not args.no_eigen:
        lam = conformal.conformal_laplacian_lambda1(calc, lat)
        body["lambda1"] = {k: lam[k] for k in ("lambda1", "residual", "iterations", "positive")}
    run = Run("invariants", args, cfg, {"eigen_residual": 1e-8})
    run.flush(run.report(body, geo.describe()))
    log.info("totalQ = %.10g, chi = %.8f, tau = %.3e", inv["totalQ"], inv["chern_gauss_bonnet_chi_estimate"],
             inv["signature_estimate"])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--geometry", help=f"one of {', '.join(GEOMETRIES)}")
    common.add_argument("--sites", help="lattice sites per axis: N or N0,N1,N2,N3")
    common.add_argument("--extent", type=float, help="chart period where the model has one")
    common.add_argument("--epsilon", type=float, help="perturbation size of perturbed_flat")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--out", help="directory for JSON and CSV outputs (default: JSON on stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="asdlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"asdlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", parents=[common], help="curvature decomposition summary")
    d.add_argument("--dump", action="append", help="write a field as CSV (R, J, P or W); repeatable")
    d.add_argument("--tol", type=float, default=1e-8)
    d.set_defaults(func=cmd_decompose)

    v = sub.add_parser("verify", parents=[common], help="run identity suites")
    v.add_argument("--suite", default="all", choices=suites.SUITES + ("all",))
    v.add_argument("--samples", type=int, default=6, help="sampled lattice sites per suite")
    v.add_argument("--tol", type=float, default=1e-6)
    v.add_argument("--no-quadrature", action="store_true", help="skip the lattice integral checks")
    v.add_argument("--inject-nan", type=int, metavar="K", help="corrupt the metric at sampled site K")
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("functional", parents=[common], help="evaluate the functionals on a random factor")
    f.add_argument("--amplitude", type=float, default=0.2)
    f.add_argument("--gammas")
    f.add_argument("--yamabe", type=float)
    f.add_argument("--tol", type=float)
    f.set_defaults(func=cmd_functional)

    s = sub.add_parser("solve", parents=[common], help="maximize the functional")
    s.add_argument("--reduction", default="circle-symmetric")
    s.add_argument("--nodes", type=int)
    s.add_argument("--max-iters", type=int, default=2000)
    s.add_argument("--gammas")
    s.add_argument("--yamabe", type=float)
    s.add_argument("--tol", type=float, help="gradient tolerance (default 1e-7)")
    s.add_argument("--no-cross-check", action="store_true")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("certify", parents=[common], help="topological unobstructedness test")
    c.add_argument("--chi", type=int)
    c.add_argument("--tau", type=int)
    c.add_argument("--yamabe", type=float)
    c.add_argument("--tol", type=float)
    c.set_defaults(func=cmd_certify)

    i = sub.add_parser("invariants", parents=[common], help="total Q, Euler and signature estimates")
    i.add_argument("--no-eigen", action="store_true")
    i.add_argument("--tol", type=float)
    i.set_defaults(func=cmd_invariants)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    geometry.set_threads(args.threads)
    args._started = time.time()
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except conformal.HypothesisError as exc:
        print(f"hypothesis violated: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteFieldError, FloatingPointError, DegenerateMetricError) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        geometry.set_threads(1)


if __name__ == "__main__":
    sys.exit(main())
