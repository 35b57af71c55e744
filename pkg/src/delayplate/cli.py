"""Command line entry point: ``delayplate <subcommand> --config PATH``.

Exit codes: 0 pass, 1 experiment-level fail, 2 configuration error,
3 numerical abort.  Every subcommand writes its canonical configuration,
a text report and a CSV twin into the output directory; rerunning the
embedded config.ini reproduces the directory byte for byte.

The basis and kernel cache directory is taken from $DELAYPLATE_CACHE
(no caching when unset).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .dynamics import BlowUp, NoConvergence

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
CACHE_ENV = "DELAYPLATE_CACHE"


def cache_dir():
    return os.environ.get(CACHE_ENV) or None


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


class Report:
    """Plain-text report of key = value lines and PASS/FAIL lines, with a CSV twin."""

    def __init__(self, title: str):
        self.lines = [f"# {title}"]
        self.rows: list[tuple[str, str]] = []
        self.failed = False

    def value(self, key: str, v):
        self.lines.append(f"{key} = {_fmt(v)}")
        self.rows.append((key, _fmt(v)))

    def verdict(self, name: str, ok: bool, detail: str = ""):
        ok = bool(ok)
        self.failed |= not ok
        self.lines.append(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        self.rows.append((f"verdict:{name}", "pass" if ok else "fail"))

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def csv(self) -> str:
        return "key,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows)

    def write(self, out: Path, stem: str):
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.txt").write_text(self.text())
        (out / f"{stem}.csv").write_text(self.csv())


def _prepare(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())


def _perturbed_pair(sc, rel: float, direction: int):
    """(x1, x2): the configured initial state and a perturbation of relative
    H-size ``rel`` along a seeded random direction (same smoothness as the
    random initial shape)."""
    st = sc.initial()[0]
    a0, v0 = st.a, st.adot
    rng = np.random.default_rng([sc.config.seed, direction])
    lam, V = np.linalg.eigh(sc.basis.K)
    xi = rng.standard_normal(sc.N) * np.sqrt(lam[0] / lam)
    d = V @ xi
    size = np.sqrt(a0 @ sc.basis.K @ a0 + v0 @ v0)
    d *= rel * size / np.sqrt(d @ sc.basis.K @ d) if size > 0 else 0.0
    return (a0, v0), (a0 + d, v0.copy())


# -- subcommands ------------------------------------------------------------

def cmd_simulate(cfg, out: Path) -> int:
    from .scenario import simulate, write_summary

    _prepare(cfg, out)
    try:
        art = simulate(cfg, out, cache_dir())
    except BlowUp as exc:
        st = exc.state
        diag = {"error": str(exc), "t": st.t if st else float("nan"),
                "step": st.step if st else -1,
                "norm_a": float(np.linalg.norm(st.a)) if st else float("nan")}
        write_summary(out / "blowup.txt", diag)
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    for k, v in art.summary.items():
        print(f"{k} = {_fmt(v)}")
    return EXIT_PASS


def _defect_kinds(cfg, sc_basis, kind, grid):
    from .functionals import make_averages, make_modes, make_nodes

    if kind == "modes":
        return [make_modes(sc_basis, int(n)) for n in grid]
    build = make_nodes if kind == "nodes" else make_averages
    return [build(sc_basis, float(h)) for h in grid]


def cmd_defect(cfg, out: Path) -> int:
    from .basis import PlateDomain, cached_basis
    from .functionals import UnderResolved, defect_scaling_study

    _prepare(cfg, out)
    d = cfg["defect"]
    dom = cfg["domain"]
    domain = PlateDomain(dom["Lx"], dom["Ly"])
    rep = Report(f"completeness defect study ({d['kind']})")
    rep.value("weak_norm", d["weak_norm"])
    factory = lambda D, nx, ny: cached_basis(D, nx, ny, cache_dir=cache_dir())
    if d["kind"] == "modes":
        b = cfg["basis"]
        basis = factory(domain, b["nx"], b["ny"])
        study = defect_scaling_study("modes", d["grid"], domain, factory, weak_norm=d["weak_norm"],
                                     eta=d["eta"], basis=basis)
        rep.value("max_abs_error_vs_eigenvalue_oracle", study.exact_error)
        rep.verdict("modes defect equals the eigenvalue oracle", study.exact_error <= 1e-10,
                    f"max error {study.exact_error:.3e}")
        rep.value("loglog_slope", study.slope)
    else:
        try:
            study = defect_scaling_study(d["kind"], d["grid"], domain, factory, saturation=d["saturation"],
                                         weak_norm=d["weak_norm"], eta=d["eta"])
            saturated = True
        except UnderResolved as exc:
            study = exc.args[1]
            saturated = False
        rep.value("loglog_slope", study.slope)
        rep.verdict("basis saturation (doubled basis changes eps by <= 5%)", saturated)
        if d["weak_norm"] == "l2":
            rep.verdict("slope 2.0 +- 0.3", abs(study.slope - 2.0) <= 0.3, f"slope {study.slope:.4f}")
    (out / "defect_table.csv").write_text(study.table())
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_FAIL if rep.failed else EXIT_PASS


def cmd_determine(cfg, out: Path) -> int:
    from .functionals import determining_test
    from .longtime import difference_experiment
    from .scenario import setup

    _prepare(cfg, out)
    sc = setup(cfg, cache_dir())
    d = cfg["determine"]
    x1, x2 = _perturbed_pair(sc, d["perturbation"], 0)
    grid = [g for g in d["grid"] if d["kind"] != "modes" or int(g) <= sc.N]
    rep = Report(f"determining functionals ({d['kind']})")
    lines = ["param,m,verdict,t_functional,t_state"]
    verdicts = []
    pair = difference_experiment(sc, x1, x2, sc.n_steps, cfg["output"]["stride"], fit=False)
    for g, fs in zip(grid, _defect_kinds(cfg, sc.basis, d["kind"], grid)):
        r = determining_test(fs, sc, x1, x2, tol=d["tolerance"], result=pair)
        verdicts.append(r.verdict)
        rep.value(f"verdict[{_fmt(g)}]", r.verdict)
        lines.append(f"{_fmt(g)},{fs.m},{r.verdict},{_fmt(r.t_functional)},{_fmt(r.t_state)}")
    (out / "determine_table.csv").write_text("\n".join(lines) + "\n")
    rep.verdict("richest set consistent with determining",
                bool(verdicts) and verdicts[-1] in ("consistent with determining", "identical trajectories"))
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_FAIL if rep.failed else EXIT_PASS


def cmd_quasi(cfg, out: Path) -> int:
    from .longtime import difference_experiment, lipschitz_envelope
    from .scenario import setup

    _prepare(cfg, out)
    sc = setup(cfg, cache_dir())
    q = cfg["quasi"]
    n_steps = sc.n_steps if q["t_end"] == cfgmod.AUTO else int(np.ceil(q["t_end"] / sc.dt - 1e-9))
    rep = Report("quasi-stability difference experiment")
    lines = ["direction,gamma,C,C_q,rms_fit_error,lipschitz_a,success"]
    stride = cfg["output"]["stride"]
    for j in range(q["directions"]):
        x1, x2 = _perturbed_pair(sc, q["perturbation"], j)
        res = difference_experiment(sc, x1, x2, n_steps, stride)
        H2 = res.series("H2")
        if q["perturbation"] == 0.0:
            rep.value(f"max_H2[{j}]", float(np.max(np.abs(H2))))
            rep.verdict(f"identical pair gives zero difference [{j}]", np.all(H2 == 0.0))
            continue
        fit = res.fit
        C, a = lipschitz_envelope(res.series("t"), H2)
        lines.append(f"{j},{_fmt(fit.gamma)},{_fmt(fit.C)},{_fmt(fit.C_q)},{_fmt(fit.rms_fit_error)},"
                     f"{_fmt(a)},{_fmt(fit.success)}")
        rep.value(f"gamma[{j}]", fit.gamma)
        rep.value(f"C_q[{j}]", fit.C_q)
        rep.value(f"rms_fit_error[{j}]", fit.rms_fit_error)
        rep.verdict(f"gamma > 0 and RMS <= 10% of peak [{j}]", fit.success and fit.rms_fit_error <= 0.1)
        rep.verdict(f"finite Lipschitz exponent [{j}]", np.isfinite(a), f"a = {a:.4g}")
        with open(out / f"difference_{j}.csv", "w") as fh:
            fh.write("t,E_z,low_norm,history_norm\n")
            for r in res.records:
                fh.write(f"{_fmt(r.t)},{_fmt(r.E_z)},{_fmt(r.low_norm)},{_fmt(r.history_norm)}\n")
    (out / "quasi_fits.csv").write_text("\n".join(lines) + "\n")
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_FAIL if rep.failed else EXIT_PASS


def cmd_dimension(cfg, out: Path) -> int:
    from .dynamics import run
    from .longtime import NoScalingWindow, correlation_dimension, embed_states
    from .scenario import setup

    _prepare(cfg, out)
    sc = setup(cfg, cache_dir())
    d = cfg["dimension"]
    transient = 10 * sc.t_star if d["transient"] == cfgmod.AUTO else d["transient"]
    stride = cfg["output"]["stride"]
    n_tr = int(np.ceil(transient / sc.dt - 1e-9))
    rs = sc.start()
    run(rs, sc.stepper, n_tr, stride=n_tr + 1, record_first=False, record_last=False)
    A, Ad = [], []

    def grab(state, hist, rec, running):
        A.append(state.a.copy())
        Ad.append(state.adot.copy())

    run(rs, sc.stepper, stride * (d["samples"] - 1), stride=stride, on_record=grab,
        record_first=True, record_last=False)
    X = embed_states(np.array(A), np.array(Ad))
    rep = Report("correlation dimension (lower surrogate for the fractal dimension)")
    rep.value("samples", len(X))
    rep.value("transient", transient)
    try:
        est = correlation_dimension(X, n_radii=d["radii"])
    except NoScalingWindow as exc:
        rep.verdict("scaling window found", False, str(exc))
        rep.write(out, "report")
        print(rep.text(), end="")
        return EXIT_FAIL
    rep.value("dimension", est.dimension)
    rep.value("fit_error", est.fit_error)
    rep.value("r2", est.r2)
    rep.value("window", "none" if est.window is None else f"{est.window[0]:.6g}..{est.window[1]:.6g}")
    rep.verdict("scaling window found", True)
    with open(out / "correlation_sum.csv", "w") as fh:
        fh.write("r,C\n")
        for r, c in zip(est.radii, est.correlation):
            fh.write(f"{_fmt(r)},{_fmt(c)}\n")
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_PASS


def cmd_flowtrace(cfg, out: Path) -> int:
    from .basis import PlateDomain, cached_basis
    from .delaykernel import compute_tstar
    from .flowtrace import (TracePoint, eval_phi2, eval_phi2_t, interior_points, reduction_residual,
                            standing_mode)

    _prepare(cfg, out)
    f = cfg["flowtrace"]
    d, b, ph = cfg["domain"], cfg["basis"], cfg["physics"]
    domain = PlateDomain(d["Lx"], d["Ly"])
    basis = cached_basis(domain, b["nx"], b["ny"], cache_dir=cache_dir())
    U = ph["U"]
    ts = compute_tstar(U, domain)
    t = 2 * ts if f["t"] == cfgmod.AUTO else f["t"]
    _, V = np.linalg.eigh(basis.K)
    traj = standing_mode(basis, V[:, f["mode"]], f["omega"])
    pts = interior_points(basis, f["points"])
    nt, ns = f["n_theta"], f["n_s"]
    rep = Report("flow trace and reduction identity (synthetic standing mode)")
    rep.value("t_star", ts)
    rep.value("t", t)
    rows = ["x,y,z,t,phi2,phi2_t,residual"]
    res = res2 = None
    if f["z"] == 0.0:
        res = reduction_residual(pts, t, traj, U, ts, nt, ns)
        res2 = reduction_residual(pts, t, traj, U, ts, 2 * nt, 2 * ns)
    for i, (x, y) in enumerate(pts):
        p = TracePoint(x, y, f["z"], t)
        r = "" if res is None else _fmt(res.residual[i])
        rows.append(f"{_fmt(x)},{_fmt(y)},{_fmt(f['z'])},{_fmt(t)},{_fmt(eval_phi2(p, traj, U, ts, nt, ns))},"
                    f"{_fmt(eval_phi2_t(p, traj, U, ts, nt, ns))},{r}")
    (out / "flowtrace.csv").write_text("\n".join(rows) + "\n")
    if res is not None:
        r1, r2 = float(res.residual.max()), float(res2.residual.max())
        rep.value("max_residual", r1)
        rep.value("max_residual_doubled", r2)
        rep.verdict("reduction residual <= 1e-3", r1 <= 1e-3)
        rep.verdict("doubling quadrature improves the residual >= 2x (or reaches 1e-12)",
                    r2 <= 0.5 * r1 or r2 <= 1e-12)
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_FAIL if rep.failed else EXIT_PASS


def cmd_check(cfg, out: Path) -> int:
    from .checks import run_checks

    _prepare(cfg, out)
    rep = Report("invariant suite")
    for name, ok, detail in run_checks(cfg, cache_dir()):
        rep.verdict(name, ok, detail)
    rep.write(out, "report")
    print(rep.text(), end="")
    return EXIT_FAIL if rep.failed else EXIT_PASS


COMMANDS = {
    "simulate": cmd_simulate,
    "defect": cmd_defect,
    "determine": cmd_determine,
    "quasi": cmd_quasi,
    "dimension": cmd_dimension,
    "flowtrace": cmd_flowtrace,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayplate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario INI file")
        s.add_argument("--out", default=None, help="output directory (default: ./<command>-<config hash>)")
        s.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        s.add_argument("--seed", type=int, default=None, help="override [run] seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(run__seed=args.seed)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path(f"{args.command}-{cfg.hash()[:12]}")
    fn = COMMANDS[args.command]
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return fn(cfg, out)
        return fn(cfg, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (BlowUp, NoConvergence, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
