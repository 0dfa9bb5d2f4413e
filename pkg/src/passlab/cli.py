"""Command-line front end.

Every command reads a scenario, runs the relevant checks and writes a JSON
report (plus CSV artifacts) into ``--out``. Exit status: 0 when every
certificate holds, 2 when one fails, 1 on bad input.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from . import __version__
from .abstraction import (
    build_truncated_ts,
    empirical_bisim_trace_check,
    feasibility_check,
    solve_min_tau,
)
from .analysis import (
    CertificateError,
    build_delta_iss_certificate,
    compute_detectability,
    estimate_gain_gamma,
    spot_check_delta_iss,
    verify_passivity_indices,
)
from .closedloop import (
    ClosedLoopIndices,
    FeedbackConfig,
    check_feasible,
    closed_loop_aggregate,
    compose_indices,
    dissipation_residual_check,
    feasible_nu_rho,
    simulate_closed_loop,
    ultimate_bound,
    zero_input_decay_margin,
)
from .degradation import degrade_sampled, degrade_symbolic, tau_max
from .scenario import Scenario, ScenarioError, load
from .systems import QuadraticStorage, SupplyRate, zoh_discretize

COMMANDS = ("verify", "abstract", "degrade", "closedloop", "simulate", "bound", "report")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _write_with(path: Path, writer) -> None:
    """Atomically produce ``path`` via ``writer(temp_path)``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_atomic(path: Path, text: str) -> None:
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
    _write_with(path, write)


def certificate(name, holds, margin, **details):
    return {"name": name, "holds": bool(holds), "margin": margin, "details": details}


class Run:
    """Shared state of one invocation, so ``report`` computes each piece once."""

    def __init__(self, sc: Scenario, args):
        self.sc = sc
        self.args = args
        self.out = Path(args.out)
        self.seed = args.seed
        self.trials = args.trials
        self._cache = {}

    def once(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def tol(self):
        return self.sc.tolerances

    def gains(self):
        def compute():
            out = {}
            for side, model in (("plant", self.sc.plant), ("controller", self.sc.controller)):
                try:
                    out[side] = estimate_gain_gamma(model, safety=self.tol["gain_safety"])
                except CertificateError as exc:
                    out[side] = exc
            return out
        return self.once("gains", compute)

    def gamma(self, side):
        g = self.gains()[side]
        if isinstance(g, Exception):
            raise CertificateError(f"{side} gain: {g}")
        return g.gamma

    def indices(self) -> ClosedLoopIndices:
        sc = self.sc
        return self.once("indices", lambda: compose_indices(
            (sc.nu1, sc.rho1, self.gamma("plant")), (sc.nu2, sc.rho2, self.gamma("controller")),
            sc.params(), sc.m, sc.regularity, sc.free_params))

    def operating_point(self):
        """Closed-loop ``(nu_c, rho_c)``: flags, else the sweep point with the largest ``rho_c``."""
        idx = self.indices()
        nu_c = self.args.nu_c
        if nu_c is None:
            sweep = feasible_nu_rho(idx)
            nu_c = max(sweep, key=lambda f: (f.rho_c_max, -f.nu_c)).nu_c
        return check_feasible(idx, nu_c, self.args.rho_c)

    def sampled_loop(self):
        sc = self.sc
        return closed_loop_aggregate(zoh_discretize(sc.plant, sc.tau),
                                     zoh_discretize(sc.controller, sc.tau))

    def simulation(self, mode="symbolic"):
        sc = self.sc

        def run():
            cfg = FeedbackConfig(sc.plant, sc.symbolic_model(), sc.x1_0, sc.xc_0, sc.K,
                                 w1=sc.w1, w2=sc.w2)
            return simulate_closed_loop(cfg, mode=mode, storages=(sc.V1, sc.V2))
        return self.once(("sim", mode), run)


def cmd_verify(run: Run):
    sc, tol = run.sc, run.tol
    certs = []
    section = {}
    for side, model, V, nu, rho in (("plant", sc.plant, sc.V1, sc.nu1, sc.rho1),
                                    ("controller", sc.controller, sc.V2, sc.nu2, sc.rho2)):
        verdict = verify_passivity_indices(model, V, nu, rho, tol=tol["psd"])
        certs.append(certificate(f"{side}_passivity", verdict.holds, -verdict.max_eigenvalue,
                                 nu=nu, rho=rho, max_eigenvalue=verdict.max_eigenvalue))
        g = run.gains()[side]
        if isinstance(g, Exception):
            certs.append(certificate(f"{side}_gain", False, -math.inf, error=str(g)))
        else:
            certs.append(certificate(f"{side}_gain", True, g.margin, gamma=g.gamma,
                                     peak=g.gamma_peak, peak_frequency=g.peak_frequency,
                                     safety=g.safety))
            section[f"gamma_{side}"] = g.gamma
    try:
        cert = build_delta_iss_certificate(sc.controller, safety=tol["delta_iss_safety"])
        tau = sc.tau if sc.tau > 0 else 0.1
        slack = spot_check_delta_iss(sc.controller, cert, tau=tau,
                                     trials=int(tol["delta_iss_trials"]), seed=run.seed)
        certs.append(certificate("controller_delta_iss", slack >= -tol["psd"], slack,
                                 c=cert.c, a=cert.a, b=cert.b))
        section["delta_iss"] = {"c": cert.c, "a": cert.a, "b": cert.b}
    except CertificateError as exc:
        certs.append(certificate("controller_delta_iss", False, -math.inf, error=str(exc)))
    if sc.tau > 0:
        N0 = int(tol["detectability_N0"])
        loop = run.sampled_loop()
        det0 = compute_detectability(loop, N0, inputs="zero")
        det_any = compute_detectability(loop, N0, inputs="any")
        certs.append(certificate("closed_loop_detectability", det0.valid, det0.kappa, N0=N0,
                                 inputs="zero", kappa_any_input=det_any.kappa,
                                 model="unquantized sampled loop"))
    return section, certs


def cmd_abstract(run: Run):
    sc, tol = run.sc, run.tol
    params = sc.params()
    certs = []
    section = {"params": {"tau": params.tau, "mu": params.mu, "eta": params.eta,
                          "eps": params.eps}}
    try:
        cert = build_delta_iss_certificate(sc.controller, safety=tol["delta_iss_safety"])
    except CertificateError as exc:
        certs.append(certificate("abstraction_feasibility", False, -math.inf, error=str(exc)))
    else:
        feas = feasibility_check(cert, params)
        mt = solve_min_tau(cert, params.eps, params.mu, params.eta)
        certs.append(certificate("abstraction_feasibility", feas.feasible, feas.margin,
                                 c=cert.c, a=cert.a, b=cert.b,
                                 min_tau=mt.tau if mt.feasible else None))
    sm = sc.symbolic_model()
    trials = run.trials if run.trials is not None else int(tol["bisim_trials"])
    rep = empirical_bisim_trace_check(sc.controller, sm, params.eps,
                                      horizon=int(tol["bisim_horizon"]), trials=trials,
                                      seed=run.seed)
    details = {"max_deviation": rep.max_deviation, "trials": rep.trials, "horizon": rep.horizon}
    if rep.counterexample is not None:
        details["counterexample"] = {k: v for k, v in rep.counterexample.items()
                                     if k in ("trial", "step", "deviation")}
    certs.append(certificate("abstraction_trace_check", rep.holds,
                             params.eps - rep.max_deviation, **details))
    if run.args.export_ts:
        ts = build_truncated_ts(sm, sc.state_box, sc.input_box)
        path = run.out / "controller_ts.csv"
        _write_with(path, ts.write_csv)
        section["transition_system"] = {"states": ts.n_states, "labels": ts.n_labels,
                                        "transitions": ts.n_transitions, "csv": path.name}
    return section, certs


def cmd_degrade(run: Run):
    sc = run.sc
    fp = sc.free_params
    g1, g2 = run.gamma("plant"), run.gamma("controller")
    plant = degrade_sampled(sc.nu1, sc.rho1, g1, sc.tau, fp.lambda1)
    ctrl_s = degrade_sampled(sc.nu2, sc.rho2, g2, sc.tau, fp.lambda1)
    ctrl_q = degrade_symbolic(sc.nu2, sc.rho2, g2, None, sc.m, sc.regularity, fp,
                              tau=sc.tau, mu=sc.mu, eps=sc.eps)
    section = {
        "plant_sampled": {"nu": plant.nu, "rho": plant.rho, "tau_nu": plant.scaled_nu,
                          "tau_rho": plant.scaled_rho},
        "controller_sampled": {"nu": ctrl_s.nu, "rho": ctrl_s.rho},
        "controller_symbolic": {"nu": ctrl_q.nu, "rho": ctrl_q.rho, "alpha": ctrl_q.alpha,
                                "tau_nu": ctrl_q.scaled_nu, "tau_rho": ctrl_q.scaled_rho},
        "gamma": {"plant": g1, "controller": g2},
        "free_params": fp.as_dict(),
        "regularity": {"L": sc.regularity.L, "theta": sc.regularity.theta},
    }
    certs = []
    for side, nu, rho, g in (("plant", sc.nu1, sc.rho1, g1), ("controller", sc.nu2, sc.rho2, g2)):
        if nu > 0 and rho > 0:
            tmax = tau_max(nu, rho, g)
            section[f"{side}_tau_max"] = tmax
            certs.append(certificate(f"{side}_tau_max", sc.tau < tmax, tmax - sc.tau,
                                     tau=sc.tau, tau_max=tmax))
    certs.append(certificate("controller_symbolic_indices", ctrl_q.nu > 0 and ctrl_q.rho > 0,
                             min(ctrl_q.nu, ctrl_q.rho), nu=ctrl_q.nu, rho=ctrl_q.rho,
                             alpha=ctrl_q.alpha))
    return section, certs


def _indices_dict(idx: ClosedLoopIndices):
    return {k: getattr(idx, k) for k in ("nu1_bar", "rho1_bar", "nu2_hat", "rho2_hat",
                                         "alpha_hat", "nu2_bar", "rho2_bar", "alpha2_bar")}


def reference_deviations(sc: Scenario, idx: ClosedLoopIndices):
    """Compare computed indices with printed reference values."""
    rows = []
    computed = _indices_dict(idx)
    for name in sorted(sc.reference):
        if name not in computed:
            continue
        printed, value = sc.reference[name], computed[name]
        gap = abs(value - printed) / max(abs(printed), 1e-12)
        rows.append({"name": name, "reference": printed, "computed": value, "rel_gap": gap,
                     "deviates": gap > sc.tolerances["reference_rtol"]})
    return rows


def cmd_closedloop(run: Run):
    idx = run.indices()
    decay = zero_input_decay_margin(idx)
    point = run.operating_point()
    sweep = feasible_nu_rho(idx)

    def write(path):
        with open(path, "w", newline="") as fh:
            fh.write("nu_c,rho_c_max,psd_margin_1,psd_margin_2\n")
            for f in sweep:
                fh.write("%.17g,%.17g,%.17g,%.17g\n" % (f.nu_c, f.rho_c_max, *f.psd_margins))
    _write_with(run.out / "feasible_region.csv", write)
    section = {
        "indices": _indices_dict(idx),
        "decay_margin": {"margin": decay.margin, "nu2_plus_rho1": decay.plant_output_side,
                         "nu1_plus_rho2": decay.controller_output_side},
        "operating_point": {"nu_c": point.nu_c, "rho_c": point.rho_c,
                            "rho_c_max": point.rho_c_max, "psd_margins": list(point.psd_margins)},
        "feasible_region_csv": "feasible_region.csv",
        "reference_deviations": reference_deviations(run.sc, idx),
    }
    certs = [
        certificate("zero_input_decay", decay.margin > 0, decay.margin,
                    nu2_plus_rho1=decay.plant_output_side,
                    nu1_plus_rho2=decay.controller_output_side),
        certificate("closed_loop_indices", point.feasible, min(point.psd_margins),
                    nu_c=point.nu_c, rho_c=point.rho_c, rho_c_max=point.rho_c_max),
    ]
    return section, certs


def cmd_simulate(run: Run):
    sc = run.sc
    mode = run.args.mode
    trace = run.simulation(mode)
    idx = run.indices()
    point = run.operating_point()
    res = dissipation_residual_check(trace, idx, sc.V1, sc.V2, point.nu_c, point.rho_c)
    qerr = float(trace.quantization_error().max())
    _write_with(run.out / "trace.csv", trace.write_csv)
    half = len(trace.x1) // 2
    section = {
        "mode": mode,
        "steps": trace.steps,
        "trace_csv": "trace.csv",
        "sup_x1": float(np.abs(trace.x1).max()),
        "sup_xc": float(np.abs(trace.xc).max()),
        "sup_x1_second_half": float(np.abs(trace.x1[half:]).max()),
        "final_x1": trace.x1[-1],
        "final_xc": trace.xc[-1],
        "worst_residual": res.worst,
        "nu_c": point.nu_c,
        "rho_c": point.rho_c,
    }
    certs = [
        certificate("dissipation_residual", res.worst <= run.tol["residual"], -res.worst,
                    nu_c=point.nu_c, rho_c=point.rho_c, alpha2_bar=idx.alpha2_bar),
        certificate("bounded_trajectory", bool(np.all(np.isfinite(trace.x1))
                                               and np.all(np.isfinite(trace.xc))),
                    -section["sup_x1"]),
    ]
    if mode == "symbolic":
        certs.append(certificate("loop_quantization_error", qerr <= sc.mu / 2 * (1 + 1e-12),
                                 sc.mu / 2 - qerr, max_error=qerr))
    return section, certs


def cmd_bound(run: Run):
    sc, tol = run.sc, run.tol
    idx = run.indices()
    decay = zero_input_decay_margin(idx)
    N0 = int(tol["detectability_N0"])
    det = compute_detectability(run.sampled_loop(), N0, inputs="zero")
    V = QuadraticStorage(block_diag(sc.V1.P, sc.V2.P))
    B2 = float(np.linalg.norm(np.concatenate([sc.x1_0, sc.xc_0])))
    section = {"N0": N0, "kappa": det.kappa, "B2": B2, "decay_margin": decay.margin,
               "model": "zero input; detectability of the unquantized sampled loop"}
    nonzero_w = bool(np.any(sc.w1) or np.any(sc.w2))
    try:
        if nonzero_w:
            raise CertificateError("bound is certified for zero exogenous input only")
        supply = SupplyRate(nu=math.inf, rho=sc.tau * decay.margin, alpha=idx.alpha2_bar)
        ub = ultimate_bound(supply, det, V, 0.0, B2)
    except CertificateError as exc:
        return section, [certificate("ultimate_bound", False, -math.inf, error=str(exc))]
    trace = run.simulation("symbolic")
    sup_state = float(np.linalg.norm(np.hstack([trace.x1, trace.xc]), axis=1).max())
    section.update({"D": ub.D, "r": ub.r, "v": ub.v, "window": ub.window,
                    "sup_state_norm": sup_state})
    certs = [certificate("ultimate_bound", True, ub.D - ub.r, D=ub.D, r=ub.r),
             certificate("ultimate_bound_simulation", sup_state <= ub.D, ub.D - sup_state,
                         sup_state_norm=sup_state, D=ub.D)]
    return section, certs


HANDLERS = {
    "verify": cmd_verify,
    "abstract": cmd_abstract,
    "degrade": cmd_degrade,
    "closedloop": cmd_closedloop,
    "simulate": cmd_simulate,
    "bound": cmd_bound,
}


def _guarded(handler, run):
    try:
        return handler(run)
    except CertificateError as exc:
        return {"error": str(exc)}, [certificate(handler.__name__[4:], False, -math.inf,
                                                 error=str(exc))]


def execute(command: str, run: Run) -> dict:
    names = [c for c in COMMANDS if c != "report"] if command == "report" else [command]
    report = {"command": command, "scenario": run.sc.name, "seed": run.seed,
              "version": __version__}
    certs = []
    for name in names:
        section, c = _guarded(HANDLERS[name], run)
        report[name] = section
        certs.extend(c)
    report["certificates"] = certs
    report["all_hold"] = all(c["holds"] for c in certs)
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="passlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"passlab {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file, or the name of a shipped scenario")
    p.add_argument("--out", default=".", help="directory for the report and artifacts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None,
                   help="random trials of the trace-level bisimulation check")
    p.add_argument("--nu-c", type=float, default=None, help="closed-loop input index")
    p.add_argument("--rho-c", type=float, default=None, help="closed-loop output index")
    p.add_argument("--mode", choices=("symbolic", "sampled"), default="symbolic",
                   help="controller model used by simulate")
    p.add_argument("--export-ts", action="store_true",
                   help="write the truncated controller transition system as CSV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    if args.trials is not None and args.trials < 1:
        print("error: --trials must be positive", file=sys.stderr)
        return 1
    try:
        sc = load(args.scenario)
        report = execute(args.command, Run(sc, args))
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    write_atomic(Path(args.out) / f"{args.command}.json", text)
    for c in report["certificates"]:
        print(f"{'PASS' if c['holds'] else 'FAIL'}  {c['name']}")
    return 0 if report["all_hold"] else 2


if __name__ == "__main__":
    sys.exit(main())
