"""Command-line entry point: ``mastrack {run,synthesize,simulate,check,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 synthesis infeasible,
3 simulation divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .analysis import consensus_metrics, envelope_bound, envelope_check, summary_text
from .coupling import beta_bound, coupling_gains, weight_chain
from .dynamics import CommSchedule, Scenario, lyapunov_trace, simulate, write_trace_csv
from .errors import (CertificateError, ConfigError, DivergenceError, MastrackError, ScheduleError,
                     SynthesisInfeasible, TopologyError)
from .graph import has_directed_spanning_tree, is_nonsingular_m_matrix
from .plots import trace_charts, write_charts
from .synthesis import (GainSet, SynthesisOptions, audit_certificate, feedback_gain, rate_quantities,
                        synthesize_gains)

log = logging.getLogger("mastrack")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3


def _clean(obj):
    """JSON-safe copy: numpy to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_manifest(path: Path, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")


class Pipeline:
    """Shared stages of every subcommand, accumulating the run manifest."""

    def __init__(self, cfg: dict, command: str, seed: int | None = None):
        self.cfg = cfg
        self.command = command
        self.seed = cfg["simulation"]["seed"] if seed is None else seed
        self.parts = cfgmod.build(cfg, seed=self.seed)
        self.manifest: dict = {
            "tool": {"name": "mastrack", "version": __version__},
            "command": command,
            "seed": self.seed,
            "config": cfg,
            "protocol": {"leader_term_sign": self.parts.signs.leader,
                         "neighbor_term_sign": self.parts.signs.neighbor},
        }
        self.weights: dict = {}
        self.gains: GainSet | None = None
        self.rates = None

    # structural tests, coupling gains and weights
    def structure(self) -> None:
        rows = []
        for k, top in enumerate(self.parts.topologies, start=1):
            tree = has_directed_spanning_tree(top)
            mm = is_nonsingular_m_matrix(top.pinned)
            rows.append({"index": k, "spanning_tree": tree, "m_matrix": mm, **top.to_dict()})
            if not tree:
                self.manifest["topologies"] = rows
                raise TopologyError(f"topology {k} has no spanning tree rooted at the leader")
        self.manifest["topologies"] = rows
        for k, top in enumerate(self.parts.topologies, start=1):
            self.weights[k] = weight_chain(top, coupling_gains(top))
            rows[k - 1]["weights"] = self.weights[k].to_dict()
        bound = beta_bound(list(self.weights.values()))
        beta = self.cfg["synthesis"]["beta"]
        self.manifest["beta_bound"] = {"value": bound, "beta": beta, "admissible": beta <= bound}
        if beta > bound:
            log.warning("beta = %g exceeds the admissible bound %.4g", beta, bound)

    def _options(self) -> SynthesisOptions:
        s = self.cfg["synthesis"]
        return SynthesisOptions(max_iter=s["max_iter"], tol=s["tol"], best_effort=s["best_effort"],
                                observer_floor=s["observer_floor"],
                                observer_gain_cap=s["observer_gain_cap"])

    def fixture_gains(self, need_certificates: bool) -> GainSet | None:
        fx = self.cfg["synthesis"].get("fixture")
        if not fx:
            return None
        plant = self.parts.plant
        s = self.cfg["synthesis"]
        if "P1" not in fx or "P2" not in fx:
            if need_certificates:
                raise ConfigError("synthesis/fixture needs P1 and P2 here")
            return None
        P1 = np.asarray(fx["P1"], dtype=float)
        K = np.asarray(fx["K"], dtype=float) if "K" in fx else feedback_gain(P1, plant.B)
        if "G_obs" not in fx:
            raise ConfigError("synthesis/fixture needs G_obs")
        return GainSet(K=K, G_obs=np.asarray(fx["G_obs"], dtype=float), P1=P1,
                       P2=np.asarray(fx["P2"], dtype=float), beta=s["beta"], l=s["l"], rho=s["rho"],
                       A=plant.A, B=plant.B, C=plant.C, gamma_per_topology=self._gammas(),
                       source="fixture")

    def _gammas(self) -> dict:
        return {k: w.gamma for k, w in self.weights.items()}

    def synthesize(self) -> GainSet:
        gains = self.fixture_gains(need_certificates=True)
        if gains is None:
            s = self.cfg["synthesis"]
            p = self.parts.plant
            try:
                gains = synthesize_gains(p.A, p.B, p.C, s["beta"], s["l"], s["rho"], self._gammas(),
                                         self._options())
            except SynthesisInfeasible as exc:
                self.manifest["infeasibility"] = {"block": exc.block, "lambda_max": exc.lambda_max,
                                                  "message": str(exc)}
                if exc.best is not None:
                    self.manifest["gains"] = exc.best.to_dict()
                raise
        self.gains = gains
        self.manifest["gains"] = gains.to_dict()
        self.manifest["certified"] = gains.certified(self.cfg["synthesis"]["tol"])
        return gains

    def rate_report(self, comm: CommSchedule | None = None, v0: float = 1.0):
        if self.gains is None:
            return None
        comm = comm or self.parts.comm
        ok = (audit_certificate(self.gains.P1).positive_definite
              and audit_certificate(self.gains.P2).positive_definite)
        if not ok:
            self.manifest["rates"] = {"skipped": "certificates are not positive definite"}
            return None
        self.rates = rate_quantities(self.gains, list(self.weights.values()), comm, v0=v0,
                                     t_hat=self.cfg["synthesis"]["t_hat"])
        self.manifest["rates"] = self.rates.to_dict()
        return self.rates

    def scenario(self, K, G, comm: CommSchedule | None = None, horizon: float | None = None,
                 record_every: int | None = None) -> Scenario:
        sim = self.cfg["simulation"]
        parts = self.parts
        if horizon is not None or comm is not None:
            parts = cfgmod.build(self.cfg, seed=self.seed, horizon=horizon, comm=comm)
        return Scenario(parts.plant, parts.comm, parts.switching, K, G, parts.initial,
                        step=float(sim["step"]),
                        horizon=float(horizon if horizon is not None else sim["horizon"]),
                        signs=parts.signs,
                        record_every=int(record_every or sim["record_every"]),
                        gammas=self._gammas())

    def run_simulation(self, K, G, out: Path | None, plots: bool):
        sc = self.scenario(K, G)
        try:
            trace = simulate(sc)
        except DivergenceError as exc:
            self.manifest["divergence"] = str(exc)
            if out is not None and exc.trace is not None and len(exc.trace):
                out.mkdir(parents=True, exist_ok=True)
                write_trace_csv(exc.trace, out / "trace.csv")
            raise
        certs_ok = self.gains is not None and (audit_certificate(self.gains.P1).positive_definite
                                               and audit_certificate(self.gains.P2).positive_definite)
        tol = self.cfg["simulation"]["tolerance"]
        envelope = None
        if certs_ok:
            trace = lyapunov_trace(trace, self.weights, self.gains.P1, self.gains.P2)
            rates = self.rate_report(v0=float(trace.V[0]))
            if rates is not None:
                report = envelope_check(trace, rates, tol=tol)
                envelope = envelope_bound(trace.t, rates)
            else:
                report = consensus_metrics(trace, tol, self.parts.comm.w)
        else:
            report = consensus_metrics(trace, tol, self.parts.comm.w)
        self.manifest["convergence"] = report.to_dict()
        log.debug("%s", summary_text(report))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            outputs = []
            if self.cfg["output"]["trace"]:
                write_trace_csv(trace, out / "trace.csv")
                outputs.append("trace.csv")
            if plots:
                with np.errstate(over="ignore"):
                    written = write_charts(trace_charts(trace, envelope), out)
                outputs += [p.name for p in written]
            self.manifest["outputs"] = outputs
        return trace, report


# -- subcommands ------------------------------------------------------------

def cmd_check(pipe: Pipeline, args) -> int:
    pipe.structure()
    sim = pipe.cfg["simulation"]
    sc = pipe.scenario(np.zeros((pipe.parts.plant.m, pipe.parts.plant.n)),
                       np.zeros((pipe.parts.plant.n, pipe.parts.plant.z)))
    from .dynamics import _check_alignment
    _check_alignment(sc)
    pipe.manifest["check"] = {"status": "ok", "steps": int(round(sim["horizon"] / sim["step"]))}
    if pipe.cfg["synthesis"].get("fixture"):
        fx = pipe.fixture_gains(need_certificates=False)
        if fx is not None:
            pipe.manifest["fixture"] = fx.to_dict()
    print("check passed", file=sys.stderr if args.quiet else sys.stdout)
    return EXIT_OK


def cmd_synthesize(pipe: Pipeline, args) -> int:
    pipe.structure()
    gains = pipe.synthesize()
    pipe.rate_report()
    if not args.quiet:
        q1, q2 = gains.q1(), gains.q2()
        print(f"Q1 lambda_max {q1.lambda_max:.6g} ({'feasible' if q1.feasible else 'infeasible'})")
        print(f"Q2 lambda_max {q2.lambda_max:.6g} ({'feasible' if q2.feasible else 'infeasible'})")
        print("K =", np.array2string(gains.K, precision=4))
        print("G =", np.array2string(gains.G_obs, precision=4))
    return EXIT_OK


def cmd_simulate(pipe: Pipeline, args, out: Path) -> int:
    pipe.structure()
    fx = pipe.cfg["synthesis"].get("fixture") or {}
    if "G_obs" not in fx or ("K" not in fx and "P1" not in fx):
        raise ConfigError("simulate needs synthesis/fixture with G_obs and K (or P1)")
    gains = pipe.fixture_gains(need_certificates=False)
    if gains is not None:
        pipe.gains = gains
        pipe.manifest["gains"] = gains.to_dict()
        K, G = gains.K, gains.G_obs
    else:
        K = np.asarray(fx["K"], dtype=float)
        G = np.asarray(fx["G_obs"], dtype=float)
        pipe.manifest["gains"] = {"source": "fixture", "K": K, "G_obs": G}
    _, report = pipe.run_simulation(K, G, out, plots=not args.no_plots and pipe.cfg["output"]["plots"])
    if not args.quiet:
        print(summary_text(report))
    return EXIT_OK


def cmd_run(pipe: Pipeline, args, out: Path) -> int:
    pipe.structure()
    gains = pipe.synthesize()
    _, report = pipe.run_simulation(gains.K, gains.G_obs, out,
                                    plots=not args.no_plots and pipe.cfg["output"]["plots"])
    if not args.quiet:
        print(summary_text(report))
    return EXIT_OK


def _sweep_job(job: tuple) -> dict:
    cfg, seed, delta, K, G, horizon, tol = job
    pipe = Pipeline(cfg, "sweep-job", seed)
    pipe.structure()
    base = pipe.parts.comm
    comm = CommSchedule(base.w, delta, base.h, base.mode)
    sc = pipe.scenario(K, G, comm=comm, horizon=horizon, record_every=max(1, int(round(0.1 / cfg["simulation"]["step"]))))
    row = {"delta": delta}
    try:
        trace = simulate(sc)
    except DivergenceError:
        row.update(converged=False, diverged=True, time_to_tolerance=None,
                   final_tracking_error=math.inf, final_observer_error=math.inf)
        return row
    rep = consensus_metrics(trace, tol)
    row.update(converged=max(rep.final_tracking_error, rep.final_observer_error) < tol, diverged=False,
               time_to_tolerance=rep.time_to_tolerance,
               final_tracking_error=rep.final_tracking_error,
               final_observer_error=rep.final_observer_error)
    return row


def cmd_sweep(pipe: Pipeline, args, out: Path) -> int:
    pipe.structure()
    gains = pipe.synthesize()
    sw = pipe.cfg["sweep"]
    base = pipe.parts.comm
    horizon = float(sw.get("horizon", pipe.cfg["simulation"]["horizon"]))
    deltas = [float(d) for d in sw["deltas"]]
    bad = [d for d in deltas if not 0 < d < base.w or (base.three_mode and d > min(base.hs))]
    if bad:
        raise ScheduleError(f"sweep deltas {bad} violate the schedule invariant 0 < delta < w (and delta <= h)")
    rates = pipe.rate_report()
    thr_max = rates.delta_threshold_max if rates else math.nan
    thr_min = rates.delta_threshold_min if rates else math.nan
    jobs = [(pipe.cfg, pipe.seed, d, gains.K, gains.G_obs, horizon, sw["tolerance"]) for d in deltas]
    if sw["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=sw["workers"]) as ex:
            rows = list(ex.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    for r in rows:
        r["threshold_max"] = thr_max
        r["threshold_min"] = thr_min
        r["above_threshold"] = bool(r["delta"] > thr_max) if math.isfinite(thr_max) else False
    out.mkdir(parents=True, exist_ok=True)
    cols = ["delta", "converged", "diverged", "time_to_tolerance", "final_tracking_error",
            "final_observer_error", "threshold_max", "threshold_min", "above_threshold"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
    pipe.manifest["sweep"] = rows
    pipe.manifest["outputs"] = ["sweep.csv"]
    if not args.quiet:
        for r in rows:
            flag = "above" if r["above_threshold"] else "below"
            print(f"delta {r['delta']:<6g} converged {str(r['converged']):<5} ({flag} threshold {thr_max:.6g})")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "synthesize": cmd_synthesize, "simulate": cmd_simulate,
            "check": cmd_check, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mastrack", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mastrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config_path", nargs="?", help="scenario file (same as --config)")
        p.add_argument("--config", dest="config_flag")
        p.add_argument("--out", help=f"output directory (overrides ${cfgmod.OUT_DIR_ENV} and the config)")
        p.add_argument("--seed", type=int, help="initial-condition seed (unsigned 64-bit)")
        p.add_argument("--quiet", action="store_true")
        p.add_argument("--no-plots", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    path = args.config_flag or args.config_path
    if not path:
        print("error: a configuration file is required (--config)", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    out = None
    pipe = None
    try:
        cfg = cfgmod.load(path)
        out = cfgmod.output_directory(cfg, args.out)
        pipe = Pipeline(cfg, args.command, args.seed)
        handler = COMMANDS[args.command]
        if args.command in ("check", "synthesize"):
            code = handler(pipe, args)
        else:
            code = handler(pipe, args, out)
        pipe.manifest["status"] = "ok"
    except (ConfigError, ScheduleError, TopologyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
        if pipe is not None:
            pipe.manifest["status"] = f"config error: {exc}"
    except (SynthesisInfeasible, CertificateError) as exc:
        print(f"synthesis infeasible: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE
        if pipe is not None:
            pipe.manifest["status"] = f"infeasible: {exc}"
    except DivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
        if pipe is not None:
            pipe.manifest["status"] = f"diverged: {exc}"
    except MastrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    if pipe is not None and out is not None:
        write_manifest(out / "manifest.json", pipe.manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
