"""Configuration-driven experiment runner.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import homog, stats, suites
from .config import ExperimentConfig, build_observable, build_system, flow_spec, load_config
from .fastflow import FlowState, IntegrationDiverged, NoCrossingFound, SectionSpec, poincare_returns, sample_members
from .homog import CoeffField, SamplingPlan
from .observables import wip_path
from .roughpath import RDEBlowUp
from .sim import EnsemblePlan, run_ensemble, solve_sde

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4

log = logging.getLogger("dethomog")


class AcceptanceFailure(RuntimeError):
    pass


class Run:
    """Output directory bound to one validated config."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.hash = cfg.digest()
        self.dir = Path(cfg.output.directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed, "command": self.command}

    def json(self, name: str, doc: dict) -> Path:
        path = self.dir / name
        with open(path, "w") as fh:
            json.dump({**self.stamp, **doc}, fh, indent=2, sort_keys=True, default=_jsonable)
        return path

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.cfg.seed}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
        return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _axes(cfg: ExperimentConfig):
    if len(cfg.estimator.grid) != cfg.slow.d:
        raise ValueError("estimator.grid needs one axis per slow dimension")
    return [np.linspace(lo, hi, n) for lo, hi, n in cfg.estimator.grid]


def _plan(cfg: ExperimentConfig) -> SamplingPlan:
    s = cfg.estimator.sampling
    return SamplingPlan(s.members, cfg.seed, s.burn_in, s.dt, s.origins, s.gap, s.chunk, cfg.workers)


def _estimator_params(cfg: ExperimentConfig) -> dict:
    e = cfg.estimator
    if e.method == "window":
        return {"n": e.n, "min_n": e.min_n}
    if e.method == "correlation":
        return {"t_max": e.t_max, "lag_step": e.lag_step}
    return {"n_max": e.n_max, "returns": e.returns}


def _require_slow(cfg):
    if cfg.slow is None:
        raise ValueError("this command needs a slow block")


def estimate(run: Run) -> CoeffField:
    cfg = run.cfg
    _require_slow(cfg)
    spec = flow_spec(cfg.flow)
    system = build_system(cfg.slow, spec, cfg.seed, cfg.estimator.centering)
    coeff = homog.estimate_coefficients(
        spec, system, _axes(cfg), cfg.estimator.method, _estimator_params(cfg), _plan(cfg),
        cfg.estimator.tol_psd, cfg.estimator.interpolation, cfg.estimator.outside,
    )
    coeff.meta.update(run.stamp)
    coeff.to_json(run.dir / "coeff_field.json")
    check = coeff.check()
    pts = coeff.points
    d = coeff.d
    rows = []
    for p, x in enumerate(pts):
        rows.append([*x, *coeff.drift.reshape(-1, d)[p], *coeff.diffusion_sq.reshape(-1, d * d)[p]])
    run.csv("coeff_field.csv", [f"x{i + 1}" for i in range(d)] + [f"drift{i + 1}" for i in range(d)]
            + [f"sigma2_{i + 1}{j + 1}" for i in range(d) for j in range(d)], rows)
    run.json("estimate.json", {"checks": check, "estimator": coeff.meta.get("estimator")})
    if not check["pass"]:
        raise homog.NotPositiveSemidefinite(f"coefficient field failed its checks: {check}")
    return coeff


def converge(run: Run) -> dict:
    cfg = run.cfg
    _require_slow(cfg)
    sim = cfg.simulation
    if sim.coeff_file:
        coeff = CoeffField.from_json(sim.coeff_file)
    else:
        coeff = estimate(run)
    spec = flow_spec(cfg.flow)
    system = build_system(cfg.slow, spec, cfg.seed, cfg.estimator.centering)
    xi = np.array(cfg.slow.xi)
    sde_seed = cfg.seed + 3
    sde = solve_sde(coeff, xi, sim.T, sim.sde_dt, sim.N, sde_seed, sim.guard, workers=cfg.workers)
    _write_ensemble(run, "sde_endpoints.csv", sde)
    plan = EnsemblePlan(sim.burn_in, sim.burn_dt, sim.dt_fast, sim.guard, sim.chunk, cfg.workers,
                        sim.record_stride, sim.max_dt_fast)
    reports = []
    for k, eps in enumerate(sim.eps):
        res = run_ensemble(spec, system, eps, xi, sim.T, sim.N, cfg.seed + 2, plan)
        _write_ensemble(run, f"fastslow_eps{k}.csv", res)
        per_coord = []
        for i in range(coeff.d):
            rep = stats.ks_distance(res.endpoints[:, i], sde.endpoints[:, i], sim.ks_threshold)
            per_coord.append(rep.value)
        entry = {"eps": eps, "ks": per_coord, "escapes": res.escapes, "members": res.size}
        if res.paths is not None:
            entry["functionals"] = {k2: float(np.mean(v)) for k2, v in stats.path_functionals(res.paths[..., 0]).items()}
        reports.append(entry)
        log.info("eps=%g ks=%s escapes=%d", eps, per_coord, res.escapes)
    doc = {"reports": reports, "sde_escapes": sde.escapes}
    rows = [[r["eps"], i + 1, r["ks"][i], r["escapes"]] for r in reports for i in range(coeff.d)]
    run.csv("converge.csv", ["eps", "coordinate", "ks", "escapes"], rows)
    if len(reports) > 1:
        doc["trend"] = [
            stats.trend_verdict([r["ks"][i] for r in reports], sim.slack, sim.ks_threshold) for i in range(coeff.d)
        ]
    if sim.null_check:
        other = solve_sde(coeff, xi, sim.T, sim.sde_dt, sim.N, sde_seed + 1000, sim.guard, workers=cfg.workers)
        doc["null_check"] = [
            stats.ks_distance(other.endpoints[:, i], sde.endpoints[:, i], sim.ks_threshold).value for i in range(coeff.d)
        ]
    run.json("converge.json", doc)
    if sim.acceptance:
        if any(r["escapes"] for r in reports):
            raise AcceptanceFailure("escapes in an acceptance run")
        if "trend" in doc and not all(t["pass"] for t in doc["trend"]):
            raise AcceptanceFailure("KS trend verdict failed")
    return doc


def _write_ensemble(run: Run, name: str, res) -> None:
    kept = iter(res.endpoints)
    d = res.endpoints.shape[1] if len(res.endpoints) else 1
    rows = []
    for m, esc in enumerate(res.escaped):
        rows.append([m, int(esc), *(["nan"] * d if esc else next(kept))])
    run.csv(name, ["member", "escaped"] + [f"x{i + 1}" for i in range(d)], rows)
    run.json(name.replace(".csv", ".json"), {"eps": res.eps, "members": res.size, "escapes": res.escapes, "seeds": res.seeds})


def selftest(run: Run | None, inject: str | None = None) -> list:
    checks = suites.run_all(inject)
    for c in checks:
        print(c.line())
    if run is not None:
        run.json("selftest.json", {"checks": [c.__dict__ for c in checks]})
    if not all(c.passed for c in checks):
        raise AcceptanceFailure("self-test failures: " + ", ".join(c.name for c in checks if not c.passed))
    return checks


def wip(run: Run) -> dict:
    cfg = run.cfg
    spec = flow_spec(cfg.flow)
    w = cfg.wip
    blocks = w.observables or (cfg.slow.v if cfg.slow and cfg.slow.v else None)
    if not blocks:
        raise ValueError("wip needs observables (wip.observables or slow.v)")
    v = build_observable(blocks, spec, cfg.seed, cfg.estimator.centering)
    grid = np.linspace(0.0, 1.0, w.points)
    y0 = sample_members(spec, cfg.seed, np.arange(w.members), w.burn_in, w.dt)
    W, WW = wip_path(spec, v, y0, w.n, grid, w.dt)
    vals = np.moveaxis(W.values, 0, 1)  # (members, points, m)
    m = vals.shape[-1]
    rows = [[k, t, *vals[k, j]] for k in range(w.members) for j, t in enumerate(grid)]
    run.csv("wip_paths.csv", ["member", "t"] + [f"W{i + 1}" for i in range(m)], rows)
    end = vals[:, -1, :]
    cov = end.T @ end / len(end)
    doc = {"n": w.n, "members": w.members, "covariance_W1": cov}
    run.json("wip.json", doc)
    return doc


def suspension(run: Run) -> dict:
    cfg = run.cfg
    spec = flow_spec(cfg.flow)
    s = cfg.suspension
    blocks = s.observables or (cfg.slow.v if cfg.slow and cfg.slow.v else None)
    if not blocks:
        raise ValueError("suspension needs observables")
    u = build_observable(blocks, spec, cfg.seed, cfg.estimator.centering)
    section = SectionSpec.lorenz_standard(spec, s.min_return_time)
    plan = SamplingPlan(s.members, cfg.seed, s.burn_in, s.dt, chunk=cfg.estimator.sampling.chunk, workers=cfg.workers)
    B = homog.estimate_B_matrix_suspension(spec, section, u, s.n_max, plan, s.returns)
    y0 = FlowState(sample_members(spec, cfg.seed, [0], s.burn_in, s.dt)[0], 0.0)
    samples = poincare_returns(spec, section, y0, min(s.returns, 200), s.dt)
    rows = [[k, r.return_time, *r.base_point] for k, r in enumerate(samples)]
    run.csv("returns.csv", ["k", "return_time", "y1", "y2", "y3"], rows)
    doc = {"B": B.value, "std_error": B.std_error, "meta": B.meta,
           "mean_return_time": float(np.mean([r.return_time for r in samples]))}
    run.json("suspension.json", doc)
    return doc


def rough(run: Run) -> list:
    r = run.cfg.rough
    checks = [suites.chen(), suites.product_rule(), suites.circle_area(), suites.chain_rule(),
              suites.rde_vs_ode(run.cfg.seed, r.trials, r.dt, r.tol)]
    for c in checks:
        print(c.line())
    run.json("rough.json", {"checks": [c.__dict__ for c in checks]})
    run.csv("rough.csv", ["check", "value", "tolerance", "passed"], [[c.name, c.value, c.tolerance, int(c.passed)] for c in checks])
    if not all(c.passed for c in checks):
        raise AcceptanceFailure("rough-path suite failures")
    return checks


COMMANDS = {"estimate": estimate, "converge": converge, "wip": wip, "suspension": suspension, "rough": rough}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dethomog", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ["estimate", "converge", "selftest", "wip", "suspension", "rough"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "selftest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        if name == "selftest":
            sp.add_argument("--inject", choices=["chen", "psd"], help="corrupt a fixture to exercise failure reporting")
    return p


def _resolve(args) -> ExperimentConfig | None:
    if args.config is None:
        if args.out is None:
            return None
        raw = {"version": 1}
    else:
        raw = load_config(args.config).model_dump()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.out is not None:
        raw.setdefault("output", {})["directory"] = args.out
    return ExperimentConfig.model_validate(raw)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "selftest":
            selftest(Run(cfg, "selftest") if cfg else None, args.inject)
        else:
            COMMANDS[args.command](Run(cfg, args.command))
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (homog.NotPositiveSemidefinite, IntegrationDiverged, NoCrossingFound, RDEBlowUp, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (homog.ConfigurationError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
