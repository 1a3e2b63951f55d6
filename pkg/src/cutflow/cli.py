"""Command-line front end: ``cutflow SUBCOMMAND --config run.json --out DIR``.

Each experiment writes ``report.json`` (resolved config, seeds, results and
check verdicts) plus CSV tables, and optionally SVG plots drawn from those
tables. Exit status: 0 on success, 2 when ``--assert`` is given and a check
fails, 1 on any operational error.
"""

import argparse
import csv
import datetime
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ConfigError, load_config
from .cuts import brownian_cut_records, cut_statistics
from .density import ball_volume, calibrate_epsilon, estimate_transition_density, write_density_scan_csv
from .dynamics import SimConfig, brownian_block, simulate_quenched, write_trajectory_csv
from .env import build_environment, env_ensemble_seeds
from .mclt import DifferenceStream, check_quadratic_variation, invariance_report, lindeberg_statistic
from .stats import (
    annealed_skeletons,
    decoupling_test,
    direct_blocks,
    dyadic_grid,
    estimate_clt_covariance,
    estimate_velocity_cutblocks,
    estimate_velocity_lln,
    quenched_variance_scan,
    regenerated_blocks,
    velocity_report,
)


class _Parser(argparse.ArgumentParser):
    # usage errors are operational (exit 1); exit 2 is reserved for failed checks
    def error(self, message):
        raise ConfigError("", f"usage: {message}")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([("%.17g" % v) if isinstance(v, (float, np.floating)) else v for v in r])


def _known_velocity(spec):
    """Exact limiting velocity for variants where it is known, else None."""
    name = spec.variant_name
    if name in ("zero", "symmetric"):
        return np.zeros(spec.d)
    if name == "constant":
        return np.concatenate([np.zeros(spec.d1), spec.constant])
    return None


def _require_eps(cfg):
    if cfg.options.eps is None:
        raise ConfigError("options.eps", f"required for {cfg.experiment}")
    return cfg.options.eps


def _horizon(cfg):
    h = cfg.sim.horizon_T
    if abs(h - round(h)) > 1e-9:
        raise ConfigError("sim.horizon_T", "must be an integer number of time units")
    return int(round(h))


# ---------------------------------------------------------------- experiments

def run_simulate(cfg, out):
    env = build_environment(cfg.env)
    seeds, files = [], []
    for i in range(cfg.replicas):
        seed = cfg.sim.path_seed + i
        traj = simulate_quenched(env, cfg.sim.replace(path_seed=seed))
        name = "trajectory.csv" if cfg.replicas == 1 else f"trajectory_{i:04d}.csv"
        write_trajectory_csv(traj, out / name)
        seeds.append(seed)
        files.append({"file": name, "rows": len(traj.times), "final": traj.positions[-1]})
    expect = cfg.sim.n_steps + 1
    checks = {"row_count": all(f["rows"] == expect for f in files)}
    return {"trajectories": files, "path_seeds": seeds}, checks


def run_cuts(cfg, out):
    eps = _require_eps(cfg)
    h = _horizon(cfg)
    recs, seeds = brownian_cut_records(cfg.env.d1, cfg.replicas, h, eps, cfg.cut, cfg.sim.dt, seed=cfg.sim.path_seed)
    stats = cut_statistics(recs, min_records=min(100, cfg.replicas))
    rows = []
    for i, rec in enumerate(recs):
        trunc = rec.cut_truncated
        for n, s, t in zip(rec.cut_indices, rec.separations, trunc):
            rows.append((i, int(n), float(s), int(t)))
    _write_rows(out / "cuts.csv", ["replica", "n", "separation", "truncated"], rows)
    _write_rows(out / "tail.csv", ["n", "survival", "windows"],
                [(int(t["n"]), float(t["survival"]), int(t["windows"])) for t in stats["tail"]])
    checks = {"p0_ci_excludes_zero": stats["p0_hat"] - 1.96 * stats["p0_se"] > 0}
    if cfg.env.d1 >= 5 and stats["slope"] is not None:
        checks["tail_slope"] = stats["slope"] <= -(cfg.env.d1 - 4) / 2 + 0.5
    return {"statistics": stats, "eps": eps, "path_seeds": seeds}, checks


def run_velocity(cfg, out):
    h = _horizon(cfg)
    seed = cfg.sim.path_seed
    lln = estimate_velocity_lln(annealed_skeletons(cfg.env, cfg.replicas, h, cfg.sim.dt, seed=seed))
    rep = lln
    o = cfg.options
    if o.coupled_runs:
        eps = _require_eps(cfg)
        _, batch, recs = direct_blocks(cfg.env, eps, cfg.bridge, o.coupled_runs, h, cfg.cut, cfg.sim.dt, seed=seed)
        rep = velocity_report(lln, estimate_velocity_cutblocks(batch, recs, seed=seed, min_blocks=o.min_blocks))
    target = _known_velocity(cfg.env)
    checks = {}
    for name in ("v_lln", "v_cutblocks"):
        r = getattr(rep, name)
        if r is not None and target is not None:
            checks[f"{name}_matches_known"] = bool(np.all(np.abs(r.z_scores(target)) <= 3))
    if rep.v_cutblocks is not None:
        checks["lln_cutblocks_agree"] = bool(np.all(np.abs(rep.agreement_z()) <= 3))
    rows = []
    for k in range(cfg.env.d):
        row = [k, float(rep.v_lln.value[k]), float(rep.v_lln.se[k])]
        if rep.v_cutblocks is not None:
            row += [float(rep.v_cutblocks.value[k]), float(rep.v_cutblocks.se[k])]
        rows.append(row)
    header = ["component", "v_lln", "se_lln"] + (["v_cutblocks", "se_cutblocks"] if rep.v_cutblocks else [])
    _write_rows(out / "velocity.csv", header, rows)
    return {"velocity": rep.to_dict(), "known_velocity": target}, checks


def run_clt(cfg, out):
    h = _horizon(cfg)
    skel = annealed_skeletons(cfg.env, cfg.replicas, h, cfg.sim.dt, seed=cfg.sim.path_seed)
    v = _known_velocity(cfg.env)
    v_source = "known"
    if v is None:
        v = np.asarray(estimate_velocity_lln(skel).v_lln.value)
        v_source = "estimated"
    rep = estimate_clt_covariance(skel, v, cfg.options.rescale_n, cfg.env.d1)
    d = cfg.env.d
    _write_rows(out / "covariance.csv", ["i", "j", "value", "se"],
                [(i, j, float(rep.matrix_A[i, j]), float(rep.se[i, j])) for i in range(d) for j in range(d)])
    be = rep.block_errors
    name = cfg.env.variant_name
    checks = {}
    if name == "zero":
        checks["full_within_5pct_of_identity"] = be["full_identity_max_abs"] <= 0.05
    if name in ("zero", "symmetric"):
        checks["brownian_block_within_5pct"] = be["brownian_block_max_abs"] <= 0.05
        checks["cross_block_within_3se"] = be["cross_block_max_z"] <= 3
    return {"covariance": rep.to_dict(), "velocity_used": v, "velocity_source": v_source}, checks


def _gauss(y, y2):
    r = np.asarray(y2) - np.asarray(y)
    return float(np.exp(-0.5 * r @ r) / (2 * math.pi) ** (len(r) / 2))


def run_density(cfg, out):
    spec = cfg.env
    env = build_environment(spec)
    sim = SimConfig(dt=cfg.sim.dt, horizon_T=1.0, path_seed=cfg.sim.path_seed)
    w = brownian_block(spec.d1, sim)
    y = np.zeros(spec.d2) if cfg.sim.start is None else np.asarray(cfg.sim.start[spec.d1:])
    k = cfg.options.density_points
    offs = np.zeros((k, spec.d2))
    offs[:, -1] = np.linspace(-2.0, 2.0, k)
    pts = y + offs
    ests = [estimate_transition_density(w, env, y, p, cfg.bridge, point_index=i) for i, p in enumerate(pts)]
    write_density_scan_csv(pts, ests, out / "density.csv")
    name = spec.variant_name
    checks = {}
    if name == "zero":
        checks["zero_exact"] = all(e.value == _gauss(y, p) and e.std_error == 0 for e, p in zip(ests, pts))
    elif name == "constant":
        c = spec.constant
        checks["constant_shifted_gaussian"] = all(abs(e.value - _gauss(y + c, p)) <= 3 * e.std_error + 1e-12
                                                  for e, p in zip(ests, pts))
    return {"points": pts, "estimates": [e.to_dict() for e in ests]}, checks


def calibration_closed_form(d2):
    """Splitting parameter of the drift-free Gaussian kernel before the safety factor."""
    return math.exp(-0.5) / (2 * math.pi) ** (d2 / 2) * ball_volume(d2) / 2


def run_calibrate(cfg, out):
    spec = cfg.env
    trivial = spec.variant_name in ("zero", "constant") or spec.intensity == 0
    n_env = 1 if trivial else cfg.replicas
    env_seeds = [int(s) for s in env_ensemble_seeds(spec.master_seed, n_env, tag=400)]
    envs = [build_environment(spec.replace(master_seed=s)) for s in env_seeds]
    path_seeds = [cfg.sim.path_seed + i for i in range(n_env)]
    ws = [brownian_block(spec.d1, SimConfig(dt=cfg.sim.dt, horizon_T=1.0, path_seed=s)) for s in path_seeds]
    cal = calibrate_epsilon(envs, ws, np.zeros((1, spec.d2)), cfg.bridge, safety_factor=cfg.options.safety_factor)
    res = cal.to_dict()
    res.update(env_seeds=env_seeds, path_seeds=path_seeds)
    checks = {}
    if spec.variant_name == "zero" or spec.intensity == 0 and spec.variant_name != "constant":
        res["closed_form"] = calibration_closed_form(spec.d2)
        checks["matches_closed_form"] = abs(cal.epsilon_raw - res["closed_form"]) <= 1e-3
    else:
        checks["ci_excludes_zero"] = cal.epsilon_raw - 1.96 * cal.epsilon_raw_se > 0
    return res, checks


def run_decouple(cfg, out):
    eps = _require_eps(cfg)
    h = _horizon(cfg)
    o = cfg.options
    seed = cfg.sim.path_seed
    direct, _, _ = direct_blocks(cfg.env, eps, cfg.bridge, cfg.replicas, h, cfg.cut, cfg.sim.dt, seed=seed)
    regen = regenerated_blocks(cfg.env, eps, cfg.bridge, cfg.replicas, h, cfg.cut, cfg.sim.dt, seed=seed)
    cols = ["length"] + [f"dx_{k}" for k in range(cfg.env.d)]
    _write_rows(out / "blocks_direct.csv", cols, direct.tolist())
    _write_rows(out / "blocks_regenerated.csv", cols, regen.tolist())
    test = decoupling_test(direct, regen, alpha=o.alpha, seed=seed, min_blocks=o.min_blocks)
    res = {"test": test.to_dict(), "n_direct": len(direct), "n_regenerated": len(regen), "eps": eps}
    checks = {"decoupling_not_rejected": not test.rejected}
    if o.negative_control:
        broken = regenerated_blocks(cfg.env, eps, cfg.bridge, cfg.replicas, h, cfg.cut, cfg.sim.dt, seed=seed,
                                    use_separated=True)
        neg = decoupling_test(direct, broken, alpha=o.alpha, seed=seed, min_blocks=min(o.min_blocks, len(broken)))
        res["negative_control"] = neg.to_dict()
        checks["negative_control_rejected"] = neg.rejected
    return res, checks


def run_quenched(cfg, out):
    o = cfg.options
    grid = dyadic_grid(2.0, *o.dyadic_m)
    v = _known_velocity(cfg.env)
    rep = quenched_variance_scan(cfg.env, grid, o.n_envs, o.paths_per_env, T=o.scan_T, v=v, dt=cfg.sim.dt,
                                 seed=cfg.sim.path_seed)
    _write_rows(out / "variance_scan.csv", ["n", "variance", "se", "raw_variance", "noise_floor"],
                [(r["n"], r["variance"], r["se"], r["raw_variance"], r["noise_floor"]) for r in rep["rows"]])
    return {"scan": rep}, {"variance_decreasing": rep["decreasing"]}


def run_mclt(cfg, out):
    o = cfg.options
    stream = DifferenceStream(o.generator, seed=cfg.sim.path_seed, d=o.stream_d)
    rep = invariance_report(stream, o.n_list, n_replicas=cfg.replicas, alpha=o.alpha)
    n_qv = max(1000, o.n_list[0])
    qv = check_quadratic_variation(stream, n_qv, n_replicas=min(cfg.replicas, 200))
    lind = [{"n": n, "eps": o.lindeberg_eps, "value": lindeberg_statistic(stream, max(n, 1000), o.lindeberg_eps)}
            for n in o.n_list]
    rows = []
    for r in rep["rows"]:
        cov, se = np.array(r["endpoint_cov"]), np.array(r["endpoint_cov_se"])
        for i in range(stream.d):
            for j in range(stream.d):
                rows.append((r["n"], i, j, float(cov[i, j]), float(se[i, j])))
    _write_rows(out / "mclt_endpoint.csv", ["n", "i", "j", "cov", "se"], rows)
    last = rep["rows"][-1]
    checks = {}
    if stream.gamma is not None:
        tol = 0.05 * float(np.abs(stream.gamma).max())
        checks["endpoint_cov_within_5pct"] = last["max_abs_dev"] <= tol
    if o.generator != "t3":
        checks["normality_not_rejected"] = not last["normal_rejected"]
    if stream.bound is not None:
        checks["lindeberg_zero_beyond_bound"] = all(l["value"] == 0.0 for l in lind
                                                     if l["eps"] * math.sqrt(max(l["n"], 1000)) > stream.bound)
    return {"invariance": rep, "quadratic_variation": qv, "lindeberg": lind, "gamma": stream.gamma}, checks


RUNNERS = {
    "simulate": run_simulate,
    "cuts": run_cuts,
    "velocity": run_velocity,
    "clt": run_clt,
    "density": run_density,
    "calibrate-eps": run_calibrate,
    "decouple": run_decouple,
    "quenched-scan": run_quenched,
    "mclt": run_mclt,
}


def _plots(experiment, out, cfg, results):
    from . import plots
    made = []
    if experiment == "cuts":
        d1 = cfg.env.d1
        plots.tail_survival(out / "tail.csv", out / "tail_survival.svg", slope_ref=-(d1 - 4) / 2 if d1 > 4 else None)
        made.append("tail_survival.svg")
    elif experiment == "clt":
        plots.covariance_heatmap(out / "covariance.csv", out / "covariance.svg")
        made.append("covariance.svg")
    elif experiment == "quenched-scan":
        plots.variance_scan(out / "variance_scan.csv", out / "variance_scan.svg")
        made.append("variance_scan.svg")
    return made


def run_experiment(cfg, out_dir, emit_plots=False, timestamp=None):
    """Run ``cfg.experiment``; returns the report dictionary (also written to report.json)."""
    if cfg.experiment not in RUNNERS:
        raise ConfigError("experiment", f"choose one of {', '.join(EXPERIMENTS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, checks = RUNNERS[cfg.experiment](cfg, out)
    artifacts = sorted(p.name for p in out.iterdir() if p.suffix == ".csv")
    if emit_plots or cfg.emit_plots:
        artifacts += _plots(cfg.experiment, out, cfg, results)
    report = {
        "experiment": cfg.experiment,
        "version": __version__,
        "config": cfg.resolved(),
        "seeds": {"master_seed": cfg.env.master_seed, "path_seed": cfg.sim.path_seed, "bridge_seed": cfg.bridge.seed},
        "results": results,
        "checks": checks,
        "passed": all(checks.values()),
        "artifacts": artifacts,
        "timestamp": timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    report = _plain(report)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return report


def build_parser():
    p = _Parser(prog="cutflow", description="Monte Carlo experiments for diffusions in random drift environments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, help="worker threads (default: all available)")
    p.add_argument("--assert", dest="assert_checks", action="store_true", help="exit 2 when a check fails")
    p.add_argument("--emit-plots", action="store_true", help="write SVG plots")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        over = {"experiment": args.experiment}
        if os.environ.get("CUTFLOW_SEED"):
            try:
                over["env.master_seed"] = int(os.environ["CUTFLOW_SEED"], 0)
            except ValueError:
                raise ConfigError("CUTFLOW_SEED", "must be an integer") from None
        cfg = cfg.with_overrides(**over)
        if args.threads is not None:
            import numba
            if args.threads < 1:
                raise ConfigError("--threads", "must be >= 1")
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        out = args.out or cfg.output_dir or "cutflow-out"
        report = run_experiment(cfg, out, emit_plots=args.emit_plots)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"cutflow: error: {exc}", file=sys.stderr)
        return 1
    for name, ok in report["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"report: {Path(out) / 'report.json'}")
    if args.assert_checks and not report["passed"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
