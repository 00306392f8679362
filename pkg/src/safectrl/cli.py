"""``safectrl`` command line: bench, tune and verify.

Exit codes: 0 success, 1 verify failure, 2 configuration error,
3 campaign abort (outputs written so far are kept).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from .benchmarks import aggregate_regret
from .config import ConfigError, ExperimentConfig, apply_env, load_config, parse_config
from .control_sim import ControllerGains, simulate_step_response, trajectory_metrics, write_trajectory_csv
from .optimizers import CampaignAborted, CampaignResult, run_campaign, spawn_seeds
from .verify import MODULES, format_table, run_checks

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
ITERATION_SCHEMA = "safectrl.iterations/v1"
AGGREGATE_SCHEMA = "safectrl.aggregate/v1"
TRACE_SCHEMA = "safectrl.sets/v1"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    config_path: str | None
    resolved_config: dict
    master_seed: int
    reps: int
    out_dir: str
    version: str
    started: str
    finished: str | None = None

    @property
    def digest(self) -> str:
        """Hash of everything that determines the numbers (not paths or times)."""
        payload = json.dumps(
            {"config": _without_run_paths(self.resolved_config), "seed": self.master_seed,
             "reps": self.reps, "version": self.version},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {"config_path": self.config_path, "resolved_config": self.resolved_config,
             "master_seed": self.master_seed, "reps": self.reps, "out_dir": self.out_dir,
             "version": self.version, "started": self.started, "finished": self.finished,
             "manifest_hash": self.digest},
            indent=2, sort_keys=True,
        )


def _without_run_paths(cfg: dict) -> dict:
    cfg = json.loads(json.dumps(cfg))
    run = cfg.get("run", {})
    run.pop("out", None)
    run.pop("workers", None)
    return cfg


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_any(path: str) -> tuple[ExperimentConfig, dict | None]:
    """A YAML config, or a ``manifest.json`` written by a previous run."""
    p = Path(path)
    if p.suffix == ".json" and p.exists():
        try:
            data = json.loads(p.read_text())
            cfg = parse_config(data["resolved_config"], str(p))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read manifest {p}: {exc}") from exc
        return cfg, data
    return load_config(path), None


# ---------------------------------------------------------------- csv sinks


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def iteration_header(res: CampaignResult, dim: int) -> list[str]:
    cols = ["iteration", "method", "rep"] + [f"x{i}" for i in range(dim)]
    cols += ["noisy_value", "true_value", "simple_regret", "best_value", "stage", "violations_cumulative"]
    for c in res.constraint_indices:
        name = res.function_names[c]
        cols += [f"noisy_{name}", f"true_{name}", f"violation_{name}"]
    return cols


def write_campaign_csv(path: Path, res: CampaignResult, method: str, rep: int, digest: str) -> Path:
    dim = res.records[0].chosen_point.size if res.records else 0
    cum = 0
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {ITERATION_SCHEMA} manifest={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(iteration_header(res, dim))
        for r in res.records:
            cum += int(np.sum(r.violation_flags))
            row = [r.iteration, method, rep, *map(_fmt, r.chosen_point),
                   _fmt(r.noisy_values[0]), _fmt(r.true_values[0]), _fmt(r.simple_regret), _fmt(r.best_value),
                   r.stage.value, cum]
            for j, c in enumerate(res.constraint_indices):
                row += [_fmt(r.noisy_values[c]), _fmt(r.true_values[c]), int(r.violation_flags[j])]
            w.writerow(row)
    return path


def write_trace_csv(path: Path, res: CampaignResult, digest: str) -> Path:
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {TRACE_SCHEMA} manifest={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "n_candidates", "safe_indices", "boundary_indices"])
        for r in res.records:
            if r.trace is None:
                continue
            w.writerow([r.iteration, r.trace["n_candidates"],
                        " ".join(map(str, r.trace["safe"])), " ".join(map(str, r.trace["boundary"]))])
    return path


def write_aggregate_csv(path: Path, results: dict[str, list[CampaignResult]], digest: str) -> Path:
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {AGGREGATE_SCHEMA} manifest={digest} regret=best-so-far over evaluated safe points\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "method", "reps", "mean_regret", "se_regret", "mean_best", "se_best"])
        for method, runs in results.items():
            if not runs:
                continue
            lengths = {len(r.records) for r in runs}
            if len(lengths) != 1:
                continue
            mean_b, se_b = aggregate_regret([r.best_series() for r in runs])
            if all(np.isfinite(r.regret_series()).all() for r in runs):
                mean_r, se_r = aggregate_regret(runs)
            else:
                mean_r = se_r = np.full(mean_b.size, np.nan)
            for i in range(mean_b.size):
                w.writerow([i, method, len(runs), _fmt(mean_r[i]), _fmt(se_r[i]), _fmt(mean_b[i]), _fmt(se_b[i])])
    return path


# ---------------------------------------------------------------- execution


def _campaign_task(args):
    cfg_dict, method, ss, trace = args
    cfg = parse_config(cfg_dict)
    problem = cfg.build_problem()
    return run_campaign(problem, cfg.optimizer_config(method, trace_sets=trace), ss)


def _run_all(cfg: ExperimentConfig, trace: bool, sink) -> dict[str, list[CampaignResult]]:
    """Run every (method, rep) campaign; ``sink`` is called in a fixed order."""
    seeds = spawn_seeds(cfg.run.seed, cfg.run.reps)
    results: dict[str, list[CampaignResult]] = {m.value: [] for m in cfg.methods}
    tasks = [(m, r) for m in cfg.methods for r in range(cfg.run.reps)]
    if cfg.run.workers > 1:
        payload = cfg.to_dict()
        with ProcessPoolExecutor(cfg.run.workers) as ex:
            futures = [ex.submit(_campaign_task, (payload, m.value, seeds[r], trace)) for m, r in tasks]
            for (m, r), fut in zip(tasks, futures):
                res = fut.result()
                results[m.value].append(res)
                sink(m.value, r, res)
        return results
    problem = cfg.build_problem()
    for m, r in tasks:
        res = run_campaign(problem, cfg.optimizer_config(m, trace_sets=trace), seeds[r])
        results[m.value].append(res)
        sink(m.value, r, res)
    return results


def bench_summary(results: dict[str, list[CampaignResult]]) -> str:
    lines = [f"{'method':<12} {'reps':>4} {'final regret':>14} {'se':>10} {'best value':>12} {'violations':>10} {'ms/iter':>8}"]
    for method, runs in results.items():
        if not runs:
            continue
        final = np.array([r.records[-1].simple_regret for r in runs])
        best = np.array([r.best_value for r in runs])
        se = final.std(ddof=1) / np.sqrt(final.size) if final.size > 1 else 0.0
        ms = np.mean([rec.wall_time_ms for r in runs for rec in r.records[1:]] or [0.0])
        viol = sum(r.total_violations for r in runs)
        lines.append(f"{method:<12} {len(runs):>4} {final.mean():>14.6f} {se:>10.6f} {best.mean():>12.6f} {viol:>10d} {ms:>8.2f}")
    return "\n".join(lines) + "\n"


def tune_summary(cfg: ExperimentConfig, results: dict[str, list[CampaignResult]], seed_eval) -> str:
    lines = [f"seed gains: J={seed_eval.J:.4f} t_s={seed_eval.metrics.settling_time:.4f} "
             f"O_s={seed_eval.metrics.overshoot:.4f} e_ss={seed_eval.metrics.steady_state_error:.4f}",
             f"{'method':<12} {'rep':>3} {'J':>10} {'O_s':>9} {'e_ss':>9} {'t_s':>8} {'viol G_e':>8} {'viol G_u':>8}"]
    task = cfg.build_problem().meta["task"]
    for method, runs in results.items():
        for rep, r in enumerate(runs):
            if r.best_point is None:
                continue
            ev = task.evaluate_gains(ControllerGains.from_array(r.best_point))
            v = r.violations_by_constraint()
            lines.append(f"{method:<12} {rep:>3} {ev.J:>10.4f} {ev.metrics.overshoot:>9.4f} "
                         f"{ev.metrics.steady_state_error:>9.4f} {ev.metrics.settling_time:>8.4f} "
                         f"{v.get('G_e', 0):>8d} {v.get('G_u', 0):>8d}")
    return "\n".join(lines) + "\n"


def _write_tune_extras(out: Path, cfg: ExperimentConfig, results, digest: str):
    task = cfg.build_problem().meta["task"]
    seed_traj = simulate_step_response(task.seed_gains, task.plant)
    write_trajectory_csv(out / "trajectory_seed.csv", seed_traj, f"schema: safectrl.trajectory/v1 manifest={digest} gains=seed")
    best = {}
    for method, runs in results.items():
        done = [r for r in runs if r.best_point is not None]
        if not done:
            continue
        top = max(done, key=lambda r: r.best_value)
        gains = ControllerGains.from_array(top.best_point)
        traj = simulate_step_response(gains, task.plant)
        write_trajectory_csv(out / f"trajectory_best_{method}.csv", traj,
                             f"schema: safectrl.trajectory/v1 manifest={digest} gains=best {method}")
        m = trajectory_metrics(traj, task.plant)
        best[method] = {"gains": dict(zip(("speed_kp", "speed_ki", "d_axis_kp", "d_axis_ki", "q_axis_kp", "q_axis_ki"),
                                          map(float, top.best_point))),
                        "J": top.best_value, "settling_time": m.settling_time, "overshoot": m.overshoot,
                        "steady_state_error": m.steady_state_error}
    (out / "best_gains.json").write_text(json.dumps({"manifest": digest, "best": best}, indent=2, sort_keys=True))


def cmd_run(kind: str, args) -> int:
    try:
        if args.only is not None:
            raise ConfigError("--only applies to verify")
        cfg, manifest_data = load_any(args.config) if args.config else (load_config(_default_config(kind)), None)
        if cfg.experiment != kind:
            raise ConfigError(f"config describes a '{cfg.experiment}' experiment, not '{kind}'")
        if manifest_data is not None:
            cfg = cfg.with_run(seed=manifest_data["master_seed"], reps=manifest_data["reps"])
        cfg = apply_env(cfg).with_run(seed=args.seed, reps=args.reps, out=args.out)
        if cfg.run.reps < 1:
            raise ConfigError("reps must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.run.out)
    (out / "campaigns").mkdir(parents=True, exist_ok=True)
    if args.trace_sets:
        (out / "traces").mkdir(exist_ok=True)
    manifest = RunManifest(cfg.source, cfg.to_dict(), cfg.run.seed, cfg.run.reps, str(out), tool_version(), _now())
    digest = manifest.digest
    (out / "manifest.json").write_text(manifest.to_json())

    def sink(method: str, rep: int, res: CampaignResult):
        write_campaign_csv(out / "campaigns" / f"{method}_rep{rep:03d}.csv", res, method, rep, digest)
        if args.trace_sets:
            write_trace_csv(out / "traces" / f"{method}_rep{rep:03d}.csv", res, digest)
        print(f"{method} rep {rep}: best={res.best_value:.6g} violations={res.total_violations}", flush=True)

    code = EXIT_OK
    try:
        results = _run_all(cfg, args.trace_sets, sink)
    except CampaignAborted as exc:
        print(f"campaign aborted: {exc}", file=sys.stderr)
        if exc.partial is not None and exc.partial.records:
            write_campaign_csv(out / "campaigns" / "aborted_partial.csv", exc.partial, "aborted", -1, digest)
        code = EXIT_ABORT
    if code == EXIT_OK:
        write_aggregate_csv(out / "aggregate.csv", results, digest)
        if kind == "bench":
            summary = bench_summary(results)
        else:
            task = cfg.build_problem().meta["task"]
            summary = tune_summary(cfg, results, task.seed_evaluation())
            _write_tune_extras(out, cfg, results, digest)
        (out / "summary.txt").write_text(f"manifest {digest}\n" + summary)
        print(summary, end="")
    manifest.finished = _now()
    (out / "manifest.json").write_text(manifest.to_json())
    return code


def _default_config(kind: str) -> str:
    return "tune" if kind == "tune" else "camelback"


def cmd_verify(args) -> int:
    try:
        results = run_checks(args.only)
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED: {r.module}.{r.name}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safectrl", description="Safe Bayesian optimization campaigns.")
    p.add_argument("command", choices=("bench", "tune", "verify"))
    p.add_argument("--config", help="YAML config, preset name, or manifest.json of an earlier run")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--reps", type=int, help="repetitions per method")
    p.add_argument("--out", help="output directory")
    p.add_argument("--trace-sets", action="store_true", help="dump per-iteration safe/boundary sets")
    p.add_argument("--only", choices=MODULES, help="verify: run one module's checks")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "verify":
        return cmd_verify(args)
    return cmd_run(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
