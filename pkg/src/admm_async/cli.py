"""Command-line experiment orchestration.

Subcommands:

    gen      sample an instance (or expand a preset) and write container +
             sidecar, optionally per-worker shards
    advise   print the parameter report (thresholds, margined picks,
             admissible penalty range for the master-owned-duals scheme)
    run      execute one configured run; writes trace.csv / summary.json /
             schedule.jsonl (and iterates.npz when requested);
             exit code 0 = completed, 2 = flagged diverged, 1 = error
    check    verify the recorded inequalities on a trace + instance pair
    report   merge traces into one long-format, plot-ready CSV
    sweep    run several configurations from a JSON manifest
    master   serve the socket protocol master
    worker   serve one socket protocol worker

The ADMM_ASYNC_THREADS environment variable caps intra-run subproblem
parallelism (default 1; results are identical either way).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import advisor as advisor_mod
from . import diagnostics as diag
from .engine import AlgoParams, run_ad_admm, run_alternative, run_sync
from .model import ProblemInstance, eval_objective
from .netrun import master_serve, worker_serve
from .oracle import proximal_gradient_reference
from .presets import ExperimentSpec, PRESET_NAMES, arrival_probs, preset_spec
from .problems import gen_lasso, gen_sparse_pca
from .scheduler import (ArrivalModel, Schedule, empirical_arrival_bound,
                        generate_schedule, validate_bounded_delay)
from .serialize import load_instance, save_instance, write_shards
from .trace import load_iterates, read_trace_csv, save_iterates, write_trace_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems are "errors" under the exit-code contract (1, not 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def _spec_from_args(args) -> ExperimentSpec:
    spec = preset_spec(args.preset) if getattr(args, "preset", None) \
        else ExperimentSpec()
    if getattr(args, "scale", 1.0) != 1.0:
        spec = spec.scaled(args.scale)
    overrides = {
        "family": "family", "workers": "workers", "rows": "rows",
        "dim": "dim", "theta": "theta", "density": "density",
        "noise_var": "noise_var", "nnz": "nnz", "gen_seed": "gen_seed",
        "scheme": "scheme", "rho": "rho", "gamma": "gamma", "tau": "tau",
        "min_arrivals": "min_arrivals", "probs": "probs", "iters": "iters",
        "seed": "seed", "kkt_tol": "kkt_tol", "f_ref": "f_ref",
        "record_iterates": "record_iterates", "instance_path": "instance",
    }
    for attr, flag in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(spec, attr, value)
    return spec


def _parse_rho(value):
    if isinstance(value, (int, float)):
        return value
    text = str(value)
    if text == "advisor" or text.startswith("beta:"):
        return text
    return float(text)


def _parse_probs(value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    text = str(value)
    if "," in text or text.replace(".", "").isdigit():
        return [float(p) for p in text.split(",")]
    return text


def _build_instance(spec: ExperimentSpec) -> tuple[ProblemInstance, dict]:
    if spec.instance_path:
        return load_instance(spec.instance_path)
    if spec.family == "lasso":
        inst = gen_lasso(spec.workers, spec.rows, spec.dim, spec.theta,
                         noise_var=spec.noise_var, density=spec.density,
                         seed=spec.gen_seed)
    elif spec.family == "spca":
        inst = gen_sparse_pca(spec.workers, spec.rows, spec.dim, spec.theta,
                              nnz=spec.nnz, seed=spec.gen_seed)
    else:
        raise CliError(f"unknown family {spec.family!r}")
    return inst, {"generated": True, "seed": spec.gen_seed}


def _resolve_run(spec: ExperimentSpec, threads: int | None = None):
    """Expand a spec into (instance, params, schedule, f_ref, extras)."""
    instance, inst_meta = _build_instance(spec)
    N = instance.n_blocks
    schedule = None
    S = N
    if spec.scheme in ("ad-admm", "alternative"):
        probs = arrival_probs(_parse_probs(spec.probs), N)
        model = ArrivalModel(probs=tuple(probs), tau=spec.tau,
                             min_arrivals=spec.min_arrivals, seed=spec.seed)
        schedule = generate_schedule(model, spec.iters)
        validate_bounded_delay(schedule)
        S = empirical_arrival_bound(schedule)

    rho = _parse_rho(spec.rho)
    if rho == "advisor":
        rho = advisor_mod.recommend(instance, spec.tau, S=S).rho
    elif isinstance(rho, str) and rho.startswith("beta:"):
        rho = float(rho.split(":", 1)[1]) * instance.lipschitz_max / 2.0
    rho = float(rho)

    gamma = spec.gamma
    if gamma == "advisor":
        g_thr = advisor_mod.gamma_min(S, rho, spec.tau, N)
        gamma = advisor_mod.MARGIN * g_thr if g_thr > 0 else 0.0
    gamma = float(gamma)

    f_ref = spec.f_ref
    if f_ref == "oracle":
        f_ref = proximal_gradient_reference(instance).objective
    f_ref = None if f_ref is None else float(f_ref)

    params = AlgoParams(scheme=spec.scheme, rho=rho, gamma=gamma,
                        max_iters=spec.iters, kkt_tol=spec.kkt_tol)
    extras = {"instance_meta": inst_meta, "S": S, "threads": threads}
    return instance, params, schedule, f_ref, extras


def cmd_gen(args) -> int:
    spec = _spec_from_args(args)
    instance, _ = _build_instance(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = save_instance(instance, out, extra_meta={"spec": json.loads(spec.to_json())})
    if args.shards:
        write_shards(instance, args.shards)
    _print_json({
        "instance": str(out),
        "sha256": meta["sha256"],
        "family": spec.family,
        "L_max": instance.lipschitz_max,
        "sigma2_min": instance.strong_convexity_min,
        "lambda_max_per_block": [b.lipschitz / 2.0 for b in instance.blocks],
    })
    return EXIT_OK


def cmd_advise(args) -> int:
    spec = _spec_from_args(args)
    instance, _ = _build_instance(spec)
    N = instance.n_blocks
    S = N
    if args.probs is not None or spec.scheme != "sync":
        probs = arrival_probs(_parse_probs(spec.probs), N)
        model = ArrivalModel(probs=tuple(probs), tau=spec.tau,
                             min_arrivals=spec.min_arrivals, seed=spec.seed)
        S = empirical_arrival_bound(generate_schedule(model, args.dry_iters))
    rec = advisor_mod.recommend(instance, spec.tau, S=S)
    payload = rec.as_dict()
    if args.check_initial is not None:
        from .model import ConsensusState
        f_lower = (proximal_gradient_reference(instance).objective
                   if args.check_initial == "oracle"
                   else float(args.check_initial))
        state0 = ConsensusState.initial(instance)
        payload["initial_condition_ok"] = advisor_mod.check_initial_condition(
            instance, state0, rec.rho, f_lower)
        payload["f_lower"] = f_lower
    _print_json(payload)
    return EXIT_OK


def _run_once(spec: ExperimentSpec, out_dir: Path, threads: int | None,
              replay: str | None = None) -> int:
    instance, params, schedule, f_ref, extras = _resolve_run(spec, threads)
    if replay is not None:
        schedule = Schedule.from_jsonl(replay)
        validate_bounded_delay(schedule)
    out_dir.mkdir(parents=True, exist_ok=True)
    if params.scheme == "sync":
        trace = run_sync(instance, params, threads=threads,
                         record_iterates=spec.record_iterates)
    elif params.scheme == "ad-admm":
        trace = run_ad_admm(instance, params, schedule, threads=threads,
                            record_iterates=spec.record_iterates)
    else:
        trace = run_alternative(instance, params, schedule, threads=threads,
                                record_iterates=spec.record_iterates)
    trace.f_ref = f_ref
    trace.meta.update({
        "spec": json.loads(spec.to_json()),
        "instance_sha256": extras["instance_meta"].get("sha256"),
        "S": extras["S"],
    })
    write_trace_csv(trace, out_dir / "trace.csv")
    if schedule is not None:
        schedule.to_jsonl(out_dir / "schedule.jsonl")
    if trace.iterates is not None:
        save_iterates(trace.iterates, out_dir / "iterates.npz")
    final_kkt = trace.records[-1].kkt.as_tuple() if trace.records else None
    accuracy_final = None
    if f_ref and trace.records:
        accuracy_final = float(diag.accuracy_series(trace, f_ref)[-1])
    summary = {
        "scheme": params.scheme, "rho": params.rho, "gamma": params.gamma,
        "iterations": trace.completed_iterations,
        "diverged": trace.diverged, "diverged_at": trace.diverged_at,
        "final_kkt": final_kkt, "f_ref": f_ref,
        "accuracy_final": accuracy_final,
        "wall_time_s": trace.wall_time,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _print_json(summary)
    return EXIT_DIVERGED if trace.diverged else EXIT_OK


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    return _run_once(spec, Path(args.out), args.threads, replay=args.replay)


def cmd_check(args) -> int:
    trace = read_trace_csv(args.trace)
    instance, inst_meta = load_instance(args.instance)
    recorded_sha = trace.meta.get("instance_sha256")
    if recorded_sha and recorded_sha != inst_meta.get("sha256"):
        raise CliError("trace was produced from a different instance "
                       f"(sha {recorded_sha[:12]} != {inst_meta.get('sha256', '')[:12]})")
    if trace.n_workers != instance.n_blocks or trace.dim != instance.dim:
        raise CliError("trace and instance shapes are incompatible")
    L = instance.lipschitz_max
    tau = int(trace.meta.get("tau", 1))
    descent = diag.check_descent(trace, L, convex=instance.is_convex)
    staleness = diag.check_staleness_bound(trace, tau)
    if args.f_lower == "oracle":
        f_lower = proximal_gradient_reference(instance).objective
        f_lower_src = "oracle"
    elif args.f_lower is not None:
        f_lower = float(args.f_lower)
        f_lower_src = "user"
    else:
        # non-convex fallback: best center objective ever observed, making
        # the lower-bound check a necessary-condition test only
        f_lower = min(r.objective for r in trace.records) if trace.records else 0.0
        f_lower_src = "best-observed"
    lower = diag.check_lower_bound(trace, f_lower, L)
    payload = {
        "descent": {"status": descent.status, "min_slack": descent.min_slack,
                    "tolerance": descent.tolerance, "passed": descent.passed},
        "staleness": {"lhs": staleness.lhs, "rhs": staleness.rhs,
                      "S": staleness.S, "tau": staleness.tau,
                      "passed": staleness.passed},
        "lower_bound": {"status": lower.status, "min_margin": lower.min_margin,
                        "f_lower": f_lower, "f_lower_source": f_lower_src,
                        "tolerance": lower.tolerance, "passed": lower.passed},
        "dual_identity_max": diag.dual_identity_max(trace),
    }
    iterates_path = Path(args.trace).with_name("iterates.npz")
    if iterates_path.exists() and trace.f_ref is not None:
        trace.iterates = load_iterates(iterates_path)
        gaps = diag.ergodic_gaps(instance, trace, trace.f_ref)
        try:
            rate = diag.check_ergodic_rate(gaps)
            payload["ergodic_rate"] = {
                "fitted_C": rate.fitted_C, "monotone_ok": rate.monotone_ok,
                "reference_k": rate.reference_k,
                "reference_value": rate.reference_value}
        except diag.InsufficientData as exc:
            payload["ergodic_rate"] = {"status": str(exc)}
    _print_json(payload)
    return EXIT_OK


def cmd_report(args) -> int:
    traces = [(Path(p), read_trace_csv(p)) for p in args.traces]
    include_accuracy = all(t.f_ref for _, t in traces)
    if not include_accuracy:
        print("warning: accuracy column omitted (f_ref unavailable for at "
              "least one trace)", file=sys.stderr)
    columns = ["run_id", "k", "l_rho"]
    if include_accuracy:
        columns.append("accuracy")
    columns += ["kkt_worker", "kkt_master", "kkt_consensus", "n_arrived"]
    lines = [",".join(columns)]
    for path, trace in traces:
        run_id = path.parent.name or path.stem
        acc = diag.accuracy_series(trace, trace.f_ref) if include_accuracy else None
        for idx, r in enumerate(trace.records):
            row = [run_id, str(r.k), format(r.l_rho, ".17g")]
            if include_accuracy:
                row.append(format(acc[idx + 1], ".17g"))
            row += [format(r.kkt.worker, ".17g"),
                    format(float("nan") if r.kkt.master is None else r.kkt.master, ".17g"),
                    format(r.kkt.consensus, ".17g"),
                    str(len(r.arrivals))]
            lines.append(",".join(row))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines) - 1} rows to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    manifest = json.loads(Path(args.config).read_text(encoding="utf-8"))
    base = Path(args.out)
    worst = EXIT_OK
    for entry in manifest["runs"]:
        spec = ExperimentSpec(**entry)
        name = entry.get("name") or (spec.preset or spec.scheme)
        out_dir = base / str(name)
        code = _run_once(spec, out_dir, args.threads)
        worst = max(worst, code)
    return worst


def cmd_master(args) -> int:
    instance, _ = load_instance(args.instance)
    trace, schedule = master_serve(
        instance, rho=args.rho, gamma=args.gamma, tau=args.tau,
        min_arrivals=args.min_arrivals, n_iters=args.iters,
        host=args.host, port=args.port)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, out_dir / "trace.csv")
    schedule.to_jsonl(out_dir / "schedule.jsonl")
    final_kkt = trace.records[-1].kkt.as_tuple() if trace.records else None
    _print_json({"iterations": trace.completed_iterations,
                 "final_kkt": final_kkt, "wall_time_s": trace.wall_time})
    return EXIT_OK


def cmd_worker(args) -> int:
    shard, meta = load_instance(args.shard)
    worker_id = args.worker_id if args.worker_id is not None \
        else int(meta.get("worker", 0))
    host, _, port = args.master.rpartition(":")
    worker_serve(shard.blocks[0], worker_id, args.rho, host or "127.0.0.1",
                 int(port), shard.dim, compute_delay=args.compute_delay)
    return EXIT_OK


def _add_spec_flags(p: argparse.ArgumentParser, include_run: bool = True) -> None:
    p.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p.add_argument("--scale", type=float, default=1.0,
                   help="desk-scale factor for presets (e.g. 0.1)")
    p.add_argument("--family", choices=("lasso", "spca"), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--noise-var", type=float, dest="noise_var", default=None)
    p.add_argument("--nnz", type=int, default=None)
    p.add_argument("--gen-seed", type=int, dest="gen_seed", default=None)
    p.add_argument("--instance", default=None,
                   help="load an instance container instead of generating")
    if include_run:
        p.add_argument("--scheme", choices=("sync", "ad-admm", "alternative"),
                       default=None)
        p.add_argument("--rho", default=None,
                       help='number, "advisor", or "beta:<mult>"')
        p.add_argument("--gamma", default=None, help='number or "advisor"')
        p.add_argument("--tau", type=int, default=None)
        p.add_argument("--min-arrivals", type=int, dest="min_arrivals",
                       default=None)
        p.add_argument("--probs", default=None,
                       help="comma-separated list or named pattern")
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--seed", type=int, default=None,
                       help="arrival-process seed")
        p.add_argument("--kkt-tol", type=float, dest="kkt_tol", default=None)
        p.add_argument("--f-ref", dest="f_ref", default=None,
                       help='number or "oracle"')
        p.add_argument("--record-iterates", dest="record_iterates",
                       action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="admm-async",
                     description="Consensus ADMM engine, asynchronous-protocol "
                                 "simulator, and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an instance")
    _add_spec_flags(p, include_run=False)
    p.add_argument("--out", required=True)
    p.add_argument("--shards", default=None, help="also write per-worker shards")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("advise", help="parameter report")
    _add_spec_flags(p)
    p.add_argument("--dry-iters", type=int, default=1000,
                   help="schedule length for the empirical arrival bound")
    p.add_argument("--check-initial", default=None,
                   help='lower bound on the optimum, or "oracle"')
    p.set_defaults(func=cmd_advise)

    p = sub.add_parser("run", help="execute one run")
    _add_spec_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--replay", default=None,
                   help="replay a recorded schedule.jsonl instead of drawing")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="verify inequalities on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--f-lower", dest="f_lower", default=None,
                   help='number or "oracle"')
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="merge traces into plot-ready CSV")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run a manifest of configurations")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("master", help="socket protocol master")
    p.add_argument("--instance", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--min-arrivals", type=int, dest="min_arrivals", default=1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("worker", help="socket protocol worker")
    p.add_argument("--shard", required=True)
    p.add_argument("--worker-id", type=int, dest="worker_id", default=None)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--master", required=True, help="host:port")
    p.add_argument("--compute-delay", type=float, dest="compute_delay",
                   default=0.0)
    p.set_defaults(func=cmd_worker)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entrypoint() -> None:
    sys.exit(main())
