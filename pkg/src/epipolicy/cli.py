"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, harness
from .epidemic import WorldMode
from .gateway import GatewayConfig, HttpGateway, MissingCredentials, RecordingGateway, ReplayGateway
from .harness import AgentKind, Backend, ExperimentMatrix, RunConfig

log = logging.getLogger("epipolicy")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def effective_run_config(args, file_cfg: dict) -> RunConfig:
    # The file is only read; overrides are applied to the in-memory copy.
    run = dict(file_cfg.get("run", {}))
    world = dict(run.pop("world", {}))
    if getattr(args, "world", None):
        world["mode"] = WorldMode.parse(args.world).value
    try:
        cfg = RunConfig(world=world, **run)
        changes = {}
        if getattr(args, "agent", None):
            kind = AgentKind.parse(args.agent)
            changes["agent_kind"] = kind
            if kind is AgentKind.SCRIPTED:
                changes["backend"] = Backend.SCRIPTED
        if getattr(args, "backend", None):
            changes["backend"] = Backend(args.backend)
        if getattr(args, "seed", None) is not None:
            changes["world_seed"] = changes["memory_seed"] = args.seed
        if getattr(args, "world_seed", None) is not None:
            changes["world_seed"] = args.world_seed
        if getattr(args, "memory_seed", None) is not None:
            changes["memory_seed"] = args.memory_seed
        if getattr(args, "days", None) is not None:
            changes["days"] = args.days
        if getattr(args, "ensemble_size", None) is not None:
            changes["ensemble_k"] = args.ensemble_size
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run configuration: {exc}") from exc


def gateway_config(file_cfg: dict) -> GatewayConfig:
    try:
        return GatewayConfig.from_dict(file_cfg.get("gateway", {}))
    except TypeError as exc:
        raise UsageError(f"invalid gateway configuration: {exc}") from exc


def _write_json(path: Path, obj):
    harness.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _print_summary(runlog, out=None):
    out = out or sys.stdout
    s = runlog.summary
    print(f"status: {runlog.status}", file=out)
    if runlog.error:
        print(f"error: {runlog.error}", file=out)
    if s:
        print(f"cumulative cases: {s['cumulative_cases']:.1f}", file=out)
        print(f"mean transmission multiplier: {s['mean_transmission_reduction']:.4f}", file=out)
        print(f"cumulative prediction error: {s['cumulative_prediction_error']:.1f}", file=out)


def cmd_run(args) -> int:
    file_cfg = load_config_file(args.config)
    cfg = effective_run_config(args, file_cfg)
    run_dir = Path(args.out) / cfg.world.mode.value / cfg.agent_kind.value / args.run_id
    gateway = None
    if not cfg.scripted:
        if args.replay:
            gateway = ReplayGateway(args.replay)
        else:
            try:
                gateway = HttpGateway(gateway_config(file_cfg))
            except MissingCredentials as exc:
                raise UsageError(str(exc)) from exc
            gateway = RecordingGateway(gateway, args.record or run_dir / "transcript.jsonl")
    runlog = harness.run_simulation(cfg, gateway=gateway, run_id=args.run_id)
    _write_json(run_dir / "config.json", {"run": cfg.to_dict(), "gateway": gateway_config(file_cfg).to_dict()})
    path = harness.persist(runlog, run_dir / "runlog.json")
    _print_summary(runlog)
    print(f"run log: {path}")
    return EXIT_OK if runlog.ok else EXIT_FAILURE


def cmd_replay(args) -> int:
    args.replay = args.transcript
    return cmd_run(args)


def _parse_kinds(text: str | None, file_cfg: dict) -> tuple[tuple[AgentKind, ...], bool]:
    if text is None:
        kinds = file_cfg.get("matrix", {}).get("agent_kinds")
        return (tuple(AgentKind.parse(k) for k in kinds) if kinds else harness.STANDARD_CONDITIONS), False
    if text in ("standard", "all"):
        return harness.STANDARD_CONDITIONS, False
    if text == "scripted-variants":
        return harness.STANDARD_CONDITIONS, True
    try:
        return tuple(AgentKind.parse(k) for k in text.split(",")), False
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_experiment(args) -> int:
    file_cfg = load_config_file(args.config)
    base = effective_run_config(args, file_cfg)
    kinds, scripted = _parse_kinds(args.agent_kinds, file_cfg)
    if scripted:
        base = replace(base, backend=Backend.SCRIPTED)
    matrix_cfg = dict(file_cfg.get("matrix", {}))
    try:
        matrix = ExperimentMatrix(
            worlds=tuple(args.worlds.split(",")) if args.worlds else tuple(matrix_cfg.get("worlds", ("world1", "world2"))),
            agent_kinds=kinds,
            runs_per_cell=args.runs if args.runs is not None else matrix_cfg.get("runs_per_cell", 10),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else file_cfg.get("seeds")
    if seeds is None:
        seeds = harness.default_seeds(matrix.runs_per_cell, args.seed if args.seed is not None else 42)
    if len(seeds) != matrix.runs_per_cell:
        raise UsageError(f"need {matrix.runs_per_cell} seeds, got {len(seeds)}")

    out = Path(args.out)
    gw_cfg = gateway_config(file_cfg)
    factory = None
    needs_llm = any(not replace(base, agent_kind=k).scripted for k in matrix.agent_kinds)
    if needs_llm and args.replay:
        replay_root = Path(args.replay)

        def replay_gateway(spec):
            return ReplayGateway(replay_root / spec.world.value / spec.kind.value / spec.run_id / "transcript.jsonl")
        factory = replay_gateway
    elif needs_llm:
        try:
            shared = HttpGateway(gw_cfg)
        except MissingCredentials as exc:
            raise UsageError(str(exc)) from exc

        def recording_gateway(spec):
            return RecordingGateway(shared, out / spec.world.value / spec.kind.value / spec.run_id / "transcript.jsonl")
        factory = recording_gateway

    _write_json(out / "config.json", {"run": base.to_dict(), "matrix": matrix.to_dict(), "seeds": seeds,
                                      "gateway": gw_cfg.to_dict()})
    logs = harness.run_experiment(matrix, seeds, base, out_dir=out, gateway_factory=factory, workers=args.workers)
    failed = [(l.config["world"]["mode"], l.config["agent_kind"], l.run_id, l.error) for l in logs if not l.ok]
    print(f"{len(logs) - len(failed)}/{len(logs)} runs completed; manifest: {out / 'manifest.json'}")
    for world, kind, run_id, error in failed:
        print(f"FAILED {world}/{kind}/{run_id}: {error}")
    cells = analysis.group_cells(logs)
    empty = [(w.value, k.value) for w in matrix.worlds for k in matrix.agent_kinds if (w.value, k.value) not in cells]
    return EXIT_FAILURE if empty else EXIT_OK


def _load_for_analysis(out_dir) -> list:
    try:
        logs, missing = harness.load_experiment(out_dir)
    except harness.RunLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None
    if missing:
        print("error: missing run logs:", file=sys.stderr)
        for path in missing:
            print(f"  {path}", file=sys.stderr)
        return None
    return logs


def cmd_analyze(args) -> int:
    logs = _load_for_analysis(args.out)
    if logs is None:
        return EXIT_FAILURE
    dest = Path(args.dest) if args.dest else Path(args.out) / "analysis"
    written = analysis.emit_summary(logs, dest)
    for world in sorted({l.config["world"]["mode"] for l in logs}):
        ds = analysis.build_regression_dataset([l for l in logs if l.config["world"]["mode"] == world])
        weeks = sorted(set(ds.eligible_weeks().values()))
        print(f"{world}: N={ds.n} regression rows, eligible weeks per run {weeks}")
    for path in written:
        print(path)
    return EXIT_OK


def cmd_plot(args) -> int:
    logs = _load_for_analysis(args.out)
    if logs is None:
        return EXIT_FAILURE
    dest = Path(args.dest) if args.dest else Path(args.out) / "plots"
    for path in analysis.emit_plots(logs, dest):
        print(path)
    return EXIT_OK


def _add_run_overrides(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--world", choices=["1", "2", "world1", "world2"])
    p.add_argument("--backend", choices=[b.value for b in Backend])
    p.add_argument("--seed", type=int, help="seed for both world noise and memory sampling")
    p.add_argument("--world-seed", type=int)
    p.add_argument("--memory-seed", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--ensemble-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epipolicy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one simulation run")
    _add_run_overrides(p)
    p.add_argument("--agent", choices=[k.value for k in AgentKind])
    p.add_argument("--run-id", default="run00")
    p.add_argument("--record", help="transcript path (default: <run dir>/transcript.jsonl)")
    p.add_argument("--replay", help="serve model responses from this transcript")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a single run from a recorded transcript")
    _add_run_overrides(p)
    p.add_argument("transcript")
    p.add_argument("--agent", choices=[k.value for k in AgentKind])
    p.add_argument("--run-id", default="run00")
    p.set_defaults(func=cmd_replay, record=None)

    p = sub.add_parser("experiment", help="run the world x agent matrix")
    _add_run_overrides(p)
    p.add_argument("--runs", type=int, help="runs per cell")
    p.add_argument("--agent-kinds", help="comma list, 'all', or 'scripted-variants'")
    p.add_argument("--worlds", help="comma list, e.g. world1,world2")
    p.add_argument("--seeds", help="comma list of per-run seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--replay", help="directory of recorded transcripts laid out like the output tree")
    p.set_defaults(func=cmd_experiment)

    for name, func, help_ in (("analyze", cmd_analyze, "write metric and regression tables"),
                              ("plot", cmd_plot, "write SVG figures")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("out", nargs="?", default="out", help="experiment output directory")
        p.add_argument("--dest", help="where to write (default: <out>/%s)" % ("analysis" if name == "analyze" else "plots"))
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
