"""Daily simulation loop with weekly policy decisions, and the experiment matrix.

Per day ``t`` (1-based), with ``w = ceil(t / interval)``:

1. On a decision day (``t == 1`` or ``(t - 1) % interval == 0``) refresh last
   week's mean cases; from ``start_week`` on, sample memories and ask the
   agent for the restriction level, otherwise keep it at 0.
2. Compute ``g``, ``b`` and one noise draw, then take one SEIR step.
3. Record ``C_t = E / L``; on decision days store ``(w, G_w, C_t)`` in memory.

Two independent generators are used: one for world noise and one for memory
sampling, so agent-side sampling never shifts the epidemic noise sequence.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis
from .agents import DecisionError, LLMDecider, PolicyAgent, ScriptedDecider
from .epidemic import (
    EpidemicState,
    SimulationError,
    WorldConfig,
    WorldMode,
    behavior_modifier,
    draw_noise,
    effective_beta,
    government_effect,
    reported_cases,
    seir_step,
    weekly_mean_cases,
)
from .gateway import MissingCredentials, ReplayMismatch, ScriptExhausted, TransportError, prompt_hash
from .memory import DEFAULT_DECAY, MemoryRecord, MemoryStore

log = logging.getLogger(__name__)

SCHEMA = "epipolicy.runlog"
SCHEMA_VERSION = 1
WORLD_STREAM, MEMORY_STREAM = 0, 1
DAILY_FIELDS = ("day", "S", "E", "I", "R", "beta_eff", "b", "g", "eps", "cases")
FATAL_ERRORS = (DecisionError, TransportError, ReplayMismatch, ScriptExhausted, MissingCredentials, SimulationError)


class AgentKind(str, enum.Enum):
    BASE = "base"
    KNOWLEDGE = "knowledge"
    ENSEMBLE = "ensemble"
    ENSEMBLE_KNOWLEDGE = "ensemble_knowledge"
    SCRIPTED = "scripted"

    @property
    def knowledge(self) -> bool:
        return self in (AgentKind.KNOWLEDGE, AgentKind.ENSEMBLE_KNOWLEDGE)

    @property
    def ensemble(self) -> bool:
        return self in (AgentKind.ENSEMBLE, AgentKind.ENSEMBLE_KNOWLEDGE)

    @classmethod
    def parse(cls, value) -> "AgentKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("-", "_").replace("+", "_"))


STANDARD_CONDITIONS = (AgentKind.BASE, AgentKind.KNOWLEDGE, AgentKind.ENSEMBLE, AgentKind.ENSEMBLE_KNOWLEDGE)


class Backend(str, enum.Enum):
    LLM = "llm"
    SCRIPTED = "scripted"  # threshold rule stands in for every model call


class RunLogError(ValueError):
    """A persisted run log is unreadable or has the wrong schema."""


@dataclass(frozen=True)
class RunConfig:
    days: int = 365
    decision_interval: int = 7
    start_week: int = 6
    memory_sample: int = 5
    world: WorldConfig = field(default_factory=WorldConfig)
    agent_kind: AgentKind = AgentKind.BASE
    backend: Backend = Backend.LLM
    ensemble_k: int = 10
    world_seed: int = 42
    memory_seed: int = 42
    memory_decay: float = DEFAULT_DECAY
    retry_budget: int = 3
    # Execution setting only: excluded from equality and from persisted logs.
    ensemble_workers: int = field(default=1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "agent_kind", AgentKind.parse(self.agent_kind))
        object.__setattr__(self, "backend", Backend(self.backend))
        if isinstance(self.world, dict):
            object.__setattr__(self, "world", WorldConfig.from_dict(self.world))
        if not self.days >= self.decision_interval >= 1:
            raise ValueError("need days >= decision_interval >= 1")
        if self.start_week < 1 or self.memory_sample < 0 or self.ensemble_k < 1:
            raise ValueError("start_week and ensemble_k must be >= 1, memory_sample >= 0")

    @property
    def n_weeks(self) -> int:
        return math.ceil(self.days / self.decision_interval)

    @property
    def scripted(self) -> bool:
        return self.backend is Backend.SCRIPTED or self.agent_kind is AgentKind.SCRIPTED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        d["agent_kind"] = self.agent_kind.value
        d["backend"] = self.backend.value
        del d["ensemble_workers"]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**data)


def make_rngs(world_seed: int, memory_seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    world = np.random.default_rng(np.random.SeedSequence(world_seed, spawn_key=(WORLD_STREAM,)))
    memory = np.random.default_rng(np.random.SeedSequence(memory_seed, spawn_key=(MEMORY_STREAM,)))
    return world, memory


def build_agent(cfg: RunConfig, gateway=None) -> PolicyAgent:
    if cfg.scripted:
        decider = ScriptedDecider()
    else:
        if gateway is None:
            raise MissingCredentials(f"agent kind {cfg.agent_kind.value} needs an LLM gateway")
        decider = LLMDecider(gateway, retry_budget=cfg.retry_budget)
    return PolicyAgent(
        decider,
        knowledge=cfg.world.mode if cfg.agent_kind.knowledge else None,
        ensemble_k=cfg.ensemble_k if cfg.agent_kind.ensemble else 1,
        max_workers=cfg.ensemble_workers,
    )


@dataclass
class RunLog:
    config: dict
    daily: dict[str, list]
    weekly: list[dict]
    status: str = "completed"
    error: str | None = None
    summary: dict = field(default_factory=dict)
    run_id: str = "run"
    schema_version: int = SCHEMA_VERSION

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def cases(self) -> np.ndarray:
        return np.asarray(self.daily["cases"], dtype=float)

    def memory_records(self) -> list[MemoryRecord]:
        return [MemoryRecord(e["week"], e["restriction"], e["decision_day_cases"])
                for e in self.weekly if e.get("decision_day_cases") is not None]

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunLog":
        if data.get("schema") != SCHEMA:
            raise RunLogError(f"not a run log (schema={data.get('schema')!r})")
        if data.get("schema_version") != SCHEMA_VERSION:
            raise RunLogError(f"unsupported schema version {data.get('schema_version')!r}")
        body = {k: v for k, v in data.items() if k != "schema"}
        try:
            log_ = cls(**body)
        except TypeError as exc:
            raise RunLogError(str(exc)) from exc
        missing = [f for f in DAILY_FIELDS if f not in log_.daily]
        if missing:
            raise RunLogError(f"daily series missing {missing}")
        return log_


def run_simulation(cfg: RunConfig, agent: PolicyAgent | None = None, gateway=None, run_id: str = "run") -> RunLog:
    world = cfg.world
    delta = cfg.decision_interval
    world_rng, memory_rng = make_rngs(cfg.world_seed, cfg.memory_seed)
    daily: dict[str, list] = {name: [] for name in DAILY_FIELDS}
    weekly: list[dict] = []
    runlog = RunLog(config=cfg.to_dict(), daily=daily, weekly=weekly, run_id=run_id)

    try:
        if agent is None:
            agent = build_agent(cfg, gateway)
        state = EpidemicState.initial(world)
        store = MemoryStore(decay=cfg.memory_decay)
        cases: list[float] = []
        G = 0.0
        last_week_cases = 0.0
        entry = None
        for t in range(1, cfg.days + 1):
            w = math.ceil(t / delta)
            decision_day = t == 1 or (t - 1) % delta == 0
            if decision_day:
                last_week_cases = weekly_mean_cases(cases, t, delta)
                entry = {
                    "week": w,
                    "day": t,
                    "last_week_mean_cases": last_week_cases,
                    "previous_restriction": G,
                    "decision": None,
                    "members": None,
                    "memory_indices": None,
                    "prompt": None,
                    "prompt_sha256": None,
                }
                if w >= cfg.start_week:
                    indices = store.sample_indices(cfg.memory_sample, memory_rng)
                    ctx = agent.context(w, last_week_cases, G * 100.0, [store.records[i] for i in indices])
                    decision, prompt, members = agent.decide(ctx)
                    G = decision.restriction
                    entry.update(
                        decision=decision.to_dict(),
                        members=[m.to_dict() for m in members] if len(members) > 1 else None,
                        memory_indices=indices,
                        prompt=prompt,
                        prompt_sha256=prompt_hash(prompt),
                    )
                else:
                    G = 0.0
            g = government_effect(G, world.alpha)
            b = behavior_modifier(world.mode, world.k, last_week_cases)
            eps = draw_noise(world_rng, world)
            beta_eff = effective_beta(world.beta0, b, g, eps)
            state = seir_step(state, beta_eff, world)
            c_t = reported_cases(state, world.L)
            cases.append(c_t)
            for name, value in zip(DAILY_FIELDS, (t, state.S, state.E, state.I, state.R, beta_eff, b, g, eps, c_t)):
                daily[name].append(value)
            if decision_day:
                store.append(MemoryRecord(w, G, c_t))
                entry["restriction"] = G
                entry["decision_day_cases"] = c_t
                weekly.append(entry)
    except FATAL_ERRORS as exc:
        log.error("run %s failed: %s", run_id, exc)
        runlog.status = "failed"
        runlog.error = f"{type(exc).__name__}: {exc}"
        return runlog

    runlog.summary = run_summary(runlog)
    return runlog


def run_summary(runlog: RunLog) -> dict:
    return {
        "cumulative_cases": analysis.cumulative_cases(runlog),
        "cumulative_prediction_error": analysis.cumulative_prediction_error(runlog),
        "mean_transmission_reduction": analysis.mean_transmission_reduction(runlog),
        "final_S": runlog.daily["S"][-1],
        "peak_daily_cases": max(runlog.daily["cases"]),
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(",", ":"))


def atomic_write_text(path: str | Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def persist(runlog: RunLog, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_text(path, _dumps(runlog.to_dict()) + "\n")
    return path


def load(path: str | Path) -> RunLog:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise RunLogError(f"cannot read run log {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise RunLogError(f"{path} does not hold a JSON object")
    return RunLog.from_dict(data)


@dataclass(frozen=True)
class ExperimentMatrix:
    worlds: tuple[WorldMode, ...] = (WorldMode.WORLD1, WorldMode.WORLD2)
    agent_kinds: tuple[AgentKind, ...] = STANDARD_CONDITIONS
    runs_per_cell: int = 10

    def __post_init__(self):
        object.__setattr__(self, "worlds", tuple(WorldMode.parse(w) for w in self.worlds))
        object.__setattr__(self, "agent_kinds", tuple(AgentKind.parse(a) for a in self.agent_kinds))
        if self.runs_per_cell < 1:
            raise ValueError("runs_per_cell must be >= 1")

    @property
    def total_runs(self) -> int:
        return len(self.worlds) * len(self.agent_kinds) * self.runs_per_cell

    def to_dict(self) -> dict:
        return {
            "worlds": [w.value for w in self.worlds],
            "agent_kinds": [a.value for a in self.agent_kinds],
            "runs_per_cell": self.runs_per_cell,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentMatrix":
        return cls(**data)


def default_seeds(runs: int, base: int = 42) -> list[int]:
    return [base + r for r in range(runs)]


def run_id_for(r: int) -> str:
    return f"run{r:02d}"


def runlog_path(out_dir: str | Path, world: WorldMode, kind: AgentKind, run_id: str) -> Path:
    return Path(out_dir) / world.value / kind.value / run_id / "runlog.json"


@dataclass(frozen=True)
class RunSpec:
    world: WorldMode
    kind: AgentKind
    run_index: int
    seed: int
    config: RunConfig

    @property
    def run_id(self) -> str:
        return run_id_for(self.run_index)


def plan_experiment(matrix: ExperimentMatrix, base: RunConfig, base_seeds: Sequence[int] | None = None) -> list[RunSpec]:
    """Expand the matrix; run ``r`` of every cell gets the same seed."""
    seeds = list(base_seeds) if base_seeds is not None else default_seeds(matrix.runs_per_cell)
    if len(seeds) != matrix.runs_per_cell:
        raise ValueError(f"need {matrix.runs_per_cell} seeds, got {len(seeds)}")
    specs = []
    for world in matrix.worlds:
        for kind in matrix.agent_kinds:
            for r, seed in enumerate(seeds):
                cfg = replace(base, world=base.world.with_mode(world), agent_kind=kind,
                              world_seed=seed, memory_seed=seed)
                specs.append(RunSpec(world, kind, r, seed, cfg))
    return specs


GatewayFactory = Callable[[RunSpec], object]


def run_experiment(
    matrix: ExperimentMatrix,
    base_seeds: Sequence[int] | None = None,
    base: RunConfig | None = None,
    out_dir: str | Path | None = None,
    gateway_factory: GatewayFactory | None = None,
    workers: int = 1,
) -> list[RunLog]:
    """Run every cell of the matrix; logs come back in matrix order.

    A failed run is kept as a partial log with ``status == "failed"``.
    """
    base = base or RunConfig()
    specs = plan_experiment(matrix, base, base_seeds)

    def execute(spec: RunSpec) -> RunLog:
        try:
            gateway = gateway_factory(spec) if gateway_factory and not spec.config.scripted else None
        except (OSError, MissingCredentials) as exc:
            return RunLog(config=spec.config.to_dict(), daily={f: [] for f in DAILY_FIELDS}, weekly=[],
                          status="failed", error=f"{type(exc).__name__}: {exc}", run_id=spec.run_id)
        runlog = run_simulation(spec.config, gateway=gateway, run_id=spec.run_id)
        if out_dir is not None:
            persist(runlog, runlog_path(out_dir, spec.world, spec.kind, spec.run_id))
        return runlog

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            logs = list(pool.map(execute, specs))
    else:
        logs = [execute(spec) for spec in specs]

    if out_dir is not None:
        write_manifest(out_dir, matrix, base, specs, logs)
    return logs


def write_manifest(out_dir, matrix: ExperimentMatrix, base: RunConfig, specs: list[RunSpec], logs: list[RunLog]) -> Path:
    out_dir = Path(out_dir)
    runs = [
        {
            "world": spec.world.value,
            "agent": spec.kind.value,
            "run_id": spec.run_id,
            "seed": spec.seed,
            "status": runlog.status,
            "error": runlog.error,
            "path": runlog_path(".", spec.world, spec.kind, spec.run_id).as_posix(),
        }
        for spec, runlog in zip(specs, logs)
    ]
    manifest = {
        "schema": "epipolicy.manifest",
        "schema_version": SCHEMA_VERSION,
        "matrix": matrix.to_dict(),
        "seeds": sorted({spec.seed for spec in specs}),
        "base_config": base.to_dict(),
        "runs": runs,
    }
    path = out_dir / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RunLogError(f"cannot read manifest {path}: {exc}") from exc


def load_experiment(out_dir: str | Path) -> tuple[list[RunLog], list[str]]:
    """Load every run listed in the manifest. Returns (logs, missing paths)."""
    manifest = load_manifest(out_dir)
    logs, missing = [], []
    for run in manifest["runs"]:
        path = Path(out_dir) / run["path"]
        if not path.exists():
            missing.append(run["path"])
            continue
        logs.append(load(path))
    return logs, missing
