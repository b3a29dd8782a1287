"""Run metrics, regression datasets, OLS and table/plot emission.

Functions here take run logs duck-typed (``config``, ``daily``, ``weekly``,
``ok``) so the module does not import the harness.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

METRICS = ("cumulative_cases", "cumulative_prediction_error", "mean_transmission_reduction")
METRIC_LABELS = {
    "cumulative_cases": "Cumulative cases",
    "cumulative_prediction_error": "Cumulative prediction error",
    "mean_transmission_reduction": "Mean transmission multiplier",
}
# Ordering of agent conditions in tables and plots.
CONDITION_ORDER = ("base", "knowledge", "ensemble", "ensemble_knowledge", "scripted")


class SingularDesign(np.linalg.LinAlgError):
    """The design matrix does not have full column rank."""


class Model(str, enum.Enum):
    M1 = "M1"  # recent information
    M2 = "M2"  # + dynamic memory
    M3 = "M3"  # + treatment effects


class Target(str, enum.Enum):
    PREDICTION = "prediction"
    DECISION = "decision"


REGRESSORS = (
    ("last_week_cases", "Last Week Cases"),
    ("last_week_decision", "Last Week Decision"),
    ("avg_decision_memory", "Avg Decision in Memory"),
    ("avg_cases_memory", "Avg Cases in Memory"),
    ("knowledge", "Knowledge"),
    ("ensemble", "Ensemble"),
    ("ensemble_x_knowledge", "Ensemble x Knowledge"),
)
INTERCEPT = ("const", "Constant")
MODEL_REGRESSORS = {Model.M1: 2, Model.M2: 4, Model.M3: 7}
TERM_LABELS = dict([*REGRESSORS, INTERCEPT])


# ---------------------------------------------------------------- metrics

def cumulative_cases(runlog) -> float:
    return math.fsum(runlog.daily["cases"])


def realized_weekly_cases(runlog) -> dict[int, float]:
    """Mean daily reported cases within each week's own days."""
    delta = runlog.config["decision_interval"]
    buckets: dict[int, list[float]] = defaultdict(list)
    for day, c in zip(runlog.daily["day"], runlog.daily["cases"]):
        buckets[math.ceil(day / delta)].append(c)
    return {w: math.fsum(v) / len(v) for w, v in buckets.items()}


def cumulative_prediction_error(runlog) -> float:
    """Sum over agent weeks of |with-policy forecast - realized weekly mean|."""
    start = runlog.config["start_week"]
    realized = realized_weekly_cases(runlog)
    errors = [
        abs(e["decision"]["prediction_with_new_policy"] - realized[e["week"]])
        for e in runlog.weekly
        if e["decision"] is not None and e["week"] >= start and e["week"] in realized
    ]
    return math.fsum(errors)


def mean_transmission_reduction(runlog) -> float:
    """Mean of the daily policy/behavior multiplier ``b * g`` (noise excluded)."""
    b = np.asarray(runlog.daily["b"], dtype=float)
    g = np.asarray(runlog.daily["g"], dtype=float)
    if b.size == 0:
        return float("nan")
    return float(np.mean(b * g))


def run_metrics(runlog) -> dict[str, float]:
    return {
        "cumulative_cases": cumulative_cases(runlog),
        "cumulative_prediction_error": cumulative_prediction_error(runlog),
        "mean_transmission_reduction": mean_transmission_reduction(runlog),
    }


def cell_key(runlog) -> tuple[str, str]:
    return runlog.config["world"]["mode"], runlog.config["agent_kind"]


def _condition_rank(kind: str) -> int:
    return CONDITION_ORDER.index(kind) if kind in CONDITION_ORDER else len(CONDITION_ORDER)


def group_cells(logs: Iterable) -> dict[tuple[str, str], list]:
    cells: dict[tuple[str, str], list] = defaultdict(list)
    for runlog in logs:
        if runlog.ok:
            cells[cell_key(runlog)].append(runlog)
    return dict(sorted(cells.items(), key=lambda kv: (kv[0][0], _condition_rank(kv[0][1]))))


@dataclass
class CellMetric:
    world: str
    agent: str
    metric: str
    n_runs: int
    mean: float
    min: float
    max: float
    index_mean: float = float("nan")
    index_min: float = float("nan")
    index_max: float = float("nan")


@dataclass
class MetricsSummary:
    per_run: list[dict] = field(default_factory=list)
    cells: list[CellMetric] = field(default_factory=list)

    def cell(self, world: str, agent: str, metric: str) -> CellMetric:
        for c in self.cells:
            if (c.world, c.agent, c.metric) == (world, agent, metric):
                return c
        raise KeyError((world, agent, metric))


def summarize_metrics(logs: Iterable, reference: str = "base") -> MetricsSummary:
    """Per-cell mean/min/max, indexed to the world's ``reference`` condition mean."""
    cells = group_cells(logs)
    summary = MetricsSummary()
    values: dict[tuple[str, str, str], list[float]] = {}
    for (world, agent), runs in cells.items():
        for runlog in runs:
            m = run_metrics(runlog)
            summary.per_run.append({"world": world, "agent": agent, "run_id": runlog.run_id, **m})
            for name in METRICS:
                values.setdefault((world, agent, name), []).append(m[name])
    for (world, agent, name), vals in values.items():
        # fsum keeps the mean of identical values exactly equal to them.
        cm = CellMetric(world, agent, name, len(vals), math.fsum(vals) / len(vals), min(vals), max(vals))
        ref = values.get((world, reference, name))
        if ref:
            ref_mean = math.fsum(ref) / len(ref)
            if ref_mean != 0:
                cm.index_mean, cm.index_min, cm.index_max = (v / ref_mean for v in (cm.mean, cm.min, cm.max))
        summary.cells.append(cm)
    return summary


# ------------------------------------------------------------- regression

@dataclass
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    rows: list[tuple[str, str, int]]  # (agent, run_id, week)
    world: str | None = None

    @property
    def n(self) -> int:
        return len(self.y)

    def eligible_weeks(self) -> dict[tuple[str, str], int]:
        counts: dict[tuple[str, str], int] = defaultdict(int)
        for agent, run_id, _ in self.rows:
            counts[(agent, run_id)] += 1
        return dict(counts)


def _regression_rows(runlog):
    kind = runlog.config["agent_kind"]
    knowledge = float(kind in ("knowledge", "ensemble_knowledge"))
    ensemble = float(kind in ("ensemble", "ensemble_knowledge"))
    records = runlog.memory_records()
    for e in runlog.weekly:
        if e["decision"] is None or e["week"] < 2 or not e["memory_indices"]:
            continue
        recalled = [records[i] for i in e["memory_indices"]]
        regressors = {
            "last_week_cases": e["last_week_mean_cases"],
            "last_week_decision": e["previous_restriction"],
            "avg_decision_memory": math.fsum(r.restriction for r in recalled) / len(recalled),
            "avg_cases_memory": math.fsum(r.cases_on_decision_day for r in recalled) / len(recalled),
            "knowledge": knowledge,
            "ensemble": ensemble,
            "ensemble_x_knowledge": knowledge * ensemble,
        }
        responses = {
            Target.PREDICTION: float(e["decision"]["prediction_with_new_policy"]),
            Target.DECISION: e["restriction"],
        }
        yield e["week"], regressors, responses


def build_regression_dataset(logs: Sequence, model: Model | str = Model.M3,
                             target: Target | str = Target.PREDICTION) -> RegressionDataset:
    """One row per (run, agent decision week) with a lagged decision and recalled memories.

    All logs must come from the same world. Failed runs are skipped.
    """
    model, target = Model(model), Target(target)
    worlds = {runlog.config["world"]["mode"] for runlog in logs}
    if len(worlds) > 1:
        raise ValueError(f"pool logs within one world, got {sorted(worlds)}")
    names = [key for key, _ in REGRESSORS[: MODEL_REGRESSORS[model]]] + [INTERCEPT[0]]
    X_rows, y, rows = [], [], []
    for runlog in logs:
        if not runlog.ok:
            continue
        for week, regressors, responses in _regression_rows(runlog):
            X_rows.append([regressors[n] for n in names[:-1]] + [1.0])
            y.append(responses[target])
            rows.append((runlog.config["agent_kind"], runlog.run_id, week))
    X = np.asarray(X_rows, dtype=float).reshape(len(X_rows), len(names))
    return RegressionDataset(X, np.asarray(y, dtype=float), names, rows, worlds.pop() if worlds else None)


@dataclass
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    adj_r2: float
    n: int
    df_resid: int

    def term(self, name: str) -> dict[str, float]:
        i = self.names.index(name)
        return {"coef": self.coef[i], "se": self.se[i], "t": self.t[i], "p": self.p[i]}


def ols_fit(X, y, names: Sequence[str] | None = None) -> RegressionResult:
    """Least squares with classical (homoskedastic) standard errors.

    ``X`` must already contain any intercept column. p-values are two-sided
    from Student's t with ``n - p`` degrees of freedom.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{i}" for i in range(p)]
    if n <= p or np.linalg.matrix_rank(X) < p:
        raise SingularDesign(f"design matrix {n}x{p} is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rss = float(resid @ resid)
    df = n - p
    sigma2 = rss / df
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    pvals = 2.0 * stats.t.sf(np.abs(t), df)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    return RegressionResult(names, coef, se, t, pvals, r2, adj, n, df)


def fit_all(logs: Sequence) -> dict[tuple[str, str, str], RegressionResult]:
    """Fit M1-M3 for both targets in every world present. Keys: (world, target, model)."""
    by_world: dict[str, list] = defaultdict(list)
    for runlog in logs:
        by_world[runlog.config["world"]["mode"]].append(runlog)
    results = {}
    for world in sorted(by_world):
        for target in Target:
            for model in Model:
                ds = build_regression_dataset(by_world[world], model, target)
                results[(world, target.value, model.value)] = ols_fit(ds.X, ds.y, ds.names)
    return results


# --------------------------------------------------------------- emission

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else repr(x))
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _stars(p: float) -> str:
    if not math.isfinite(p):
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def emit_summary(logs: Sequence, out_dir: str | Path) -> list[Path]:
    """Write metric and regression tables as CSV files under ``out_dir``.

    Files: ``runs.csv`` (per-run metrics), ``metrics.csv`` (per-cell
    mean/min/max and Base-indexed values), ``regression_long.csv`` and one
    ``regression_<target>.csv`` per target laid out like the published tables.
    """
    out_dir = Path(out_dir)
    summary = summarize_metrics(logs)
    written = [
        _write_csv(out_dir / "runs.csv", ["world", "agent", "run_id", *METRICS],
                   ([r["world"], r["agent"], r["run_id"], *(r[m] for m in METRICS)] for r in summary.per_run)),
        _write_csv(out_dir / "metrics.csv",
                   ["world", "agent", "metric", "n_runs", "mean", "min", "max", "index_mean", "index_min", "index_max"],
                   ([c.world, c.agent, c.metric, c.n_runs, c.mean, c.min, c.max, c.index_mean, c.index_min, c.index_max]
                    for c in summary.cells)),
    ]
    ok_logs = [runlog for runlog in logs if runlog.ok]
    if not ok_logs:
        return written
    results = fit_all(ok_logs)
    long_rows = []
    for (world, target, model), res in results.items():
        for i, name in enumerate(res.names):
            long_rows.append([target, world, model, name, res.coef[i], res.se[i], res.t[i], res.p[i], res.n, res.r2, res.adj_r2])
    written.append(_write_csv(out_dir / "regression_long.csv",
                              ["target", "world", "model", "term", "coef", "se", "t", "p", "n", "r2", "adj_r2"], long_rows))
    worlds = sorted({w for w, _, _ in results})
    columns = [(w, m.value) for w in worlds for m in Model]
    terms = [key for key, _ in REGRESSORS] + [INTERCEPT[0]]
    for target in Target:
        rows = []
        for term in terms:
            coef_row, se_row = [TERM_LABELS[term]], [""]
            for world, model in columns:
                res = results[(world, target.value, model)]
                if term in res.names:
                    t = res.term(term)
                    coef_row.append(f"{t['coef']:.6g}{_stars(t['p'])}")
                    se_row.append(f"({t['se']:.6g})")
                else:
                    coef_row.append("")
                    se_row.append("")
            rows += [coef_row, se_row]
        for label, attr in (("N", "n"), ("R2", "r2"), ("Adj. R2", "adj_r2")):
            rows.append([label] + [f"{getattr(results[(w, target.value, m)], attr):.6g}" for w, m in columns])
        header = ["term"] + [f"{w} {m}" for w, m in columns]
        written.append(_write_csv(out_dir / f"regression_{target.value}.csv", header, rows))
    return written


def _mean_series(runs, key: str) -> np.ndarray:
    return np.mean([np.asarray(r.daily[key], dtype=float) for r in runs], axis=0)


def weekly_multiplier(runlog) -> np.ndarray:
    delta = runlog.config["decision_interval"]
    bg = np.asarray(runlog.daily["b"], dtype=float) * np.asarray(runlog.daily["g"], dtype=float)
    n_weeks = math.ceil(len(bg) / delta)
    return np.array([bg[i * delta:(i + 1) * delta].mean() for i in range(n_weeks)])


def _save_svg(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def emit_plots(logs: Sequence, out_dir: str | Path) -> list[Path]:
    """Per world: one time-series figure and three indexed bar panels (SVG + CSV)."""
    import matplotlib
    from matplotlib.figure import Figure

    matplotlib.rcParams["svg.hashsalt"] = "epipolicy"
    out_dir = Path(out_dir)
    cells = group_cells(logs)
    summary = summarize_metrics(logs)
    written = []
    for world in sorted({w for w, _ in cells}):
        world_cells = [(agent, runs) for (w, agent), runs in cells.items() if w == world]

        fig = Figure(figsize=(10, 4))
        ax_cases, ax_mult = fig.subplots(1, 2)
        series_rows = []
        for agent, runs in world_cells:
            cases = _mean_series(runs, "cases")
            mult = np.mean([weekly_multiplier(r) for r in runs], axis=0)
            ax_cases.plot(np.arange(1, len(cases) + 1), cases, label=agent)
            ax_mult.plot(np.arange(1, len(mult) + 1), mult, label=agent)
            series_rows += [[agent, "daily_cases", i + 1, v] for i, v in enumerate(cases.tolist())]
            series_rows += [[agent, "weekly_multiplier", i + 1, v] for i, v in enumerate(mult.tolist())]
        ax_cases.set(xlabel="Day", ylabel="Mean daily cases", title=f"{world}: daily cases")
        ax_mult.set(xlabel="Week", ylabel="Mean b*g", title=f"{world}: transmission multiplier", ylim=(0, 1.05))
        ax_cases.legend(fontsize="small")
        fig.tight_layout()
        written.append(_save_svg(fig, out_dir / f"{world}_timeseries.svg"))
        written.append(_write_csv(out_dir / f"{world}_timeseries.csv", ["agent", "series", "t", "value"], series_rows))

        for metric in METRICS:
            bars = [summary.cell(world, agent, metric) for agent, _ in world_cells]
            indexed = all(math.isfinite(b.index_mean) for b in bars)
            mean = np.array([b.index_mean if indexed else b.mean for b in bars])
            lo = np.array([b.index_min if indexed else b.min for b in bars])
            hi = np.array([b.index_max if indexed else b.max for b in bars])
            fig = Figure(figsize=(5, 4))
            ax = fig.subplots()
            x = np.arange(len(bars))
            ax.bar(x, mean, yerr=np.vstack([mean - lo, hi - mean]), capsize=4)
            ax.set_xticks(x, [b.agent for b in bars], rotation=20)
            ax.set(title=f"{world}: {METRIC_LABELS[metric]}",
                   ylabel="Indexed to base" if indexed else METRIC_LABELS[metric])
            fig.tight_layout()
            written.append(_save_svg(fig, out_dir / f"{world}_{metric}.svg"))
            written.append(_write_csv(out_dir / f"{world}_{metric}.csv", ["agent", "mean", "min", "max", "indexed"],
                                      ([b.agent, m, l, h, indexed] for b, m, l, h in zip(bars, mean.tolist(), lo.tolist(), hi.tolist()))))
    return written
