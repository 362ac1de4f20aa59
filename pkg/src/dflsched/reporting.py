"""Metric suites over scenario splits, model comparison and plot-data files.

Everything lands as CSV/JSON under ``{run_id}/{split}/``; a verdict JSON
summarizes the comparison flags for CI consumption.  Timing is reported in
the metrics objects but kept out of the deterministic metric files.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import learning, scheduler
from .learning import TrainingLog, hierarchical_loss, summarize
from .rc import ThetaParams, ZoneTopology
from .scenarios import DayScenario
from .scheduler import ScheduleConfig, ScheduleResult, Tariff
from .plant import SimulationTrace


@dataclass
class MetricsReport:
    split: str
    hier_loss: float
    mae: float
    mse: float
    err_mean: float
    err_std: float
    expected_cost: float
    expost_cost: float
    cost_error: float
    wall_time: float
    num_scenarios: int
    num_failed: int = 0
    unweighted: dict = field(default_factory=dict)

    def __post_init__(self):
        gap = abs(self.cost_error - (self.expost_cost - self.expected_cost))
        if gap > 1e-9 * max(1.0, abs(self.expost_cost)):
            raise ValueError("cost_error must equal expost_cost - expected_cost")

    def to_json(self, path: str | Path, include_timing: bool = False) -> None:
        doc = asdict(self)
        if not include_timing:
            doc.pop("wall_time")
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def evaluate_model(theta: ThetaParams, scenarios: list[DayScenario], plant,
                   tariff: Tariff, config: ScheduleConfig, split: str = "test",
                   base_seed: int = 0, seed_tag: int = 0) -> MetricsReport:
    """Solve and simulate every scenario; aggregate metrics with cluster
    weights (an unweighted aggregate is attached for reference).  Scenarios
    whose QP fails are dropped and counted; a partial report is flagged by
    ``num_failed``."""
    if not scenarios:
        raise ValueError("scenarios must be nonempty")
    start = time.perf_counter()
    pairs = []
    failed = 0
    plant = learning._as_plant(plant)
    for i, scen in enumerate(scenarios):
        seed = learning._sample_seed(base_seed, seed_tag,
                                     scen.day_index if scen.day_index >= 0 else i)
        try:
            result = scheduler.solve_schedule(theta, scen, tariff, config)
        except scheduler.ScheduleError:
            failed += 1
            continue
        trace = plant.simulate(result.tau_in, scen.ambient, seed, tariff=tariff,
                               dt=config.dt)
        pairs.append((scen, result, trace))
    if not pairs:
        raise RuntimeError(f"every scenario failed in split {split!r}")

    stats = summarize(pairs, tariff, config.topology)
    flat = [(s, r, t) for (s, r, t) in pairs]
    uniform = [(DayScenario(s.ambient, s.initial_tau, s.label, 1.0 / len(flat), s.day_index), r, t)
               for s, r, t in flat]
    unweighted = summarize(uniform, tariff, config.topology)
    elapsed = time.perf_counter() - start
    return MetricsReport(
        split=split,
        hier_loss=stats["hier_loss"],
        mae=stats["mae"],
        mse=stats["mse"],
        err_mean=stats["err_mean"],
        err_std=stats["err_std"],
        expected_cost=stats["expected_cost"],
        expost_cost=stats["expost_cost"],
        cost_error=stats["expost_cost"] - stats["expected_cost"],
        wall_time=elapsed,
        num_scenarios=len(pairs),
        num_failed=failed,
        unweighted=unweighted,
    )


@dataclass(frozen=True)
class ComparisonFlags:
    """Strictly-better comparisons of the trained model against the
    two-stage baseline."""

    dfl_hier_loss_better: bool
    dfl_cost_error_better: bool
    dfl_expost_cost_leq: bool


def compare(report_ito: MetricsReport, report_dfl: MetricsReport) -> dict:
    """Side-by-side table plus verdict flags (all strict inequalities, so
    identical reports raise no flags)."""
    def ratio(a: float, b: float) -> float:
        return a / b if b not in (0, 0.0) else float("inf") if a else 1.0

    metrics = ["hier_loss", "mae", "mse", "err_mean", "err_std",
               "expected_cost", "expost_cost", "cost_error"]
    table = {
        m: {
            "ito": getattr(report_ito, m),
            "dfl": getattr(report_dfl, m),
            "ratio": ratio(getattr(report_dfl, m), getattr(report_ito, m)),
        }
        for m in metrics
    }
    flags = ComparisonFlags(
        dfl_hier_loss_better=bool(report_dfl.hier_loss < report_ito.hier_loss),
        dfl_cost_error_better=bool(abs(report_dfl.cost_error) < abs(report_ito.cost_error)),
        dfl_expost_cost_leq=bool(report_dfl.expost_cost < report_ito.expost_cost),
    )
    return {"table": table, "flags": asdict(flags),
            "splits": {"ito": report_ito.split, "dfl": report_dfl.split}}


def write_verdict(comparison: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(comparison, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# plot-data emission


def clustering_approximation_diagnostic(theta: ThetaParams,
                                        medoid_scenarios: list[DayScenario],
                                        all_scenarios: list[DayScenario],
                                        plant, tariff: Tariff,
                                        config: ScheduleConfig,
                                        base_seed: int = 0) -> dict:
    """How far the cluster-weighted medoid metrics sit from a brute-force
    evaluation over every day.  Reported as a diagnostic, never asserted:
    the gap is the clustering approximation itself."""
    weighted = evaluate_model(theta, medoid_scenarios, plant, tariff, config,
                              split="medoids", base_seed=base_seed)
    uniform = [DayScenario(s.ambient, s.initial_tau, s.label,
                           1.0 / len(all_scenarios), s.day_index)
               for s in all_scenarios]
    full = evaluate_model(theta, uniform, plant, tariff, config,
                          split="full-set", base_seed=base_seed)
    gaps = {m: getattr(weighted, m) - getattr(full, m)
            for m in ("hier_loss", "mae", "expected_cost", "expost_cost")}
    return {"medoid_weighted": asdict(weighted), "full_set": asdict(full),
            "gaps": gaps}


def emit_training_curves(training_log: TrainingLog, out_dir: str | Path) -> list[Path]:
    """One CSV per split with the per-epoch series behind the convergence
    figures (loss, error statistics, expected vs ex-post cost)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    splits = sorted({r.split for r in training_log.records}) or ["train", "val"]
    for split in splits:
        path = out_dir / f"curves_{split}.csv"
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["epoch", "hier_loss", "mae", "mse", "err_mean",
                             "err_std", "expected_cost", "expost_cost"])
            for r in training_log.rows(split):
                writer.writerow([r.epoch] + [repr(float(x)) for x in (
                    r.hier_loss, r.mae, r.mse, r.err_mean, r.err_std,
                    r.expected_cost, r.expost_cost)])
        written.append(path)
    return written


def emit_day_trace(result: ScheduleResult, trace: SimulationTrace,
                   config: ScheduleConfig, out_dir: str | Path,
                   name: str = "day") -> list[Path]:
    """Per-day plot data: zonal temperatures against targets with penalty
    weights, zonal powers expected vs observed, and aggregated floor and
    building series (building = sum of floors = sum of zones, exactly)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_h, z_n = result.p_hvac.shape
    topo = config.topology

    zonal = out_dir / f"{name}_zones.csv"
    with open(zonal, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["t", "zone", "tau_expected", "tau_observed",
                         "tau_target", "penalty_weight",
                         "p_hvac_expected", "p_hvac_observed"])
        for t in range(t_h):
            for z in range(z_n):
                writer.writerow([t, z] + [repr(float(x)) for x in (
                    result.tau_in[t + 1, z], trace.tau_obs[t + 1, z],
                    config.comfort_target[t, z], config.comfort_weight[t, z],
                    result.p_hvac[t, z], trace.p_hvac_obs[t, z])])

    agg = out_dir / f"{name}_aggregate.csv"
    exp_floor = np.stack([result.p_hvac[:, list(m)].sum(axis=1) for m in topo.floors], axis=1)
    obs_floor = np.stack([trace.p_hvac_obs[:, list(m)].sum(axis=1) for m in topo.floors], axis=1)
    with open(agg, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["t", "level", "index", "p_expected", "p_observed"])
        for t in range(t_h):
            writer.writerow([t, "building", 0,
                             repr(float(exp_floor[t].sum())),
                             repr(float(obs_floor[t].sum()))])
            for f in range(topo.num_floors):
                writer.writerow([t, "floor", f,
                                 repr(float(exp_floor[t, f])),
                                 repr(float(obs_floor[t, f]))])
    return [zonal, agg]
