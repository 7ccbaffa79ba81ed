"""
cli/commands.py
───────────────
Command handlers. Each handler takes the run context and its task block,
writes its artifacts under the output directory and returns a JSON-ready
payload for the result bundle.
"""

import csv
import json
import logging
import os
import sys
import threading
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np
import pydantic
import scipy
from pydantic import BaseModel

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import ConvergenceError
from cli.scenario import Scenario, from_matrix, to_matrix
from core.diffstruct import DifferentialStructure
from core.transport import SolverOptions, ThetaAssignment, distance_matrix, geodesic_shoot
from core.entropyflow import entropy_trajectory, ricci_estimate
from core.funcineq import entropy_decay_fit, inequality_chain

logger = logging.getLogger("Commands")


def fmt(x) -> str:
    """Floats at 17 significant digits."""
    return format(float(x), ".17g")


@dataclass
class RunContext:
    scenario: Scenario
    ds:       DifferentialStructure
    theta:    ThetaAssignment
    options:  SolverOptions
    out_dir:  str
    seed:     int
    _lock:    threading.Lock = field(default_factory=threading.Lock)

    def path(self, name):
        return os.path.join(self.out_dir, f"{self.scenario.output.prefix}{name}")

    def write_json(self, name, payload):
        with self._lock:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(self.path(name), "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True)
        logger.info("wrote %s", self.path(name))

    def write_csv(self, name, header, rows):
        with self._lock:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(self.path(name), "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(header)
                for row in rows:
                    w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
        logger.info("wrote %s", self.path(name))

    def state(self, pairs):
        return self.ds.algebra.state(to_matrix(pairs)).matrix


class ResultBundle(BaseModel):
    scenario:   Dict[str, Any]
    seed:       int
    versions:   Dict[str, str]
    tolerances: Dict[str, Any]
    tasks:      Dict[str, Any]


def bundle(ctx: RunContext, tasks: Dict[str, Any]) -> ResultBundle:
    versions = {"numpy": np.__version__, "scipy": scipy.__version__, "pydantic": pydantic.VERSION}
    keys = ("GRID_N", "MAX_ITER", "PRIMAL_TOL", "CONSTRAINT_TOL", "EPS_BOUNDARY", "PINV_RCOND",
            "VALIDATION_TOL", "EIG_CLUSTER_TOL", "RICCI_SAMPLES", "RICCI_REFINE", "INEQ_SAMPLES", "DECAY_SLACK")
    tolerances = {k: getattr(config, k) for k in keys}
    return ResultBundle(scenario=ctx.scenario.normalized(), seed=ctx.seed, versions=versions,
                        tolerances=tolerances, tasks=tasks)


# ─── Handlers ────────────────────────────────────────────────────────────────

def cmd_validate(ctx: RunContext, task, key):
    report = ctx.ds.report
    print(report.table())
    payload = report.to_dict()
    ctx.write_json(f"{key}.json", payload)
    return payload


def cmd_distance(ctx: RunContext, task, key):
    states = [ctx.state(m) for m in task.endpoints]
    reference = None if task.reference is None else [ctx.state(m) for m in task.reference]
    W, R, ok = distance_matrix(ctx.ds, ctx.theta, states, reference, ctx.options, config.QMS_THREADS)
    cols = len(states) if reference is None else len(reference)
    header = ["endpoint"] + [f"e{k}" for k in range(cols)] + ["residual"]
    rows = [[f"e{i}"] + [float(v) for v in W[i]] + [float(R[i].max()) if R.size else 0.0]
            for i in range(len(states))]
    ctx.write_csv(f"{key}.csv", header, rows)
    if not ok.all():
        raise ConvergenceError(f"distance solver did not converge on {int((~ok).sum())} entries")
    return {"distances": W.tolist(), "residuals": R.tolist()}


def cmd_ricci(ctx: RunContext, task, key):
    est = ricci_estimate(ctx.ds, ctx.theta, task.samples, task.refine, ctx.seed)
    payload = est.to_dict(with_witnesses=task.witnesses)
    ctx.write_json(f"{key}.json", payload)
    return payload


def cmd_inequalities(ctx: RunContext, task, key):
    rep = inequality_chain(ctx.ds, ctx.theta, task.samples, task.transport_samples, ctx.seed, ctx.options)
    payload = rep.to_dict()
    for name, secs in payload.pop("runtimes").items():
        logger.info("%s: %.2fs", name, secs)
    ctx.write_json(f"{key}.json", payload)
    return payload


def cmd_evolve(ctx: RunContext, task, key):
    rho = ctx.state(task.rho0)
    times = np.linspace(0.0, task.t_max, task.steps + 1)
    rows = entropy_trajectory(ctx.ds, rho, times)
    ctx.write_csv(f"{key}.csv", ["t", "entropy", "fisher", "trace_residual"],
                  [[r["t"], r["entropy"], r["fisher"], r["trace_residual"]] for r in rows])
    rate = entropy_decay_fit(ctx.ds, rho, task.t_max, task.steps + 1)
    return {"rows": len(rows), "fitted_rate": rate if np.isfinite(rate) else None}


def cmd_geodesic(ctx: RunContext, task, key):
    rho = ctx.state(task.rho0)
    A0 = to_matrix(task.A0)
    curve = geodesic_shoot(ctx.ds, ctx.theta, rho, A0, task.T, task.steps)
    payload = {"curve": curve.export(), "energy_drift": curve.meta["energy_drift"],
               "aborted": curve.meta["aborted"], "final_state": from_matrix(curve.states[-1])}
    ctx.write_json(f"{key}.json", payload)
    if curve.meta["aborted"]:
        raise ConvergenceError("geodesic left the positive cone before T")
    return {k: v for k, v in payload.items() if k != "curve"}


COMMANDS = {
    "validate":     cmd_validate,
    "distance":     cmd_distance,
    "ricci":        cmd_ricci,
    "inequalities": cmd_inequalities,
    "evolve":       cmd_evolve,
    "geodesic":     cmd_geodesic,
}
