"""Run orchestration: trials with derived seeds, baselines and artifacts."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .density import run_density
from .export import export_density, export_members, export_metrics, export_summary
from .gsm import cleanup_final, run_gsm
from .problems import ProblemSpec
from .results import RunResult

log = logging.getLogger(__name__)


def trial_seeds(master: Optional[int], trials: int) -> list:
    """Independent per-trial seeds spawned from ``master``."""
    children = np.random.SeedSequence(master).spawn(trials)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def delta_c(c_hat: float, c_star: float) -> float:
    """Relative compliance gap ``(c_hat - c_star) / c_star``."""
    if c_star == 0.0:
        raise ValueError("reference compliance must be nonzero")
    return (c_hat - c_star) / c_star


def read_baseline(path) -> float:
    """Reference compliance from a summary JSON or a metrics CSV.

    A summary contributes its mean final compliance; a metrics file the
    true compliance of its last row.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"baseline file not found: {path}")
    if path.suffix == ".json":
        return float(json.loads(path.read_text())["compliance_mean"])
    with path.open() as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("compliance_true")]
    if not rows:
        raise ValueError(f"{path}: no compliance values in metrics file")
    return float(rows[-1]["compliance_true"])


def run_once(spec: ProblemSpec, engine: str, params) -> RunResult:
    problem = spec.problem()
    if spec.method == "density":
        result = run_density(problem, engine, params)
    else:
        result = run_gsm(problem, engine, params)
    result.check_accounting()
    return result


@dataclass
class RunArtifacts:
    name: str
    method: str
    engine: str
    seeds: list
    results: list
    params: object = None
    baseline: Optional[float] = None
    topologies: list = field(default_factory=list)

    @property
    def compliances(self) -> np.ndarray:
        return np.array([r.compliance for r in self.results])

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.results)

    def summary(self) -> dict:
        trials = []
        for seed, r in zip(self.seeds, self.results):
            row = {"seed": seed, "compliance": r.compliance, "converged": r.converged, "n_step": r.n_step,
                   "n_solve": r.n_solve, "mean_cos_theta": r.mean_cos_theta(), "kkt_angle": r.kkt_angle}
            if self.baseline is not None:
                row["delta_c"] = delta_c(r.compliance, self.baseline)
            trials.append(row)
        C = self.compliances
        out = {
            "name": self.name, "method": self.method, "engine": self.engine, "trials": trials,
            "compliance_mean": float(C.mean()), "compliance_std": float(C.std()),
            "n_step_mean": float(np.mean([r.n_step for r in self.results])),
            "n_solve_mean": float(np.mean([r.n_solve for r in self.results])),
            "converged": self.all_converged, "baseline": self.baseline,
        }
        if self.baseline is not None:
            out["delta_c_mean"] = delta_c(float(C.mean()), self.baseline)
        cos = [r.mean_cos_theta() for r in self.results if r.mean_cos_theta() is not None]
        out["mean_cos_theta"] = float(np.mean(cos)) if cos else None
        return out


def run_spec(spec: ProblemSpec, engine: Optional[str] = None, trials: int = 1, seed: Optional[int] = None,
             baseline: Optional[float] = None, overrides: Optional[dict] = None) -> RunArtifacts:
    """Run ``trials`` independent optimizations of ``spec``.

    Stochastic trials get seeds spawned from ``seed`` (or the problem seed);
    the standard engine is deterministic and ignores them.
    """
    engine = engine or spec.engine
    if trials < 1:
        raise ValueError("trials must be at least 1")
    master = spec.seed if seed is None else seed
    seeds = trial_seeds(master, trials)
    results, topologies = [], []
    for k, s in enumerate(seeds):
        params = dataclasses.replace(spec.params, seed=s, **(overrides or {}))
        r = run_once(spec, engine, params)
        log.info("trial %d: C=%.6g converged=%s steps=%d", k, r.compliance, r.converged, r.n_step)
        results.append(r)
        if spec.method == "gsm":
            topologies.append(cleanup_final(spec.mesh, r.design.values, spec.loads))
    params = dataclasses.replace(spec.params, **(overrides or {}))
    return RunArtifacts(spec.name, spec.method, engine, seeds, results, params, baseline, topologies)


def write_artifacts(art: RunArtifacts, spec: ProblemSpec, outdir) -> Path:
    """Per-trial design and metrics files plus ``summary.json``."""
    outdir = Path(outdir)
    for k, r in enumerate(art.results):
        tdir = outdir / f"trial_{k}"
        export_metrics(tdir / "metrics.csv", r.metrics)
        if art.method == "density":
            nelx = _grid_width(spec)
            export_density(tdir / "design.csv", r.physical, nelx, spec.mesh.n_elements // nelx)
        else:
            topo = art.topologies[k]
            export_members(tdir / "members.csv", spec.mesh, topo.areas, topo.members)
    export_summary(outdir / "summary.json", art.summary())
    return outdir


def _grid_width(spec: ProblemSpec) -> int:
    # Elements are numbered row by row; the first row ends where y changes.
    c = spec.mesh.centroids()
    step = np.abs(c[:, 1] - c[0, 1]) > 1e-12
    return int(np.argmax(step)) if step.any() else len(c)
