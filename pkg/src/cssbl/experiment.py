"""Seeded Monte Carlo sweeps over the correlation coefficient.

An experiment is described by a nested key-value file (YAML)::

    scenario:
      preset: numerical          # or assembly, assembly-random
      samples_per_group: 60      # any other Scenario field overrides the preset
    phi: null                    # optional path to a fault-pattern matrix file
    methods:
      - {name: CSSBL}
      - {name: MSBL, baseline: true}
    sweep: [0.1, 0.5, 0.9]
    trials: 20
    base_seed: 0
    output: results

For every correlation ``k`` and trial ``t`` one dataset is drawn with seed
``base_seed ^ cell_hash(k, t)`` and every method is run on it. Results are
aggregated per ``(k, method)`` into ``results.csv``; everything else
(seeds, versions, timings, failures) goes to ``manifest.json``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .datagen import PRESETS, Scenario, generate
from .evaluation import TrialResult, aggregate, score_trial
from .exceptions import CSSBLError
from .model import BlockStructure, Hyperpriors, read_matrix
from .vbem import VbemConfig, estimate_variances, run

CSV_COLUMNS = ("k", "method", "mean_auc", "sd_auc", "mean_nmse", "sd_nmse", "conv_rate", "trials")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

_SEED_MASK = 0xFFFFFFFFFFFFFFFF
_METHOD_KEYS = {"name", "baseline", "n_groups", "max_iter", "tol", "resp_floor",
                "estimate_correlation", "solver", "a", "b", "c", "d"}
_SCENARIO_KEYS = {f.name for f in fields(Scenario)} - {"structure", "phi", "seed", "correlation"}


@dataclass
class MethodSpec:
    """One inference configuration of a sweep.

    ``baseline`` selects the stationary, uncorrelated variant: one group and
    every KCC its own block, without correlation estimation. Otherwise the
    scenario's block structure is used and ``n_groups`` defaults to the
    scenario's group count.
    """

    name: str
    baseline: bool = False
    n_groups: Optional[int] = None
    max_iter: int = 500
    tol: float = 1e-6
    resp_floor: float = 1e-8
    estimate_correlation: bool = True
    solver: str = "auto"
    a: float = 1e-4
    b: float = 1e-4
    c: Optional[float] = None
    d: Optional[float] = None

    def hyperpriors(self):
        return Hyperpriors(self.a, self.b, self.c, self.d)

    def config(self, scenario, init_seed):
        if self.baseline:
            return VbemConfig(n_groups=1, max_iter=self.max_iter, tol=self.tol,
                              resp_floor=self.resp_floor, init_seed=init_seed,
                              estimate_correlation=False, solver=self.solver)
        return VbemConfig(n_groups=self.n_groups or scenario.n_groups, max_iter=self.max_iter,
                          tol=self.tol, resp_floor=self.resp_floor, init_seed=init_seed,
                          estimate_correlation=self.estimate_correlation, solver=self.solver)

    def structure(self, scenario):
        if self.baseline:
            return BlockStructure.independent(scenario.N)
        return scenario.structure


@dataclass
class ExperimentSpec:
    scenario: dict
    methods: List[MethodSpec]
    sweep: List[float]
    trials: int = 20
    base_seed: int = 0
    output: str = "results"
    phi: Optional[str] = None
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        """Build a spec from parsed key-value data.

        Raises ``ValueError`` for unknown keys or malformed entries; range
        and consistency problems are left to :func:`validate`.
        """
        if not isinstance(raw, dict):
            raise ValueError("experiment spec must be a mapping")
        unknown = set(raw) - {"scenario", "methods", "sweep", "trials", "base_seed", "output", "phi"}
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        methods = []
        for entry in raw.get("methods") or []:
            if isinstance(entry, str):
                entry = {"name": entry}
            extra = set(entry) - _METHOD_KEYS
            if extra:
                raise ValueError(f"unknown method keys: {sorted(extra)}")
            methods.append(MethodSpec(**entry))
        scenario = dict(raw.get("scenario") or {"preset": "numerical"})
        return cls(
            scenario=scenario,
            methods=methods,
            sweep=[float(k) for k in raw.get("sweep") or []],
            trials=int(raw.get("trials", 20)),
            base_seed=int(raw.get("base_seed", 0)),
            output=str(raw.get("output", "results")),
            phi=raw.get("phi"),
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        out = asdict(self)
        out.pop("base_dir")
        return out

    def load_phi(self):
        if self.phi is None:
            return None
        path = Path(self.phi)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return read_matrix(path)

    def build_scenario(self, k, seed, phi=None):
        params = dict(self.scenario)
        preset = params.pop("preset", "numerical")
        unknown = set(params) - _SCENARIO_KEYS - {"group2_independent"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        if preset not in PRESETS:
            raise ValueError(f"unknown scenario preset {preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[preset](correlation=k, seed=seed, phi=phi, **params)


def cell_hash(k, trial):
    """Stable 64-bit hash of a ``(k, trial)`` coordinate."""
    key = f"{float(k)!r}|{int(trial)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def cell_seed(base_seed, k, trial):
    return (int(base_seed) & _SEED_MASK) ^ cell_hash(k, trial)


def validate(spec):
    """All problems with ``spec``, as strings; empty when it can run."""
    problems = []
    if not spec.methods:
        problems.append("no methods given")
    names = [m.name for m in spec.methods]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        problems.append(f"duplicate method names: {dupes}")
    if not spec.sweep:
        problems.append("sweep is empty")
    if spec.trials < 1:
        problems.append("trials must be >= 1")
    try:
        phi = spec.load_phi()
    except (OSError, ValueError) as exc:
        problems.append(f"cannot read phi: {exc}")
        phi = None
    for k in spec.sweep or [0.0]:
        try:
            scenario = spec.build_scenario(k, 0, phi)
        except (ValueError, TypeError, CSSBLError) as exc:
            problems.append(f"k={k}: {exc}")
            continue
        problems.extend(f"k={k}: {p}" for p in scenario.validate())
    if spec.sweep:
        try:
            scenario = spec.build_scenario(spec.sweep[0], 0, phi)
        except (ValueError, TypeError, CSSBLError):
            scenario = None
        for m in spec.methods:
            if scenario is None:
                break
            try:
                m.config(scenario, 0)
                m.hyperpriors()
            except (ValueError, TypeError) as exc:
                problems.append(f"method {m.name}: {exc}")
    return problems


def _run_method(method, scenario, model, data, seed, keep_trace):
    structure = method.structure(scenario)
    state, trace = run(model, data, structure, method.hyperpriors(), method.config(scenario, seed))
    variances = estimate_variances(state, structure)
    truth = scenario.true_variances()
    result = score_trial(variances, state.resp, data.labels, truth,
                         fault_mask=truth == scenario.fault_variance,
                         converged=trace.converged, iterations=trace.iterations)
    return result, (trace.to_dict() if keep_trace else None)


def run_cell(spec, k, trial, method_names=None, keep_trace=False, phi=None):
    """Run every (or the named) method on the dataset of cell ``(k, trial)``.

    Returns a list of dicts with the method name, the seed, and either the
    trial result or the error message of a numerical failure.
    """
    seed = cell_seed(spec.base_seed, k, trial)
    scenario = spec.build_scenario(k, seed, phi)
    model, data = generate(scenario)
    out = []
    for method in spec.methods:
        if method_names is not None and method.name not in method_names:
            continue
        entry = {"k": k, "method": method.name, "trial": trial, "seed": seed}
        try:
            result, trace = _run_method(method, scenario, model, data, seed, keep_trace)
        except (CSSBLError, FloatingPointError, np.linalg.LinAlgError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        else:
            entry["result"] = asdict(result)
            if trace is not None:
                entry["trace"] = trace
        out.append(entry)
    return out


def _cell_job(args):
    spec, k, trial, keep_trace, phi = args
    return run_cell(spec, k, trial, keep_trace=keep_trace, phi=phi)


def _fmt(x):
    return "nan" if math.isnan(x) else repr(float(x))


def summary_rows(spec, cells):
    """Aggregate cell outputs into CSV rows ordered by (k, method)."""
    rows, failures = [], []
    for k in spec.sweep:
        for method in spec.methods:
            entries = [e for e in cells if e["k"] == k and e["method"] == method.name]
            ok = [TrialResult(**e["result"]) for e in entries if "result" in e]
            failed = [e for e in entries if "error" in e]
            failures.extend({"k": k, "method": method.name, "trial": e["trial"],
                             "error": e["error"]} for e in failed)
            row = {"k": k, "method": method.name, "trials": len(entries)}
            if ok:
                s = aggregate(ok)
                row.update(mean_auc=s.mean_auc, sd_auc=s.sd_auc, mean_nmse=s.mean_nmse,
                           sd_nmse=s.sd_nmse, conv_rate=s.conv_rate)
            else:
                row.update(mean_auc=math.nan, sd_auc=math.nan, mean_nmse=math.nan,
                           sd_nmse=math.nan, conv_rate=math.nan)
            rows.append(row)
    return rows, failures


def format_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def read_results(path):
    """Parse a ``results.csv`` back into a list of dicts with typed values."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in CSV_COLUMNS:
            if key == "method":
                continue
            row[key] = int(row[key]) if key == "trials" else float(row[key])
    return rows


def _versions():
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "scikit-learn", "PyYAML"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def run_experiment(spec, out_dir=None, jobs=1, keep_traces=False):
    """Run the full sweep and write ``results.csv`` and ``manifest.json``.

    Returns an exit status: 0 on success, 2 when the experiment spec does not validate
    (nothing is run), 3 when any trial failed numerically (all other cells
    are still run and written).
    """
    problems = validate(spec)
    if problems:
        return EXIT_INVALID
    out = Path(out_dir or spec.output)
    out.mkdir(parents=True, exist_ok=True)
    phi = spec.load_phi()
    coords = [(k, t) for k in spec.sweep for t in range(spec.trials)]
    jobs_args = [(spec, k, t, keep_traces, phi) for k, t in coords]
    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_cell = list(pool.map(_cell_job, jobs_args))
    else:
        per_cell = [_cell_job(a) for a in jobs_args]
    elapsed = time.perf_counter() - start
    cells = [e for entries in per_cell for e in entries]

    rows, failures = summary_rows(spec, cells)
    (out / "results.csv").write_text(format_csv(rows))
    if keep_traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for e in cells:
            if "trace" in e:
                name = f"k{e['k']!r}_{e['method']}_t{e['trial']}.json"
                (tdir / name).write_text(json.dumps(e["trace"]))
    manifest = {
        "spec": spec.to_dict(),
        "versions": _versions(),
        "wall_clock_seconds": elapsed,
        "jobs": jobs,
        "seeds": {f"{k!r}|{t}": cell_seed(spec.base_seed, k, t) for k, t in coords},
        "failures": failures,
        "trials": [{key: e[key] for key in ("k", "method", "trial", "seed")}
                   | e.get("result", {}) | ({"error": e["error"]} if "error" in e else {})
                   for e in cells],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return EXIT_NUMERICAL if failures else EXIT_OK
