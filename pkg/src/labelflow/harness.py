"""Scenario files, initial sampling, convergence and residual studies, report export."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.linalg import expm

from .ensemble import EmpiricalMeasure, wasserstein1
from .errors import LabelflowError, ScenarioError
from .explicit_scheme import SchemeConfig, residual_dictionary, run_explicit, weak_residual
from .fields import (KERNELS, RATES, VELOCITIES, MarkovOperator, ReplicatorOperator, builtin_kernel,
                     builtin_rates, builtin_velocity)
from .label_geometry import LabelMetricSpace, discrete_space
from .markov_prox import MarginMonitor, run_implicit_markov
from .replicator_prox import run_implicit_replicator

SOLVER_TOL = 1e-12
BOOTSTRAP_RESAMPLES = 200
CSV_COLUMNS = ("k", "tau", "w1_gap", "residual_max", "residual_mean", "runtime_s")
MODES = ("explicit", "prox-hellinger", "prox-markov")
# irrational offset: residual sample times never land on a grid node
RESIDUAL_PHASE = math.sqrt(2.0) - 1.0
RESIDUAL_SAMPLES = 20


# --------------------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    """A validated experiment description with every default filled in."""

    d: int
    n: int
    label_dynamics: str
    dynamics: dict
    initial: dict
    velocity: tuple = ({"kind": "zero", "params": {}},)
    label_metric: object = "discrete"
    horizon: float = 1.0
    mode: str = "explicit"
    hs_convention: str = "geodesic"
    delta: float = 0.01
    eta: float = 0.1
    seed: int = 0
    snapshots: tuple = ()
    k: int = 64
    ks: tuple = (16, 32, 64, 128)
    oracle: bool = False
    guard: bool = True
    runtime_budget_s: float = 300.0
    name: str = "scenario"
    description: str = ""

    @property
    def space(self):
        if isinstance(self.label_metric, str):
            return discrete_space(self.n)
        return LabelMetricSpace(self.n, np.array(self.label_metric, dtype=float))

    def velocity_field(self):
        fields = [builtin_velocity(v["kind"], **v.get("params", {})) for v in self.velocity]
        total = fields[0]
        for f in fields[1:]:
            total = total + f
        return total

    def kernel(self):
        return builtin_kernel(self.dynamics["kind"], **self.dynamics.get("params", {}))

    def rates(self):
        return builtin_rates(self.dynamics["kind"], **self.dynamics.get("params", {}))

    def operator(self):
        if self.label_dynamics == "replicator":
            return ReplicatorOperator(self.kernel())
        return MarkovOperator(self.rates())

    def config(self, k=None):
        k = self.k if k is None else k
        return SchemeConfig(self.horizon, k, self.mode.replace("-", "_"), self.snapshots)

    def with_overrides(self, **changes):
        data = asdict(self)
        data.update(changes)
        if "seed" in changes and changes["seed"] is not None:
            data["seed"] = int(changes["seed"])
        return _finish(data, text=None)


def schema():
    """The JSON schema of scenario files."""
    with resources.files("labelflow.scenarios").joinpath("scenario.schema.json").open() as fh:
        return json.load(fh)


def bundled_scenarios():
    """Names of the scenario files shipped with the package."""
    root = resources.files("labelflow.scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json") and "schema" not in p.name)


def bundled_path(name):
    """Filesystem path of a bundled scenario."""
    if not name.endswith(".json"):
        name += ".json"
    return Path(str(resources.files("labelflow.scenarios").joinpath(name)))


def _line_of(text, path):
    """Best-effort line number of the JSON node at ``path``."""
    if text is None:
        return None
    pos = 0
    found = None
    for key in path:
        if isinstance(key, str):
            hit = text.find(f'"{key}"', pos)
            if hit < 0:
                break
            pos = found = hit
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def _fail(message, text=None, path=()):
    line = _line_of(text, path)
    where = f"line {line}: " if line else ""
    raise ScenarioError(f"{where}{message}")


def _check_builtin(spec, registry, what, text, path):
    if spec["kind"] not in registry:
        _fail(f"unknown {what} {spec['kind']!r}; known: {sorted(registry)}", text, path + ("kind",))


def load_scenario(path):
    """Read, validate and complete a scenario file.

    Raises
    ------
    ScenarioError
        On unreadable files, JSON syntax errors, schema violations,
        unknown builtins or broken invariants; messages carry the line
        number where it can be located.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from None
    scenario = parse_scenario(data, text=text)
    if scenario.name == "scenario":
        scenario = scenario.with_overrides(name=path.stem)
    return scenario


def parse_scenario(data, *, text=None):
    """Validate a scenario given as a dict (``text`` only improves messages)."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        _fail(f"{where}: {err.message}", text, tuple(err.absolute_path))
    data = dict(data)
    kind, spec = next(iter(data.pop("label_dynamics").items()))
    data["label_dynamics"] = kind
    data["dynamics"] = {"kind": spec["kind"], "params": dict(spec.get("params", {}))}
    _check_builtin(spec, KERNELS if kind == "replicator" else RATES,
                   "payoff kernel" if kind == "replicator" else "rate field", text, ("label_dynamics", kind))
    vel = data.pop("velocity", {"kind": "zero"})
    vel = [vel] if isinstance(vel, dict) else list(vel)
    for v in vel:
        _check_builtin(v, VELOCITIES, "velocity", text, ("velocity",))
    data["velocity"] = tuple({"kind": v["kind"], "params": dict(v.get("params", {}))} for v in vel)
    return _finish(data, text)


def _finish(data, text):
    data = dict(data)
    d, n = data["d"], data["n"]
    initial = dict(data["initial"])
    initial.setdefault("positions", {"law": "uniform", "low": -1.0, "high": 1.0})
    initial.setdefault("labels", {"law": "dirichlet"})
    data["initial"] = initial
    kind = data["label_dynamics"]
    mode = data.get("mode", "explicit")
    if kind == "replicator" and mode == "prox-markov":
        _fail("mode 'prox-markov' needs markov label dynamics", text, ("mode",))
    if kind == "markov" and mode == "prox-hellinger":
        _fail("mode 'prox-hellinger' needs replicator label dynamics", text, ("mode",))
    delta = float(data.get("delta", 0.01))
    eta = float(data.get("eta", 0.1))
    if kind == "markov" and not eta > delta:
        _fail(f"eta ({eta}) must exceed delta ({delta}) for markov dynamics", text, ("eta",))
    if n * eta >= 1.0:
        _fail(f"eta ({eta}) is too large for n={n} labels (needs n * eta < 1)", text, ("eta",))
    horizon = float(data.get("horizon", 1.0))
    snaps = data.get("snapshots", 11)
    if isinstance(snaps, int):
        snaps = tuple(np.linspace(0.0, horizon, snaps).tolist()) if snaps > 1 else (horizon,)
    snaps = tuple(float(s) for s in snaps)
    if any(s > horizon for s in snaps) or list(snaps) != sorted(snaps):
        _fail("snapshots must be sorted times within [0, horizon]", text, ("snapshots",))
    metric = data.get("label_metric", "discrete")
    if not isinstance(metric, str):
        try:
            LabelMetricSpace(n, np.array(metric, dtype=float))
        except (ValueError, LabelflowError) as exc:
            _fail(f"label_metric: {exc}", text, ("label_metric",))
    _check_initial(initial, d, n, eta, text)
    data.update(horizon=horizon, snapshots=snaps, delta=delta, eta=eta,
                ks=tuple(int(k) for k in data.get("ks", (16, 32, 64, 128))))
    try:
        sc = Scenario(**data)
        sc.velocity_field()
        sc.operator()
    except (TypeError, LabelflowError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        _fail(f"invalid builtin parameters: {exc}", text, ("label_dynamics",))
    return sc


def _check_initial(initial, d, n, eta, text):
    N = initial["N"]
    pos, lab = initial["positions"], initial["labels"]
    if pos["law"] == "fixed":
        pts = np.array(pos.get("points", []), dtype=float)
        if pts.shape != (N, d):
            _fail(f"initial positions: expected {N} points in dimension {d}, got shape {pts.shape}",
                  text, ("initial", "positions"))
    elif pos["law"] == "uniform" and not pos.get("low", -1.0) < pos.get("high", 1.0):
        _fail("initial positions: uniform law needs low < high", text, ("initial", "positions"))
    if lab["law"] == "fixed":
        vals = np.array(lab.get("values", []), dtype=float)
        if vals.shape not in ((N, n), (1, n)):
            _fail(f"initial labels: expected {N} (or 1) rows of {n} values, got shape {vals.shape}",
                  text, ("initial", "labels"))
        if np.any(vals < 0) or np.any(np.abs(vals.sum(axis=1) - 1) > 1e-9):
            _fail("initial labels: rows must be probability vectors", text, ("initial", "labels"))
    elif "alpha" in lab and len(lab["alpha"]) != n:
        _fail(f"initial labels: alpha needs {n} entries", text, ("initial", "labels"))


def sample_initial(spec, seed, *, d=None, n=None, eta=0.0):
    """Deterministic initial measure from an ``initial`` block.

    Dirichlet labels are mapped affinely onto the ``eta`` interior,
    ``lam = eta + (1 - n eta) * dirichlet``, so every component is at least
    ``eta``. A :class:`Scenario` may be passed in place of ``spec``.
    """
    if isinstance(spec, Scenario):
        d, n, eta = spec.d, spec.n, spec.eta
        spec = spec.initial
    N = int(spec["N"])
    rng = np.random.default_rng(int(seed))
    pos = spec.get("positions", {"law": "uniform", "low": -1.0, "high": 1.0})
    if pos["law"] == "fixed":
        X = np.array(pos["points"], dtype=float).reshape(N, -1)
    elif pos["law"] == "ball":
        g = rng.standard_normal((N, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        X = pos.get("radius", 1.0) * g * rng.random((N, 1)) ** (1.0 / d)
    else:
        X = rng.uniform(pos.get("low", -1.0), pos.get("high", 1.0), size=(N, d))
    lab = spec.get("labels", {"law": "dirichlet"})
    if lab["law"] == "fixed":
        L = np.array(lab["values"], dtype=float)
        L = np.broadcast_to(L, (N, L.shape[1])).copy() if L.shape[0] == 1 else L
    else:
        alpha = np.asarray(lab.get("alpha", np.ones(n)), dtype=float)
        L = eta + (1.0 - n * eta) * rng.dirichlet(alpha, size=N)
    return EmpiricalMeasure(X, L)


# --------------------------------------------------------------------------- running


def run_scenario(scenario, k=None, *, mode=None, initial=None, record_residuals=False):
    """Run one scheme on a scenario and return the trajectory."""
    mode = scenario.mode if mode is None else mode
    if mode not in MODES:
        raise ScenarioError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != scenario.mode:
        scenario = scenario.with_overrides(mode=mode)
    initial = sample_initial(scenario, scenario.seed) if initial is None else initial
    config = scenario.config(k)
    velocity = scenario.velocity_field()
    space = scenario.space
    if mode == "explicit":
        return run_explicit(initial, velocity, scenario.operator(), config, space=space,
                            guard=scenario.guard, seed=scenario.seed)
    if mode == "prox-hellinger":
        return run_implicit_replicator(initial, velocity, scenario.kernel(), config, space=space,
                                       convention=scenario.hs_convention, record_residuals=record_residuals)
    monitor = MarginMonitor(scenario.delta, scenario.eta)
    return run_implicit_markov(initial, velocity, scenario.rates(), config, monitor, space=space,
                               record_residuals=record_residuals)


def oracle_measure(scenario, initial, t):
    """Closed-form state at time ``t`` for constant velocity and constant label dynamics.

    Supported: velocities ``zero``/``constant`` and either ``constant`` Markov
    rates or the ``zero`` payoff kernel.
    """
    shift = np.zeros(scenario.d)
    for v in scenario.velocity:
        if v["kind"] == "constant":
            shift += np.atleast_1d(np.asarray(v["params"]["v"], dtype=float))
        elif v["kind"] != "zero":
            raise ScenarioError(f"no closed form for velocity {v['kind']!r}")
    X = initial.positions + t * shift
    dyn = scenario.dynamics
    if scenario.label_dynamics == "markov" and dyn["kind"] == "constant":
        L = initial.labels @ expm(t * np.asarray(dyn["params"]["Q"], dtype=float)).T
    elif scenario.label_dynamics == "replicator" and dyn["kind"] == "zero":
        L = initial.labels
    else:
        raise ScenarioError(f"no closed form for {scenario.label_dynamics} dynamics {dyn['kind']!r}")
    return EmpiricalMeasure(X, L, initial.weights, validate=False)


# --------------------------------------------------------------------------- reports


@dataclass
class StudyRow:
    k: int
    tau: float
    w1_gap: float | None = None
    residual_max: float | None = None
    residual_mean: float | None = None
    runtime_s: float | None = None


@dataclass
class StudyReport:
    """Per-k table of a study plus fitted log-log slopes.

    ``slopes`` maps a quantity (``"w1_gap"``, ``"residual_max"``) to
    ``{"slope", "ci_low", "ci_high", "points"}``; the slope is None when
    fewer than two rows are above the noise floor. ``aborted`` holds the
    reason when a run failed and the table is partial.
    """

    kind: str
    scenario: str
    mode: str
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    aborted: dict | None = None
    details: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])

    def slope(self, name="w1_gap"):
        entry = self.slopes.get(name)
        return None if entry is None else entry["slope"]

    def to_dict(self):
        return {"kind": self.kind, "scenario": self.scenario, "mode": self.mode,
                "rows": [asdict(r) for r in self.rows], "slopes": self.slopes,
                "aborted": self.aborted, "details": self.details}

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], data["scenario"], data["mode"], [StudyRow(**r) for r in data["rows"]],
                   data.get("slopes", {}), data.get("aborted"), data.get("details", {}))


def fit_slope(taus, values, floor=10 * SOLVER_TOL):
    """Least-squares slope of ``log value`` against ``log tau`` over values above ``floor``."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values) & (values > floor)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(taus[ok]), np.log(values[ok]), 1)[0])


def _bootstrap(taus, samples, rng, floor=10 * SOLVER_TOL):
    """Percentile interval of the slope when the per-k maxima are recomputed
    over snapshot times drawn with replacement."""
    if samples is None or samples.shape[1] == 0:
        return None, None
    m = samples.shape[1]
    slopes = []
    for _ in range(BOOTSTRAP_RESAMPLES):
        idx = rng.integers(0, m, size=m)
        s = fit_slope(taus, np.max(samples[:, idx], axis=1), floor)
        if s is not None:
            slopes.append(s)
    if not slopes:
        return None, None
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return float(lo), float(hi)


def _summarize(report, name, taus, per_sample, seed):
    values = report.column(name)
    s = fit_slope(taus, values)
    lo = hi = None
    if s is not None and per_sample is not None:
        lo, hi = _bootstrap(np.asarray(taus), per_sample, np.random.default_rng(seed))
    report.slopes[name] = {"slope": s, "ci_low": lo, "ci_high": hi,
                           "points": int(np.sum(np.isfinite(values) & (values > 10 * SOLVER_TOL)))}


def _abort_info(k, exc):
    reason = getattr(exc, "reason", None) or type(exc).__name__
    return {"k": int(k), "reason": reason, "error": type(exc).__name__, "message": str(exc)}


def _check_ks(ks):
    ks = [int(k) for k in ks]
    if ks != sorted(ks) or len(set(ks)) != len(ks) or any(k < 1 for k in ks):
        raise ScenarioError(f"ks must be strictly increasing positive integers, got {ks}")
    return ks


def convergence_study(scenario, ks=None, *, mode=None, oracle=None, pinned=False):
    """Cauchy (or oracle) convergence table of a scenario.

    For every ``k`` the run with ``k`` steps is compared with the run with
    ``2k`` steps from the same initial measure; the gap is the largest
    Wasserstein-1 distance over the snapshot times. In oracle mode the
    reference is the closed-form solution instead.

    Parameters
    ----------
    pinned : bool
        Leave ``runtime_s`` empty so reports are byte-reproducible.
    """
    ks = _check_ks(scenario.ks if ks is None else ks)
    mode = scenario.mode if mode is None else mode
    oracle = scenario.oracle if oracle is None else oracle
    initial = sample_initial(scenario, scenario.seed)
    space = scenario.space
    report = StudyReport("convergence", scenario.name, mode, details={"oracle": bool(oracle)})
    runs = {}

    def get(k):
        if k not in runs:
            runs[k] = run_scenario(scenario, k, mode=mode, initial=initial)
        return runs[k]

    per_snapshot = []
    for k in ks:
        start = time.perf_counter()
        try:
            traj = get(k)
            horizon = traj.horizon
            if oracle:
                times = [t for t in scenario.snapshots if t <= horizon + 1e-12]
                gaps = [wasserstein1(traj.at(t), oracle_measure(scenario, initial, t), space) for t in times]
            else:
                ref = get(2 * k)
                horizon = min(horizon, ref.horizon)
                times = [t for t in scenario.snapshots if t <= horizon + 1e-12]
                gaps = [wasserstein1(traj.at(t), ref.at(t), space) for t in times]
        except (LabelflowError, np.linalg.LinAlgError) as exc:
            report.aborted = _abort_info(k, exc)
            break
        runs.pop(k // 2, None)
        per_snapshot.append(gaps)
        elapsed = None if pinned else time.perf_counter() - start
        report.rows.append(StudyRow(k, scenario.horizon / k, float(max(gaps, default=0.0)), runtime_s=elapsed))
    taus = [r.tau for r in report.rows]
    samples = None
    if per_snapshot and len({len(g) for g in per_snapshot}) == 1:
        samples = np.array(per_snapshot)
    report.details["snapshot_gaps"] = [list(map(float, g)) for g in per_snapshot]
    _summarize(report, "w1_gap", taus, samples, scenario.seed)
    return report


def _explicit_residuals(traj, scenario):
    center = np.zeros(scenario.d)
    dictionary = residual_dictionary(scenario.d, scenario.n, bump_center=center, bump_width=1.0)
    times = (np.arange(RESIDUAL_SAMPLES) + RESIDUAL_PHASE) * traj.horizon / RESIDUAL_SAMPLES
    vals = np.array([[abs(weak_residual(traj, phi, t)) for phi in dictionary] for t in times])
    return vals.max(axis=1), vals


def residual_study(scenario, ks=None, *, mode=None, pinned=False):
    """Residual table: weak-form defects (explicit mode) or Euler-Lagrange
    residuals of the proximal steps (implicit modes).

    In the Markov mode, agent steps failing the proximity condition are
    excluded; their fraction is reported in ``details["excluded_fraction"]``.
    """
    ks = _check_ks(scenario.ks if ks is None else ks)
    mode = scenario.mode if mode is None else mode
    initial = sample_initial(scenario, scenario.seed)
    report = StudyReport("residual", scenario.name, mode)
    per_sample = []
    excluded = []
    for k in ks:
        start = time.perf_counter()
        try:
            traj = run_scenario(scenario, k, mode=mode, initial=initial, record_residuals=True)
            if mode == "explicit":
                per_time, _ = _explicit_residuals(traj, scenario)
                values = per_time
            elif mode == "prox-hellinger":
                values = np.asarray(traj.log["el_residuals"]).ravel()
            else:
                res = np.asarray(traj.log["el_residuals"])
                ok = np.asarray(traj.log["proximity_ok"])
                excluded.append({"k": k, "excluded": int((~ok).sum()), "total": int(ok.size),
                                 "T_f": traj.log["T_f"], "margin_violation": traj.log["margin_violation"]})
                values = res[ok]
        except (LabelflowError, np.linalg.LinAlgError) as exc:
            report.aborted = _abort_info(k, exc)
            break
        elapsed = None if pinned else time.perf_counter() - start
        rmax = float(values.max()) if values.size else None
        rmean = float(values.mean()) if values.size else None
        report.rows.append(StudyRow(k, scenario.horizon / k, residual_max=rmax, residual_mean=rmean,
                                    runtime_s=elapsed))
        if mode == "explicit":
            per_sample.append(values)
    if excluded:
        total = sum(e["total"] for e in excluded)
        report.details["excluded_steps"] = excluded
        report.details["excluded_fraction"] = (sum(e["excluded"] for e in excluded) / total) if total else 0.0
    taus = [r.tau for r in report.rows]
    samples = np.array(per_sample) if per_sample else None
    _summarize(report, "residual_max", taus, samples, scenario.seed)
    return report


# --------------------------------------------------------------------------- export


def _csv_cell(value):
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def export_report(report, format, path):
    """Write a report as CSV (fixed columns ``CSV_COLUMNS``) or JSON."""
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report.rows:
                writer.writerow([_csv_cell(getattr(row, c)) for c in CSV_COLUMNS])
    elif format == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    else:
        raise ScenarioError(f"format must be 'csv' or 'json', got {format!r}")


def read_report(path):
    """Load a JSON report written by :func:`export_report`."""
    return StudyReport.from_dict(json.loads(Path(path).read_text()))


def agent_table(traj, times=None):
    """Rows ``(time, agent_id, weight, x..., lambda...)`` at the given times."""
    if times is None:
        times = [t for t in traj.config.snapshot_times if t <= traj.horizon + 1e-12] or [traj.horizon]
    rows = []
    for t in times:
        X, L = traj.state_at(t)
        for a in range(X.shape[0]):
            rows.append([float(t), a, float(traj.weights[a]), *map(float, X[a]), *map(float, L[a])])
    return rows


def export_trajectory(traj, format, path, times=None):
    """Write agent tables of a trajectory at snapshot times."""
    d, n = traj.positions.shape[2], traj.labels.shape[2]
    header = ["time", "agent_id", "weight"] + [f"x{j}" for j in range(d)] + [f"lambda{h}" for h in range(n)]
    rows = agent_table(traj, times)
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in rows:
                writer.writerow([_csv_cell(v) for v in r])
    elif format == "json":
        meta = {"steps": traj.steps, "tau": traj.tau, "horizon": traj.horizon,
                "terminated_at": traj.terminated_at,
                "T_f": traj.log.get("T_f"), "margin_violation": traj.log.get("margin_violation")}
        path.write_text(json.dumps({"columns": header, "rows": rows, "run": meta}, indent=2) + "\n")
    else:
        raise ScenarioError(f"format must be 'csv' or 'json', got {format!r}")

