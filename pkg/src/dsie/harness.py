"""Experiment runner: simulate, estimate, detect, score and write CSV reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .csvio import write_table
from .detection import (
    AttackSpec,
    build_fdia,
    inject,
    mahalanobis,
    prediction_innovation,
)
from .distributed import MessageChannel, build_area_estimators, distributed_step, local_frame
from .errors import ConfigurationError, UnobservableError
from .estimation import (
    FilterState,
    QuasiStaticModel,
    TseState,
    dsie_step,
    static_wls,
    tse_step,
)
from .network import (
    AreaPartition,
    DiscreteModel,
    MeasurementLayout,
    NetworkTopology,
    build_discrete_model,
    build_incidence,
    check_observability,
    partition,
)
from .simulation import Scenario, TruthTrajectory, generate_measurements, simulate_truth
from .units import Bases, NoiseSpec

log = logging.getLogger(__name__)

SIE, WLS, TSE, DSIE = "SIE", "WLS", "TSE", "DSIE"
ESTIMATORS = (SIE, WLS, TSE, DSIE)
ALIASES = {"sie": SIE, "wls": WLS, "tse": TSE, "dsie": DSIE, "distributed-sie": DSIE, "distributed": DSIE}

# random-walk variance of the tracking estimator, per real voltage component in pu;
# set equal to the voltage measurement variance
TSE_PROCESS_PU = 5e-4


def canonical_estimator(name: str) -> str:
    key = name.strip()
    if key in ESTIMATORS:
        return key
    try:
        return ALIASES[key.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}") from None


# ---------------------------------------------------------------------------
# metrics


def mse(u_hat, u_true, bases: Bases | None = None) -> float:
    """Mean squared voltage error in pu^2 over the real-stacked components."""
    bases = bases or Bases()
    u_hat = np.asarray(u_hat, dtype=float)
    u_true = np.asarray(u_true, dtype=float)
    if u_hat.shape != u_true.shape:
        raise ValueError(f"shape mismatch {u_hat.shape} vs {u_true.shape}")
    if u_hat.size == 0:
        raise ValueError("empty voltage vector")
    e = (u_hat - u_true) / bases.v_base
    return float(e @ e / e.size)


def terminal_power(v, i):
    """Apparent power ``v * conj(i)``; positive reactive power means lagging current."""
    return np.asarray(v) * np.conj(np.asarray(i))


def injected_currents(topology: NetworkTopology, branch_currents) -> np.ndarray:
    """Current injected at every bus: signed sum of incident branch currents (leaving = +)."""
    inc = build_incidence(topology).astype(float)
    return inc.T @ np.asarray(branch_currents, dtype=complex)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    topology: NetworkTopology
    layout: MeasurementLayout
    scenario: Scenario
    areas: Mapping | None = None
    estimators: tuple = (SIE, WLS, TSE)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    # weights the estimators assume; defaults to the simulated noise
    estimator_noise: NoiseSpec | None = None
    bases: Bases = field(default_factory=Bases)
    seed: int = 0
    attack: AttackSpec | None = None
    alpha: float = 0.01
    out_dir: str | Path | None = None
    parallel: bool = False
    tse_q_pu: float = TSE_PROCESS_PU

    def __post_init__(self):
        ests = tuple(dict.fromkeys(canonical_estimator(e) for e in self.estimators))
        if not ests:
            raise ConfigurationError("select at least one estimator")
        object.__setattr__(self, "estimators", ests)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not self.tse_q_pu > 0:
            raise ConfigurationError("TSE process variance must be positive")

    @property
    def model_noise(self) -> NoiseSpec:
        n = self.estimator_noise or self.noise
        if min(n.sigma2_u, n.sigma2_x, n.sigma2_q) <= 0:
            raise ConfigurationError("estimator noise variances must be positive")
        return n


@dataclass(frozen=True)
class Scope:
    """A piece of the network handled by one estimator instance."""

    name: str
    model: DiscreteModel
    bus_ids: tuple


@dataclass
class EstimatorTrace:
    """Per-step output of one estimator over the estimated buses.

    Detection statistics are kept per scope (area); ``d2`` and ``dof`` are
    ``(N, n_scopes)`` with NaN / 0 where a scope has no test at that step.
    """

    name: str
    bus_ids: tuple
    u_hat: np.ndarray  # (N, 2m') with NaN where not available
    d2: np.ndarray
    dof: np.ndarray
    scopes: tuple = ()
    degraded: np.ndarray | None = None

    def combined(self, alpha: float):
        """Per-step ``(d_M, dof, threshold, flag)`` over all scopes.

        Each scope is tested at the Sidak level ``1 - (1 - alpha)^(1/n)`` so
        the step-level false-alarm rate stays ``alpha``; the reported
        distance is that of the least likely scope.
        """
        N = self.d2.shape[0]
        d = np.full(N, np.nan)
        dof = np.zeros(N, dtype=int)
        thr = np.full(N, np.nan)
        flag = np.zeros(N, dtype=bool)
        for k in range(N):
            ok = ~np.isnan(self.d2[k]) & (self.dof[k] > 0)
            n = int(ok.sum())
            if not n:
                continue
            a = 1.0 - (1.0 - alpha) ** (1.0 / n)
            d2, df = self.d2[k, ok], self.dof[k, ok]
            j = int(np.argmin(chi2.logsf(d2, df)))
            d[k], dof[k] = np.sqrt(d2[j]), df[j]
            thr[k] = np.sqrt(chi2.ppf(1.0 - a, df[j]))
            flag[k] = bool(np.any(d2 > chi2.ppf(1.0 - a, df)))
        return d, dof, thr, flag

    def flags(self, alpha: float) -> np.ndarray:
        return self.combined(alpha)[3]


def _new_trace(name, union, scopes, N, degraded=False) -> EstimatorTrace:
    return EstimatorTrace(
        name, union, np.full((N, 2 * len(union)), np.nan),
        np.full((N, len(scopes)), np.nan), np.zeros((N, len(scopes)), dtype=int),
        tuple(scopes), np.zeros(N, dtype=bool) if degraded else None,
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    truth: TruthTrajectory
    frames: list
    scopes: list
    traces: dict
    mse: dict  # estimator -> (N,) per-step MSE
    summary: dict
    metrics_header: list
    metrics_rows: list
    estimates_header: list
    estimates_rows: list
    paths: dict = field(default_factory=dict)


def _scopes(cfg: ExperimentConfig, noise: NoiseSpec):
    """Centralized scope when observable, otherwise every observable area."""
    dt = cfg.scenario.dt
    central = build_discrete_model(cfg.topology, cfg.layout, dt, noise, cfg.bases)
    rep = check_observability(central)
    part = models = None
    if cfg.areas:
        part, models = partition(cfg.topology, cfg.layout, cfg.areas, dt=dt, noise=noise, bases=cfg.bases)
    if rep.observable:
        return central, [Scope("central", central, tuple(cfg.topology.bus_ids))], part, models, rep
    if part is None:
        raise UnobservableError(
            f"centralized model is unobservable (rank {rep.rank} < {rep.required}) and no partition is configured",
            rep,
        )
    scopes = []
    for area, m in zip(part.areas, models):
        if m.p + m.l and check_observability(m).observable:
            scopes.append(Scope(f"area{area.id}", m, area.buses))
        else:
            log.info("area %s is unobservable; skipped", area.id)
    if not scopes:
        raise UnobservableError("no observable area in the partition", rep)
    return central, scopes, part, models, rep


def _union_buses(scopes) -> tuple:
    seen = []
    for s in scopes:
        for b in s.bus_ids:
            if b not in seen:
                seen.append(b)
    return tuple(seen)


def _scatter(trace_u: np.ndarray, union: tuple, scope_buses: tuple, est: np.ndarray, row: int, taken: set):
    for j, b in enumerate(scope_buses):
        if b in taken:
            continue
        i = union.index(b)
        trace_u[row, 2 * i: 2 * i + 2] = est[2 * j: 2 * j + 2]


def _run_sie(scopes, frames_by_scope, union, N):
    tr = _new_trace(SIE, union, [sc.name for sc in scopes], N)
    taken: set = set()
    for j, sc in enumerate(scopes):
        fr = frames_by_scope[sc.name]
        st = FilterState(sc.model)
        prior = None
        for k in range(1, N):
            step = dsie_step(st, fr[k - 1], fr[k])
            _scatter(tr.u_hat, union, sc.bus_ids, step.estimate.u_hat, k - 1, taken)
            # the pair (k-1, k) is judged when frame k arrives
            if prior is not None:
                inn = prediction_innovation(sc.model, prior, fr[k - 1], fr[k].z_x)
                tr.d2[k, j], tr.dof[k, j] = inn.d_M**2, inn.dof
            prior = step.estimate
        taken.update(sc.bus_ids)
    return tr


def _run_wls(scopes, frames_by_scope, union, N):
    tr = _new_trace(WLS, union, [sc.name for sc in scopes], N)
    taken: set = set()
    for j, sc in enumerate(scopes):
        qs = QuasiStaticModel.from_model(sc.model)
        W = qs.W
        for k, f in enumerate(frames_by_scope[sc.name]):
            z = qs.stack(f)
            v, _ = static_wls(qs.H, W, z)
            r = z - qs.H @ v
            _scatter(tr.u_hat, union, sc.bus_ids, v, k, taken)
            tr.d2[k, j], tr.dof[k, j] = float(r @ W @ r), qs.H.shape[0] - qs.H.shape[1]
        taken.update(sc.bus_ids)
    return tr


def _run_tse(scopes, frames_by_scope, union, N, bases, q_pu):
    tr = _new_trace(TSE, union, [sc.name for sc in scopes], N)
    taken: set = set()
    q = q_pu * bases.v_base**2
    for j, sc in enumerate(scopes):
        st = TseState(QuasiStaticModel.from_model(sc.model), q)
        for k, f in enumerate(frames_by_scope[sc.name]):
            v = tse_step(st, f)
            _scatter(tr.u_hat, union, sc.bus_ids, v, k, taken)
            if st.last_innovation is not None:
                tr.d2[k, j] = mahalanobis(st.last_innovation, st.last_S) ** 2
                tr.dof[k, j] = st.last_innovation.size
        taken.update(sc.bus_ids)
    return tr


def _run_dsie(cfg, part: AreaPartition, models, frames, N, alpha):
    ests = build_area_estimators(part, models)
    if not ests:
        raise UnobservableError("no observable area for the distributed estimator")
    union = _union_buses([Scope(str(e.area_id), e.model, e.bus_ids) for e in ests])
    tr = _new_trace(DSIE, union, [f"area{e.area_id}" for e in ests], N, degraded=True)
    local = {
        e.area_id: [local_frame(f, cfg.layout, part.area(e.area_id).layout) for f in frames] for e in ests
    }
    channel = MessageChannel()
    for k in range(1, N):
        res = distributed_step(ests, {a: (fr[k - 1], fr[k]) for a, fr in local.items()}, alpha=alpha,
                               channel=channel)
        taken: set = set()
        for j, e in enumerate(ests):
            r = res[e.area_id]
            _scatter(tr.u_hat, union, e.bus_ids, r.fused.u_f, k - 1, taken)
            taken.update(e.bus_ids)
            if r.innovation is not None:
                tr.d2[k, j], tr.dof[k, j] = r.innovation.d_M**2, r.innovation.dof
            tr.degraded[k] |= r.degraded
    return tr


def simulate_stream(cfg: ExperimentConfig) -> tuple[TruthTrajectory, list]:
    """Truth trajectory and measurement frames for ``cfg``, attacked if configured."""
    sim_noise = NoiseSpec(cfg.noise.sigma2_u, cfg.noise.sigma2_x, cfg.noise.sigma2_q, cfg.seed)
    noisy = sim_noise.sigma2_q > 0
    # A and B do not depend on the noise, so a noiseless run borrows unit weights
    model_noise = sim_noise if min(sim_noise.sigma2_u, sim_noise.sigma2_x, sim_noise.sigma2_q) > 0 \
        else NoiseSpec(1.0, 1.0, 1.0, cfg.seed)
    model = build_discrete_model(cfg.topology, cfg.layout, cfg.scenario.dt, model_noise, cfg.bases)
    truth = simulate_truth(model, cfg.scenario, sim_noise if noisy else None, cfg.bases)
    frames = generate_measurements(truth, cfg.layout, sim_noise, cfg.bases)
    if len(frames) < 2:
        raise ConfigurationError("a run needs at least two samples")
    if cfg.attack is not None:
        fdia = build_fdia(cfg.attack, cfg.topology, cfg.layout)
        frames = inject(frames, fdia, cfg.layout, cfg.attack.window)
    return truth, frames


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Simulate, estimate with every selected estimator and score against the truth."""
    model_noise = cfg.model_noise
    central, scopes, part, models, rep = _scopes(cfg, model_noise)
    truth, frames = simulate_stream(cfg)
    N = len(frames)
    onset = end = None
    if cfg.attack is not None:
        onset, end = cfg.attack.window
        end = N - 1 if end is None else min(end, N - 1)

    by_scope = {
        sc.name: frames if sc.name == "central" else [local_frame(f, cfg.layout, sc.model.layout) for f in frames]
        for sc in scopes
    }
    union = _union_buses(scopes)

    jobs = {}
    for name in cfg.estimators:
        if name == SIE:
            jobs[name] = lambda: _run_sie(scopes, by_scope, union, N)
        elif name == WLS:
            jobs[name] = lambda: _run_wls(scopes, by_scope, union, N)
        elif name == TSE:
            jobs[name] = lambda: _run_tse(scopes, by_scope, union, N, cfg.bases, cfg.tse_q_pu)
        elif name == DSIE:
            if part is None:
                p1, m1 = partition(cfg.topology, cfg.layout, {1: cfg.topology.branch_ids},
                                   dt=cfg.scenario.dt, noise=model_noise, bases=cfg.bases)
            else:
                p1, m1 = part, models
            jobs[name] = lambda p1=p1, m1=m1: _run_dsie(cfg, p1, m1, frames, N, cfg.alpha)
    if cfg.parallel and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            futs = {n: pool.submit(fn) for n, fn in jobs.items()}
            traces = {n: f.result() for n, f in futs.items()}
    else:
        traces = {n: fn() for n, fn in jobs.items()}

    idx = {b: i for i, b in enumerate(cfg.topology.bus_ids)}
    errors = {}
    for name, tr in traces.items():
        cols = np.concatenate([[2 * idx[b], 2 * idx[b] + 1] for b in tr.bus_ids])
        per = np.full(N, np.nan)
        for k in range(N):
            if not np.any(np.isnan(tr.u_hat[k])):
                per[k] = mse(tr.u_hat[k], truth.u[k, cols], cfg.bases)
        errors[name] = per

    summary = summarize(traces, errors, cfg.alpha, onset, end, N)
    summary["observability"] = {"rank": rep.rank, "required": rep.required, "observable": rep.observable}
    summary["scopes"] = [sc.name for sc in scopes]
    summary["seed"] = cfg.seed
    summary["n_steps"] = N
    summary["attack_window"] = None if onset is None else [onset, end]

    m_header, m_rows = _metrics_table(traces, errors, truth, cfg.alpha, onset, end)
    e_header, e_rows = _estimates_table(traces, truth, cfg.topology)
    result = ExperimentResult(cfg, truth, frames, scopes, traces, errors, summary, m_header, m_rows, e_header, e_rows)
    if cfg.out_dir is not None:
        result.paths = write_reports(result, cfg.out_dir)
    return result


def summarize(traces: Mapping, errors: Mapping, alpha: float, onset, end, N: int) -> dict:
    out = {"alpha": alpha, "estimators": {}}
    for name, tr in traces.items():
        per = errors[name]
        d, dof, _, flags = tr.combined(alpha)
        steps = np.arange(N)
        if onset is not None:
            in_win = (steps >= onset) & (steps <= end)
            hits = np.flatnonzero(flags & in_win)
            latency = int(hits[0] - onset) if hits.size else None
            false_alarms = int(np.sum(flags & ~in_win))
        else:
            latency, false_alarms = None, int(np.sum(flags))
        valid = ~np.isnan(d)
        out["estimators"][name] = {
            "mean_mse": float(np.nanmean(per)),
            "max_mse": float(np.nanmax(per)),
            "mse_steps": int(np.sum(~np.isnan(per))),
            "flags": int(np.sum(flags)),
            "tested_steps": int(np.sum(valid)),
            "false_alarms": false_alarms,
            "detection_latency": latency,
            "mean_distance": float(np.nanmean(d)) if valid.any() else None,
            "max_distance": float(np.nanmax(d)) if valid.any() else None,
            "degraded_steps": None if tr.degraded is None else int(np.sum(tr.degraded)),
        }
    return out


def _metrics_table(traces, errors, truth, alpha, onset, end):
    names = list(traces)
    header = ["step", "time_s", "attack_active"]
    for n in names:
        header += [f"mse_{n}", f"dM_{n}", f"dof_{n}", f"threshold_{n}", f"flag_{n}"]
    comb = {n: traces[n].combined(alpha) for n in names}
    rows = []
    for k in range(truth.n_steps):
        active = onset is not None and onset <= k <= end
        row = [k, float(truth.t[k]), active]
        for n in names:
            d, dof, thr, flag = comb[n]
            row += [float(errors[n][k]), float(d[k]), int(dof[k]), float(thr[k]), bool(flag[k])]
        rows.append(row)
    return header, rows


def _estimates_table(traces, truth, topology):
    header = ["step", "time_s"]
    for b in topology.bus_ids:
        header += [f"v_true_{b}_d", f"v_true_{b}_q"]
    for n, tr in traces.items():
        for b in tr.bus_ids:
            header += [f"v_{n}_{b}_d", f"v_{n}_{b}_q"]
    rows = []
    for k in range(truth.n_steps):
        row = [k, float(truth.t[k])] + [float(v) for v in truth.u[k]]
        for tr in traces.values():
            row += [float(v) for v in tr.u_hat[k]]
        rows.append(row)
    return header, rows


def write_reports(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": write_table(out / "metrics.csv", result.metrics_header, result.metrics_rows, "metrics"),
        "estimates": write_table(out / "estimates.csv", result.estimates_header, result.estimates_rows, "estimates"),
    }
    p = out / "summary.json"
    p.write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    paths["summary"] = p
    return paths


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class EventWindow:
    step: int
    peaks: dict  # estimator -> peak MSE in the window
    ranking: tuple  # estimators by ascending peak
    deltas: dict  # estimator -> peak minus the reference estimator's peak


@dataclass(frozen=True)
class Comparison:
    reference: str
    windows: tuple
    steady: dict  # estimator -> mean MSE outside every event window

    def peak_ratio(self, num: str, den: str) -> np.ndarray:
        return np.array([w.peaks[num] / w.peaks[den] for w in self.windows])

    def steady_spread(self) -> float:
        vals = list(self.steady.values())
        return max(vals) / min(vals)


def compare_estimators(errors: Mapping, event_steps: Sequence[int], window: int = 5,
                       reference: str | None = None) -> Comparison:
    """Peak MSE per post-event window (steps ``s .. s+window-1``) and steady-state means."""
    names = list(errors)
    if len(names) < 2:
        raise ValueError("comparison needs at least two estimators")
    reference = reference or (SIE if SIE in names else names[0])
    N = len(next(iter(errors.values())))
    inside = np.zeros(N, dtype=bool)
    wins = []
    for s in event_steps:
        sl = slice(s, min(s + window, N))
        inside[sl] = True
        peaks = {n: float(np.nanmax(np.asarray(errors[n])[sl])) for n in names}
        ranking = tuple(sorted(names, key=lambda n: peaks[n]))
        wins.append(EventWindow(s, peaks, ranking, {n: peaks[n] - peaks[reference] for n in names}))
    steady = {n: float(np.nanmean(np.asarray(errors[n])[~inside])) for n in names}
    return Comparison(reference, tuple(wins), steady)
