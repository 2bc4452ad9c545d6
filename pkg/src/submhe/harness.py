"""Seeded simulation drivers, metrics and file output.

Random draws are keyed by ``(master_seed, replicate, channel, t)`` so that a
replicate produces the same numbers whether it runs alone, in a thread pool
or in a process pool.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .mhe import CostWeights, MheConfig, MovingHorizonEstimator
from .model import BoxSet, DiscreteSystem, REACTOR_X0, REACTOR_XBAR0, get_model
from .observer import contraction_check, reactor_observer
from .solver import SolverSettings

CHANNEL_W = 0
CHANNEL_V = 1
CHANNEL_INIT = 2

CANDIDATES = ("nominal", "observer", "luenberger")

CSV_COLUMNS = (
    ["t", "x1", "x2", "x3", "z1", "z2", "z3", "xhat1", "xhat2", "xhat3", "y", "w1", "w2", "w3", "v"]
    + ["eps_norm", "cost_candidate", "cost_accepted", "iters", "wall_us"]
)


def _generator(master_seed: int, replicate: int, channel: int, t: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(master_seed), int(replicate), int(channel), int(t)])
    return np.random.Generator(np.random.Philox(ss))


def sample_box_uniform(box: BoxSet, master_seed: int, replicate: int, channel: int, t: int) -> np.ndarray:
    """Componentwise uniform draw on a bounded box, keyed by the four counters."""
    if not box.is_bounded:
        raise ConfigurationError("cannot sample uniformly from an unbounded set")
    u = _generator(master_seed, replicate, channel, t).random(box.dim)
    return box.lower + u * (box.upper - box.lower)


@dataclass(frozen=True)
class RunConfig:
    model: str = "reactor"
    x0: Sequence[float] = REACTOR_X0
    x_bar0: Sequence[float] = REACTOR_XBAR0
    sim_length: int = 60
    N: int = 3
    T: Optional[int] = 5  # None: observer never re-initialized ("T = t")
    cost_kind: str = "quadratic"
    candidate_kind: str = "nominal"
    project: bool = True
    budget: int = 2
    warm_start: str = "candidate"
    master_seed: int = 42
    n_runs: int = 100
    constrain_w: bool = False
    record_timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "x_bar0", tuple(float(v) for v in self.x_bar0))
        if self.T is not None and not isinstance(self.T, int):
            if str(self.T).lower() in ("t", "none", "inf"):
                object.__setattr__(self, "T", None)
            else:
                object.__setattr__(self, "T", int(self.T))
        if self.budget < 0:
            raise ConfigurationError("budget must be >= 0")
        if self.sim_length < 0 or self.n_runs < 1:
            raise ConfigurationError("sim_length must be >= 0 and n_runs >= 1")
        if self.candidate_kind not in CANDIDATES:
            raise ConfigurationError(f"candidate_kind must be one of {CANDIDATES}")
        if self.T is not None and self.T <= self.N:
            raise ConfigurationError("T must exceed N, or be 't' for a never re-initialized observer")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**data)

    def mhe_config(self, solver: Optional[SolverSettings] = None) -> MheConfig:
        settings = solver or SolverSettings(budget=self.budget)
        if self.candidate_kind == "luenberger":
            # observer candidate, never re-initialized, never improved: x_hat_t = z_t
            return MheConfig(N=self.N, T=None, cost_kind=self.cost_kind, candidate_kind="observer",
                             project=False, solver=replace(settings, budget=0), warm_start="candidate")
        return MheConfig(N=self.N, T=self.T, cost_kind=self.cost_kind, candidate_kind=self.candidate_kind,
                         project=self.project, solver=settings, warm_start=self.warm_start,
                         constrain_w=self.constrain_w)

    def label(self) -> str:
        T = "t" if self.T is None else str(self.T)
        if self.candidate_kind == "luenberger":
            return "luenberger"
        proj = "proj" if self.project else "noproj"
        return f"{self.candidate_kind}/{self.cost_kind}/{proj}/N={self.N}/T={T}/i={self.budget}"


@dataclass(eq=False)
class RunRecord:
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_hat: np.ndarray
    y: np.ndarray
    w: np.ndarray
    v: np.ndarray
    eps: np.ndarray
    cost_candidate: np.ndarray
    cost_accepted: np.ndarray
    iters: np.ndarray
    wall_us: np.ndarray
    eps_log: list = field(default_factory=list)
    replicate: int = 0

    def __len__(self):
        return self.t.shape[0]

    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.x - self.x_hat, axis=1)

    def sse(self) -> float:
        e = self.errors()
        return float(np.sum(e * e))

    def sne(self) -> float:
        return float(np.sum(self.errors()))

    def tau_a(self, N: int) -> float:
        """Mean wall time of the estimator in milliseconds over ``t >= N``."""
        sel = self.t >= N
        return float(np.mean(self.wall_us[sel]) / 1000.0) if sel.any() else float("nan")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "eps_log":
                continue
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


@dataclass
class MetricsRow:
    label: str
    candidate_kind: str
    cost_kind: str
    project: bool
    N: int
    T: Optional[int]
    budget: int
    n_runs: int
    SSE: float
    SNE: float
    tau_a: float


@dataclass
class MetricsTable:
    rows: List[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow):
        self.rows.append(row)

    def find(self, **match) -> MetricsRow:
        for r in self.rows:
            if all(getattr(r, k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def _system_and_observer(model: str):
    sys = get_model(model)
    obs = reactor_observer()
    cert = contraction_check(obs, sys)
    if not cert.valid:
        raise ContractViolation("observer certificate is invalid")
    return sys, obs, cert


def run_single(config: RunConfig, replicate: int = 0, solver: Optional[SolverSettings] = None,
               zero_noise: bool = False, keep_eps_log: bool = False, on_problem=None) -> RunRecord:
    """Simulate truth and estimator in lockstep for ``sim_length`` steps (t = 0..sim_length).

    ``on_problem(view, candidate)`` is forwarded to the estimator.
    """
    sys, obs, cert = _system_and_observer(config.model)
    mcfg = config.mhe_config(solver)
    weights = CostWeights.from_eioss(cert.eioss, mcfg.cost_kind)
    est = MovingHorizonEstimator(sys, obs, mcfg, config.x_bar0, weights)
    est.on_problem = on_problem
    L = config.sim_length
    n = L + 1
    rec = RunRecord(
        t=np.arange(n),
        x=np.empty((n, sys.n_x)),
        z=np.empty((n, sys.n_x)),
        x_hat=np.empty((n, sys.n_x)),
        y=np.empty((n, sys.n_y)),
        w=np.empty((n, sys.n_w)),
        v=np.empty((n, sys.n_v)),
        eps=np.empty(n),
        cost_candidate=np.empty(n),
        cost_accepted=np.empty(n),
        iters=np.zeros(n, dtype=int),
        wall_us=np.zeros(n),
        replicate=replicate,
    )
    x = np.array(config.x0, dtype=float)
    u = np.zeros(sys.n_u)
    y_prev = None
    X = sys.state_set
    for t in range(n):
        if zero_noise:
            w, v = np.zeros(sys.n_w), np.zeros(sys.n_v)
        else:
            w = sample_box_uniform(sys.disturbance_set, config.master_seed, replicate, CHANNEL_W, t)
            v = sample_box_uniform(sys.noise_set, config.master_seed, replicate, CHANNEL_V, t)
        res = est.estimate_step(u if t else None, y_prev)
        if res.cost_accepted > res.cost_candidate:
            raise ContractViolation(f"accepted cost exceeds candidate cost at t={t}")
        if mcfg.project and not X.contains(res.x_hat):
            raise ContractViolation(f"estimate left the state set at t={t}")
        y = sys.output_map(x, u, v)
        rec.x[t], rec.z[t], rec.x_hat[t], rec.y[t], rec.w[t], rec.v[t] = x, res.z_prior, res.x_hat, y, w, v
        rec.eps[t] = res.eps_prior
        rec.cost_candidate[t] = res.cost_candidate
        rec.cost_accepted[t] = res.cost_accepted
        rec.iters[t] = res.iterations
        rec.wall_us[t] = res.wall_us if config.record_timing else 0.0
        y_prev = y
        x = sys.step_map(x, u, w)
    if keep_eps_log:
        rec.eps_log = est.eps_log
    return rec


def _run_one(args):
    config, rep, solver = args
    return run_single(config, rep, solver)


def run_replicates(config: RunConfig, workers: int = 1, executor: str = "thread",
                   solver: Optional[SolverSettings] = None) -> List[RunRecord]:
    """All ``n_runs`` replicates, returned in replicate order."""
    jobs = [(config, rep, solver) for rep in range(config.n_runs)]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    pool_cls = ThreadPoolExecutor if executor == "thread" else ProcessPoolExecutor
    with pool_cls(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def metrics_row(config: RunConfig, records: Sequence[RunRecord]) -> MetricsRow:
    sse = math.fsum(r.sse() for r in records) / len(records)
    sne = math.fsum(r.sne() for r in records) / len(records)
    tau = float(np.mean([r.tau_a(config.N) for r in records])) if config.record_timing else float("nan")
    return MetricsRow(
        label=config.label(),
        candidate_kind=config.candidate_kind,
        cost_kind=config.cost_kind,
        project=config.project,
        N=config.N,
        T=config.T,
        budget=config.budget,
        n_runs=len(records),
        SSE=sse,
        SNE=sne,
        tau_a=tau,
    )


def monte_carlo(config: RunConfig, workers: int = 1, executor: str = "thread",
                solver: Optional[SolverSettings] = None, table: Optional[MetricsTable] = None):
    """Run the replicates and append their mean metrics; returns ``(table, records)``."""
    records = run_replicates(config, workers, executor, solver)
    table = table if table is not None else MetricsTable()
    table.add(metrics_row(config, records))
    return table, records


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def record_rows(rec: RunRecord) -> Iterable[list]:
    for k in range(len(rec)):
        yield (
            [_fmt(rec.t[k])]
            + [_fmt(v) for v in rec.x[k]]
            + [_fmt(v) for v in rec.z[k]]
            + [_fmt(v) for v in rec.x_hat[k]]
            + [_fmt(rec.y[k, 0])]
            + [_fmt(v) for v in rec.w[k]]
            + [_fmt(rec.v[k, 0])]
            + [_fmt(rec.eps[k]), _fmt(rec.cost_candidate[k]), _fmt(rec.cost_accepted[k])]
            + [_fmt(rec.iters[k]), _fmt(rec.wall_us[k])]
        )


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)!r}")


def _clean_json(o):
    """Non-finite floats become null so the output stays strict JSON."""
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean_json(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean_json(v) for v in o]
    return o


def emit(obj, fmt: str, path) -> None:
    """Write run records (CSV or JSON) or a metrics table (CSV or JSON).

    Records of several replicates are concatenated in replicate order; ``t``
    restarts at 0 for each.
    """
    try:
        if isinstance(obj, MetricsTable):
            if fmt == "json":
                with open(path, "w") as fh:
                    json.dump(_clean_json(obj.to_dict()), fh, indent=2, default=_json_default)
                    fh.write("\n")
                return
            if fmt != "csv":
                raise ConfigurationError(f"unknown format {fmt!r}")
            names = [f.name for f in fields(MetricsRow)]
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(names)
                for row in obj.rows:
                    wr.writerow(
                        [_fmt(getattr(row, n)) if isinstance(getattr(row, n), float) else
                         ("t" if n == "T" and row.T is None else getattr(row, n)) for n in names]
                    )
            return
        records = [obj] if isinstance(obj, RunRecord) else list(obj)
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(CSV_COLUMNS)
                for rec in records:
                    wr.writerows(record_rows(rec))
        elif fmt == "json":
            with open(path, "w") as fh:
                json.dump(_clean_json([r.to_dict() for r in records]), fh, default=_json_default)
                fh.write("\n")
        else:
            raise ConfigurationError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"could not write {os.fspath(path)!r}: {exc}") from exc


def read_records_csv(path) -> List[RunRecord]:
    """Parse a CSV written by :func:`emit` back into records."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != CSV_COLUMNS:
            raise ConfigurationError("unexpected CSV header")
        rows = [r for r in rd]
    runs, cur = [], []
    for r in rows:
        if r[0] == "0" and cur:
            runs.append(cur)
            cur = []
        cur.append(r)
    if cur:
        runs.append(cur)
    out = []
    for rep, block in enumerate(runs):
        a = np.array([[float(v) for v in r] for r in block])
        out.append(
            RunRecord(
                t=a[:, 0].astype(int), x=a[:, 1:4], z=a[:, 4:7], x_hat=a[:, 7:10], y=a[:, 10:11],
                w=a[:, 11:14], v=a[:, 14:15], eps=a[:, 15], cost_candidate=a[:, 16], cost_accepted=a[:, 17],
                iters=a[:, 18].astype(int), wall_us=a[:, 19], replicate=rep,
            )
        )
    return out
