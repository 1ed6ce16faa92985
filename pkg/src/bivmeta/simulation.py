"""Simulation study: data generator, factorial runner and performance metrics."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .association import estimate_within_associations
from .copula import sample_bernoulli_pair, theta_from_spearman
from .core_types import ArmDependence, PosteriorSummary, StudyRecord
from .mcmc import SamplerConfig, run_chains, summarize
from .models import PriorSpec, build_model

SPEARMAN_TARGETS = {"weak": 0.15, "moderate": 0.45, "strong": 0.75}
ETA_LEVELS = (0.0, 3.0, 4.0)
M_LEVELS = (80, 300)
MODELS = ("BRMA", "BRMA_IB", "BRMA_BC")
GLOBAL_PARAMS = ("rho_b", "tau1", "tau2", "d1", "d2")
RHAT_MAX = 1.1


@dataclass(frozen=True)
class Truth:
    d1: float = 0.4
    d2: float = 0.2
    tau1: float = 0.5
    tau2: float = 0.5
    rho_b: float = 0.8
    s1: float = 0.1
    s2: float = 0.1
    rho_baseline: float = 0.8
    n_sd: float = 5.0

    def __post_init__(self):
        for name in ("tau1", "tau2", "s1", "s2", "n_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("rho_b", "rho_baseline"):
            if abs(getattr(self, name)) > 1:
                raise ValueError(f"|{name}| must be <= 1")


@dataclass(frozen=True)
class ScenarioConfig:
    eta: float
    assoc: str
    m: int
    n_studies: int = 30
    replications: int = 100
    truth: Truth = field(default_factory=Truth)
    seed: int = 0
    chains: int = 4
    warmup: int = 1500
    iters: int = 1500
    bootstrap: int = 1000

    def __post_init__(self):
        if self.assoc not in SPEARMAN_TARGETS:
            raise ValueError(f"assoc must be one of {sorted(SPEARMAN_TARGETS)}")
        if self.m < 2 or self.n_studies < 2 or self.replications < 1:
            raise ValueError("m and n_studies must be >= 2, replications >= 1")
        if self.bootstrap < 2:
            raise ValueError("bootstrap must be >= 2")

    @property
    def spearman(self) -> float:
        return SPEARMAN_TARGETS[self.assoc]

    @property
    def label(self) -> str:
        return f"eta={self.eta:g},assoc={self.assoc},m={self.m}"

    @property
    def index(self) -> int:
        """Position in the 18-cell factorial, or a stable hash off the grid."""
        for i, (e, a, m) in enumerate(factorial_cells()):
            if e == self.eta and a == self.assoc and m == self.m:
                return i
        return zlib.crc32(self.label.encode()) + 100

    def to_dict(self) -> dict:
        return asdict(self)


def factorial_cells():
    return list(itertools.product(ETA_LEVELS, tuple(SPEARMAN_TARGETS), M_LEVELS))


def scenario_grid(**overrides) -> list[ScenarioConfig]:
    return [ScenarioConfig(eta=e, assoc=a, m=m, **overrides) for e, a, m in factorial_cells()]


def parse_scenario(text: str, **overrides) -> ScenarioConfig:
    """Parse ``"eta=3,assoc=strong,m=300"``."""
    kv = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"bad scenario field {part!r}; expected key=value")
        k, v = (s.strip() for s in part.split("=", 1))
        kv[k] = v
    missing = {"eta", "assoc", "m"} - kv.keys()
    if missing:
        raise ValueError(f"scenario is missing {sorted(missing)}")
    unknown = kv.keys() - {"eta", "assoc", "m"}
    if unknown:
        raise ValueError(f"unknown scenario fields {sorted(unknown)}")
    return ScenarioConfig(eta=float(kv["eta"]), assoc=kv["assoc"], m=int(kv["m"]), **overrides)


def replication_seed(cfg: ScenarioConfig, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, cfg.index, rep])


@dataclass
class SimulatedStudy:
    record: StudyRecord
    ipd_ctrl: np.ndarray  # (n, 2) bits
    ipd_trt: np.ndarray


@dataclass
class TruthSnapshot:
    delta1: np.ndarray
    delta2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    theta: float


def _bvn(rng, mean, s1, s2, rho, size):
    # explicit 2x2 Cholesky so rho = +-1 and zero scales are allowed
    z = rng.standard_normal((size, 2))
    out = np.empty((size, 2))
    out[:, 0] = mean[0] + s1 * z[:, 0]
    out[:, 1] = mean[1] + s2 * (rho * z[:, 0] + math.sqrt(max(1.0 - rho * rho, 0.0)) * z[:, 1])
    return out


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_dataset(cfg: ScenarioConfig, rep: int, rng: np.random.Generator | None = None):
    """One simulated meta-analysis; returns (studies, truth)."""
    if rng is None:
        rng = np.random.default_rng(replication_seed(cfg, rep).spawn(1)[0])
    tr = cfg.truth
    k = cfg.n_studies
    theta = theta_from_spearman(cfg.spearman)
    n = np.maximum(np.rint(rng.normal(cfg.m, tr.n_sd, size=(k, 2))), 2).astype(int)
    mu = _bvn(rng, (cfg.eta, cfg.eta), tr.s1, tr.s2, tr.rho_baseline, k)
    delta = _bvn(rng, (tr.d1, tr.d2), tr.tau1, tr.tau2, tr.rho_b, k)
    studies = []
    for i in range(k):
        ipd = []
        for arm in (0, 1):
            eta1 = mu[i, 0] + arm * delta[i, 0]
            eta2 = mu[i, 1] + arm * delta[i, 1]
            x1, x2 = sample_bernoulli_pair(_expit(eta1), _expit(eta2), theta, rng, size=int(n[i, arm]))
            ipd.append(np.column_stack([x1, x2]).astype(np.int8))
        c, t = ipd
        rec = StudyRecord(
            f"S{i + 1:02d}",
            len(c), int(c[:, 0].sum()), int(c[:, 1].sum()),
            len(t), int(t[:, 0].sum()), int(t[:, 1].sum()),
        )
        studies.append(SimulatedStudy(rec, c, t))
    truth = TruthSnapshot(delta[:, 0], delta[:, 1], mu[:, 0], mu[:, 1], theta)
    return studies, truth


@dataclass
class ReplicationResult:
    rep: int
    summaries: dict[str, list[PosteriorSummary]]
    truth: TruthSnapshot
    converged: dict[str, bool]
    failures: dict[str, str] = field(default_factory=dict)
    associations: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "rep": self.rep,
            "truth": {"delta1": self.truth.delta1.tolist(), "delta2": self.truth.delta2.tolist(),
                      "theta": self.truth.theta},
            "converged": self.converged,
            "failures": self.failures,
            "summaries": {m: [s.to_dict() for s in ss] for m, ss in self.summaries.items()},
            "associations": self.associations,
        }, sort_keys=True)


def _keep(name: str) -> bool:
    return name in GLOBAL_PARAMS or name.startswith("delta2[")


def run_replication(cfg: ScenarioConfig, rep: int, priors: PriorSpec | None = None) -> ReplicationResult:
    ss = replication_seed(cfg, rep)
    data_ss, boot_ss, fit_ss = ss.spawn(3)
    studies, truth = generate_dataset(cfg, rep, np.random.default_rng(data_ss))
    records = [s.record for s in studies]

    brng = np.random.default_rng(boot_ss)
    assoc = [estimate_within_associations(s.ipd_ctrl, s.ipd_trt, cfg.bootstrap, brng) for s in studies]
    rho_w = np.clip([a.rho_w for a in assoc], -0.99, 0.99)
    dependence = [ArmDependence(a.theta_ctrl, a.theta_trt) for a in assoc]

    seeds = fit_ss.generate_state(len(MODELS))
    summaries, converged, failures = {}, {}, {}
    for model_name, seed in zip(MODELS, seeds):
        try:
            model = build_model(model_name, records, priors, rho_w=rho_w, dependence=dependence)
            sc = SamplerConfig(chains=cfg.chains, iters=cfg.iters, warmup=cfg.warmup, seed=int(seed))
            chains = run_chains(model, sc)
            summ = [s for s in summarize(chains, model.param_names) if _keep(s.parameter)]
            summaries[model_name] = summ
            rb = next(s for s in summ if s.parameter == "rho_b")
            converged[model_name] = bool(rb.rhat <= RHAT_MAX)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            failures[model_name] = f"{type(exc).__name__}: {exc}"
            converged[model_name] = False
    return ReplicationResult(
        rep, summaries, truth, converged, failures,
        [{"rho_w": a.rho_w, "theta_ctrl": a.theta_ctrl, "theta_trt": a.theta_trt,
          "theta_ctrl_bernoulli": a.theta_ctrl_bernoulli, "theta_trt_bernoulli": a.theta_trt_bernoulli,
          "flags": a.flags} for a in assoc],
    )


def _truth_value(cfg: ScenarioConfig, truth: TruthSnapshot, name: str):
    if name.startswith("delta2["):
        return float(truth.delta2[int(name[7:-1])])
    return float(getattr(cfg.truth, name))


def point_estimate(s: PosteriorSummary) -> float:
    return s.median if s.parameter == "rho_b" else s.mean


@dataclass
class PerformanceRow:
    model: str
    parameter: str
    bias: float
    coverage: float
    rmse: float
    n_used: int


@dataclass
class PerformanceTable:
    scenario: str
    rows: list[PerformanceRow]
    n_replications: int
    excluded: dict[str, int]

    def get(self, model: str, parameter: str) -> PerformanceRow:
        for r in self.rows:
            if r.model == model and r.parameter == parameter:
                return r
        raise KeyError((model, parameter))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["model", "parameter", "bias", "coverage", "rmse"])
        for r in self.rows:
            w.writerow([r.model, r.parameter, repr(r.bias), repr(r.coverage), repr(r.rmse)])
        return out.getvalue()


def aggregate(cfg: ScenarioConfig, results: Sequence[ReplicationResult]) -> PerformanceTable:
    """Bias, coverage and RMSE over converged replications.

    A replication is excluded when any model failed or has R-hat > 1.1 on
    rho_b. For the study effects delta2[i], errors are averaged over
    studies within a replication first, then over replications.
    """
    results = sorted(results, key=lambda r: r.rep)
    used = [r for r in results if all(r.converged.get(m, False) for m in MODELS)]
    excluded = {m: sum(1 for r in results if not r.converged.get(m, False)) for m in MODELS}
    excluded["any"] = len(results) - len(used)
    rows = []
    for m in MODELS:
        for p in GLOBAL_PARAMS + ("delta2",):
            err, cov = [], []
            for r in used:
                ss = r.summaries[m]
                if p == "delta2":
                    group = [s for s in ss if s.parameter.startswith("delta2[")]
                else:
                    group = [s for s in ss if s.parameter == p]
                e = [point_estimate(s) - _truth_value(cfg, r.truth, s.parameter) for s in group]
                c = [s.ci_low <= _truth_value(cfg, r.truth, s.parameter) <= s.ci_high for s in group]
                err.append((np.mean(e), np.mean(np.square(e))))
                cov.append(np.mean(c))
            if err:
                e = np.array(err)
                rows.append(PerformanceRow(m, p, float(e[:, 0].mean()), float(np.mean(cov)),
                                           float(math.sqrt(e[:, 1].mean())), len(used)))
            else:
                rows.append(PerformanceRow(m, p, math.nan, math.nan, math.nan, 0))
    return PerformanceTable(cfg.label, rows, len(results), excluded)


def _work(args):
    cfg, rep, priors = args
    return run_replication(cfg, rep, priors)


def run_replications(cfg: ScenarioConfig, workers: int = 1, priors: PriorSpec | None = None,
                     reps: Sequence[int] | None = None) -> list[ReplicationResult]:
    reps = list(range(cfg.replications)) if reps is None else list(reps)
    jobs = [(cfg, r, priors) for r in reps]
    if workers <= 1:
        results = [_work(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_work, jobs))
    return sorted(results, key=lambda r: r.rep)


def run_scenario(cfg: ScenarioConfig, workers: int = 1, priors: PriorSpec | None = None,
                 out_dir: str | Path | None = None) -> PerformanceTable:
    results = run_replications(cfg, workers, priors)
    table = aggregate(cfg, results)
    if out_dir is not None:
        write_outputs(table, results, out_dir)
    return table


def write_outputs(table: PerformanceTable, results: Sequence[ReplicationResult], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "replications.jsonl", "w", encoding="utf-8") as fh:
        for r in sorted(results, key=lambda r: r.rep):
            fh.write(r.to_json() + "\n")
    (out / "performance.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "exclusions.json").write_text(json.dumps(
        {"scenario": table.scenario, "replications": table.n_replications, "excluded": table.excluded},
        indent=2, sort_keys=True), encoding="utf-8")


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(cfg, **kw)
