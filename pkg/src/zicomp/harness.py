"""Simulation study harness: scenarios, replicate runs, truth reports.

Four generative scenarios share the fixed-effect truth and differ in
which random-effect blocks are active:

  full              gamma and delta drawn from their CAR-projected prior
  const_dispersion  delta = 0 (one dispersion level everywhere)
  fixed_only        gamma = delta = 0
  covariate_only    gamma = delta = 0 and zeta = 0 (no month effects)

Fits always use q_fit >= q_true basis vectors, so the selection
machinery must both find the active vectors and leave the padding
alone. Replicates draw independent datasets from one fixed truth.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import hpd_interval, inclusion_probabilities
from .model import Dataset, ModelState, month_dummies, simulate_dataset
from .sampler import ChainConfig, ChainOutput, PriorConfig, run_chain
from .spatial import build_lattice, compute_basis

__all__ = [
    "SCENARIO_IDS",
    "Scenario",
    "StudyReport",
    "make_scenario",
    "paper_scenario",
    "desk_scenario",
    "scenario_template",
    "scenario_truth_state",
    "replicate_dataset",
    "replicate_chain_seed",
    "run_replicates",
    "truth_overlap_report",
    "scenario_to_json",
    "scenario_from_json",
]

SCENARIO_IDS = ("full", "const_dispersion", "fixed_only", "covariate_only")

_BETA1 = np.array([0.0, -3.0, 2.0])
_BETA2 = np.array([2.0, -0.5, 1.0])
_ALPHA = -0.3
# month-effect magnitudes land on dummy columns that actually occur:
# with a year or more of periods they sit late in the year, with short
# horizons they move to the months the data contains
_ZETA_LONG = np.array([0, 0, 0, 0, 0, 0, 0.1, 0.2, 0.5, 0.4, 0.3], dtype=float)
_ZETA_SHORT = np.array([0.1, 0.2, 0.5, 0.4, 0.3, 0, 0, 0, 0, 0, 0], dtype=float)


@dataclass(frozen=True)
class Scenario:
    id: str
    rows: int
    cols: int
    T: int
    q_true: int
    q_fit: int
    seed: int
    rho: float
    beta1: np.ndarray
    beta2: np.ndarray
    zeta: np.ndarray
    alpha: float
    gamma: np.ndarray  # length q_true (zeros when inactive)
    delta: np.ndarray
    kappa: float
    tau: float

    @property
    def n(self) -> int:
        return self.rows * self.cols


def lattice_covariates(rows: int, cols: int) -> np.ndarray:
    """Vertex coordinates scaled to the unit square, node-major order."""
    xs = np.arange(cols) / max(cols - 1, 1)
    ys = np.arange(rows) / max(rows - 1, 1)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.reshape(-1), gy.reshape(-1)])


def make_scenario(
    scenario_id: str,
    dims=(10, 10),
    T: int = 6,
    q_true: int = 10,
    q_fit: int = 20,
    seed: int = 0,
    rho: float = 0.99,
    kappa: float = 1.0,
    tau: float = 1.0,
) -> Scenario:
    """Fully specified truth for one scenario.

    gamma and delta (when active) are drawn once here, from
    Normal_q(0, Q_B^{-1}/kappa) on the q_true-vector basis, so every
    replicate shares the same truth.
    """
    if scenario_id not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario_id!r}; pick from {SCENARIO_IDS}")
    rows, cols = dims
    graph = build_lattice(rows, cols)
    basis = compute_basis(graph, q_true, rho)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    gamma = np.zeros(q_true)
    delta = np.zeros(q_true)
    if scenario_id in ("full", "const_dispersion"):
        gamma = _draw_car_coef(basis.prior_precision, kappa, rng)
    if scenario_id == "full":
        delta = _draw_car_coef(basis.prior_precision, tau, rng)
    zeta = np.zeros(11)
    if scenario_id != "covariate_only":
        zeta = (_ZETA_LONG if T >= 12 else _ZETA_SHORT).copy()
    return Scenario(
        id=scenario_id,
        rows=rows,
        cols=cols,
        T=T,
        q_true=q_true,
        q_fit=q_fit,
        seed=seed,
        rho=rho,
        beta1=_BETA1.copy(),
        beta2=_BETA2.copy(),
        zeta=zeta,
        alpha=_ALPHA,
        gamma=gamma,
        delta=delta,
        kappa=kappa,
        tau=tau,
    )


def _draw_car_coef(qb: np.ndarray, scale: float, rng) -> np.ndarray:
    """One draw from Normal_q(0, (scale * Q_B)^(-1))."""
    lchol = np.linalg.cholesky(qb * scale)
    z = rng.standard_normal(qb.shape[0])
    return np.linalg.solve(lchol.T, z)


def desk_scenario(scenario_id: str, seed: int = 0) -> Scenario:
    return make_scenario(scenario_id, dims=(10, 10), T=6, q_true=10, q_fit=20, seed=seed)


def paper_scenario(scenario_id: str, seed: int = 0) -> Scenario:
    return make_scenario(scenario_id, dims=(30, 30), T=24, q_true=25, q_fit=50, seed=seed)


def scenario_template(scenario: Scenario) -> Dataset:
    """Dataset shell (y = 0) carrying the design: X = [1, x1, x2], month dummies."""
    n, T = scenario.n, scenario.T
    coords = lattice_covariates(scenario.rows, scenario.cols)
    x = np.ones((n, T, 3))
    x[:, :, 1] = coords[:, 0][:, None]
    x[:, :, 2] = coords[:, 1][:, None]
    return Dataset(
        y=np.zeros((n, T), dtype=np.int64),
        X=x,
        M=month_dummies(T),
        graph=build_lattice(scenario.rows, scenario.cols),
    )


def scenario_truth_state(scenario: Scenario, n: int, T: int) -> ModelState:
    """Truth embedded in fit dimension q_fit (padding coordinates zero)."""
    q_fit = scenario.q_fit
    gamma = np.zeros(q_fit)
    delta = np.zeros(q_fit)
    gamma[: scenario.q_true] = scenario.gamma
    delta[: scenario.q_true] = scenario.delta
    return ModelState(
        w=np.zeros((n, T), dtype=np.int8),
        beta1=scenario.beta1.copy(),
        beta2=scenario.beta2.copy(),
        zeta=scenario.zeta.copy(),
        alpha=scenario.alpha,
        gamma=gamma,
        delta=delta,
        ind_gamma=(gamma != 0).astype(np.int8),
        ind_delta=(delta != 0).astype(np.int8),
        kappa=scenario.kappa,
        tau=scenario.tau,
    )


def replicate_dataset(scenario: Scenario, replicate: int, basis=None):
    """Independent dataset draw for one replicate (documented stream split:
    data stream = SeedSequence(scenario seed, spawn_key=(1, replicate)))."""
    template = scenario_template(scenario)
    if basis is None:
        basis = compute_basis(template.graph, scenario.q_fit, scenario.rho)
    truth = scenario_truth_state(scenario, template.n, template.T)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=scenario.seed, spawn_key=(1, replicate))
    )
    y = simulate_dataset(truth, template, basis, rng)
    return replace(template, y=y), truth, basis


def replicate_chain_seed(scenario: Scenario, replicate: int) -> int:
    """Chain stream = SeedSequence(scenario seed, spawn_key=(2, replicate))."""
    ss = np.random.SeedSequence(entropy=scenario.seed, spawn_key=(2, replicate))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class StudyReport:
    scenario_id: str
    n_reps: int
    truth: dict  # fixed-effect coordinate -> true value
    coverage: dict  # per fixed-effect coordinate
    pooled_fixed_effect_coverage: float
    type1_rate: float
    type2_rate: float
    records: list
    degenerate_replicates: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "scenario_id": self.scenario_id,
                "n_reps": self.n_reps,
                "truth": self.truth,
                "coverage": self.coverage,
                "pooled_fixed_effect_coverage": self.pooled_fixed_effect_coverage,
                "type1_rate": self.type1_rate,
                "type2_rate": self.type2_rate,
                "degenerate_replicates": self.degenerate_replicates,
                "records": self.records,
            },
            indent=2,
        )

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("parameter,truth,coverage\n")
            for name, cov in self.coverage.items():
                fh.write(f"{name},{self.truth[name]!r},{cov!r}\n")


def _fixed_effect_truth(scenario: Scenario) -> dict:
    truth = {}
    for j, v in enumerate(scenario.beta1):
        truth[f"beta1_{j}"] = float(v)
    for j, v in enumerate(scenario.beta2):
        truth[f"beta2_{j}"] = float(v)
    for j, v in enumerate(scenario.zeta):
        truth[f"zeta_{j}"] = float(v)
    truth["alpha"] = float(scenario.alpha)
    return truth


def _replicate_record(out: ChainOutput, scenario: Scenario, level: float) -> dict:
    truth = _fixed_effect_truth(scenario)
    if out.n_kept == 0:
        return {"degenerate": True}
    rec = {"degenerate": False, "params": {}}
    for name, value in truth.items():
        key, _, idx = name.partition("_")
        trace = out.samples[key] if key == "alpha" else out.samples[key][:, int(idx)]
        lo, hi = hpd_interval(trace, level)
        rec["params"][name] = {
            "truth": value,
            "hpd": [lo, hi],
            "covered": bool(lo <= value <= hi),
            "excludes_zero": bool(lo > 0.0 or hi < 0.0),
        }
    inc_g, _ = inclusion_probabilities(out.samples["ind_gamma"])
    inc_d, _ = inclusion_probabilities(out.samples["ind_delta"])
    rec["inclusion_gamma"] = [float(v) for v in inc_g]
    rec["inclusion_delta"] = [float(v) for v in inc_d]
    rec["n_selected_gamma"] = int((inc_g >= 0.5).sum())
    rec["n_selected_delta"] = int((inc_d >= 0.5).sum())
    return rec


def _run_one(args):
    scenario, r, cfg_dict, prior, level = args
    data, _, basis = replicate_dataset(scenario, r)
    cfg = ChainConfig(**cfg_dict)
    cfg.seed = replicate_chain_seed(scenario, r)
    cfg.q = scenario.q_fit
    cfg.rho = scenario.rho
    out = run_chain(data, basis, cfg, prior=prior)
    return r, _replicate_record(out, scenario, level)


def run_replicates(
    scenario: Scenario,
    n_reps: int,
    chain_cfg: ChainConfig,
    prior: PriorConfig = None,
    level: float = 0.95,
    n_jobs: int = 1,
) -> StudyReport:
    """Independent replicate fits aggregated into coverage and error rates.

    n_jobs > 1 distributes replicates over processes; results are keyed
    by replicate index, so the report is identical for any job count.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    jobs = [(scenario, r, chain_cfg.to_dict(), prior, level) for r in range(n_reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = sorted(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = [rec for _, rec in results]
    truth = _fixed_effect_truth(scenario)
    live = [r for r in records if not r.get("degenerate")]
    coverage = {}
    covered_flags = []
    t1_hits, t1_total, t2_hits, t2_total = 0, 0, 0, 0
    for name, tv in truth.items():
        flags = [r["params"][name]["covered"] for r in live]
        coverage[name] = float(np.mean(flags)) if flags else float("nan")
        covered_flags.extend(flags)
        for r in live:
            excl = r["params"][name]["excludes_zero"]
            if tv == 0.0:
                t1_total += 1
                t1_hits += int(excl)
            else:
                t2_total += 1
                t2_hits += int(not excl)
    return StudyReport(
        scenario_id=scenario.id,
        n_reps=n_reps,
        truth=truth,
        coverage=coverage,
        pooled_fixed_effect_coverage=(
            float(np.mean(covered_flags)) if covered_flags else float("nan")
        ),
        type1_rate=t1_hits / t1_total if t1_total else float("nan"),
        type2_rate=t2_hits / t2_total if t2_total else float("nan"),
        records=records,
        degenerate_replicates=sum(1 for r in records if r.get("degenerate")),
    )


def truth_overlap_report(samples: dict, scenario: Scenario) -> dict:
    """Selected vectors (inclusion >= 0.5) versus the true support."""
    inc_g, _ = inclusion_probabilities(samples["ind_gamma"])
    inc_d, _ = inclusion_probabilities(samples["ind_delta"])
    gamma_full = np.zeros(scenario.q_fit)
    gamma_full[: scenario.q_true] = scenario.gamma
    delta_full = np.zeros(scenario.q_fit)
    delta_full[: scenario.q_true] = scenario.delta

    def block(inc, coef):
        selected = [int(j) for j in np.nonzero(inc >= 0.5)[0]]
        true_support = [int(j) for j in np.nonzero(coef != 0.0)[0]]
        missed = [j for j in true_support if j not in selected]
        return {
            "selected": selected,
            "true_support": true_support,
            "intersection": [j for j in selected if j in true_support],
            "false_selections": [j for j in selected if j not in true_support],
            "missed_magnitudes": {str(j): float(abs(coef[j])) for j in missed},
        }

    return {"gamma": block(inc_g, gamma_full), "delta": block(inc_d, delta_full)}


def scenario_to_json(scenario: Scenario) -> str:
    d = {
        "format_version": 1,
        "id": scenario.id,
        "rows": scenario.rows,
        "cols": scenario.cols,
        "T": scenario.T,
        "q_true": scenario.q_true,
        "q_fit": scenario.q_fit,
        "seed": scenario.seed,
        "rho": scenario.rho,
        "beta1": scenario.beta1.tolist(),
        "beta2": scenario.beta2.tolist(),
        "zeta": scenario.zeta.tolist(),
        "alpha": scenario.alpha,
        "gamma": scenario.gamma.tolist(),
        "delta": scenario.delta.tolist(),
        "kappa": scenario.kappa,
        "tau": scenario.tau,
    }
    return json.dumps(d, indent=2)


def scenario_from_json(text: str) -> Scenario:
    d = json.loads(text)
    return Scenario(
        id=d["id"],
        rows=d["rows"],
        cols=d["cols"],
        T=d["T"],
        q_true=d["q_true"],
        q_fit=d["q_fit"],
        seed=d["seed"],
        rho=d["rho"],
        beta1=np.array(d["beta1"]),
        beta2=np.array(d["beta2"]),
        zeta=np.array(d["zeta"]),
        alpha=d["alpha"],
        gamma=np.array(d["gamma"]),
        delta=np.array(d["delta"]),
        kappa=d["kappa"],
        tau=d["tau"],
    )
