"""Data model, parameter state, linear predictors, priors, simulators.

The observation model per location s and period t:

    y_st = 0                     with probability 1 - pi_st
    y_st ~ COMP_eta(eta_st, nu_s) with probability pi_st

    logit(pi_st) = X_st' beta1
    log(eta_st)  = X_st' beta2 + B_s'(gamma * I_gamma) + M_t' zeta
    log(nu_s)    = alpha + B_s'(delta * I_delta)

w_st is the latent detection indicator; w_st = 1 wherever y_st > 0.
Missing cells carry the sentinel -1 in y and are excluded from every sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_expit, expit

from .comp import comp_sample
from .spatial import AdjacencyGraph, BasisSet

__all__ = [
    "MISSING",
    "Dataset",
    "ModelState",
    "Predictors",
    "PriorConfig",
    "month_dummies",
    "compute_predictors",
    "update_predictors",
    "log_unnorm_likelihood",
    "log_binary_likelihood",
    "log_priors",
    "simulate_dataset",
    "simulate_auxiliary",
    "zip_mode",
    "load_dataset_csv",
    "save_dataset_csv",
    "state_to_json",
    "state_from_json",
]

MISSING = -1


def month_dummies(T: int, reference_month: int = 0) -> np.ndarray:
    """T x 11 dummy matrix; calendar month of period t is t mod 12.

    The reference month (default 0 = first calendar month) maps to an
    all-zero row; other months get a single 1 in their column, columns
    ordered by month index.
    """
    if not 0 <= reference_month < 12:
        raise ValueError(f"reference_month must be in 0..11, got {reference_month}")
    months = [m for m in range(12) if m != reference_month]
    col = {m: j for j, m in enumerate(months)}
    out = np.zeros((T, 11))
    for t in range(T):
        m = t % 12
        if m != reference_month:
            out[t, col[m]] = 1.0
    return out


@dataclass
class Dataset:
    """Count table with covariates on a graph.

    y is n x T with -1 marking missing cells; X is n x T x p with the
    intercept as column 0; M is the T x 11 month dummy matrix.
    """

    y: np.ndarray
    X: np.ndarray
    M: np.ndarray
    graph: AdjacencyGraph
    observed: np.ndarray = field(init=False, repr=False)
    y_float: np.ndarray = field(init=False, repr=False)
    log_fact: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        if self.y.ndim != 2:
            raise ValueError(f"y must be n x T, got shape {self.y.shape}")
        n, T = self.y.shape
        if self.graph.n != n:
            raise ValueError(f"graph has {self.graph.n} nodes but y has {n} rows")
        if self.X.shape[:2] != (n, T) or self.X.ndim != 3:
            raise ValueError(f"X must be {n} x {T} x p, got {self.X.shape}")
        if self.M.shape != (T, 11):
            raise ValueError(f"M must be {T} x 11, got {self.M.shape}")
        if not np.all(self.X[:, :, 0] == 1.0):
            raise ValueError("X must carry an intercept of ones as its first column")
        if not np.all(np.isin(self.M, (0.0, 1.0))) or np.any(self.M.sum(axis=1) > 1):
            raise ValueError("M rows must be 0/1 with at most a single 1")
        bad = (self.y < 0) & (self.y != MISSING)
        if bad.any():
            raise ValueError("y entries must be nonnegative counts or -1 (missing)")
        self.observed = self.y != MISSING
        self.y_float = np.where(self.observed, self.y, 0).astype(float)
        self.log_fact = gammaln(self.y_float + 1.0)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]


@dataclass
class ModelState:
    """Full parameter state theta."""

    w: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    zeta: np.ndarray
    alpha: float
    gamma: np.ndarray
    delta: np.ndarray
    ind_gamma: np.ndarray
    ind_delta: np.ndarray
    kappa: float
    tau: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.int8)
        for name in ("beta1", "beta2", "zeta", "gamma", "delta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("ind_gamma", "ind_delta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int8))
        if self.kappa <= 0 or self.tau <= 0:
            raise ValueError("kappa and tau must be strictly positive")

    def copy(self) -> "ModelState":
        return ModelState(
            w=self.w.copy(),
            beta1=self.beta1.copy(),
            beta2=self.beta2.copy(),
            zeta=self.zeta.copy(),
            alpha=float(self.alpha),
            gamma=self.gamma.copy(),
            delta=self.delta.copy(),
            ind_gamma=self.ind_gamma.copy(),
            ind_delta=self.ind_delta.copy(),
            kappa=float(self.kappa),
            tau=float(self.tau),
        )

    @staticmethod
    def zeros(n: int, T: int, p: int, q: int) -> "ModelState":
        return ModelState(
            w=np.zeros((n, T), dtype=np.int8),
            beta1=np.zeros(p),
            beta2=np.zeros(p),
            zeta=np.zeros(11),
            alpha=0.0,
            gamma=np.zeros(q),
            delta=np.zeros(q),
            ind_gamma=np.ones(q, dtype=np.int8),
            ind_delta=np.ones(q, dtype=np.int8),
            kappa=1.0,
            tau=1.0,
        )


@dataclass(frozen=True)
class PriorConfig:
    fixed_effect_variance: float = 100.0
    smoothing_shape: float = 0.001
    smoothing_rate: float = 1000.0
    indicator_inclusion: float = 0.1
    w_prior: float = 0.5

    def __post_init__(self):
        if self.fixed_effect_variance <= 0:
            raise ValueError("fixed_effect_variance must be > 0")
        if self.smoothing_shape <= 0 or self.smoothing_rate <= 0:
            raise ValueError("smoothing shape/rate must be > 0")
        if not 0 < self.indicator_inclusion < 1:
            raise ValueError("indicator_inclusion must lie in (0,1)")
        if not 0 < self.w_prior < 1:
            raise ValueError("w_prior must lie in (0,1)")


class Predictors:
    """Linear-predictor components with lazily derived pi, eta, nu.

    Components are stored separately so a single-block parameter change
    only recomputes its own piece (the others are shared by reference).
    """

    def __init__(self, lin_pi, xb2, bg, mz, log_nu):
        self.lin_pi = lin_pi  # n x T, X beta1
        self.xb2 = xb2  # n x T, X beta2
        self.bg = bg  # n, B (gamma * I_gamma)
        self.mz = mz  # T, M zeta
        self.log_nu = log_nu  # n
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def log_eta(self):
        return self._get(
            "log_eta", lambda: self.xb2 + self.bg[:, None] + self.mz[None, :]
        )

    @property
    def eta(self):
        # inf is the correct limit for an overflowing linear predictor;
        # downstream accept/reject treats it as an auto-reject
        with np.errstate(over="ignore"):
            return self._get("eta", lambda: np.exp(self.log_eta))

    @property
    def nu(self):
        with np.errstate(over="ignore"):
            return self._get("nu", lambda: np.exp(self.log_nu))

    @property
    def pi(self):
        return self._get("pi", lambda: expit(self.lin_pi))

    @property
    def log_pi(self):
        return self._get("log_pi", lambda: log_expit(self.lin_pi))

    @property
    def log_1mpi(self):
        return self._get("log_1mpi", lambda: log_expit(-self.lin_pi))

    def with_components(self, **kw) -> "Predictors":
        parts = {
            "lin_pi": self.lin_pi,
            "xb2": self.xb2,
            "bg": self.bg,
            "mz": self.mz,
            "log_nu": self.log_nu,
        }
        parts.update(kw)
        return Predictors(**parts)


def _design_dot(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return X @ beta


def compute_predictors(state: ModelState, data: Dataset, basis: BasisSet) -> Predictors:
    b = basis.vectors
    if state.gamma.shape[0] != basis.q or state.delta.shape[0] != basis.q:
        raise ValueError("gamma/delta length does not match basis size")
    if state.beta1.shape[0] != data.p or state.beta2.shape[0] != data.p:
        raise ValueError("beta length does not match covariate count")
    return Predictors(
        lin_pi=_design_dot(data.X, state.beta1),
        xb2=_design_dot(data.X, state.beta2),
        bg=b @ (state.gamma * state.ind_gamma),
        mz=data.M @ state.zeta,
        log_nu=state.alpha + b @ (state.delta * state.ind_delta),
    )


_BLOCK_DEPENDENCIES = {
    "beta1": ("lin_pi",),
    "beta2": ("xb2",),
    "zeta": ("mz",),
    "gamma": ("bg",),
    "ind_gamma": ("bg",),
    "alpha": ("log_nu",),
    "delta": ("log_nu",),
    "ind_delta": ("log_nu",),
    "w": (),
    "kappa": (),
    "tau": (),
}


def update_predictors(
    pred: Predictors, state: ModelState, data: Dataset, basis: BasisSet, changed: str
) -> Predictors:
    """Recompute only the component(s) the changed block feeds."""
    try:
        deps = _BLOCK_DEPENDENCIES[changed]
    except KeyError:
        raise ValueError(f"unknown parameter block {changed!r}") from None
    fresh = {}
    for comp_name in deps:
        if comp_name == "lin_pi":
            fresh["lin_pi"] = _design_dot(data.X, state.beta1)
        elif comp_name == "xb2":
            fresh["xb2"] = _design_dot(data.X, state.beta2)
        elif comp_name == "bg":
            fresh["bg"] = basis.vectors @ (state.gamma * state.ind_gamma)
        elif comp_name == "mz":
            fresh["mz"] = data.M @ state.zeta
        elif comp_name == "log_nu":
            fresh["log_nu"] = state.alpha + basis.vectors @ (
                state.delta * state.ind_delta
            )
    return pred.with_components(**fresh) if fresh else pred


def count_kernel_sum(pred: Predictors, data: Dataset, w: np.ndarray) -> float:
    """sum_st nu_s w_st (y_st log eta_st - log y_st!), observed cells only."""
    active = data.observed & (w == 1)
    if not active.any():
        return 0.0
    rows, cols = np.nonzero(active)
    inner = data.y_float[rows, cols] * pred.log_eta[rows, cols] - data.log_fact[rows, cols]
    # a zero term stays zero at any nu; guards 0 * inf when nu overflows.
    # nan from inf * inner is fine: a nan total makes the move auto-reject.
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.where(inner == 0.0, 0.0, inner * pred.nu[rows])
        return float(scaled.sum())


def log_unnorm_likelihood(state: ModelState, data: Dataset, basis: BasisSet) -> float:
    """log h(y | theta): the count kernel without its normalizer."""
    return count_kernel_sum(compute_predictors(state, data, basis), data, state.w)


def binary_loglik_from_pred(pred: Predictors, data: Dataset, w: np.ndarray) -> float:
    obs = data.observed
    w1 = obs & (w == 1)
    w0 = obs & (w == 0)
    return float(pred.log_pi[w1].sum() + pred.log_1mpi[w0].sum())


def log_binary_likelihood(state: ModelState, data: Dataset) -> float:
    """sum_st [(1-w) log(1-pi) + w log pi] over observed cells."""
    lin = _design_dot(data.X, state.beta1)
    pred = Predictors(
        lin_pi=lin,
        xb2=np.zeros_like(lin),
        bg=np.zeros(data.n),
        mz=np.zeros(data.T),
        log_nu=np.zeros(data.n),
    )
    return binary_loglik_from_pred(pred, data, state.w)


def _normal_logpdf_sum(x, variance) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(
        -0.5 * x.size * np.log(2.0 * np.pi * variance) - 0.5 * (x**2).sum() / variance
    )


def _gamma_logpdf(x, shape, rate) -> float:
    return float(
        shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    )


def _bernoulli_logmass_sum(ind, p) -> float:
    ind = np.asarray(ind, dtype=float)
    k = float(ind.sum())
    return k * np.log(p) + (ind.size - k) * np.log1p(-p)


def basis_normal_logpdf(coef: np.ndarray, precision_scale: float, qb: np.ndarray) -> float:
    """Normal_q(0, (scale * Q_B)^(-1)) log density at coef."""
    q = coef.shape[0]
    sign, logdet = np.linalg.slogdet(qb)
    if sign <= 0:
        raise ValueError("projected precision Q_B is not positive definite")
    quad = float(coef @ qb @ coef)
    return 0.5 * (q * np.log(precision_scale) + logdet - q * np.log(2.0 * np.pi)) - (
        0.5 * precision_scale * quad
    )


def log_priors(
    state: ModelState, basis: BasisSet, cfg: PriorConfig, data: Dataset = None
) -> float:
    """Joint log prior; the w term needs `data` to know which cells exist."""
    v = cfg.fixed_effect_variance
    total = _normal_logpdf_sum(state.beta1, v)
    total += _normal_logpdf_sum(state.beta2, v)
    total += _normal_logpdf_sum(state.zeta, v)
    total += _normal_logpdf_sum(state.alpha, v)
    total += basis_normal_logpdf(state.gamma, state.kappa, basis.prior_precision)
    total += basis_normal_logpdf(state.delta, state.tau, basis.prior_precision)
    total += _gamma_logpdf(state.kappa, cfg.smoothing_shape, cfg.smoothing_rate)
    total += _gamma_logpdf(state.tau, cfg.smoothing_shape, cfg.smoothing_rate)
    total += _bernoulli_logmass_sum(state.ind_gamma, cfg.indicator_inclusion)
    total += _bernoulli_logmass_sum(state.ind_delta, cfg.indicator_inclusion)
    if data is not None:
        total += _bernoulli_logmass_sum(state.w[data.observed], cfg.w_prior)
    return float(total)


def simulate_dataset(
    state: ModelState, data_template: Dataset, basis: BasisSet, rng, return_w=False
):
    """Draw counts from the generative model at `state`.

    Missing cells of the template stay missing. Returns y, or (y, w)
    when return_w is set (w as drawn, before conditioning on y).
    """
    pred = compute_predictors(state, data_template, basis)
    n, T = data_template.n, data_template.T
    w = (rng.random((n, T)) < pred.pi).astype(np.int8)
    y = np.zeros((n, T), dtype=np.int64)
    active = (w == 1) & data_template.observed
    if active.any():
        rows = np.nonzero(active)[0]
        eta = pred.eta[active]
        nu = pred.nu[rows]
        y[active] = comp_sample(eta, nu, rng)
    y[~data_template.observed] = MISSING
    if return_w:
        return y, w
    return y


def simulate_auxiliary(state: ModelState, data: Dataset, basis: BasisSet, rng):
    """COMP draws at `state` on every observed cell with w=1.

    Returns (rows, cols, z): flat index arrays plus the drawn counts.
    Cells with w=0 contribute the constant 1 to h and get no draw.
    """
    pred = compute_predictors(state, data, basis)
    active = data.observed & (state.w == 1)
    rows, cols = np.nonzero(active)
    if rows.size == 0:
        return rows, cols, np.empty(0, dtype=np.int64)
    z = comp_sample(pred.eta[rows, cols], pred.nu[rows], rng)
    return rows, cols, z


def zip_mode(state: ModelState) -> ModelState:
    """Constrained copy with nu_s = 1: alpha = 0, delta and its mask frozen at 0."""
    out = state.copy()
    out.alpha = 0.0
    out.delta = np.zeros_like(out.delta)
    out.ind_delta = np.zeros_like(out.ind_delta)
    return out


# ---------------------------------------------------------------------------
# serialization

def save_dataset_csv(data: Dataset, path) -> None:
    """Long format: location_id, period_id, y, then non-intercept covariates.

    Missing cells are simply absent. The intercept column is implicit
    (the loader prepends it), so x_1..x_k here are X columns 1..p-1.
    """
    k = data.p - 1
    header = ["location_id", "period_id", "y"] + [f"x_{j + 1}" for j in range(k)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for s in range(data.n):
            for t in range(data.T):
                if not data.observed[s, t]:
                    continue
                covs = [repr(float(v)) for v in data.X[s, t, 1:]]
                fh.write(",".join([str(s), str(t), str(int(data.y[s, t]))] + covs) + "\n")


def load_dataset_csv(
    path, graph: AdjacencyGraph, T: int = None, reference_month: int = 0,
    standardize: bool = False,
) -> Dataset:
    """Read the long format written by save_dataset_csv.

    Absent (location, period) pairs become missing cells. An intercept
    column is prepended to the covariates; `standardize` centers and
    scales the non-intercept columns.
    """
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].strip().split(",")]
    if header[:3] != ["location_id", "period_id", "y"]:
        raise ValueError(
            f"{path}:1: header must start with location_id,period_id,y, got {header[:3]}"
        )
    k = len(header) - 3
    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        parts = text.split(",")
        if len(parts) != 3 + k:
            raise ValueError(f"{path}:{lineno}: expected {3 + k} fields, got {len(parts)}")
        try:
            s, t, y = int(parts[0]), int(parts[1]), int(parts[2])
            covs = [float(v) for v in parts[3:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed row {text!r}") from None
        if not 0 <= s < graph.n:
            raise ValueError(f"{path}:{lineno}: location_id {s} out of range for n={graph.n}")
        if t < 0:
            raise ValueError(f"{path}:{lineno}: period_id must be >= 0")
        if y < 0:
            raise ValueError(f"{path}:{lineno}: y must be a nonnegative count")
        records.append((s, t, y, covs))
    if not records:
        raise ValueError(f"{path}: no data rows")
    t_max = max(r[1] for r in records)
    if T is None:
        T = t_max + 1
    elif t_max >= T:
        raise ValueError(f"{path}: period_id {t_max} exceeds T={T}")
    n = graph.n
    y_arr = np.full((n, T), MISSING, dtype=np.int64)
    x_arr = np.zeros((n, T, 1 + k))
    x_arr[:, :, 0] = 1.0
    seen = set()
    for s, t, y, covs in records:
        if (s, t) in seen:
            raise ValueError(f"{path}: duplicate cell (location {s}, period {t})")
        seen.add((s, t))
        y_arr[s, t] = y
        x_arr[s, t, 1:] = covs
    if standardize and k:
        obs = y_arr != MISSING
        for j in range(1, 1 + k):
            col = x_arr[:, :, j][obs]
            mu, sd = col.mean(), col.std()
            if sd > 0:
                x_arr[:, :, j] = np.where(obs, (x_arr[:, :, j] - mu) / sd, 0.0)
    return Dataset(y=y_arr, X=x_arr, M=month_dummies(T, reference_month), graph=graph)


def state_to_json(state: ModelState) -> str:
    return json.dumps(
        {
            "format_version": 1,
            "w": state.w.tolist(),
            "beta1": state.beta1.tolist(),
            "beta2": state.beta2.tolist(),
            "zeta": state.zeta.tolist(),
            "alpha": float(state.alpha),
            "gamma": state.gamma.tolist(),
            "delta": state.delta.tolist(),
            "ind_gamma": state.ind_gamma.tolist(),
            "ind_delta": state.ind_delta.tolist(),
            "kappa": float(state.kappa),
            "tau": float(state.tau),
        }
    )


def state_from_json(text: str) -> ModelState:
    d = json.loads(text)
    return ModelState(
        w=np.array(d["w"], dtype=np.int8),
        beta1=np.array(d["beta1"], dtype=float),
        beta2=np.array(d["beta2"], dtype=float),
        zeta=np.array(d["zeta"], dtype=float),
        alpha=float(d["alpha"]),
        gamma=np.array(d["gamma"], dtype=float),
        delta=np.array(d["delta"], dtype=float),
        ind_gamma=np.array(d["ind_gamma"], dtype=np.int8),
        ind_delta=np.array(d["ind_delta"], dtype=np.int8),
        kappa=float(d["kappa"]),
        tau=float(d["tau"]),
    )
