"""Hybrid MCMC for the zero-inflated COMP regression model.

One iteration runs five steps:

  1. detection indicators w: per-cell swap proposals with a mixture
     auxiliary draw (NB when proposing w'=0, COMP when proposing w'=1),
     so the intractable normalizer cancels;
  2. beta1: random-walk MH on the tractable binary likelihood;
  3. beta2, zeta, alpha, gamma, delta: exchange-algorithm MH, one
     auxiliary dataset per block proposal;
  4. inclusion indicators I_gamma, I_delta: exchange swaps on a thinned
     schedule (all every k iterations, or a random subset of m per
     iteration);
  5. kappa, tau: conjugate Gibbs.

Random-walk covariances adapt during burn-in by the log-adaptive
scheme (scale nudged toward a target acceptance rate with decaying
step, covariance from accumulated draws) and freeze afterwards.

`method="tractable"` replaces the exchange machinery with exact
likelihood evaluations; it is only valid when the dispersion block is
frozen at nu = 1 (Poisson), where the normalizer is exp(eta). It
serves as the zero-inflated Poisson baseline and as an exactness
oracle for the exchange sampler.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import gammaln

from . import model as zm
from .comp import NumericsError, comp_sample, nb_log_pmf, nb_sample
from .diagnostics import batch_means_mcse
from .model import (
    Dataset,
    ModelState,
    PriorConfig,
    Predictors,
    binary_loglik_from_pred,
    compute_predictors,
    count_kernel_sum,
    update_predictors,
)
from .spatial import BasisSet, basis_for_graph

__all__ = [
    "ChainConfig",
    "ChainOutput",
    "ChainAbort",
    "ZicompChain",
    "run_chain",
    "fit_dataset",
    "update_w",
    "update_beta1",
    "update_continuous_block",
    "update_indicators",
    "update_smoothing",
    "gibbs_smoothing_draw",
    "save_checkpoint",
    "save_output",
    "load_output",
]

logger = logging.getLogger("zicomp.sampler")

CHECKPOINT_VERSION = 1
OUTPUT_VERSION = 1

_VECTOR_BLOCKS = ("beta2", "zeta", "alpha", "gamma", "delta")

# Auxiliary-draw budget for indicator flips. A flip that re-activates a
# prior-refreshed coefficient often lands far outside the data's scale;
# a sane proposal draws its auxiliary within a handful of rejection
# rounds, so a cap this size only aborts draws whose proposal was going
# to be rejected anyway (failure already counts as a rejection).
_FLIP_AUX_ROUNDS = 200


class ChainAbort(RuntimeError):
    """Unrecoverable numeric failure; carries the emergency checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class ChainConfig:
    """Sampler settings.

    indicator_period k: with indicator_mode "every_k", all inclusion
    indicators update when iteration % k == 0; with "random_m", a
    random subset of indicator_m per vector updates every iteration
    (the variant with an exactness guarantee).
    """

    n_iterations: int = 10_000
    burn_in: int = None  # default: half of n_iterations
    thin: int = 1
    seed: int = 0
    method: str = "exchange"  # or "tractable" (requires zip_constrained)
    zip_constrained: bool = False  # freeze alpha, delta, I_delta at 0 (nu = 1)
    update_month: bool = True
    update_basis: bool = True
    indicator_period: int = 10
    indicator_mode: str = "every_k"
    indicator_m: int = 5
    indicator_warmup: int = None  # default: half of burn_in
    target_accept_vector: float = 0.234
    target_accept_scalar: float = 0.44
    adapt_batch: int = 50
    adapt_c0: float = 1.0
    adapt_c1: float = 0.8
    proposal_scales: dict = None  # per-block initial scale overrides
    rho: float = 0.99
    q: int = 20
    normalizer_tol: float = 1e-10
    store_w: bool = False
    checkpoint_every: int = 0
    checkpoint_path: str = None
    progress_every: int = 1000

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.n_iterations // 2
        if self.n_iterations < 0 or not 0 <= self.burn_in <= self.n_iterations:
            raise ValueError("need 0 <= burn_in <= n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.indicator_period < 1:
            raise ValueError("indicator_period must be >= 1")
        if self.indicator_warmup is None:
            # let the coefficient walks fit the included-at-start vectors
            # before any pruning: a freshly-initialized coordinate still
            # near zero would otherwise be dropped on the prior's 0.1
            # inclusion odds before the data ever spoke for it
            self.indicator_warmup = self.burn_in // 2
        if self.indicator_warmup < 0:
            raise ValueError("indicator_warmup must be >= 0")
        if self.indicator_mode not in ("every_k", "random_m"):
            raise ValueError(f"unknown indicator_mode {self.indicator_mode!r}")
        if not 0 < self.target_accept_vector < 1 or not 0 < self.target_accept_scalar < 1:
            raise ValueError("target acceptance rates must lie in (0,1)")
        if self.method not in ("exchange", "tractable"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "tractable" and not self.zip_constrained:
            raise ValueError(
                "method='tractable' needs zip_constrained=True: the COMP "
                "normalizer is only closed-form at nu = 1"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainOutput:
    samples: dict
    acceptance_rates: dict
    aux_failures: int
    timing: dict
    mcse: dict
    final_state: ModelState
    w_mean: np.ndarray
    n_kept: int
    config: ChainConfig


class LapAdapter:
    """Log-adaptive random-walk proposal for one block.

    Proposal covariance is exp(log_s2) * Sigma_hat where Sigma_hat is
    the running covariance of recorded values (identity until enough
    draws accumulate). After each batch of `batch` recorded proposals,
    log_s2 moves by c0/(b+1)^c1 * (batch acceptance - target).
    """

    def __init__(self, dim, target, batch=50, c0=1.0, c1=0.8, initial_scale=None):
        self.dim = dim
        self.target = target
        self.batch = batch
        self.c0 = c0
        self.c1 = c1
        scale = initial_scale if initial_scale is not None else 2.38 / np.sqrt(dim)
        self.log_s2 = 2.0 * np.log(scale)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.count = 0
        self.batch_index = 0
        self.batch_accepts = 0
        self.batch_n = 0
        self.frozen = False
        self._chol = np.eye(dim) * np.exp(0.5 * self.log_s2)

    def _cov_estimate(self):
        if self.count < max(10, 2 * self.dim):
            return np.eye(self.dim)
        cov = self.m2 / (self.count - 1)
        return cov + 1e-10 * np.eye(self.dim)

    def _refresh_chol(self):
        cov = self._cov_estimate()
        try:
            base = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            base = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-12)))
        self._chol = np.exp(0.5 * self.log_s2) * base

    def step(self, rng) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.dim)

    def record(self, value, accepted):
        if self.frozen:
            return
        x = np.atleast_1d(np.asarray(value, dtype=float))
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += np.outer(d, x - self.mean)
        self.batch_accepts += int(accepted)
        self.batch_n += 1
        if self.batch_n >= self.batch:
            rate = self.batch_accepts / self.batch_n
            step = self.c0 / (self.batch_index + 1) ** self.c1
            self.log_s2 += step * (rate - self.target)
            self.batch_index += 1
            self.batch_accepts = 0
            self.batch_n = 0
            self._refresh_chol()

    def freeze(self):
        self.frozen = True

    def to_arrays(self) -> dict:
        return {
            "log_s2": np.array(self.log_s2),
            "mean": self.mean,
            "m2": self.m2,
            "count": np.array(self.count),
            "batch_index": np.array(self.batch_index),
            "batch_accepts": np.array(self.batch_accepts),
            "batch_n": np.array(self.batch_n),
            "frozen": np.array(int(self.frozen)),
            "chol": self._chol,
        }

    def load_arrays(self, d):
        self.log_s2 = float(d["log_s2"])
        self.mean = np.array(d["mean"], dtype=float)
        self.m2 = np.array(d["m2"], dtype=float)
        self.count = int(d["count"])
        self.batch_index = int(d["batch_index"])
        self.batch_accepts = int(d["batch_accepts"])
        self.batch_n = int(d["batch_n"])
        self.frozen = bool(int(d["frozen"]))
        self._chol = np.array(d["chol"], dtype=float)


def _poisson_loglik_sum(pred: Predictors, data: Dataset, w) -> float:
    """Exact count log-likelihood at nu = 1 over active cells."""
    active = data.observed & (w == 1)
    inner = np.where(
        active, data.y_float * pred.log_eta - data.log_fact - pred.eta, 0.0
    )
    return float(inner.sum())


class ZicompChain:
    """Mutable chain context; one instance = one logical update thread."""

    def __init__(self, data, basis, cfg, prior=None, rng=None, init_state=None):
        self.data = data
        self.basis = basis
        self.cfg = cfg
        self.prior = prior if prior is not None else PriorConfig()
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        if basis.q != cfg.q:
            cfg.q = basis.q
        self.state = init_state.copy() if init_state is not None else self._init_state()
        self._enforce_constraints()
        # month effects for months absent from the data window are
        # likelihood-flat; they are Gibbs-refreshed from the prior instead
        # of random-walked (see _refresh_flat_coords)
        live = np.flatnonzero(np.asarray(data.M).sum(axis=0) > 0)
        self._zeta_live = live
        self._zeta_flat = np.setdiff1d(np.arange(11), live)
        self.pred = compute_predictors(self.state, data, basis)
        self.hy = self._count_loglik(self.pred, self.state.w)
        self.adapters = self._build_adapters()
        self.it = 0
        self.aux_failures = 0
        self.counters = {}  # name -> [proposals, accepts], post burn-in
        self.counters_all = {}
        self.timing = {}
        n_kept = (cfg.n_iterations - cfg.burn_in) // cfg.thin
        self.n_kept_total = max(n_kept, 0)
        self.kept = 0
        self.samples = self._alloc_samples(self.n_kept_total)
        self.w_accum = np.zeros((data.n, data.T))

    # -- setup ------------------------------------------------------------

    def _init_state(self) -> ModelState:
        data, cfg = self.data, self.cfg
        st = ModelState.zeros(data.n, data.T, data.p, self.basis.q)
        zero_obs = data.observed & (data.y == 0)
        st.w = np.where(data.y > 0, 1, 0).astype(np.int8)
        st.w[zero_obs] = (self.rng.random(int(zero_obs.sum())) < 0.5).astype(np.int8)
        st.ind_gamma = np.ones(self.basis.q, dtype=np.int8)
        st.ind_delta = np.ones(self.basis.q, dtype=np.int8)
        # crude moment-matched intercepts so the walk starts at data scale
        # (eta = 1 against counts in the tens wastes thousands of moves)
        obs_y = data.y[data.observed]
        if obs_y.size:
            p_pos = np.clip(np.mean(obs_y > 0), 0.02, 0.98)
            st.beta1[0] = np.log(p_pos / (1.0 - p_pos))
            pos = obs_y[obs_y > 0]
            if pos.size:
                st.beta2[0] = np.log(pos.mean())
        self._warm_start_count_field(st)
        return st

    def _warm_start_count_field(self, st):
        """Ridge fit of log y on the count-mean design, used as the start.

        The count blocks random-walk under noisy exchange acceptance, so
        reaching a spatial field of a few units from zero is diffusive and
        eats tens of thousands of iterations. A least-squares start on the
        detected counts lands in the right basin immediately; it touches
        initialization only, never the kernels.
        """
        data = self.data
        rows = data.observed & (data.y > 0)
        m = int(rows.sum())
        ncol = data.p + 11 + self.basis.q
        if m < ncol:
            return
        cells, months = np.nonzero(rows)
        design = np.concatenate(
            [data.X[rows], data.M[months], self.basis.vectors[cells]], axis=1
        )
        resp = np.log(data.y[rows].astype(float))
        gram = design.T @ design
        gram[np.diag_indices_from(gram)] += 1.0
        coef = np.linalg.solve(gram, design.T @ resp)
        coef = np.clip(coef, -10.0, 10.0)
        st.beta2 = coef[: data.p]
        st.zeta = coef[data.p : data.p + 11]
        st.gamma = coef[data.p + 11 :]

    def _enforce_constraints(self):
        st = self.state
        st.w = np.where(self.data.y > 0, 1, st.w).astype(np.int8)
        if self.cfg.zip_constrained:
            st.alpha = 0.0
            st.delta = np.zeros_like(st.delta)
            st.ind_delta = np.zeros_like(st.ind_delta)
        if not self.cfg.update_basis:
            st.gamma = np.zeros_like(st.gamma)
            st.delta = np.zeros_like(st.delta)
            st.ind_gamma = np.zeros_like(st.ind_gamma)
            st.ind_delta = np.zeros_like(st.ind_delta)
        if not self.cfg.update_month:
            st.zeta = np.zeros_like(st.zeta)

    def _build_adapters(self):
        cfg = self.cfg
        p, q = self.data.p, self.basis.q
        dims = {"beta1": p, "beta2": p, "zeta": 11, "alpha": 1, "gamma": q, "delta": q}
        scales = cfg.proposal_scales or {}
        out = {}
        for name, dim in dims.items():
            target = cfg.target_accept_scalar if dim == 1 else cfg.target_accept_vector
            out[name] = LapAdapter(
                dim,
                target,
                batch=cfg.adapt_batch,
                c0=cfg.adapt_c0,
                c1=cfg.adapt_c1,
                initial_scale=scales.get(name),
            )
        return out

    def _alloc_samples(self, s):
        data, q = self.data, self.basis.q
        out = {
            "beta1": np.zeros((s, data.p)),
            "beta2": np.zeros((s, data.p)),
            "zeta": np.zeros((s, 11)),
            "alpha": np.zeros(s),
            "gamma": np.zeros((s, q)),
            "delta": np.zeros((s, q)),
            "ind_gamma": np.zeros((s, q), dtype=np.int8),
            "ind_delta": np.zeros((s, q), dtype=np.int8),
            "kappa": np.zeros(s),
            "tau": np.zeros(s),
        }
        if self.cfg.store_w:
            out["w"] = np.zeros((s, data.n, data.T), dtype=np.int8)
        return out

    # -- shared pieces ----------------------------------------------------

    def _count_loglik(self, pred, w) -> float:
        if self.cfg.method == "tractable":
            return _poisson_loglik_sum(pred, self.data, w)
        return count_kernel_sum(pred, self.data, w)

    def _bump(self, name, proposed, accepted):
        for table in (self.counters_all,) + (
            (self.counters,) if self.it >= self.cfg.burn_in else ()
        ):
            row = table.setdefault(name, [0, 0])
            row[0] += proposed
            row[1] += accepted

    def _active_cells(self, w):
        mask = self.data.observed & (w == 1)
        rows, cols = np.nonzero(mask)
        return rows, cols

    def _aux_kernel_sum(self, pred, rows, cols, z, lgam_z) -> float:
        if rows.size == 0:
            return 0.0
        return float(
            (pred.nu[rows] * (z * pred.log_eta[rows, cols] - lgam_z)).sum()
        )

    def _block_get(self, name):
        if name == "alpha":
            return np.array([self.state.alpha])
        return getattr(self.state, name)

    def _block_set(self, name, value):
        if name == "alpha":
            self.state.alpha = float(value[0])
        else:
            setattr(self.state, name, value)

    def _block_log_prior(self, name, value) -> float:
        v = self.prior.fixed_effect_variance
        if name in ("beta1", "beta2", "zeta", "alpha"):
            return -0.5 * float((np.asarray(value) ** 2).sum()) / v
        qb = self.basis.prior_precision
        scale = self.state.kappa if name == "gamma" else self.state.tau
        return -0.5 * scale * float(value @ qb @ value)

    # -- step 1: w --------------------------------------------------------

    def step_w(self):
        data, st, pred = self.data, self.state, self.pred
        elig = data.observed & (data.y == 0)
        rows, cols = np.nonzero(elig)
        if rows.size == 0:
            return
        if self.cfg.method == "tractable":
            self._step_w_gibbs(rows, cols)
            return
        eta = pred.eta[rows, cols]
        nu = pred.nu[rows]
        log_pi = pred.log_pi[rows, cols]
        log_1mpi = pred.log_1mpi[rows, cols]
        w_cur = st.w[rows, cols]
        wp = self.prior.w_prior
        log_wp_ratio = np.log(wp) - np.log1p(-wp)  # log p(1)/p(0)
        to_one = w_cur == 0
        log_alpha = np.empty(rows.size)
        z = np.empty(rows.size, dtype=np.int64)
        if to_one.any():
            z[to_one] = comp_sample(eta[to_one], nu[to_one], self.rng)
        if (~to_one).any():
            z[~to_one] = nb_sample(eta[~to_one], nu[~to_one], self.rng)
        lgam_z = gammaln(z + 1.0)
        comp_kern = nu * (z * np.log(eta) - lgam_z)
        nb_lp = nb_log_pmf(z, eta, nu)
        # proposing w'=1: z ~ COMP; g(z|theta)=NB pmf, g(z|theta')=COMP kernel
        log_alpha[to_one] = (
            log_wp_ratio
            + (log_pi - log_1mpi)[to_one]
            + nb_lp[to_one]
            - comp_kern[to_one]
        )
        # proposing w'=0: z ~ NB; g(z|theta)=COMP kernel, g(z|theta')=NB pmf
        anti = ~to_one
        log_alpha[anti] = (
            -log_wp_ratio
            + (log_1mpi - log_pi)[anti]
            + comp_kern[anti]
            - nb_lp[anti]
        )
        u = self.rng.random(rows.size)
        with np.errstate(divide="ignore"):
            accept = np.log(u) <= log_alpha
        w_new = np.where(accept, 1 - w_cur, w_cur).astype(np.int8)
        st.w[rows, cols] = w_new
        if accept.any():
            self.hy = self._count_loglik(pred, st.w)
        self._bump("w", rows.size, int(accept.sum()))

    def _step_w_gibbs(self, rows, cols):
        """Closed-form w posterior at nu = 1 (normalizer exp(eta))."""
        st, pred = self.state, self.pred
        eta = pred.eta[rows, cols]
        wp = self.prior.w_prior
        log_one = np.log(wp) + pred.log_pi[rows, cols] - eta
        log_zero = np.log1p(-wp) + pred.log_1mpi[rows, cols]
        p_one = 1.0 / (1.0 + np.exp(log_zero - log_one))
        draws = (self.rng.random(rows.size) < p_one).astype(np.int8)
        st.w[rows, cols] = draws
        self.hy = self._count_loglik(pred, st.w)
        self._bump("w", rows.size, int(rows.size))

    # -- step 2: beta1 ----------------------------------------------------

    def step_beta1(self):
        st, data = self.state, self.data
        adapter = self.adapters["beta1"]
        prop = st.beta1 + adapter.step(self.rng)
        cur_ll = binary_loglik_from_pred(self.pred, data, st.w)
        trial = st.copy()
        trial.beta1 = prop
        new_pred = update_predictors(self.pred, trial, data, self.basis, "beta1")
        new_ll = binary_loglik_from_pred(new_pred, data, st.w)
        dprior = self._block_log_prior("beta1", prop) - self._block_log_prior(
            "beta1", st.beta1
        )
        accepted = np.log(self.rng.random()) <= (new_ll - cur_ll + dprior)
        if accepted:
            st.beta1 = prop
            self.pred = new_pred
        adapter.record(st.beta1, accepted)
        self._bump("beta1", 1, int(accepted))

    # -- step 3: continuous blocks ----------------------------------------

    def _continuous_blocks(self):
        cfg = self.cfg
        blocks = ["beta2"]
        if cfg.update_month:
            blocks.append("zeta")
        if not cfg.zip_constrained:
            blocks.append("alpha")
        if cfg.update_basis:
            blocks.append("gamma")
            if not cfg.zip_constrained:
                blocks.append("delta")
        return blocks

    def _block_live(self, name):
        """Coordinates of `name` the likelihood responds to, or None for all.

        Excluded basis coefficients and months outside the data window are
        flat directions: random-walking them wastes proposals and lets them
        wander arbitrarily far on the diffuse prior, so the walk is confined
        to the live coordinates and the rest are refreshed by exact Gibbs
        draws from their conditional prior each iteration.
        """
        if name == "zeta":
            return self._zeta_live
        if name == "gamma":
            return np.flatnonzero(self.state.ind_gamma == 1)
        if name == "delta":
            return np.flatnonzero(self.state.ind_delta == 1)
        return None

    def step_block(self, name):
        st, data = self.state, self.data
        live = self._block_live(name)
        if live is not None and live.size == 0:
            return
        adapter = self.adapters[name]
        cur = self._block_get(name).copy()
        step = adapter.step(self.rng)
        if live is not None and live.size < step.size:
            full = np.zeros_like(step)
            full[live] = step[live]
            step = full
        prop = cur + step
        trial = st.copy()
        if name == "alpha":
            trial.alpha = float(prop[0])
        else:
            setattr(trial, name, prop)
        new_pred = update_predictors(self.pred, trial, data, self.basis, name)
        dprior = self._block_log_prior(name, prop) - self._block_log_prior(name, cur)
        accepted = self._accept_count_move(new_pred, dprior)
        if accepted:
            self._block_set(name, prop)
            self.pred = new_pred
            # hy was refreshed inside _accept_count_move on acceptance
        adapter.record(self._block_get(name), accepted)
        self._bump(name, 1, int(accepted))

    def _accept_count_move(self, new_pred, dprior, aux_rounds=50_000) -> bool:
        """Shared accept/reject for moves that change eta or nu.

        Exchange method: draw an auxiliary dataset at the proposal and
        use the normalizer-free ratio. Tractable method: exact Poisson
        likelihood difference. Updates self.hy on acceptance.
        """
        st, data = self.state, self.data
        hy_new = self._count_loglik(new_pred, st.w)
        if self.cfg.method == "tractable":
            log_alpha = dprior + hy_new - self.hy
        else:
            rows, cols = self._active_cells(st.w)
            if rows.size:
                try:
                    z = comp_sample(
                        new_pred.eta[rows, cols],
                        new_pred.nu[rows],
                        self.rng,
                        max_rounds=aux_rounds,
                    )
                except NumericsError as err:
                    self.aux_failures += 1
                    # routine when a proposal wanders far out; don't flood
                    lvl = (
                        logging.WARNING
                        if self.aux_failures == 1 or self.aux_failures % 500 == 0
                        else logging.DEBUG
                    )
                    logger.log(
                        lvl,
                        "auxiliary draw failed, proposal rejected (%d so far): %s",
                        self.aux_failures,
                        err,
                    )
                    return False
                lgam_z = gammaln(z + 1.0)
                hz_new = self._aux_kernel_sum(new_pred, rows, cols, z, lgam_z)
                hz_cur = self._aux_kernel_sum(self.pred, rows, cols, z, lgam_z)
            else:
                hz_new = hz_cur = 0.0
            log_alpha = dprior + (hy_new - self.hy) + (hz_cur - hz_new)
        accepted = np.log(self.rng.random()) <= log_alpha
        if accepted:
            self.hy = hy_new
        return bool(accepted)

    # -- step 4: inclusion indicators ---------------------------------------

    def _indicator_schedule(self):
        cfg = self.cfg
        if self.it < cfg.indicator_warmup:
            return []
        q = self.basis.q
        kinds = []
        if cfg.update_basis:
            kinds.append("ind_gamma")
            if not cfg.zip_constrained:
                kinds.append("ind_delta")
        if not kinds:
            return []
        if cfg.indicator_mode == "every_k":
            if self.it % cfg.indicator_period != 0:
                return []
            return [(kind, np.arange(q)) for kind in kinds]
        m = min(cfg.indicator_m, q)
        return [
            (kind, np.sort(self.rng.choice(q, size=m, replace=False)))
            for kind in kinds
        ]

    def step_indicator(self, kind, j):
        st, data = self.state, self.data
        pinc = self.prior.indicator_inclusion
        trial = st.copy()
        ind = getattr(trial, kind)
        ind[j] = 1 - ind[j]
        new_pred = update_predictors(self.pred, trial, data, self.basis, kind)
        # Bernoulli(pinc) prior ratio for the flipped coordinate
        dprior = (np.log(pinc) - np.log1p(-pinc)) * (1.0 if ind[j] == 1 else -1.0)
        accepted = self._accept_count_move(new_pred, dprior, aux_rounds=_FLIP_AUX_ROUNDS)
        if accepted:
            setattr(st, kind, ind)
            self.pred = new_pred
        self._bump(kind, 1, int(accepted))

    # -- step 5: smoothing precisions ---------------------------------------

    def step_smoothing(self):
        if not self.cfg.update_basis:
            return
        st, pr = self.state, self.prior
        qb = self.basis.prior_precision
        st.kappa = gibbs_smoothing_draw(st.gamma, qb, pr, self.rng)
        st.tau = gibbs_smoothing_draw(st.delta, qb, pr, self.rng)

    # -- step 6: exact refresh of likelihood-flat coordinates ----------------

    def _refresh_flat_coords(self):
        """Gibbs-draw coordinates the likelihood cannot see.

        Predictors mask excluded basis coefficients and the data window
        carries no information about absent months, so their full
        conditionals are pure prior conditionals and can be sampled
        exactly. This keeps them in equilibrium (a random walk would take
        ~1/prior_precision iterations to cover the prior) and stops stale
        excluded values from poisoning later inclusion flips.
        """
        st, cfg = self.state, self.cfg
        if cfg.update_month and self._zeta_flat.size:
            sd = np.sqrt(self.prior.fixed_effect_variance)
            st.zeta[self._zeta_flat] = sd * self.rng.standard_normal(
                self._zeta_flat.size
            )
        if cfg.update_basis:
            self._refresh_excluded("gamma", st.ind_gamma, st.kappa)
            if not cfg.zip_constrained:
                self._refresh_excluded("delta", st.ind_delta, st.tau)

    def _refresh_excluded(self, name, ind, scale):
        ex = np.flatnonzero(ind == 0)
        if ex.size == 0:
            return
        vec = getattr(self.state, name)
        prec = scale * self.basis.prior_precision
        pee = prec[np.ix_(ex, ex)]
        chol = np.linalg.cholesky(pee)
        inc = np.flatnonzero(ind == 1)
        if inc.size:
            # N(-P_EE^{-1} P_EI x_I, P_EE^{-1}) given the included block
            rhs = prec[np.ix_(ex, inc)] @ vec[inc]
            mean = -np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        else:
            mean = 0.0
        z = self.rng.standard_normal(ex.size)
        vec[ex] = mean + np.linalg.solve(chol.T, z)

    # -- loop ---------------------------------------------------------------

    def _record(self):
        cfg = self.cfg
        if self.it < cfg.burn_in:
            return
        if (self.it - cfg.burn_in + 1) % cfg.thin != 0:
            return
        k = self.kept
        st = self.state
        s = self.samples
        s["beta1"][k] = st.beta1
        s["beta2"][k] = st.beta2
        s["zeta"][k] = st.zeta
        s["alpha"][k] = st.alpha
        s["gamma"][k] = st.gamma
        s["delta"][k] = st.delta
        s["ind_gamma"][k] = st.ind_gamma
        s["ind_delta"][k] = st.ind_delta
        s["kappa"][k] = st.kappa
        s["tau"][k] = st.tau
        if cfg.store_w:
            s["w"][k] = st.w
        self.w_accum += st.w
        self.kept += 1

    def _one_iteration(self):
        cfg = self.cfg
        t0 = time.perf_counter()
        self.step_w()
        t1 = time.perf_counter()
        self.step_beta1()
        t2 = time.perf_counter()
        for name in self._continuous_blocks():
            self.step_block(name)
        t3 = time.perf_counter()
        for kind, js in self._indicator_schedule():
            for j in js:
                self.step_indicator(kind, int(j))
        t4 = time.perf_counter()
        self.step_smoothing()
        self._refresh_flat_coords()
        t5 = time.perf_counter()
        for key, dt in (
            ("w", t1 - t0),
            ("beta1", t2 - t1),
            ("blocks", t3 - t2),
            ("indicators", t4 - t3),
            ("smoothing", t5 - t4),
        ):
            self.timing[key] = self.timing.get(key, 0.0) + dt
        self._record()
        self.it += 1
        if self.it == cfg.burn_in:
            for ad in self.adapters.values():
                ad.freeze()

    def _log_progress(self, start_time):
        rates = {
            name: (row[1] / row[0] if row[0] else 0.0)
            for name, row in sorted(self.counters_all.items())
        }
        fields = [f"iteration={self.it}", f"elapsed={time.perf_counter() - start_time:.1f}"]
        fields += [f"accept_{k}={v:.3f}" for k, v in rates.items()]
        fields += [
            f"incl_gamma={int(self.state.ind_gamma.sum())}",
            f"incl_delta={int(self.state.ind_delta.sum())}",
            f"aux_failures={self.aux_failures}",
        ]
        logger.info("progress %s", " ".join(fields))

    def run(self) -> ChainOutput:
        cfg = self.cfg
        start = time.perf_counter()
        try:
            while self.it < cfg.n_iterations:
                self._one_iteration()
                if cfg.progress_every and self.it % cfg.progress_every == 0:
                    self._log_progress(start)
                if (
                    cfg.checkpoint_every
                    and cfg.checkpoint_path
                    and self.it % cfg.checkpoint_every == 0
                    and self.it < cfg.n_iterations
                ):
                    save_checkpoint(cfg.checkpoint_path, self)
        except NumericsError as err:
            path = cfg.checkpoint_path or "chain_abort_checkpoint.npz"
            save_checkpoint(path, self)
            raise ChainAbort(
                f"chain aborted at iteration {self.it}: {err}", checkpoint_path=path
            ) from err
        if cfg.checkpoint_path:
            save_checkpoint(cfg.checkpoint_path, self)
        return self._finish()

    def _finish(self) -> ChainOutput:
        samples = {k: v[: self.kept] for k, v in self.samples.items()}
        acceptance = {
            name: (row[1] / row[0] if row[0] else 0.0)
            for name, row in sorted(self.counters.items())
        }
        mcse = {}
        if self.kept >= 100:
            for name in ("beta1", "beta2", "zeta", "alpha", "kappa", "tau"):
                arr = samples[name]
                if arr.ndim == 1:
                    mcse[name] = np.array(batch_means_mcse(arr)[0])
                else:
                    mcse[name] = np.array(
                        [batch_means_mcse(arr[:, j])[0] for j in range(arr.shape[1])]
                    )
        w_mean = self.w_accum / self.kept if self.kept else np.zeros_like(self.w_accum)
        return ChainOutput(
            samples=samples,
            acceptance_rates=acceptance,
            aux_failures=self.aux_failures,
            timing=dict(self.timing),
            mcse=mcse,
            final_state=self.state.copy(),
            w_mean=w_mean,
            n_kept=self.kept,
            config=self.cfg,
        )


# ---------------------------------------------------------------------------
# single-step convenience wrappers (operate in place on `state`)

def _ctx(state, data, basis, rng, prior=None, **cfg_kw):
    cfg_kw.setdefault("n_iterations", 0)
    cfg_kw.setdefault("q", basis.q)
    cfg = ChainConfig(**cfg_kw)
    chain = ZicompChain(data, basis, cfg, prior=prior, rng=rng, init_state=state)
    return chain


def update_w(state, data, basis, rng, prior=None) -> int:
    """One sweep of w swap proposals; returns the number of accepted swaps."""
    chain = _ctx(state, data, basis, rng, prior)
    chain.step_w()
    state.w = chain.state.w
    return chain.counters_all.get("w", [0, 0])[1]


def update_beta1(state, data, rng, prior=None, basis=None, scale=None):
    """One MH update of beta1 against the binary likelihood."""
    if basis is None:
        raise ValueError("basis required to build predictors")
    scales = {"beta1": scale} if scale is not None else None
    chain = _ctx(state, data, basis, rng, prior, proposal_scales=scales)
    chain.step_beta1()
    state.beta1 = chain.state.beta1
    return state.beta1


def update_continuous_block(block_id, state, data, basis, rng, prior=None, scale=None):
    """One exchange update of one of beta2, zeta, alpha, gamma, delta."""
    if block_id not in _VECTOR_BLOCKS:
        raise ValueError(f"unknown block {block_id!r}")
    scales = {block_id: scale} if scale is not None else None
    chain = _ctx(state, data, basis, rng, prior, proposal_scales=scales)
    chain.step_block(block_id)
    if block_id == "alpha":
        state.alpha = chain.state.alpha
    else:
        setattr(state, block_id, getattr(chain.state, block_id))
    return getattr(state, block_id)


def update_indicators(state, data, basis, rng, iteration, prior=None, **cfg_kw):
    """Scheduled indicator sweep; mutates I_gamma (and I_delta) in place."""
    chain = _ctx(state, data, basis, rng, prior, **cfg_kw)
    chain.it = iteration
    for kind, js in chain._indicator_schedule():
        for j in js:
            chain.step_indicator(kind, int(j))
    state.ind_gamma = chain.state.ind_gamma
    state.ind_delta = chain.state.ind_delta
    state.gamma = chain.state.gamma
    state.delta = chain.state.delta
    return state.ind_gamma, state.ind_delta


def gibbs_smoothing_draw(coef, qb, prior: PriorConfig, rng) -> float:
    """kappa | gamma ~ Gamma(shape + q/2, rate + gamma' Q_B gamma / 2)."""
    q = coef.shape[0]
    shape = prior.smoothing_shape + q / 2.0
    rate = prior.smoothing_rate + 0.5 * float(coef @ qb @ coef)
    return float(rng.gamma(shape) / rate)


def update_smoothing(state, basis, cfg: PriorConfig, rng):
    """Gibbs draws for kappa and tau given the full coefficient vectors."""
    state.kappa = gibbs_smoothing_draw(state.gamma, basis.prior_precision, cfg, rng)
    state.tau = gibbs_smoothing_draw(state.delta, basis.prior_precision, cfg, rng)
    return state.kappa, state.tau


# ---------------------------------------------------------------------------
# checkpointing

def _config_fingerprint(cfg: ChainConfig) -> str:
    d = cfg.to_dict()
    for volatile in ("checkpoint_every", "checkpoint_path", "progress_every"):
        d.pop(volatile, None)
    return json.dumps(d, sort_keys=True)


def save_checkpoint(path, chain: ZicompChain) -> None:
    st = chain.state
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": chain.it,
        "kept": chain.kept,
        "aux_failures": chain.aux_failures,
        "counters": chain.counters,
        "counters_all": chain.counters_all,
        "timing": chain.timing,
        "rng_state": chain.rng.bit_generator.state,
        "config": _config_fingerprint(chain.cfg),
        "alpha": st.alpha,
        "kappa": st.kappa,
        "tau": st.tau,
    }
    arrays = {
        "state_w": st.w,
        "state_beta1": st.beta1,
        "state_beta2": st.beta2,
        "state_zeta": st.zeta,
        "state_gamma": st.gamma,
        "state_delta": st.delta,
        "state_ind_gamma": st.ind_gamma,
        "state_ind_delta": st.ind_delta,
        "w_accum": chain.w_accum,
    }
    for key, arr in chain.samples.items():
        arrays[f"samples_{key}"] = arr[: chain.kept]
    for name, ad in chain.adapters.items():
        for field_name, arr in ad.to_arrays().items():
            arrays[f"adapter_{name}_{field_name}"] = arr
    tmp = str(path) + ".tmp.npz"
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, data, basis, cfg, prior=None) -> ZicompChain:
    if basis.q != cfg.q:  # same q reconciliation the chain constructor applies
        cfg.q = basis.q
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {meta['format_version']} not supported"
            )
        if meta["config"] != _config_fingerprint(cfg):
            raise ValueError("checkpoint was written under a different configuration")
        st = ModelState(
            w=z["state_w"],
            beta1=z["state_beta1"],
            beta2=z["state_beta2"],
            zeta=z["state_zeta"],
            alpha=meta["alpha"],
            gamma=z["state_gamma"],
            delta=z["state_delta"],
            ind_gamma=z["state_ind_gamma"],
            ind_delta=z["state_ind_delta"],
            kappa=meta["kappa"],
            tau=meta["tau"],
        )
        chain = ZicompChain(data, basis, cfg, prior=prior, init_state=st)
        chain.it = int(meta["iteration"])
        chain.kept = int(meta["kept"])
        chain.aux_failures = int(meta["aux_failures"])
        chain.counters = {k: list(v) for k, v in meta["counters"].items()}
        chain.counters_all = {k: list(v) for k, v in meta["counters_all"].items()}
        chain.timing = dict(meta["timing"])
        chain.w_accum = np.array(z["w_accum"])
        for key in chain.samples:
            stored = z[f"samples_{key}"]
            chain.samples[key][: chain.kept] = stored
        for name, ad in chain.adapters.items():
            ad.load_arrays(
                {
                    f: z[f"adapter_{name}_{f}"]
                    for f in (
                        "log_s2",
                        "mean",
                        "m2",
                        "count",
                        "batch_index",
                        "batch_accepts",
                        "batch_n",
                        "frozen",
                        "chol",
                    )
                }
            )
        rng_state = meta["rng_state"]
        chain.rng = np.random.default_rng(0)
        chain.rng.bit_generator.state = rng_state
        chain.pred = compute_predictors(chain.state, data, basis)
        chain.hy = chain._count_loglik(chain.pred, chain.state.w)
    return chain


# ---------------------------------------------------------------------------
# top-level entry points

def run_chain(
    data: Dataset,
    basis: BasisSet,
    cfg: ChainConfig,
    rng=None,
    prior: PriorConfig = None,
    init_state: ModelState = None,
    resume_from=None,
) -> ChainOutput:
    """Run the five-step sampler to completion and summarize."""
    if resume_from is not None:
        chain = load_checkpoint(resume_from, data, basis, cfg, prior=prior)
    else:
        chain = ZicompChain(data, basis, cfg, prior=prior, rng=rng, init_state=init_state)
    return chain.run()


def fit_dataset(
    data: Dataset,
    cfg: ChainConfig,
    prior: PriorConfig = None,
    cache_dir=None,
    init_state=None,
    resume_from=None,
) -> ChainOutput:
    """Build the basis for the dataset's graph and run the chain."""
    basis = basis_for_graph(data.graph, cfg.q, cfg.rho, cache_dir=cache_dir)
    return run_chain(
        data, basis, cfg, prior=prior, init_state=init_state, resume_from=resume_from
    )


def save_output(out: ChainOutput, path) -> None:
    """Persist a ChainOutput as a single .npz archive."""
    meta = {
        "format_version": OUTPUT_VERSION,
        "acceptance_rates": out.acceptance_rates,
        "aux_failures": out.aux_failures,
        "timing": out.timing,
        "n_kept": out.n_kept,
        "config": out.config.to_dict(),
        "final_state": json.loads(zm.state_to_json(out.final_state)),
    }
    arrays = {f"samples_{k}": v for k, v in out.samples.items()}
    arrays.update({f"mcse_{k}": v for k, v in out.mcse.items()})
    arrays["w_mean"] = out.w_mean
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_output(path) -> ChainOutput:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["format_version"] != OUTPUT_VERSION:
            raise ValueError(f"output version {meta['format_version']} not supported")
        samples = {
            k[len("samples_"):]: np.array(z[k]) for k in z.files if k.startswith("samples_")
        }
        mcse = {
            k[len("mcse_"):]: np.array(z[k]) for k in z.files if k.startswith("mcse_")
        }
        cfg = ChainConfig(**meta["config"])
        final_state = zm.state_from_json(json.dumps(meta["final_state"]))
        return ChainOutput(
            samples=samples,
            acceptance_rates=meta["acceptance_rates"],
            aux_failures=meta["aux_failures"],
            timing=meta["timing"],
            mcse=mcse,
            final_state=final_state,
            w_mean=np.array(z["w_mean"]),
            n_kept=int(meta["n_kept"]),
            config=cfg,
        )
