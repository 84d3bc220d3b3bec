"""Posterior summaries and model criticism.

Everything here is pure over traces and datasets: batch-means Monte
Carlo standard errors, highest-posterior-density intervals, basis
inclusion probabilities, randomized quantile residuals (RQR), and
posterior-predictive cell means. CSV writers plus a schema file cover
the plot-ready outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtri

from .comp import comp_log_normalizer_array
from .model import Dataset, ModelState, Predictors, simulate_dataset

__all__ = [
    "SummaryRow",
    "RqrSet",
    "batch_means_mcse",
    "hpd_interval",
    "inclusion_probabilities",
    "summary_table",
    "point_state_from_samples",
    "rqr",
    "posterior_predictive_mean",
    "write_summary_csv",
    "write_inclusion_csv",
    "write_rqr_csv",
    "write_predictive_csv",
    "write_schema",
]


def batch_means_mcse(trace) -> tuple:
    """(MCSE, batch count) with batch size floor(sqrt(N)).

    The trace is cut into consecutive batches of that size (remainder
    dropped); the MCSE is sd(batch means)/sqrt(batches).
    """
    x = np.asarray(trace, dtype=float).reshape(-1)
    n = x.size
    if n < 100:
        raise ValueError(f"trace too short for batch means: {n} < 100")
    b = int(math.floor(math.sqrt(n)))
    nb = n // b
    means = x[: nb * b].reshape(nb, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb)), nb


def hpd_interval(samples, level: float = 0.95) -> tuple:
    """Shortest contiguous interval holding ceil(level * N) sorted draws."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0,1), got {level}")
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    m = int(math.ceil(level * n))
    if m >= n:
        return float(x[0]), float(x[-1])
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def inclusion_probabilities(indicator_trace) -> tuple:
    """(posterior inclusion per vector, MCSE per vector).

    indicator_trace is draws x q binary; MCSE is NaN when the trace is
    too short for batch means.
    """
    tr = np.asarray(indicator_trace, dtype=float)
    if tr.ndim != 2:
        raise ValueError("indicator trace must be draws x q")
    probs = tr.mean(axis=0)
    if tr.shape[0] >= 100:
        errs = np.array([batch_means_mcse(tr[:, j])[0] for j in range(tr.shape[1])])
    else:
        errs = np.full(tr.shape[1], np.nan)
    return probs, errs


@dataclass(frozen=True)
class SummaryRow:
    name: str
    median: float
    hpd_lower: float
    hpd_upper: float
    mcse: float
    batches: int


def _scalar_traces(samples: dict):
    """Yield (name, 1-d trace) for every scalar coordinate worth summarizing."""
    for key in ("beta1", "beta2", "zeta", "alpha", "gamma", "delta", "kappa", "tau"):
        if key not in samples:
            continue
        arr = np.asarray(samples[key])
        if arr.ndim == 1:
            yield key, arr
        else:
            for j in range(arr.shape[1]):
                yield f"{key}_{j}", arr[:, j]


def summary_table(samples: dict, level: float = 0.95) -> list:
    rows = []
    for name, trace in _scalar_traces(samples):
        if trace.size == 0:
            continue
        lo, hi = hpd_interval(trace, level)
        if trace.size >= 100:
            mcse, nb = batch_means_mcse(trace)
        else:
            mcse, nb = float("nan"), 0
        rows.append(
            SummaryRow(
                name=name,
                median=float(np.median(trace)),
                hpd_lower=lo,
                hpd_upper=hi,
                mcse=mcse,
                batches=nb,
            )
        )
    return rows


def point_state_from_samples(samples: dict, data: Dataset, q: int) -> ModelState:
    """Posterior-median parameter point (indicators by majority vote)."""

    def med(key):
        return np.median(np.asarray(samples[key]), axis=0)

    return ModelState(
        w=np.where(data.y > 0, 1, 0).astype(np.int8),
        beta1=med("beta1"),
        beta2=med("beta2"),
        zeta=med("zeta"),
        alpha=float(med("alpha")),
        gamma=med("gamma"),
        delta=med("delta"),
        ind_gamma=(np.asarray(samples["ind_gamma"]).mean(axis=0) >= 0.5).astype(np.int8),
        ind_delta=(np.asarray(samples["ind_delta"]).mean(axis=0) >= 0.5).astype(np.int8),
        kappa=float(med("kappa")),
        tau=float(med("tau")),
    )


@dataclass
class RqrSet:
    """Randomized quantile residuals on the normal scale.

    residuals is n x T with NaN at missing cells; non-finite values
    (possible under a misspecified model) are counted, not hidden.
    """

    residuals: np.ndarray
    n_infinite: int
    seed: int


def rqr(data: Dataset, pred: Predictors, rng, tol: float = 1e-10, seed: int = -1,
        chunk: int = 4096) -> RqrSet:
    """residual = ndtri(F(y-1) + U f(y)) under the fitted mixture.

    F carries the (1-pi) atom at zero plus pi times the COMP partial
    sum; f is the mixture pmf. Exact model fit makes these standard
    normal; systematic tail misfit drives the argument onto 0 or 1 and
    the residual to +-inf.
    """
    obs = data.observed
    rows, cols = np.nonzero(obs)
    res = np.full((data.n, data.T), np.nan)
    n_inf = 0
    for start in range(0, rows.size, chunk):
        r = rows[start: start + chunk]
        c = cols[start: start + chunk]
        eta = pred.eta[r, c]
        nu = pred.nu[r]
        pi = pred.pi[r, c]
        y = data.y[r, c]
        log_c, _, _ = comp_log_normalizer_array(eta, nu, tol=tol)
        ymax = int(y.max())
        zs = np.arange(ymax + 1, dtype=float)
        log_terms = nu[:, None] * (zs[None, :] * np.log(eta)[:, None] - gammaln(zs + 1.0)[None, :])
        row_max = log_terms.max(axis=1)
        cum = np.cumsum(np.exp(log_terms - row_max[:, None]), axis=1)
        idx = np.arange(r.size)
        # COMP cdf at y-1 (zero when y == 0)
        f_comp_below = np.where(
            y > 0,
            np.exp(row_max - log_c) * cum[idx, np.maximum(y - 1, 0)],
            0.0,
        )
        pmf_y = np.exp(log_terms[idx, y] - log_c)
        cdf_below = np.where(y > 0, (1.0 - pi) + pi * f_comp_below, 0.0)
        mass_y = pi * pmf_y + np.where(y == 0, 1.0 - pi, 0.0)
        u = rng.random(r.size)
        arg = np.clip(cdf_below + u * mass_y, 0.0, 1.0)
        # the partial sums carry O(1e-14) relative error, so an argument
        # this close to 1 cannot be told apart from 1: saturate instead
        # of reporting roundoff noise as a large finite residual
        arg = np.where(arg >= 1.0 - 1e-14, 1.0, arg)
        vals = ndtri(arg)
        n_inf += int(np.sum(~np.isfinite(vals)))
        res[r, c] = vals
    return RqrSet(residuals=res, n_infinite=n_inf, seed=seed)


def posterior_predictive_mean(
    samples: dict, data: Dataset, basis, draws: int, rng, q: int = None
) -> tuple:
    """(per-cell predictive mean, per-cell MC error).

    Posterior draws are cycled until `draws` simulated responses per
    cell accumulate; missing cells give NaN.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    n_kept = np.asarray(samples["alpha"]).shape[0]
    if n_kept == 0:
        raise ValueError("empty chain: nothing to simulate from")
    total = np.zeros((data.n, data.T))
    total_sq = np.zeros((data.n, data.T))
    for d in range(draws):
        k = d % n_kept
        st = ModelState(
            w=np.zeros((data.n, data.T), dtype=np.int8),
            beta1=np.asarray(samples["beta1"])[k],
            beta2=np.asarray(samples["beta2"])[k],
            zeta=np.asarray(samples["zeta"])[k],
            alpha=float(np.asarray(samples["alpha"])[k]),
            gamma=np.asarray(samples["gamma"])[k],
            delta=np.asarray(samples["delta"])[k],
            ind_gamma=np.asarray(samples["ind_gamma"])[k],
            ind_delta=np.asarray(samples["ind_delta"])[k],
            kappa=float(np.asarray(samples["kappa"])[k]),
            tau=float(np.asarray(samples["tau"])[k]),
        )
        y = simulate_dataset(st, data, basis, rng)
        y_obs = np.where(data.observed, y, 0).astype(float)
        total += y_obs
        total_sq += y_obs**2
    mean = total / draws
    var = np.maximum(total_sq / draws - mean**2, 0.0)
    err = np.sqrt(var / draws)
    mean[~data.observed] = np.nan
    err[~data.observed] = np.nan
    return mean, err


# ---------------------------------------------------------------------------
# CSV artifacts

def write_summary_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("parameter,median,hpd_lower,hpd_upper,mcse,batches\n")
        for r in rows:
            fh.write(
                f"{r.name},{r.median!r},{r.hpd_lower!r},{r.hpd_upper!r},"
                f"{r.mcse!r},{r.batches}\n"
            )


def write_inclusion_csv(probs_gamma, mcse_gamma, probs_delta, mcse_delta, path) -> None:
    with open(path, "w") as fh:
        fh.write("vector,block,inclusion,mcse\n")
        for j, (p, e) in enumerate(zip(probs_gamma, mcse_gamma)):
            fh.write(f"{j},eta,{float(p)!r},{float(e)!r}\n")
        for j, (p, e) in enumerate(zip(probs_delta, mcse_delta)):
            fh.write(f"{j},nu,{float(p)!r},{float(e)!r}\n")


def write_rqr_csv(rqr_set: RqrSet, data: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write("location_id,period_id,residual\n")
        for s in range(data.n):
            for t in range(data.T):
                if data.observed[s, t]:
                    fh.write(f"{s},{t},{float(rqr_set.residuals[s, t])!r}\n")


def write_predictive_csv(mean, err, data: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write("location_id,period_id,predictive_mean,mc_error\n")
        for s in range(data.n):
            for t in range(data.T):
                if data.observed[s, t]:
                    fh.write(f"{s},{t},{float(mean[s, t])!r},{float(err[s, t])!r}\n")


def write_schema(path) -> None:
    schema = {
        "summary.csv": {
            "parameter": "coordinate name, e.g. beta2_1 or kappa",
            "median": "posterior median",
            "hpd_lower": "lower end of the highest-density interval",
            "hpd_upper": "upper end of the highest-density interval",
            "mcse": "batch-means Monte Carlo standard error (NaN if trace < 100)",
            "batches": "number of batches used for the MCSE",
        },
        "inclusion.csv": {
            "vector": "basis vector index (0-based)",
            "block": "eta (count intensity) or nu (dispersion)",
            "inclusion": "posterior probability the indicator equals 1",
            "mcse": "batch-means error of that probability",
        },
        "rqr.csv": {
            "location_id": "node index on the graph",
            "period_id": "time period index",
            "residual": "randomized quantile residual; 'inf'/'-inf' mark "
                        "cells the fitted model cannot explain",
        },
        "predictive_mean.csv": {
            "location_id": "node index on the graph",
            "period_id": "time period index",
            "predictive_mean": "average of simulated responses for the cell",
            "mc_error": "Monte Carlo standard error of that average",
        },
    }
    with open(path, "w") as fh:
        json.dump(schema, fh, indent=2)
        fh.write("\n")
