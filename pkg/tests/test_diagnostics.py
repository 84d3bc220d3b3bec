import json

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, ndtri

from zicomp.comp import comp_log_normalizer, comp_pmf
from zicomp.diagnostics import (
    RqrSet,
    batch_means_mcse,
    hpd_interval,
    inclusion_probabilities,
    point_state_from_samples,
    posterior_predictive_mean,
    rqr,
    summary_table,
    write_inclusion_csv,
    write_predictive_csv,
    write_rqr_csv,
    write_schema,
    write_summary_csv,
)
from zicomp.model import (
    MISSING,
    Dataset,
    ModelState,
    compute_predictors,
    month_dummies,
    simulate_dataset,
)
from zicomp.spatial import build_lattice, compute_basis


def intercept_dataset(graph, T, y):
    return Dataset(
        y=y, X=np.ones((graph.n, T, 1)), M=month_dummies(T), graph=graph
    )


class TestBatchMeansMcse:
    def test_constant_trace(self):
        mcse, nb = batch_means_mcse(np.full(400, 3.14))
        assert mcse == 0.0
        assert nb == 20

    def test_iid_calibration(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=1_000_000)
        mcse, _ = batch_means_mcse(x)
        assert mcse == pytest.approx(1e-3, rel=0.2)

    def test_ar1_long_run_variance(self):
        # AR(1) with phi = 0.9: long-run sd is 1/(1-phi) times the
        # innovation sd, so the MCSE must blow up tenfold over iid
        rng = np.random.default_rng(1)
        n, phi = 100_000, 0.9
        eps = rng.normal(size=n)
        x = np.empty(n)
        x[0] = eps[0]
        for t in range(1, n):
            x[t] = phi * x[t - 1] + eps[t]
        mcse, _ = batch_means_mcse(x)
        truth = (1.0 / (1.0 - phi)) / np.sqrt(n)
        assert mcse == pytest.approx(truth, rel=0.3)

    def test_root_n_scaling(self):
        rng = np.random.default_rng(2)
        m_small, _ = batch_means_mcse(rng.normal(size=10_000))
        m_big, _ = batch_means_mcse(rng.normal(size=1_000_000))
        assert 6.0 < m_small / m_big < 15.0

    def test_short_trace_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            batch_means_mcse(np.arange(99))


class TestHpdInterval:
    def test_uniform_width(self):
        rng = np.random.default_rng(3)
        lo, hi = hpd_interval(rng.random(100_000), 0.95)
        assert hi - lo == pytest.approx(0.95, abs=0.02)

    def test_normal_matches_symmetric_interval(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=200_000)
        lo, hi = hpd_interval(x, 0.95)
        assert lo == pytest.approx(-1.96, abs=0.05)
        assert hi == pytest.approx(1.96, abs=0.05)

    def test_never_wider_than_equal_tailed(self):
        rng = np.random.default_rng(5)
        for draw in (rng.normal(size=5000), rng.exponential(size=5000), rng.random(5000)):
            lo, hi = hpd_interval(draw, 0.9)
            qlo, qhi = np.quantile(draw, [0.05, 0.95])
            assert hi - lo <= (qhi - qlo) * (1 + 1e-9) + 1e-12

    def test_skewed_interval_hugs_the_mode(self):
        rng = np.random.default_rng(6)
        x = rng.exponential(size=100_000)
        lo, hi = hpd_interval(x, 0.95)
        assert lo < np.quantile(x, 0.01)  # left edge at the density peak
        assert hi < np.quantile(x, 0.99)

    def test_exact_small_case(self):
        lo, hi = hpd_interval(np.arange(20.0), 0.5)
        assert (lo, hi) == (0.0, 9.0)

    def test_point_mass(self):
        lo, hi = hpd_interval(np.full(50, 2.5), 0.95)
        assert lo == hi == 2.5

    def test_small_sample_returns_range(self):
        assert hpd_interval([1.0, 2.0, 3.0], 0.95) == (1.0, 3.0)

    def test_validation(self):
        with pytest.raises(ValueError, match="level"):
            hpd_interval([1.0, 2.0], 1.0)
        with pytest.raises(ValueError, match="empty"):
            hpd_interval([], 0.9)


class TestInclusion:
    def test_degenerate_traces(self):
        tr = np.ones((200, 3))
        probs, errs = inclusion_probabilities(tr)
        assert np.array_equal(probs, np.ones(3))
        assert np.array_equal(errs, np.zeros(3))

    def test_bernoulli_calibration(self):
        rng = np.random.default_rng(7)
        tr = (rng.random((10_000, 2)) < 0.3).astype(int)
        probs, errs = inclusion_probabilities(tr)
        assert np.allclose(probs, 0.3, atol=0.02)
        ref = np.sqrt(0.3 * 0.7 / 10_000)
        assert np.all((errs > ref / 2) & (errs < ref * 2))

    def test_short_trace_gives_nan_errors(self):
        probs, errs = inclusion_probabilities(np.zeros((50, 2)))
        assert np.array_equal(probs, np.zeros(2))
        assert np.isnan(errs).all()

    def test_validation(self):
        with pytest.raises(ValueError, match="draws x q"):
            inclusion_probabilities(np.zeros(10))


def fake_samples(n=400, p=2, q=3, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "beta1": rng.normal(0, 1, (n, p)),
        "beta2": rng.normal(1, 1, (n, p)),
        "zeta": rng.normal(0, 1, (n, 11)),
        "alpha": rng.normal(-0.5, 0.2, n),
        "gamma": rng.normal(0, 1, (n, q)),
        "delta": rng.normal(0, 1, (n, q)),
        "ind_gamma": (rng.random((n, q)) < 0.8).astype(np.int8),
        "ind_delta": (rng.random((n, q)) < 0.2).astype(np.int8),
        "kappa": rng.gamma(2, 1, n),
        "tau": rng.gamma(2, 1, n),
    }


class TestSummaryTable:
    def test_names_and_values(self):
        samples = fake_samples()
        rows = summary_table(samples)
        names = [r.name for r in rows]
        assert names[:2] == ["beta1_0", "beta1_1"]
        assert "alpha" in names and "kappa" in names
        assert len(names) == 2 + 2 + 11 + 1 + 3 + 3 + 1 + 1
        alpha_row = next(r for r in rows if r.name == "alpha")
        assert alpha_row.median == pytest.approx(
            float(np.median(samples["alpha"])), abs=1e-12
        )
        assert alpha_row.hpd_lower < alpha_row.median < alpha_row.hpd_upper
        assert alpha_row.mcse > 0 and alpha_row.batches == 20

    def test_short_run_gives_nan_mcse(self):
        rows = summary_table(fake_samples(n=50))
        assert all(np.isnan(r.mcse) and r.batches == 0 for r in rows)

    def test_empty_traces_skipped(self):
        samples = {k: v[:0] for k, v in fake_samples().items()}
        assert summary_table(samples) == []


class TestPointState:
    def test_medians_and_votes(self, small_lattice):
        samples = fake_samples(q=3)
        y = np.zeros((small_lattice.n, 2), dtype=int)
        y[0, 0] = 4
        data = intercept_dataset(small_lattice, 2, y)
        # p must match the sampled beta width for downstream predictors
        st = point_state_from_samples(samples, data, q=3)
        assert np.allclose(st.beta2, np.median(samples["beta2"], axis=0))
        assert st.alpha == pytest.approx(float(np.median(samples["alpha"])))
        assert st.ind_gamma.sum() == 3  # inclusion ~0.8 everywhere
        assert st.ind_delta.sum() == 0  # inclusion ~0.2 everywhere
        assert st.w[0, 0] == 1 and st.w[1, 1] == 0


class TestRqr:
    def manual_state(self, graph, q):
        st = ModelState.zeros(graph.n, 1, 1, q)
        st.beta1[0] = 0.2
        st.beta2[0] = 0.4
        st.alpha = 0.1
        return st

    def test_matches_hand_formula(self):
        graph = build_lattice(2, 2)
        basis = compute_basis(graph, q=2)
        y = np.array([[0], [1], [2], [5]])
        data = intercept_dataset(graph, 1, y)
        st = self.manual_state(graph, 2)
        pred = compute_predictors(st, data, basis)
        got = rqr(data, pred, np.random.default_rng(7), seed=7)

        eta, nu, pi = np.exp(0.4), np.exp(0.1), expit(0.2)
        log_c = comp_log_normalizer(eta, nu, tol=1e-10).log_c
        pmf = comp_pmf(np.arange(12), eta, nu, tol=1e-10)
        u = np.random.default_rng(7).random(4)
        expected = np.empty(4)
        for i, yy in enumerate([0, 1, 2, 5]):
            if yy == 0:
                below = 0.0
                mass = (1 - pi) + pi * pmf[0]
            else:
                below = (1 - pi) + pi * pmf[:yy].sum()
                mass = pi * pmf[yy]
            expected[i] = ndtri(np.clip(below + u[i] * mass, 0, 1))
        assert np.allclose(got.residuals[:, 0], expected, atol=1e-9)
        assert got.n_infinite == 0
        assert got.seed == 7
        del log_c  # normalizer checked implicitly through comp_pmf

    def test_standard_normal_under_true_model(self, small_lattice, small_basis):
        rng = np.random.default_rng(11)
        T = 30
        data_template = intercept_dataset(
            small_lattice, T, np.zeros((small_lattice.n, T), dtype=int)
        )
        st = ModelState.zeros(small_lattice.n, T, 1, small_basis.q)
        st.beta1[0] = 0.8
        st.beta2[0] = np.log(2.0)
        y = simulate_dataset(st, data_template, small_basis, rng)
        data = intercept_dataset(small_lattice, T, y)
        pred = compute_predictors(st, data, small_basis)
        out = rqr(data, pred, np.random.default_rng(13))
        vals = out.residuals[data.observed]
        assert out.n_infinite == 0
        assert stats.kstest(vals, "norm").pvalue > 0.005
        assert abs(vals.mean()) < 0.1
        assert vals.std() == pytest.approx(1.0, abs=0.1)

    def test_impossible_count_goes_infinite(self):
        graph = build_lattice(2, 2)
        basis = compute_basis(graph, q=2)
        y = np.array([[120], [0], [0], [0]])
        data = intercept_dataset(graph, 1, y)
        st = ModelState.zeros(graph.n, 1, 1, 2)
        st.beta2[0] = np.log(0.1)  # eta = 0.1 cannot produce y = 120
        pred = compute_predictors(st, data, basis)
        out = rqr(data, pred, np.random.default_rng(0))
        assert out.n_infinite >= 1
        assert np.isinf(out.residuals[0, 0])

    def test_missing_cells_are_nan(self, small_lattice, small_basis):
        y = np.zeros((small_lattice.n, 3), dtype=int)
        y[2, 1] = MISSING
        data = intercept_dataset(small_lattice, 3, y)
        st = ModelState.zeros(small_lattice.n, 3, 1, small_basis.q)
        pred = compute_predictors(st, data, small_basis)
        out = rqr(data, pred, np.random.default_rng(1))
        assert np.isnan(out.residuals[2, 1])
        assert np.isfinite(out.residuals[data.observed]).all()

    def test_chunking_invariant(self, small_lattice, small_basis):
        rng = np.random.default_rng(2)
        y = rng.poisson(1.5, (small_lattice.n, 4))
        data = intercept_dataset(small_lattice, 4, y)
        st = ModelState.zeros(small_lattice.n, 4, 1, small_basis.q)
        st.beta2[0] = 0.3
        pred = compute_predictors(st, data, small_basis)
        a = rqr(data, pred, np.random.default_rng(5), chunk=7)
        b = rqr(data, pred, np.random.default_rng(5))
        assert np.array_equal(
            a.residuals[data.observed], b.residuals[data.observed]
        )


class TestPredictiveMean:
    def make(self, small_lattice, small_basis, beta1_0, eta):
        n, T, q = small_lattice.n, 3, small_basis.q
        samples = {
            "beta1": np.tile([beta1_0], (4, 1)),
            "beta2": np.tile([np.log(eta)], (4, 1)),
            "zeta": np.zeros((4, 11)),
            "alpha": np.zeros(4),
            "gamma": np.zeros((4, q)),
            "delta": np.zeros((4, q)),
            "ind_gamma": np.ones((4, q), dtype=np.int8),
            "ind_delta": np.ones((4, q), dtype=np.int8),
            "kappa": np.ones(4),
            "tau": np.ones(4),
        }
        y = np.zeros((n, T), dtype=int)
        y[3, 2] = MISSING
        data = intercept_dataset(small_lattice, T, y)
        return samples, data

    def test_degenerate_zero_process(self, small_lattice, small_basis):
        samples, data = self.make(small_lattice, small_basis, -40.0, 2.0)
        mean, err = posterior_predictive_mean(
            samples, data, small_basis, draws=20, rng=np.random.default_rng(0)
        )
        assert np.nansum(mean) == 0.0
        assert np.nansum(err) == 0.0
        assert np.isnan(mean[3, 2]) and np.isnan(err[3, 2])

    def test_poisson_mean_recovered(self, small_lattice, small_basis):
        samples, data = self.make(small_lattice, small_basis, 40.0, 3.0)
        mean, err = posterior_predictive_mean(
            samples, data, small_basis, draws=400, rng=np.random.default_rng(1)
        )
        obs = data.observed
        assert mean[obs].mean() == pytest.approx(3.0, abs=0.05)
        ref = np.sqrt(3.0 / 400)
        assert err[obs].mean() == pytest.approx(ref, rel=0.25)

    def test_validation(self, small_lattice, small_basis):
        samples, data = self.make(small_lattice, small_basis, 0.0, 1.0)
        with pytest.raises(ValueError, match="draws"):
            posterior_predictive_mean(
                samples, data, small_basis, draws=0, rng=np.random.default_rng(0)
            )
        empty = {k: np.asarray(v)[:0] for k, v in samples.items()}
        with pytest.raises(ValueError, match="empty chain"):
            posterior_predictive_mean(
                empty, data, small_basis, draws=5, rng=np.random.default_rng(0)
            )


class TestCsvWriters:
    def test_summary_csv(self, tmp_path):
        rows = summary_table(fake_samples())
        path = tmp_path / "summary.csv"
        write_summary_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "parameter,median,hpd_lower,hpd_upper,mcse,batches"
        assert len(lines) == len(rows) + 1
        first = lines[1].split(",")
        assert first[0] == "beta1_0"
        assert float(first[1]) == pytest.approx(rows[0].median)

    def test_inclusion_csv(self, tmp_path):
        path = tmp_path / "inclusion.csv"
        write_inclusion_csv(
            [0.9, 0.1], [0.01, 0.02], [0.5], [0.03], path
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "vector,block,inclusion,mcse"
        assert lines[1].startswith("0,eta,0.9")
        assert lines[3].startswith("0,nu,0.5")

    def test_rqr_csv_skips_missing_and_keeps_inf(self, small_lattice, tmp_path):
        y = np.zeros((small_lattice.n, 2), dtype=int)
        y[1, 1] = MISSING
        data = intercept_dataset(small_lattice, 2, y)
        res = np.zeros((small_lattice.n, 2))
        res[0, 0] = np.inf
        res[1, 1] = np.nan
        out = RqrSet(residuals=res, n_infinite=1, seed=0)
        path = tmp_path / "rqr.csv"
        write_rqr_csv(out, data, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + int(data.observed.sum())
        assert lines[1] == "0,0,inf"

    def test_predictive_csv(self, small_lattice, tmp_path):
        y = np.zeros((small_lattice.n, 2), dtype=int)
        data = intercept_dataset(small_lattice, 2, y)
        mean = np.full((small_lattice.n, 2), 1.25)
        err = np.full((small_lattice.n, 2), 0.5)
        path = tmp_path / "pred.csv"
        write_predictive_csv(mean, err, data, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "location_id,period_id,predictive_mean,mc_error"
        assert lines[1] == "0,0,1.25,0.5"

    def test_schema(self, tmp_path):
        path = tmp_path / "schema.json"
        write_schema(path)
        schema = json.loads(path.read_text())
        assert set(schema) == {
            "summary.csv",
            "inclusion.csv",
            "rqr.csv",
            "predictive_mean.csv",
        }
