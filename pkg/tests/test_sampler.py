import json

import numpy as np
import pytest
from scipy.special import logit

import zicomp.sampler as sampler_mod
from zicomp.comp import NumericsError
from zicomp.model import (
    MISSING,
    Dataset,
    ModelState,
    PriorConfig,
    compute_predictors,
    month_dummies,
)
from zicomp.sampler import (
    ChainAbort,
    ChainConfig,
    LapAdapter,
    ZicompChain,
    gibbs_smoothing_draw,
    load_checkpoint,
    load_output,
    run_chain,
    save_checkpoint,
    save_output,
    update_beta1,
    update_continuous_block,
    update_indicators,
    update_smoothing,
    update_w,
)
from zicomp.spatial import build_lattice, compute_basis


def intercept_dataset(graph, T, y=None, missing=False):
    """Intercept-only design; y defaults to all zeros (or all missing)."""
    n = graph.n
    if y is None:
        y = np.full((n, T), MISSING if missing else 0, dtype=int)
    X = np.ones((n, T, 1))
    return Dataset(y=y, X=X, M=month_dummies(T), graph=graph)


@pytest.fixture(scope="module")
def lattice():
    return build_lattice(4, 4)


@pytest.fixture(scope="module")
def basis(lattice):
    return compute_basis(lattice, q=3, rho=0.99)


class TestChainConfig:
    def test_burn_in_default_is_half(self):
        assert ChainConfig(n_iterations=1000).burn_in == 500

    def test_validation(self):
        with pytest.raises(ValueError, match="burn_in"):
            ChainConfig(n_iterations=10, burn_in=11)
        with pytest.raises(ValueError, match="thin"):
            ChainConfig(thin=0)
        with pytest.raises(ValueError, match="indicator_mode"):
            ChainConfig(indicator_mode="sometimes")
        with pytest.raises(ValueError, match="method"):
            ChainConfig(method="gibbs")

    def test_tractable_requires_constraint(self):
        with pytest.raises(ValueError, match="zip_constrained"):
            ChainConfig(method="tractable")
        ChainConfig(method="tractable", zip_constrained=True)


class TestLapAdapter:
    def test_scale_moves_with_acceptance(self):
        up = LapAdapter(dim=2, target=0.234, batch=10)
        down = LapAdapter(dim=2, target=0.234, batch=10)
        s0 = up.log_s2
        for _ in range(10):
            up.record(np.zeros(2), True)
            down.record(np.zeros(2), False)
        assert up.log_s2 > s0
        assert down.log_s2 < s0

    def test_step_size_decays(self):
        ad = LapAdapter(dim=1, target=0.44, batch=5)
        jumps = []
        prev = ad.log_s2
        for _ in range(4):
            for _ in range(5):
                ad.record(np.zeros(1), True)
            jumps.append(ad.log_s2 - prev)
            prev = ad.log_s2
        assert all(a > b > 0 for a, b in zip(jumps, jumps[1:]))

    def test_identity_covariance_until_enough_draws(self):
        ad = LapAdapter(dim=3, target=0.234, batch=100)
        rng = np.random.default_rng(0)
        for _ in range(5):
            ad.record(rng.normal(size=3), True)
        assert np.array_equal(ad._cov_estimate(), np.eye(3))

    def test_welford_matches_numpy_cov(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(500, 2)) @ np.array([[1.0, 0.0], [0.7, 0.4]])
        ad = LapAdapter(dim=2, target=0.234, batch=50)
        for v in vals:
            ad.record(v, True)
        est = ad._cov_estimate() - 1e-10 * np.eye(2)
        assert np.allclose(est, np.cov(vals.T), rtol=1e-8)

    def test_frozen_ignores_records(self):
        ad = LapAdapter(dim=1, target=0.44, batch=2)
        ad.freeze()
        before = (ad.log_s2, ad.count)
        for _ in range(10):
            ad.record(np.ones(1), True)
        assert (ad.log_s2, ad.count) == before

    def test_round_trip_preserves_proposals(self):
        rng = np.random.default_rng(9)
        ad = LapAdapter(dim=2, target=0.234, batch=5)
        for _ in range(30):
            ad.record(rng.normal(size=2), rng.random() < 0.3)
        clone = LapAdapter(dim=2, target=0.234, batch=5)
        clone.load_arrays({k: np.array(v) for k, v in ad.to_arrays().items()})
        r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
        assert np.array_equal(ad.step(r1), clone.step(r2))

    def test_gaussian_self_calibration(self):
        # adapt a random-walk sampler on a correlated Gaussian; the
        # realized acceptance rate should settle near the 0.234 target
        # and the learned covariance should pick up the correlation
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        prec = np.linalg.inv(cov)
        rng = np.random.default_rng(42)
        ad = LapAdapter(dim=2, target=0.234, batch=50)
        x = np.zeros(2)
        lp = 0.0
        accepts = []
        for i in range(6000):
            prop = x + ad.step(rng)
            lp_new = -0.5 * prop @ prec @ prop
            ok = np.log(rng.random()) <= lp_new - lp
            if ok:
                x, lp = prop, lp_new
            ad.record(x, ok)
            accepts.append(ok)
        rate = np.mean(accepts[-2500:])
        assert 0.17 < rate < 0.31
        learned = ad._cov_estimate()
        corr = learned[0, 1] / np.sqrt(learned[0, 0] * learned[1, 1])
        assert corr == pytest.approx(0.9, abs=0.1)


class TestGibbsSmoothing:
    def test_conjugate_moments(self, basis):
        rng = np.random.default_rng(8)
        prior = PriorConfig()
        coef = np.array([0.5, -1.0, 2.0])
        qb = basis.prior_precision
        shape = prior.smoothing_shape + coef.size / 2.0
        rate = prior.smoothing_rate + 0.5 * coef @ qb @ coef
        draws = np.array([gibbs_smoothing_draw(coef, qb, prior, rng) for _ in range(20_000)])
        assert (draws > 0).all()
        assert draws.mean() == pytest.approx(shape / rate, rel=0.03)
        assert draws.var() == pytest.approx(shape / rate**2, rel=0.1)

    def test_update_smoothing_mutates_both(self, basis):
        rng = np.random.default_rng(1)
        state = ModelState.zeros(16, 2, 1, basis.q)
        state.gamma = rng.normal(size=basis.q)
        k, t = update_smoothing(state, basis, PriorConfig(), rng)
        assert state.kappa == k > 0
        assert state.tau == t > 0


def w_chain(lattice, basis, pi, eta, nu, method="exchange", seed=0, T=9):
    """Chain over an all-zero dataset with fixed predictors for w tests."""
    data = intercept_dataset(lattice, T)
    state = ModelState.zeros(data.n, T, 1, basis.q)
    state.beta1[0] = logit(pi)
    state.beta2[0] = np.log(eta)
    state.alpha = np.log(nu)
    state.ind_gamma[:] = 0
    state.ind_delta[:] = 0
    cfg = ChainConfig(
        n_iterations=0,
        seed=seed,
        method=method,
        zip_constrained=(method == "tractable"),
    )
    return ZicompChain(data, basis, cfg, rng=np.random.default_rng(seed), init_state=state)


def w_posterior_zero(pi, log_c, wp=0.5):
    """P(w=1 | y=0): odds wp*pi/c against (1-wp)*(1-pi)."""
    a = wp * pi * np.exp(-log_c)
    return a / (a + (1 - wp) * (1 - pi))


class TestWUpdate:
    def test_positive_counts_pin_w(self, lattice, basis):
        rng = np.random.default_rng(0)
        y = rng.poisson(2.0, (lattice.n, 3))
        y[0, 0] = 5  # ensure at least one positive
        data = intercept_dataset(lattice, 3, y=y)
        state = ModelState.zeros(data.n, 3, 1, basis.q)
        for _ in range(20):
            update_w(state, data, basis, rng)
            assert (state.w[data.y > 0] == 1).all()

    def test_degenerate_pi_empties_w(self, lattice, basis):
        chain = w_chain(lattice, basis, pi=1e-12, eta=1.0, nu=1.0)
        chain.state.w[:] = 1
        chain.state.w = chain.state.w  # keep dtype
        for _ in range(3):
            chain.step_w()
        assert not chain.state.w.any()

    def test_tractable_gibbs_matches_closed_form(self, lattice, basis):
        pi, eta = 0.3, 2.0
        chain = w_chain(lattice, basis, pi, eta, 1.0, method="tractable", seed=3)
        expected = w_posterior_zero(pi, log_c=eta)
        total = 0.0
        sweeps = 1500
        for _ in range(sweeps):
            chain.step_w()
            total += chain.state.w.mean()
        # draws are iid given predictors, so the MC error is tiny
        assert total / sweeps == pytest.approx(expected, abs=0.003)

    def test_exchange_stationary_poisson_case(self, lattice, basis):
        # nu = 1: the mixture-proposal kernel must reproduce the exact
        # closed-form P(w=1 | y=0) available in the Poisson special case
        pi, eta = 0.3, 2.0
        chain = w_chain(lattice, basis, pi, eta, 1.0, seed=7)
        expected = w_posterior_zero(pi, log_c=eta)
        total, kept = 0.0, 0
        for sweep in range(3500):
            chain.step_w()
            if sweep >= 500:
                total += chain.state.w.mean()
                kept += 1
        assert total / kept == pytest.approx(expected, abs=0.012)

    def test_exchange_stationary_underdispersed_case(self, lattice, basis):
        from zicomp.comp import comp_log_normalizer

        pi, eta, nu = 0.3, 5.0, 0.3
        chain = w_chain(lattice, basis, pi, eta, nu, seed=11)
        log_c = comp_log_normalizer(eta, nu).log_c
        expected = w_posterior_zero(pi, log_c)
        total, kept = 0.0, 0
        for sweep in range(4000):
            chain.step_w()
            if sweep >= 500:
                total += chain.state.w.mean()
                kept += 1
        assert total / kept == pytest.approx(expected, abs=0.008)

    def test_missing_cells_never_touched(self, lattice, basis):
        rng = np.random.default_rng(2)
        y = np.zeros((lattice.n, 3), dtype=int)
        y[:, 1] = MISSING
        data = intercept_dataset(lattice, 3, y=y)
        state = ModelState.zeros(data.n, 3, 1, basis.q)
        state.w[:, 1] = 1  # sentinel on missing cells
        before = state.w[:, 1].copy()
        for _ in range(10):
            update_w(state, data, basis, rng)
        assert np.array_equal(state.w[:, 1], before)


@pytest.fixture(scope="module")
def prior_run(lattice):
    data = intercept_dataset(lattice, 2, missing=True)
    cfg = ChainConfig(
        n_iterations=15000,
        burn_in=5000,
        seed=17,
        update_basis=False,
        proposal_scales={"zeta": 5.0},
        progress_every=0,
    )
    return run_chain(data, compute_basis(lattice, q=3), cfg)


class TestPriorRecovery:
    """With every cell missing the likelihood is flat, so the chain
    must reproduce its priors. Pins the MH ratios and the adaptation."""

    def test_fixed_effects_match_normal_prior(self, prior_run):
        for name in ("beta1", "beta2"):
            draws = prior_run.samples[name][:, 0]
            assert draws.mean() == pytest.approx(0.0, abs=1.5)
            assert draws.std() == pytest.approx(10.0, rel=0.15)

    def test_alpha_matches_normal_prior(self, prior_run):
        draws = prior_run.samples["alpha"]
        assert draws.mean() == pytest.approx(0.0, abs=1.5)
        assert draws.std() == pytest.approx(10.0, rel=0.15)

    def test_month_effects_match_normal_prior(self, prior_run):
        # 11 coordinates share accept/reject events, so the pooled mean
        # mixes like a single trace; tolerances sized accordingly
        draws = prior_run.samples["zeta"]
        assert draws.mean() == pytest.approx(0.0, abs=2.0)
        assert draws.std() == pytest.approx(10.0, rel=0.18)

    def test_indicators_match_bernoulli_prior(self, lattice):
        data = intercept_dataset(lattice, 2, missing=True)
        cfg = ChainConfig(
            n_iterations=3000,
            burn_in=500,
            seed=23,
            indicator_period=1,
            progress_every=0,
        )
        out = run_chain(data, compute_basis(lattice, q=3), cfg)
        assert out.samples["ind_gamma"].mean() == pytest.approx(0.1, abs=0.04)
        assert out.samples["ind_delta"].mean() == pytest.approx(0.1, abs=0.04)


class TestFlatCoordinateRefresh:
    """Likelihood-flat coordinates (absent months, excluded basis
    coefficients) are redrawn from their exact prior conditionals each
    iteration rather than random-walked."""

    def make_chain(self, lattice, basis, T=4, seed=5, **cfg_kw):
        rng = np.random.default_rng(seed)
        y = rng.poisson(1.0, (lattice.n, T))
        data = intercept_dataset(lattice, T, y=y)
        cfg = ChainConfig(n_iterations=0, seed=seed, **cfg_kw)
        return ZicompChain(data, basis, cfg)

    def test_absent_month_coords_are_iid_prior_draws(self, lattice, basis):
        # T=4 covers Jan..Apr; January is the dummy reference, so only
        # columns 0..2 (Feb..Apr) are in-window. The rest must come out
        # as serially independent N(0, 100) draws.
        data = intercept_dataset(
            lattice, 4, y=np.random.default_rng(3).poisson(1.0, (lattice.n, 4))
        )
        cfg = ChainConfig(
            n_iterations=4000, burn_in=1000, seed=9, update_basis=False,
            progress_every=0,
        )
        out = run_chain(data, basis, cfg)
        flat = out.samples["zeta"][:, 3:]
        assert flat.mean() == pytest.approx(0.0, abs=0.6)
        assert flat.std() == pytest.approx(10.0, rel=0.05)
        lag1 = np.corrcoef(flat[:-1].ravel(), flat[1:].ravel())[0, 1]
        assert abs(lag1) < 0.05
        # in-window coords stay data-informed, nothing like the prior
        live = out.samples["zeta"][:, :3]
        assert live.std() < 2.0

    def test_excluded_basis_coords_match_conditional_prior(self, lattice, basis):
        chain = self.make_chain(lattice, basis)
        st = chain.state
        st.ind_gamma = np.array([1, 0, 0], dtype=np.int8)
        st.gamma = np.array([2.0, 0.0, 0.0])
        st.kappa = 0.7
        draws = np.empty((20000, 2))
        for i in range(draws.shape[0]):
            chain._refresh_excluded("gamma", st.ind_gamma, st.kappa)
            draws[i] = st.gamma[1:]
        prec = st.kappa * basis.prior_precision
        cov = np.linalg.inv(prec[1:, 1:])
        mean = -cov @ prec[1:, :1] @ st.gamma[:1]
        assert np.allclose(draws.mean(axis=0), mean, atol=0.05)
        assert np.allclose(np.cov(draws.T), cov, rtol=0.08, atol=0.03)

    def test_block_step_leaves_excluded_coords_fixed(self, lattice, basis):
        chain = self.make_chain(lattice, basis, seed=11)
        st = chain.state
        st.ind_gamma = np.array([0, 1, 0], dtype=np.int8)
        st.gamma = np.array([0.3, -0.1, 1.7])
        chain.pred = compute_predictors(st, chain.data, basis)
        chain.hy = chain._count_loglik(chain.pred, st.w)
        for _ in range(50):
            chain.step_block("gamma")
        assert st.gamma[0] == 0.3 and st.gamma[2] == 1.7

    def test_block_step_skips_when_all_excluded(self, lattice, basis):
        chain = self.make_chain(lattice, basis, seed=13)
        st = chain.state
        st.ind_gamma = np.zeros(3, dtype=np.int8)
        chain.pred = compute_predictors(st, chain.data, basis)
        chain.hy = chain._count_loglik(chain.pred, st.w)
        before = st.gamma.copy()
        chain.step_block("gamma")
        assert np.array_equal(st.gamma, before)
        assert "gamma" not in chain.counters_all

    def test_refresh_skips_delta_under_zip(self, lattice, basis):
        chain = self.make_chain(lattice, basis, zip_constrained=True)
        st = chain.state
        st.ind_delta = np.zeros(3, dtype=np.int8)
        chain._refresh_flat_coords()
        assert np.all(st.delta == 0.0)


class TestIndicatorSchedule:
    def test_every_k(self, lattice, basis):
        data = intercept_dataset(lattice, 2)
        cfg = ChainConfig(n_iterations=0, indicator_period=3, indicator_mode="every_k")
        chain = ZicompChain(data, basis, cfg)
        chain.it = 3
        sched = chain._indicator_schedule()
        assert [kind for kind, _ in sched] == ["ind_gamma", "ind_delta"]
        assert all(np.array_equal(js, np.arange(basis.q)) for _, js in sched)
        chain.it = 4
        assert chain._indicator_schedule() == []

    def test_random_m(self, lattice, basis):
        data = intercept_dataset(lattice, 2)
        cfg = ChainConfig(n_iterations=0, indicator_mode="random_m", indicator_m=2)
        chain = ZicompChain(data, basis, cfg)
        for _ in range(5):
            sched = chain._indicator_schedule()
            assert len(sched) == 2
            for _, js in sched:
                assert js.size == 2 and np.unique(js).size == 2

    def test_zip_constrained_drops_delta(self, lattice, basis):
        data = intercept_dataset(lattice, 2)
        cfg = ChainConfig(n_iterations=0, zip_constrained=True, indicator_period=1)
        chain = ZicompChain(data, basis, cfg)
        assert [kind for kind, _ in chain._indicator_schedule()] == ["ind_gamma"]

    def test_no_basis_updates_no_schedule(self, lattice, basis):
        data = intercept_dataset(lattice, 2)
        cfg = ChainConfig(n_iterations=0, update_basis=False, indicator_period=1)
        chain = ZicompChain(data, basis, cfg)
        assert chain._indicator_schedule() == []


class TestChainMechanics:
    def make_data(self, lattice, seed=0):
        rng = np.random.default_rng(seed)
        y = rng.poisson(1.0, (lattice.n, 4))
        return intercept_dataset(lattice, 4, y=y)

    def test_thinning_count(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(n_iterations=25, burn_in=10, thin=4, seed=0, progress_every=0)
        out = run_chain(data, basis, cfg)
        assert out.n_kept == (25 - 10) // 4 == 3
        assert out.samples["beta2"].shape == (3, 1)

    def test_zero_iterations(self, lattice, basis):
        data = self.make_data(lattice)
        out = run_chain(data, basis, ChainConfig(n_iterations=0, progress_every=0))
        assert out.n_kept == 0
        assert out.samples["kappa"].size == 0
        assert out.mcse == {}

    def test_all_burn_in(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(n_iterations=30, burn_in=30, seed=1, progress_every=0)
        out = run_chain(data, basis, cfg)
        assert out.n_kept == 0

    def test_reproducible(self, lattice, basis):
        data = self.make_data(lattice)
        outs = [
            run_chain(data, basis, ChainConfig(n_iterations=40, burn_in=10, seed=5, progress_every=0))
            for _ in range(2)
        ]
        for key in outs[0].samples:
            assert np.array_equal(outs[0].samples[key], outs[1].samples[key])
        diff = run_chain(
            data, basis, ChainConfig(n_iterations=40, burn_in=10, seed=6, progress_every=0)
        )
        assert not np.array_equal(diff.samples["beta2"], outs[0].samples["beta2"])

    def test_adapters_freeze_at_burn_in(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(n_iterations=120, burn_in=60, seed=2, progress_every=0)
        chain = ZicompChain(data, basis, cfg)
        while chain.it < 60:
            chain._one_iteration()
        frozen_scales = {k: ad.log_s2 for k, ad in chain.adapters.items()}
        assert all(ad.frozen for ad in chain.adapters.values())
        while chain.it < 120:
            chain._one_iteration()
        for k, ad in chain.adapters.items():
            assert ad.log_s2 == frozen_scales[k]

    def test_store_w_and_pinned_cells(self, lattice, basis):
        data = self.make_data(lattice, seed=3)
        cfg = ChainConfig(
            n_iterations=60, burn_in=20, seed=3, store_w=True, progress_every=0
        )
        out = run_chain(data, basis, cfg)
        assert out.samples["w"].shape == (40, lattice.n, 4)
        assert (out.w_mean[data.y > 0] == 1.0).all()
        assert out.w_mean.min() >= 0 and out.w_mean.max() <= 1

    def test_mcse_present_when_enough_kept(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(n_iterations=240, burn_in=40, seed=4, progress_every=0)
        out = run_chain(data, basis, cfg)
        assert out.n_kept == 200
        assert out.mcse["alpha"].shape == ()
        assert out.mcse["beta2"].shape == (1,)
        assert float(out.mcse["kappa"]) > 0

    def test_acceptance_rates_post_burn_only(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(n_iterations=50, burn_in=25, seed=5, progress_every=0)
        out = run_chain(data, basis, cfg)
        for name in ("beta1", "beta2", "w"):
            assert 0.0 <= out.acceptance_rates[name] <= 1.0

    def test_zip_constraint_holds_throughout(self, lattice, basis):
        data = self.make_data(lattice)
        cfg = ChainConfig(
            n_iterations=40,
            burn_in=10,
            seed=6,
            zip_constrained=True,
            method="tractable",
            progress_every=0,
        )
        out = run_chain(data, basis, cfg)
        assert not out.samples["alpha"].any()
        assert not out.samples["delta"].any()
        assert not out.samples["ind_delta"].any()
        assert out.final_state.alpha == 0.0


class TestAuxiliaryFailure:
    def test_block_failure_counts_as_rejection(self, lattice, basis, monkeypatch):
        rng = np.random.default_rng(0)
        y = rng.poisson(2.0, (lattice.n, 2))
        y[0, 0] = 3
        data = intercept_dataset(lattice, 2, y=y)
        cfg = ChainConfig(n_iterations=0, seed=0, progress_every=0)
        chain = ZicompChain(data, basis, cfg)

        def boom(*a, **k):
            raise NumericsError("no draw")

        monkeypatch.setattr(sampler_mod, "comp_sample", boom)
        before = chain.state.beta2.copy()
        chain.step_block("beta2")
        assert chain.aux_failures == 1
        assert np.array_equal(chain.state.beta2, before)

    def test_unrecoverable_failure_aborts_with_checkpoint(
        self, lattice, basis, monkeypatch, tmp_path
    ):
        data = intercept_dataset(lattice, 2)  # all zeros: step_w draws every sweep
        ckpt = tmp_path / "emergency.npz"
        cfg = ChainConfig(
            n_iterations=50, seed=0, checkpoint_path=str(ckpt), progress_every=0
        )
        chain = ZicompChain(data, basis, cfg)

        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] > 3:
                raise NumericsError("sampler stalled")
            return np.zeros(np.shape(a[0]), dtype=np.int64)

        monkeypatch.setattr(sampler_mod, "comp_sample", flaky)
        with pytest.raises(ChainAbort) as err:
            chain.run()
        assert err.value.checkpoint_path == str(ckpt)
        assert ckpt.exists()


class TestCheckpoint:
    def build(self, lattice, basis, seed=9, **kw):
        rng = np.random.default_rng(100)
        y = rng.poisson(1.5, (lattice.n, 3))
        data = intercept_dataset(lattice, 3, y=y)
        cfg = ChainConfig(n_iterations=60, burn_in=20, seed=seed, progress_every=0, **kw)
        return data, cfg

    def test_resume_is_bit_identical(self, lattice, basis, tmp_path):
        data, cfg = self.build(lattice, basis)
        straight = ZicompChain(data, basis, cfg)
        while straight.it < 60:
            straight._one_iteration()

        data2, cfg2 = self.build(lattice, basis)
        first = ZicompChain(data2, basis, cfg2)
        while first.it < 30:
            first._one_iteration()
        path = tmp_path / "mid.npz"
        save_checkpoint(path, first)
        resumed = load_checkpoint(path, data2, basis, self.build(lattice, basis)[1])
        while resumed.it < 60:
            resumed._one_iteration()

        for key in straight.samples:
            assert np.array_equal(straight.samples[key], resumed.samples[key])
        a, b = straight.state, resumed.state
        for name in ("w", "beta1", "beta2", "zeta", "gamma", "delta", "ind_gamma", "ind_delta"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert (a.alpha, a.kappa, a.tau) == (b.alpha, b.kappa, b.tau)
        assert straight.rng.bit_generator.state == resumed.rng.bit_generator.state
        assert straight.kept == resumed.kept

    def test_config_mismatch_rejected(self, lattice, basis, tmp_path):
        data, cfg = self.build(lattice, basis)
        chain = ZicompChain(data, basis, cfg)
        chain._one_iteration()
        path = tmp_path / "c.npz"
        save_checkpoint(path, chain)
        other = self.build(lattice, basis, seed=10)[1]
        with pytest.raises(ValueError, match="different configuration"):
            load_checkpoint(path, data, basis, other)

    def test_volatile_keys_ignored_in_fingerprint(self, lattice, basis, tmp_path):
        data, cfg = self.build(lattice, basis)
        chain = ZicompChain(data, basis, cfg)
        chain._one_iteration()
        path = tmp_path / "c.npz"
        save_checkpoint(path, chain)
        relaxed = self.build(lattice, basis)[1]
        relaxed.progress_every = 7
        relaxed.checkpoint_every = 99
        loaded = load_checkpoint(path, data, basis, relaxed)
        assert loaded.it == 1

    def test_version_mismatch_rejected(self, lattice, basis, tmp_path):
        data, cfg = self.build(lattice, basis)
        chain = ZicompChain(data, basis, cfg)
        path = tmp_path / "c.npz"
        save_checkpoint(path, chain)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays.pop("meta")))
        meta["format_version"] = 999
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path, data, basis, cfg)

    def test_run_chain_resume_api(self, lattice, basis, tmp_path):
        data, cfg = self.build(lattice, basis)
        path = tmp_path / "final.npz"
        cfg.checkpoint_path = str(path)
        out = run_chain(data, basis, cfg)
        # the end-of-run checkpoint restarts into an immediate finish
        out2 = run_chain(data, basis, self.build(lattice, basis)[1], resume_from=path)
        assert out2.n_kept == out.n_kept
        for key in out.samples:
            assert np.array_equal(out.samples[key], out2.samples[key])


class TestOutputSerialization:
    def test_round_trip(self, lattice, basis, tmp_path):
        rng = np.random.default_rng(12)
        y = rng.poisson(1.0, (lattice.n, 2))
        data = intercept_dataset(lattice, 2, y=y)
        cfg = ChainConfig(
            n_iterations=120, burn_in=20, seed=12, store_w=True, progress_every=0
        )
        out = run_chain(data, basis, cfg)
        path = tmp_path / "out.npz"
        save_output(out, path)
        back = load_output(path)
        assert back.n_kept == out.n_kept
        assert back.aux_failures == out.aux_failures
        assert back.acceptance_rates == out.acceptance_rates
        for key in out.samples:
            assert np.array_equal(back.samples[key], out.samples[key])
        for key in out.mcse:
            assert np.allclose(back.mcse[key], out.mcse[key])
        assert np.array_equal(back.w_mean, out.w_mean)
        assert back.config.to_dict() == out.config.to_dict()
        assert np.array_equal(back.final_state.gamma, out.final_state.gamma)


class TestStepWrappers:
    def test_update_w_returns_accept_count(self, lattice, basis):
        rng = np.random.default_rng(0)
        data = intercept_dataset(lattice, 3)
        state = ModelState.zeros(data.n, 3, 1, basis.q)
        got = update_w(state, data, basis, rng)
        assert 0 <= got <= data.n * 3

    def test_update_beta1_requires_basis(self, lattice, basis):
        rng = np.random.default_rng(0)
        data = intercept_dataset(lattice, 2)
        state = ModelState.zeros(data.n, 2, 1, basis.q)
        with pytest.raises(ValueError, match="basis"):
            update_beta1(state, data, rng)
        update_beta1(state, data, rng, basis=basis, scale=0.5)

    def test_update_continuous_block_names(self, lattice, basis):
        rng = np.random.default_rng(0)
        data = intercept_dataset(lattice, 2)
        state = ModelState.zeros(data.n, 2, 1, basis.q)
        for block in ("beta2", "zeta", "alpha", "gamma", "delta"):
            update_continuous_block(block, state, data, basis, rng)
        with pytest.raises(ValueError, match="unknown block"):
            update_continuous_block("beta3", state, data, basis, rng)

    def test_update_indicators_modes(self, lattice, basis):
        rng = np.random.default_rng(0)
        data = intercept_dataset(lattice, 2)
        state = ModelState.zeros(data.n, 2, 1, basis.q)
        ig, idl = update_indicators(
            state, data, basis, rng, iteration=0, indicator_mode="random_m", indicator_m=2
        )
        assert set(np.unique(ig)) <= {0, 1}
        assert set(np.unique(idl)) <= {0, 1}
