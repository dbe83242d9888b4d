import numpy as np
import pytest

from tracepoll.mrp import (
    AllDivergent,
    AreaGraph,
    ModelSpec,
    ParamLayout,
    SamplerSettings,
    TrainingData,
    make_logpost,
    planned_retained_draws,
    sample,
    split_rhat,
)


def gaussian_target(cov):
    prec = np.linalg.inv(cov)

    def lp(x):
        return float(-0.5 * x @ prec @ x), -prec @ x

    return lp


class TestRetainedDrawArithmetic:
    def test_reference_settings_give_exactly_500(self):
        st = SamplerSettings(
            chains=8, iterations=5000, warmup=4750, thin=4, max_tree_depth=15
        )
        assert planned_retained_draws(st) == 500

    def test_divisible_case_equals_per_chain_thinning(self):
        st = SamplerSettings(chains=3, iterations=700, warmup=400, thin=3)
        assert planned_retained_draws(st) == 3 * 100

    def test_sample_returns_planned_count(self):
        lp = gaussian_target(np.eye(2))
        st = SamplerSettings(chains=2, iterations=120, warmup=60, thin=4, seed=0)
        draws = sample(lp, 2, st)
        assert draws.n_draws == planned_retained_draws(st)
        assert draws.chain.min() == 0 and draws.chain.max() == 1


class TestGaussianTarget:
    def test_mean_and_covariance_recovered(self):
        cov = np.array([[1.5, -0.6], [-0.6, 0.8]])
        st = SamplerSettings(chains=4, iterations=1500, warmup=500, seed=3)
        draws = sample(gaussian_target(cov), 2, st)
        x = draws.unconstrained
        assert np.allclose(x.mean(axis=0), 0.0, atol=0.08)
        assert np.allclose(np.cov(x.T), cov, atol=0.15)
        assert draws.diagnostics.divergences == 0
        assert draws.diagnostics.worst_rhat() < 1.02

    def test_deterministic_per_seed(self):
        lp = gaussian_target(np.eye(3))
        st = SamplerSettings(chains=2, iterations=300, warmup=150, seed=11)
        a = sample(lp, 3, st)
        b = sample(lp, 3, st)
        assert np.array_equal(a.unconstrained, b.unconstrained)
        c = sample(lp, 3, SamplerSettings(chains=2, iterations=300, warmup=150, seed=12))
        assert not np.array_equal(a.unconstrained, c.unconstrained)


class TestDivergenceHandling:
    def test_all_divergent_raises(self):
        lp = gaussian_target(np.eye(2))
        st = SamplerSettings(
            chains=1, iterations=60, warmup=30, seed=0, max_energy_error=-1.0
        )
        with pytest.raises(AllDivergent):
            sample(lp, 2, st)


class TestSplitRhat:
    def test_identical_stationary_chains_near_one(self):
        rng = np.random.default_rng(0)
        chains = rng.normal(size=(4, 400))
        assert split_rhat(chains) < 1.02

    def test_diverged_means_flagged(self):
        rng = np.random.default_rng(1)
        chains = rng.normal(size=(2, 400))
        chains[1] += 5.0
        assert split_rhat(chains) > 1.5


def grid_posterior_oracle(y: np.ndarray):
    """Dense-grid posterior for the intercept-only two-choice model with a
    standard-normal prior on the intercept."""
    grid = np.linspace(-8, 8, 200_001)
    n1 = int(y.sum())
    n0 = len(y) - n1
    log_post = (
        -0.5 * grid**2
        + n1 * (-np.log1p(np.exp(-grid)))
        + n0 * (-np.log1p(np.exp(grid)))
    )
    w = np.exp(log_post - log_post.max())
    w /= w.sum()
    mean = float(np.sum(grid * w))
    sd = float(np.sqrt(np.sum((grid - mean) ** 2 * w)))
    return mean, sd


class TestInterceptOnlyModelVsGridOracle:
    def test_posterior_mean_and_sd_match(self):
        rng = np.random.default_rng(8)
        y = (rng.uniform(size=40) < 0.65).astype(int)
        spec = ModelSpec(
            choices=("D", "R"),
            reference="D",
            areas=("a0",),
            graph=AreaGraph(1, ()),
            effects=(),
            include_spatial=False,
        )
        layout = ParamLayout(spec)
        data = TrainingData(y=y, area=np.zeros(len(y), dtype=int), effect_idx={})
        f = make_logpost(data, spec, layout)
        st = SamplerSettings(chains=4, iterations=2500, warmup=500, thin=1, seed=21)
        draws = sample(f, layout.dim, st)
        alpha = draws.unconstrained[:, 0]
        mean, sd = grid_posterior_oracle(y)
        assert abs(alpha.mean() - mean) < 0.02
        assert abs(alpha.std() - sd) < 0.02
