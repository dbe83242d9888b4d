"""Simulation-based calibration of the sampler.

Draw parameters from the prior, simulate responses, refit, and rank the true
values within the posterior draws. If the sampler targets the right posterior
the ranks are uniform; a chi-square goodness-of-fit over binned ranks catches
systematic bias or mis-tuned adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .icar import AreaGraph
from .logpost import make_logpost, response_probs
from .nuts import SamplerSettings, sample
from .spec import EffectSpec, ModelSpec, ParamLayout, TrainingData, UNSTRUCTURED


def reduced_model() -> tuple[ModelSpec, ParamLayout]:
    """Two areas, two choices, intercept plus one unstructured effect."""
    spec = ModelSpec(
        choices=("D", "R"),
        reference="D",
        areas=("a0", "a1"),
        graph=AreaGraph.from_pairs(2, [(0, 1)]),
        effects=(EffectSpec("group", ("g0", "g1"), UNSTRUCTURED),),
        include_spatial=False,
    )
    return spec, ParamLayout(spec)


@dataclass
class SbcResult:
    ranks: np.ndarray  # (n_reps, dim) rank of truth among retained draws
    n_retained: int
    param_names: list[str]

    def chi_square_pvalues(self, n_bins: int = 10) -> dict[str, float]:
        """Uniformity p-value per parameter over equal-width rank bins.

        n_retained + 1 possible ranks must split evenly into n_bins.
        """
        levels = self.n_retained + 1
        if levels % n_bins != 0:
            raise ValueError(f"{levels} rank values do not bin evenly into {n_bins}")
        width = levels // n_bins
        out = {}
        for d, name in enumerate(self.param_names):
            counts = np.bincount(self.ranks[:, d] // width, minlength=n_bins)
            out[name] = float(stats.chisquare(counts).pvalue)
        return out


def run_sbc(
    n_reps: int = 200,
    n_obs: int = 40,
    seed: int = 0,
    iterations: int = 298,
    warmup: int = 100,
    thin: int = 2,
) -> SbcResult:
    """SBC over the reduced model; defaults give 99 retained draws per rep so
    ranks 0..99 bin evenly."""
    spec, layout = reduced_model()
    master = np.random.default_rng(seed)
    ranks = np.zeros((n_reps, layout.dim), dtype=int)
    n_retained = None
    for rep in range(n_reps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        truth = layout.sample_prior(rng)
        group = rng.integers(0, 2, size=n_obs)
        template = TrainingData(
            y=np.zeros(n_obs, dtype=int),
            area=rng.integers(0, 2, size=n_obs),
            effect_idx={"group": group},
        )
        probs = response_probs(truth, template, spec, layout)
        y = (rng.uniform(size=n_obs) < probs[:, 1]).astype(int)
        data = TrainingData(y=y, area=template.area, effect_idx={"group": group})
        settings = SamplerSettings(
            chains=1,
            iterations=iterations,
            warmup=warmup,
            thin=thin,
            seed=int(master.integers(0, 2**31)),
        )
        draws = sample(make_logpost(data, spec, layout), layout.dim, settings)
        n_retained = draws.n_draws
        ranks[rep] = (draws.unconstrained < truth[None, :]).sum(axis=0)
    names = [f"theta[{i}]" for i in range(layout.dim)]
    return SbcResult(ranks=ranks, n_retained=int(n_retained), param_names=names)
