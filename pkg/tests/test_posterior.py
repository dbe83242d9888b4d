from datetime import date

import numpy as np
import pytest

from tracepoll.domain import FeatureValue, SiliconResponse, StratCell, StratFrame
from tracepoll.mrp import (
    AreaGraph,
    Diagnostics,
    EffectSpec,
    EmptyCrosstab,
    ModelSpec,
    ParamLayout,
    PosteriorDraws,
    RANDOM_WALK,
    UNSTRUCTURED,
    UnknownCategory,
    build_training_data,
    cell_linear_predictor,
    cell_probs,
    crosstab_partition,
    margin_draws,
    poststratify,
    save_draws_csv,
    save_estimates_csv,
    summarize_estimates,
)


@pytest.fixture
def spec():
    rng = np.random.default_rng(0)
    return ModelSpec(
        choices=("D", "R"),
        reference="D",
        areas=("north", "south"),
        graph=AreaGraph.from_pairs(2, [(0, 1)]),
        effects=(
            EffectSpec("age", ("young", "old"), RANDOM_WALK),
            EffectSpec("vote2020", ("pd", "pr"), UNSTRUCTURED),
        ),
        covariate_map={"R": (0,)},
        z=rng.normal(size=(2, 1)),
        nu=rng.normal(size=(2, 2)),
        interaction_title="vote2020",
    )


@pytest.fixture
def frame():
    cells = []
    cid = 0
    for area in ("north", "south"):
        for age in ("young", "old"):
            for v in ("pd", "pr"):
                cid += 1
                cells.append(
                    StratCell(cid, {"state": area, "age": age, "vote2020": v}, float(cid))
                )
    return StratFrame(cells=tuple(cells), attribute_schema=("state", "age", "vote2020"))


class TestPoststratify:
    def test_weighted_average(self):
        probs = np.zeros((1, 2, 2))
        probs[0, 0] = [0.8, 0.2]
        probs[0, 1] = [0.4, 0.6]
        out = poststratify(probs, np.array([1.0, 3.0]), np.zeros(2, dtype=int))
        assert out[0, 0, 1] == pytest.approx((1 * 0.2 + 3 * 0.6) / 4)

    def test_identical_probs_ignore_weights(self):
        probs = np.full((3, 4, 2), 0.5)
        out1 = poststratify(probs, np.array([1, 1, 1, 1.0]), np.zeros(4, dtype=int))
        out2 = poststratify(probs, np.array([9, 1, 5, 0.1]), np.zeros(4, dtype=int))
        assert np.allclose(out1, out2)

    def test_tower_property_refinement(self):
        rng = np.random.default_rng(5)
        d, c, j = 7, 12, 3
        probs = rng.dirichlet(np.ones(j), size=(d, c))
        weights = rng.uniform(0.1, 2.0, size=c)
        fine_map = rng.integers(0, 4, size=c)
        national = poststratify(probs, weights, np.zeros(c, dtype=int))
        fine = poststratify(probs, weights, fine_map, n_crosstabs=4)
        group_w = np.array([weights[fine_map == f].sum() for f in range(4)])
        recombined = np.einsum("f,dfj->dj", group_w, fine) / group_w.sum()
        assert np.allclose(recombined, national[:, 0, :], atol=1e-12)

    def test_empty_crosstab_rejected(self):
        probs = np.full((1, 2, 2), 0.5)
        with pytest.raises(EmptyCrosstab):
            poststratify(probs, np.array([1.0, 1.0]), np.zeros(2, dtype=int), n_crosstabs=2)

    def test_zero_weight_crosstab_rejected(self):
        probs = np.full((1, 2, 2), 0.5)
        with pytest.raises(EmptyCrosstab):
            poststratify(probs, np.array([0.0, 1.0]), np.array([0, 1]))

    def test_per_draw_weights_supported(self):
        rng = np.random.default_rng(9)
        probs = rng.dirichlet(np.ones(2), size=(4, 3))
        w = rng.uniform(0.5, 1.5, size=(4, 3))
        out = poststratify(probs, w, np.zeros(3, dtype=int))
        manual = (w[:, :, None] * probs).sum(axis=1) / w.sum(axis=1)[:, None]
        assert np.allclose(out[:, 0, :], manual)


class TestMarginDraws:
    def test_difference(self):
        post = np.array([[[0.3, 0.5, 0.2]]])
        assert margin_draws(post, 1, 0)[0, 0] == pytest.approx(0.2)

    def test_self_margin_zero(self):
        post = np.random.default_rng(0).dirichlet(np.ones(3), size=(5, 2))
        assert np.allclose(margin_draws(post, 2, 2), 0.0)


class TestCellLinearPredictor:
    def test_zero_draw_gives_uniform_softmax(self, spec, frame):
        layout = ParamLayout(spec)
        mu = cell_linear_predictor(layout.zeros(), frame.cells[0], spec, layout)
        assert np.allclose(mu, 0.0)

    def test_matches_independent_recomputation(self, spec, frame):
        layout = ParamLayout(spec)
        rng = np.random.default_rng(3)
        vec = rng.normal(size=layout.dim)
        con = layout.constrain(vec)
        cell = frame.cells[5]  # south, young, pr
        mu = cell_linear_predictor(vec, cell, spec, layout)
        # independent recomputation, spelled out term by term
        s = 1  # south
        a = 0  # young
        v = 1  # pr
        r_col = 0  # single active choice
        z_std = (spec.z - spec.z.mean(axis=0)) / spec.z.std(axis=0)
        nu_std = (spec.nu - spec.nu.mean(axis=0)) / spec.nu.std(axis=0)
        expected_r = (
            con["alpha"][r_col]
            + con["lam"][s, r_col]
            + con["effect_age"][a, r_col]
            + con["effect_vote2020"][v, r_col]
            + con["beta"][0] * z_std[s, 0]
            + con["zeta"][v, r_col] * nu_std[s, spec.choice_index("R")]
        )
        assert mu[spec.choice_index("R")] == pytest.approx(expected_r, abs=1e-12)
        assert mu[spec.choice_index("D")] == 0.0

    def test_no_state_and_poll_terms_never_enter(self, frame):
        spec = ModelSpec(
            choices=("D", "R"),
            reference="D",
            areas=("north", "south"),
            graph=AreaGraph.from_pairs(2, [(0, 1)]),
            effects=(
                EffectSpec("age", ("young", "old"), RANDOM_WALK),
                EffectSpec("vote2020", ("pd", "pr"), UNSTRUCTURED),
            ),
            include_no_state=True,
            include_poll_walk=True,
            n_polls=2,
        )
        layout = ParamLayout(spec)
        vec = layout.zeros()
        for name in ("no_state", "delta_poll"):
            b = layout.blocks[name]
            vec[b.offset : b.offset + b.size] = 9.0
        mu = cell_linear_predictor(vec, frame.cells[0], spec, layout)
        assert np.allclose(mu, 0.0)  # cell predictions ignore both blocks

    def test_unknown_category(self, spec, frame):
        layout = ParamLayout(spec)
        bad = StratCell(99, {"state": "north", "age": "ancient", "vote2020": "pd"}, 1.0)
        with pytest.raises(UnknownCategory):
            cell_linear_predictor(layout.zeros(), bad, spec, layout)

    def test_vectorized_cell_probs_match_single_cell_path(self, spec, frame):
        layout = ParamLayout(spec)
        rng = np.random.default_rng(8)
        draws = PosteriorDraws(
            unconstrained=rng.normal(size=(3, layout.dim)),
            chain=np.zeros(3, dtype=int),
            iteration=np.arange(3),
            diagnostics=Diagnostics(0, 0, {}, 0),
        )
        probs = cell_probs(draws, frame, spec, layout)
        for d in range(3):
            for ci, cell in enumerate(frame.cells):
                mu = cell_linear_predictor(draws.unconstrained[d], cell, spec, layout)
                e = np.exp(mu - mu.max())
                assert np.allclose(probs[d, ci], e / e.sum(), atol=1e-12)


class TestCrosstabPartition:
    def test_national_single_group(self, frame):
        labels, cmap = crosstab_partition(frame, None)
        assert labels == ["national"] and set(cmap) == {0}

    def test_by_attribute(self, frame):
        labels, cmap = crosstab_partition(frame, "age")
        assert labels == ["young", "old"]
        assert cmap.tolist() == [0, 0, 1, 1, 0, 0, 1, 1]


def _resp(uid, vote, age, v20, poll_id="p1"):
    values = {
        "vote2024": FeatureValue("vote2024", "X1", vote, "", 0),
        "age": FeatureValue("age", "X1", age, "", 0),
        "vote2020": FeatureValue("vote2020", "X1", v20, "", 0),
    }
    return SiliconResponse(uid, poll_id, date(2024, 10, 20), values)


class TestBuildTrainingData:
    def test_index_encoding(self, spec):
        responses = [
            _resp("u1", "R", "young", "pd"),
            _resp("u2", "D", "old", "pr"),
        ]
        states = {"u1": "north", "u2": "USA"}
        spec2 = ModelSpec(
            choices=spec.choices,
            reference=spec.reference,
            areas=spec.areas,
            graph=spec.graph,
            effects=spec.effects,
            include_no_state=True,
        )
        data = build_training_data(responses, states, spec2, "vote2024")
        assert data.y.tolist() == [1, 0]
        assert data.area.tolist() == [0, -1]
        assert data.effect_idx["age"].tolist() == [0, 1]
        assert data.effect_idx["vote2020"].tolist() == [0, 1]

    def test_unknown_choice_category(self, spec):
        with pytest.raises(UnknownCategory):
            build_training_data(
                [_resp("u1", "green", "young", "pd")], {"u1": "north"}, spec, "vote2024"
            )

    def test_poll_indexing(self, spec):
        responses = [_resp("u1", "R", "young", "pd", poll_id="a"),
                     _resp("u2", "D", "old", "pr", poll_id="b")]
        data = build_training_data(
            responses, {"u1": "north", "u2": "south"}, spec, "vote2024",
            poll_order=["a", "b"],
        )
        assert data.poll.tolist() == [0, 1]


class TestPersistence:
    def test_draws_csv_layout(self, spec, tmp_path):
        layout = ParamLayout(spec)
        rng = np.random.default_rng(0)
        draws = PosteriorDraws(
            unconstrained=rng.normal(size=(2, layout.dim)),
            chain=np.array([0, 1]),
            iteration=np.array([0, 0]),
            diagnostics=Diagnostics(0, 0, {}, 0),
        )
        path = tmp_path / "draws.csv"
        save_draws_csv(draws, layout, path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[:2] == ["chain", "iter"]
        assert "alpha.R" in header
        assert "lambda.north.R" in header
        assert "sigma_state.R" in header
        assert len(path.read_text().splitlines()) == 3

    def test_estimates_csv(self, tmp_path):
        rng = np.random.default_rng(1)
        post = rng.dirichlet(np.ones(2), size=(50, 3))
        rows = summarize_estimates(["x", "y", "z"], post, ("D", "R"))
        path = tmp_path / "est.csv"
        save_estimates_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "crosstab,choice,p5,p50,p95"
        assert len(lines) == 1 + 6
