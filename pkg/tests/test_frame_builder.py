import numpy as np
import pytest

from tracepoll.domain import StratCell, StratFrame
from tracepoll.frame_builder import (
    EmptyAux,
    MarginTarget,
    MissingCombo,
    NonConvergence,
    StructuralZero,
    extend_frame,
    load_margin_targets_csv,
    rake,
    sample_daughter_frame,
    save_margin_targets_csv,
    smooth_crosstabs,
)


def _aux(records):
    # records: list of (sex, vote)
    return [({"sex": s}, v) for s, v in records]


class TestSmoothCrosstabs:
    def test_no_shrinkage_limit(self):
        aux = _aux([("m", "d")] * 8 + [("m", "r")] * 2)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=1e-12)
        dist = dict(zip(sm.categories, sm.distribution({"sex": "m"})))
        assert dist["d"] == pytest.approx(0.8, abs=1e-9)
        assert dist["r"] == pytest.approx(0.2, abs=1e-9)

    def test_empty_cell_gets_margin(self):
        aux = _aux([("m", "d")] * 6 + [("m", "r")] * 4)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=5.0)
        dist = dict(zip(sm.categories, sm.distribution({"sex": "f"})))  # unseen combo
        assert dist["d"] == pytest.approx(0.6)
        assert dist["r"] == pytest.approx(0.4)

    def test_pooling_limit(self):
        aux = _aux([("m", "d")] * 9 + [("m", "r")] + [("f", "d")] + [("f", "r")] * 9)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=1e9)
        dm = sm.distribution({"sex": "m"})
        df = sm.distribution({"sex": "f"})
        assert np.allclose(dm, df, atol=1e-6)

    def test_partial_shrinkage_formula(self):
        # counts (8, 2), margin (0.5, 0.5), kappa 10 -> (8+5)/(10+10), (2+5)/20
        aux = _aux([("m", "d")] * 8 + [("m", "r")] * 2 + [("f", "d")] * 2 + [("f", "r")] * 8)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=10.0)
        dist = dict(zip(sm.categories, sm.distribution({"sex": "m"})))
        assert dist["d"] == pytest.approx(13 / 20)
        assert dist["r"] == pytest.approx(7 / 20)

    def test_empty_aux_rejected(self):
        with pytest.raises(EmptyAux):
            smooth_crosstabs([], ["sex"], "vote", kappa=1.0)


class TestExtendFrame:
    def _frame(self):
        return StratFrame(
            cells=(StratCell(1, {"sex": "m"}, 100.0), StratCell(2, {"sex": "f"}, 50.0)),
            attribute_schema=("sex",),
        )

    def test_product_rule(self):
        aux = _aux([("m", "d")] * 6 + [("m", "r")] * 4 + [("f", "d")] * 5 + [("f", "r")] * 5)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=1e-12)
        ext = extend_frame(self._frame(), sm)
        assert ext.attribute_schema == ("sex", "vote")
        w = {
            (c.attributes["sex"], c.attributes["vote"]): c.weight for c in ext.cells
        }
        assert w[("m", "d")] == pytest.approx(60.0)
        assert w[("m", "r")] == pytest.approx(40.0)

    def test_conserves_total_weight(self):
        aux = _aux([("m", "d")] * 3 + [("m", "r")] * 7 + [("f", "d")] * 9 + [("f", "r")])
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=2.5)
        frame = self._frame()
        ext = extend_frame(frame, sm)
        assert ext.total_weight() == pytest.approx(frame.total_weight(), rel=1e-9)

    def test_zero_probability_cell_retained(self):
        aux = _aux([("m", "d")] * 5 + [("f", "d")] * 3 + [("f", "r")] * 3)
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=1e-15)
        ext = extend_frame(self._frame(), sm)
        zero = [c for c in ext.cells if c.attributes == {"sex": "m", "vote": "r"}]
        assert len(zero) == 1 and zero[0].weight == pytest.approx(0.0, abs=1e-9)

    def test_missing_combo_without_fallback(self):
        aux = _aux([("m", "d"), ("m", "r")])
        sm = smooth_crosstabs(aux, ["sex"], "vote", kappa=0.0)
        with pytest.raises(MissingCombo):
            extend_frame(self._frame(), sm)


def _grid_frame(weights: np.ndarray) -> StratFrame:
    cells = []
    cid = 0
    for i in range(weights.shape[0]):
        for j in range(weights.shape[1]):
            cid += 1
            cells.append(
                StratCell(cid, {"row": f"r{i}", "col": f"c{j}"}, float(weights[i, j]))
            )
    return StratFrame(cells=tuple(cells), attribute_schema=("row", "col"))


def _margins(frame: StratFrame, title: str) -> dict[str, float]:
    total = frame.total_weight()
    out: dict[str, float] = {}
    for c in frame.cells:
        out[c.attributes[title]] = out.get(c.attributes[title], 0.0) + c.weight
    return {k: v / total for k, v in out.items()}


def _reference_ipf(seed: np.ndarray, rows: np.ndarray, cols: np.ndarray, iters=10_000):
    w = seed.astype(float).copy()
    for _ in range(iters):
        w *= (rows / w.sum(axis=1))[:, None]
        w *= cols / w.sum(axis=0)
    return w


class TestRake:
    def test_fixed_point_unchanged(self):
        frame = _grid_frame(np.ones((2, 2)))
        targets = [
            MarginTarget("row", {"r0": 0.5, "r1": 0.5}),
            MarginTarget("col", {"c0": 0.5, "c1": 0.5}),
        ]
        out = rake(frame, targets, tol=1e-12)
        assert np.allclose([c.weight for c in out.cells], 1.0, atol=1e-9)

    def test_matches_reference_loop_2x2(self):
        frame = _grid_frame(np.ones((2, 2)))
        rows = np.array([0.6, 0.4]) * 4
        cols = np.array([0.7, 0.3]) * 4
        expected = _reference_ipf(np.ones((2, 2)), rows, cols)
        targets = [
            MarginTarget("row", {"r0": 0.6, "r1": 0.4}),
            MarginTarget("col", {"c0": 0.7, "c1": 0.3}),
        ]
        out = rake(frame, targets, tol=1e-12, max_iter=5000)
        got = np.array([c.weight for c in out.cells]).reshape(2, 2)
        assert np.allclose(got, expected, atol=1e-9)
        assert _margins(out, "row")["r0"] == pytest.approx(0.6, abs=1e-9)
        assert _margins(out, "col")["c0"] == pytest.approx(0.7, abs=1e-9)

    def test_total_weight_preserved(self):
        rng = np.random.default_rng(3)
        frame = _grid_frame(rng.uniform(0.5, 2.0, size=(3, 4)))
        total = frame.total_weight()
        targets = [
            MarginTarget("row", {f"r{i}": p for i, p in enumerate((0.5, 0.3, 0.2))}),
            MarginTarget("col", {f"c{j}": p for j, p in enumerate((0.4, 0.3, 0.2, 0.1))}),
        ]
        out = rake(frame, targets)
        assert out.total_weight() == pytest.approx(total, rel=1e-9)

    def test_structural_zero(self):
        weights = np.array([[1.0, 1.0], [0.0, 0.0]])
        frame = _grid_frame(weights)
        targets = [MarginTarget("row", {"r0": 0.5, "r1": 0.5})]
        with pytest.raises(StructuralZero):
            rake(frame, targets)

    def test_nonconvergence_reports_achieved_error(self):
        rng = np.random.default_rng(5)
        frame = _grid_frame(rng.uniform(0.1, 3.0, size=(3, 3)))
        targets = [
            MarginTarget("row", {"r0": 0.7, "r1": 0.2, "r2": 0.1}),
            MarginTarget("col", {"c0": 0.1, "c1": 0.1, "c2": 0.8}),
        ]
        with pytest.raises(NonConvergence) as err:
            rake(frame, targets, tol=1e-15, max_iter=2)
        assert err.value.achieved_error > 0

    def test_sweep_error_non_increasing_random_frames(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            shape = (rng.integers(2, 5), rng.integers(2, 5))
            frame = _grid_frame(rng.uniform(0.2, 3.0, size=shape))
            rows = rng.dirichlet(np.ones(shape[0]))
            cols = rng.dirichlet(np.ones(shape[1]))
            targets = [
                MarginTarget("row", {f"r{i}": float(p) for i, p in enumerate(rows)}),
                MarginTarget("col", {f"c{j}": float(p) for j, p in enumerate(cols)}),
            ]
            history: list[float] = []
            rake(frame, targets, tol=1e-10, max_iter=1000, error_history=history)
            diffs = np.diff(history)
            assert np.all(diffs <= 1e-9)

    def test_geography_scoped_targets(self):
        cells = (
            StratCell(1, {"state": "A", "sex": "m"}, 1.0),
            StratCell(2, {"state": "A", "sex": "f"}, 1.0),
            StratCell(3, {"state": "B", "sex": "m"}, 2.0),
            StratCell(4, {"state": "B", "sex": "f"}, 2.0),
        )
        frame = StratFrame(cells=cells, attribute_schema=("state", "sex"))
        targets = [MarginTarget("sex", {"m": 0.8, "f": 0.2}, geography="A")]
        out = rake(frame, targets, tol=1e-12)
        by_id = {c.cell_id: c.weight for c in out.cells}
        assert by_id[1] == pytest.approx(1.6, abs=1e-9)
        assert by_id[2] == pytest.approx(0.4, abs=1e-9)
        assert by_id[3] == 2.0 and by_id[4] == 2.0  # untouched geography


class TestSampleDaughterFrame:
    def test_quota_sums_to_target_1500(self, quota_frame):
        state = sample_daughter_frame(quota_frame, 1500, seed=9)
        assert sum(state.quota.values()) == 1500
        assert all(v == 0 for v in state.counter.values())

    def test_single_cell_gets_everything(self):
        frame = StratFrame(
            cells=(StratCell(1, {"a": "x"}, 3.0),), attribute_schema=("a",)
        )
        state = sample_daughter_frame(frame, 77, seed=0)
        assert state.quota == {1: 77}

    def test_two_equal_cells_binomial_bound(self):
        frame = StratFrame(
            cells=(StratCell(1, {"a": "x"}, 1.0), StratCell(2, {"a": "y"}, 1.0)),
            attribute_schema=("a",),
        )
        n = 10_000
        state = sample_daughter_frame(frame, n, seed=123)
        sigma = (n * 0.25) ** 0.5
        assert abs(state.quota[1] - n / 2) < 3 * sigma

    def test_deterministic_under_seed(self, quota_frame):
        a = sample_daughter_frame(quota_frame, 500, seed=4)
        b = sample_daughter_frame(quota_frame, 500, seed=4)
        assert a.quota == b.quota

    def test_expected_quota_proportional_to_weight(self):
        frame = StratFrame(
            cells=(StratCell(1, {"a": "x"}, 3.0), StratCell(2, {"a": "y"}, 1.0)),
            attribute_schema=("a",),
        )
        draws = np.array(
            [sample_daughter_frame(frame, 100, seed=s).quota[1] for s in range(300)]
        )
        assert abs(draws.mean() - 75.0) < 1.0


def test_margin_targets_csv_round_trip(tmp_path):
    targets = [
        MarginTarget("sex", {"m": 0.5, "f": 0.5}, geography="Texas"),
        MarginTarget("vote", {"d": 0.3, "r": 0.45, "o": 0.25}, geography=None),
    ]
    path = tmp_path / "targets.csv"
    save_margin_targets_csv(targets, path)
    loaded = load_margin_targets_csv(path)
    assert {(t.variable, t.geography) for t in loaded} == {
        ("sex", "Texas"), ("vote", None)
    }
    vote = next(t for t in loaded if t.variable == "vote")
    assert vote.shares["r"] == pytest.approx(0.45)
