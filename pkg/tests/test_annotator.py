import numpy as np
import pytest

from tracepoll.annotator import (
    AnnotatorRateLimited,
    AnnotatorRefused,
    AnnotatorTransportError,
    Exhausted,
    MissingTruth,
    MockOracle,
    OracleConfig,
    ScriptedBackend,
    oracle_annotate,
    retrying_complete,
)
from tracepoll.domain import assemble_mould
from tracepoll.prompts import build_prompt, parse_annotation

from conftest import make_tweet, make_user


@pytest.fixture
def defs(sex_feature, age_feature):
    return [sex_feature, age_feature]


TRUTH = {"SEX": "masculine sex - male", "AGE": "18-25"}


class TestOracleAnnotate:
    def test_identity_confusion_reproduces_truth(self, defs):
        out = oracle_annotate(TRUTH, defs, OracleConfig(seed=3), user_key="u1")
        parsed = parse_annotation(out, defs)
        assert parsed.as_map()["SEX"].category == TRUTH["SEX"]
        assert parsed.as_map()["AGE"].category == TRUTH["AGE"]
        assert parsed.warnings == ()

    def test_point_mass_speculation(self, defs):
        cfg = OracleConfig(default_speculation=90, seed=0)
        out = oracle_annotate(TRUTH, defs, cfg, user_key="u1")
        assert out.count("**speculation: 90**") == len(defs)

    def test_missing_truth(self, defs):
        with pytest.raises(MissingTruth):
            oracle_annotate({"SEX": TRUTH["SEX"]}, defs, OracleConfig(), user_key="u")

    def test_deterministic_under_seed(self, defs):
        cfg = OracleConfig(
            confusion={"AGE": {"18-25": {"18-25": 0.5, "26-64": 0.5}}},
            speculation_mean={"AGE": 40},
            speculation_spread={"AGE": 20},
            seed=11,
        )
        a = oracle_annotate(TRUTH, defs, cfg, user_key="u1")
        b = oracle_annotate(TRUTH, defs, cfg, user_key="u1")
        assert a == b
        c = oracle_annotate(TRUTH, defs, cfg, user_key="u2")
        assert isinstance(c, str)  # different user may differ, must not error

    def test_confusion_frequency_matches_matrix(self, age_feature):
        # 10,000 independent draws: reported frequency within 3-sigma binomial
        p = 0.5
        cfg = OracleConfig(
            confusion={"AGE": {"18-25": {"18-25": p, "26-64": 1 - p}}}, seed=5
        )
        hits = 0
        n = 10_000
        for k in range(n):
            out = oracle_annotate({"AGE": "18-25"}, [age_feature], cfg, user_key=f"u{k}")
            parsed = parse_annotation(out, [age_feature])
            hits += parsed.entries[0].category == "18-25"
        sigma = (p * (1 - p) / n) ** 0.5
        assert abs(hits / n - p) < 3 * sigma + 1e-12

    def test_confusion_rows_validated(self):
        with pytest.raises(Exception):
            OracleConfig(confusion={"AGE": {"18-25": {"18-25": 0.7, "26-64": 0.2}}})

    def test_structural_validity_over_random_configs(self, defs):
        rng = np.random.default_rng(0)
        cats_sex = [c for _, c in defs[0].options]
        cats_age = [c for _, c in defs[1].options]
        for trial in range(1000):
            row_sex = rng.dirichlet(np.ones(len(cats_sex)))
            row_age = rng.dirichlet(np.ones(len(cats_age)))
            cfg = OracleConfig(
                confusion={
                    "SEX": {cats_sex[0].lower(): dict(zip(map(str.lower, cats_sex), row_sex))},
                    "AGE": {cats_age[0].lower(): dict(zip(map(str.lower, cats_age), row_age))},
                },
                speculation_mean={"SEX": float(rng.uniform(0, 100))},
                speculation_spread={"SEX": float(rng.uniform(0, 50))},
                seed=int(rng.integers(0, 2**31)),
            )
            truth = {"SEX": cats_sex[0], "AGE": cats_age[0]}
            out = oracle_annotate(truth, defs, cfg, user_key=f"t{trial}")
            parsed = parse_annotation(out, defs)  # must never raise
            assert len(parsed.entries) == 2


class TestMockOracleComplete:
    def _mould(self):
        user = make_user(
            "simuser",
            location="Texas",
            description="age: 18-25; sex: masculine sex - male",
        )
        return assemble_mould(user, [make_tweet("t1", uid="simuser")])

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            MockOracle().complete("")

    def test_rejection_rate_one_refuses(self, defs):
        oracle = MockOracle(cfg=OracleConfig(rejection_rate=1.0))
        prompt = build_prompt("", self._mould(), defs)
        with pytest.raises(AnnotatorRefused):
            oracle.complete(prompt)

    def test_parse_mode_matches_truth_table_mode(self, defs):
        prompt = build_prompt("", self._mould(), defs)
        parse_mode = MockOracle(cfg=OracleConfig(seed=9))
        table_mode = MockOracle(
            cfg=OracleConfig(seed=9),
            truth_attrs={"simuser": {"AGE": "18-25", "SEX": "masculine sex - male"}},
        )
        assert parse_mode.complete(prompt) == table_mode.complete(prompt)

    def test_identity_round_trip_through_prompt(self, defs):
        oracle = MockOracle(cfg=OracleConfig(seed=0))
        prompt = build_prompt("", self._mould(), defs)
        parsed = parse_annotation(oracle.complete(prompt), defs)
        assert parsed.as_map()["AGE"].category == "18-25"
        assert parsed.as_map()["SEX"].category == "masculine sex - male"


class TestRetryingComplete:
    def test_recovers_after_transient_failures(self):
        backend = ScriptedBackend(
            [AnnotatorTransportError("boom"), AnnotatorRateLimited(0.0), "ok"]
        )
        waited = []
        out = retrying_complete(backend, "p", max_attempts=3, backoff=0.01, sleep=waited.append)
        assert out == "ok"
        assert len(waited) == 2

    def test_refusal_is_terminal(self):
        backend = ScriptedBackend([AnnotatorRefused("no"), "never reached"])
        with pytest.raises(AnnotatorRefused):
            retrying_complete(backend, "p", max_attempts=5, sleep=lambda s: None)
        assert len(backend.calls) == 1

    def test_exhausted_after_max_attempts(self):
        backend = ScriptedBackend(
            [AnnotatorTransportError("a"), AnnotatorTransportError("b")]
        )
        with pytest.raises(Exhausted):
            retrying_complete(backend, "p", max_attempts=2, sleep=lambda s: None)

    def test_backoff_doubles(self):
        backend = ScriptedBackend(
            [AnnotatorTransportError("a"), AnnotatorTransportError("b"), "ok"]
        )
        waits = []
        retrying_complete(backend, "p", max_attempts=3, backoff=1.0, sleep=waits.append)
        assert waits == [1.0, 2.0]
