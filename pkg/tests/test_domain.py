import pytest
from hypothesis import given, strategies as st

from tracepoll.domain import (
    ForeignTweet,
    QuotaState,
    SchemaMismatch,
    StratCell,
    StratFrame,
    assemble_mould,
    load_frame_csv,
    lookup_cell,
    marginalize_frame,
    normalize_category,
    save_frame_csv,
    validate_frame,
)

from conftest import QUOTA_ROWS, QUOTA_SCHEMA, make_tweet, make_user


class TestAssembleMould:
    def test_empty_timeline(self):
        u = make_user()
        m = assemble_mould(u, [])
        assert m.tweets == () and m.augmented is False

    def test_orders_newest_first(self):
        u = make_user()
        t_old = make_tweet("t1", days_ago=2)
        t_new = make_tweet("t2", days_ago=1)
        m = assemble_mould(u, [t_old, t_new])
        assert [t.tweet_id for t in m.tweets] == ["t2", "t1"]

    def test_dedup_by_id(self):
        u = make_user()
        t = make_tweet("t1")
        m = assemble_mould(u, [t, t])
        assert len(m.tweets) == 1

    def test_foreign_tweet_rejected(self):
        u = make_user("u1")
        with pytest.raises(ForeignTweet):
            assemble_mould(u, [make_tweet("t1", uid="someone-else")])

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 400)), max_size=30))
    def test_idempotent(self, raw):
        u = make_user()
        tweets = [
            make_tweet(f"t{tid}", days_ago=age % 100, text=f"post {tid}")
            for tid, age in raw
        ]
        once = assemble_mould(u, tweets)
        twice = assemble_mould(once.user, list(once.tweets))
        assert once == twice


class TestLookupCell:
    def test_quota_table_row_one(self, quota_frame):
        attrs = dict(zip(QUOTA_SCHEMA, ("male", "65 or older", "up to 25k", "black", "D")))
        assert lookup_cell(quota_frame, attrs) == 1

    def test_match_is_case_insensitive(self, quota_frame):
        attrs = dict(zip(QUOTA_SCHEMA, ("Male", " 65 OR OLDER ", "up to 25k", "BLACK", "d")))
        assert lookup_cell(quota_frame, attrs) == 1

    def test_unknown_combination(self, quota_frame):
        attrs = dict(
            zip(QUOTA_SCHEMA, ("male", "65 or older", "up to 25k", "black", "martian"))
        )
        assert lookup_cell(quota_frame, attrs) is None

    def test_missing_title_raises(self, quota_frame):
        attrs = dict(zip(QUOTA_SCHEMA[:-1], ("male", "65 or older", "up to 25k", "black")))
        with pytest.raises(SchemaMismatch):
            lookup_cell(quota_frame, attrs)

    def test_partial_injection(self, quota_frame):
        # distinct attribute maps never collide on a cell id
        seen = {}
        for cid, *attrs, _q, _c in QUOTA_ROWS:
            key = tuple(normalize_category(a) for a in attrs)
            got = lookup_cell(quota_frame, dict(zip(QUOTA_SCHEMA, attrs)))
            assert got == cid
            assert key not in seen or seen[key] == got
            seen[key] = got


class TestValidateFrame:
    def _frame(self, cells):
        return StratFrame(cells=tuple(cells), attribute_schema=("a", "b"))

    def test_well_formed(self):
        frame = self._frame(
            [
                StratCell(1, {"a": "x", "b": "y"}, 1.0),
                StratCell(2, {"a": "x", "b": "z"}, 2.0),
            ]
        )
        assert validate_frame(frame) == []

    def test_duplicate_cell(self):
        frame = self._frame(
            [
                StratCell(1, {"a": "x", "b": "y"}, 1.0),
                StratCell(2, {"a": "X ", "b": "y"}, 2.0),
            ]
        )
        assert [v.code for v in validate_frame(frame)] == ["DuplicateCell"]

    def test_negative_weight(self):
        frame = self._frame([StratCell(1, {"a": "x", "b": "y"}, -1.0)])
        codes = [v.code for v in validate_frame(frame)]
        assert "NegativeWeight" in codes


class TestQuotaState:
    @given(st.lists(st.sampled_from([cid for cid, *_ in QUOTA_ROWS]), max_size=200))
    def test_counter_never_exceeds_quota(self, attempts):
        quota = {cid: q for cid, *_, q, _c in QUOTA_ROWS}
        cells = tuple(
            StratCell(cid, dict(zip(QUOTA_SCHEMA, attrs)), 1.0)
            for cid, *attrs, _q, _c in QUOTA_ROWS
        )
        state = QuotaState(
            frame=StratFrame(cells=cells, attribute_schema=QUOTA_SCHEMA), quota=quota
        )
        for cid in attempts:
            state.try_acquire(cid)
            assert state.counter[cid] <= quota[cid]

    def test_acquire_rejects_at_quota(self):
        frame = StratFrame(
            cells=(StratCell(1, {"a": "x"}, 1.0),), attribute_schema=("a",)
        )
        state = QuotaState(frame=frame, quota={1: 2})
        assert state.try_acquire(1) and state.try_acquire(1)
        assert not state.try_acquire(1)
        assert state.counter[1] == 2


class TestFrameCsv:
    def test_round_trip_with_quota(self, quota_frame, tmp_path):
        quota = {cid: q for cid, *_, q, _c in QUOTA_ROWS}
        path = tmp_path / "frame.csv"
        save_frame_csv(quota_frame, path, quota=quota)
        loaded, loaded_quota = load_frame_csv(path)
        assert loaded.attribute_schema == quota_frame.attribute_schema
        assert loaded_quota == quota
        assert [c.attributes for c in loaded.cells] == [
            c.attributes for c in quota_frame.cells
        ]
        assert [c.weight for c in loaded.cells] == [c.weight for c in quota_frame.cells]

    def test_round_trip_is_byte_stable(self, quota_frame, tmp_path):
        p1, p2 = tmp_path / "f1.csv", tmp_path / "f2.csv"
        save_frame_csv(quota_frame, p1)
        frame2, _ = load_frame_csv(p1)
        save_frame_csv(frame2, p2)
        assert p1.read_bytes() == p2.read_bytes()


def test_marginalize_frame_conserves_weight(quota_frame):
    reduced = marginalize_frame(quota_frame, ["sex", "vote2020"])
    assert reduced.attribute_schema == ("sex", "vote2020")
    assert reduced.total_weight() == pytest.approx(quota_frame.total_weight())
    # male/D appears in rows 1 and 3 -> weights 2 + 2
    cid = lookup_cell(reduced, {"sex": "male", "vote2020": "D"})
    cell = next(c for c in reduced.cells if c.cell_id == cid)
    assert cell.weight == 4.0
