from datetime import datetime, timedelta, timezone

import pytest

from tracepoll.domain import (
    FeatureDef,
    FeatureKind,
    QueryKind,
    QuotaState,
    StratCell,
    StratFrame,
    TweetRecord,
    UserRecord,
)

T0 = datetime(2024, 10, 20, 12, 0, 0, tzinfo=timezone.utc)


def make_user(uid="u1", location="Austin, TX", kind=QueryKind.POLITICAL, **kw):
    defaults = dict(
        user_id=uid,
        username=uid,
        display_name=f"User {uid}",
        description="likes posting",
        location_raw=location,
        profile_image_ref=None,
        captured_at=T0,
        capture_query_kind=kind,
    )
    defaults.update(kw)
    return UserRecord(**defaults)


def make_tweet(tid, uid="u1", days_ago=0, text="hello world"):
    return TweetRecord(
        tweet_id=tid,
        author_id=uid,
        created_at=T0 - timedelta(days=days_ago),
        text=text,
    )


# snapshot of a partially filled quota table, shared across suites
QUOTA_ROWS = [
    (1, "male", "65 or older", "up to 25k", "black", "D", 2, 0),
    (2, "female", "25 to 34", "between 25k and 50k", "white", "D", 3, 3),
    (3, "male", "35 to 44", "between 75k and 100k", "hispanic", "D", 2, 2),
    (4, "female", "45 to 54", "between 75k and 100k", "white", "D", 6, 6),
    (5, "female", "35 to 44", "between 25k and 50k", "black", "D", 1, 1),
    (430, "female", "25 to 34", "between 25k and 50k", "asian", "stayed home", 1, 0),
    (431, "female", "65 or older", "between 50k and 75k", "hispanic", "stayed home", 1, 0),
    (432, "female", "18 to 24", "more than 100k", "asian", "stayed home", 1, 0),
    (433, "male", "18 to 24", "between 50k and 75k", "native", "stayed home", 1, 0),
    (434, "female", "55 to 64", "between 50k and 75k", "asian", "stayed home", 1, 0),
    (435, "male", "18 to 24", "between 50k and 75k", "asian", "stayed home", 1, 0),
]

QUOTA_SCHEMA = ("sex", "age", "income", "race", "vote2020")


@pytest.fixture
def quota_frame() -> StratFrame:
    cells = tuple(
        StratCell(
            cell_id=cid,
            attributes=dict(zip(QUOTA_SCHEMA, attrs)),
            weight=float(quota),
        )
        for cid, *attrs, quota, _counter in QUOTA_ROWS
    )
    return StratFrame(cells=cells, attribute_schema=QUOTA_SCHEMA)


@pytest.fixture
def quota_state(quota_frame) -> QuotaState:
    state = QuotaState(
        frame=quota_frame,
        quota={cid: quota for cid, *_, quota, _c in QUOTA_ROWS},
    )
    for cid, *_, counter in QUOTA_ROWS:
        for _ in range(counter):
            state.try_acquire(cid)
    return state


@pytest.fixture
def sex_feature():
    return FeatureDef(
        title="SEX",
        options=(("S1", "masculine sex - male"), ("S2", "feminine sex - female")),
        kind=FeatureKind.INDEPENDENT,
    )


@pytest.fixture
def age_feature():
    return FeatureDef(
        title="AGE",
        options=(("A1", "18-25"), ("A2", "26-64"), ("A3", "65+")),
        kind=FeatureKind.INDEPENDENT,
    )


@pytest.fixture
def vote_feature():
    return FeatureDef(
        title="VOTE",
        options=(("V1", "republican"), ("V2", "democrat"), ("V3", "other")),
        kind=FeatureKind.DEPENDENT,
    )
