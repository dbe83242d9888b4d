"""Subject-pool acquisition: weighted query plans run against a platform client.

One political query carries the full weight; trending-topic queries split it.
The client is an abstraction: tests and desk runs use the JSONL-fixture mock,
live adapters can implement the same two calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

from .domain import QueryKind, TweetRecord, UserRecord


class PoolError(Exception):
    pass


class EmptyTopics(PoolError):
    pass


class WeightTooSmall(PoolError):
    pass


class PlatformClientError(Exception):
    """Generic client-side failure."""


class RateLimited(PlatformClientError):
    def __init__(self, retry_after: float = 0.0):
        super().__init__(f"rate limited, retry after {retry_after}s")
        self.retry_after = retry_after


class NotFound(PlatformClientError):
    pass


@dataclass(frozen=True)
class SearchQuery:
    text: str
    weight: int  # max tweets fetched for this query
    kind: QueryKind
    topic: Optional[str] = None

    def __post_init__(self):
        if self.weight < 1:
            raise PoolError(f"query weight must be >= 1, got {self.weight}")
        if not self.text:
            raise PoolError("query text must be non-empty")


@dataclass(frozen=True)
class QueryPlan:
    queries: tuple[SearchQuery, ...]


def build_query_plan(
    political_terms: str, trending_topics: Sequence[str], omega: int
) -> QueryPlan:
    """One political query weighted omega, plus one query per trending topic
    weighted floor(omega / L). Remainder tweets are dropped, not redistributed.
    """
    if not trending_topics:
        raise EmptyTopics("at least one trending topic required")
    per_topic = omega // len(trending_topics)
    if per_topic < 1:
        raise WeightTooSmall(
            f"omega={omega} spread over {len(trending_topics)} topics gives weight 0"
        )
    queries = [SearchQuery(text=political_terms, weight=omega, kind=QueryKind.POLITICAL)]
    for topic in trending_topics:
        queries.append(
            SearchQuery(text=topic, weight=per_topic, kind=QueryKind.TRENDING, topic=topic)
        )
    return QueryPlan(queries=tuple(queries))


class PlatformClient(Protocol):
    """Minimal platform surface: recent search and user timelines.

    Implementations must respect the caps (query weight, timeline m), return
    tweets newest-first, and raise RateLimited distinctly from other failures.
    """

    def search_recent(self, query: SearchQuery) -> list[tuple[UserRecord, TweetRecord]]: ...

    def user_timeline(self, user_id: str, m: int) -> list[TweetRecord]: ...


@dataclass(frozen=True)
class SubjectPool:
    """A dated pool of captured users, each with their query-matching tweets."""

    entries: tuple[tuple[UserRecord, tuple[TweetRecord, ...]], ...]
    pool_date: date
    plan: Optional[QueryPlan] = None


class PoolExecutionError(PoolError):
    """A query failed; earlier queries' users are preserved on `partial`."""

    def __init__(self, query_index: int, partial: SubjectPool, cause: Exception):
        super().__init__(f"query {query_index} failed: {cause}")
        self.query_index = query_index
        self.partial = partial
        self.cause = cause


def run_pool(plan: QueryPlan, client: PlatformClient, pool_date: date) -> SubjectPool:
    """Execute every query, merging duplicate users across queries.

    The first capture's query kind wins (it drives timeline depth later);
    tweets are pooled and deduplicated per user.
    """
    users: dict[str, UserRecord] = {}
    tweets: dict[str, dict[str, TweetRecord]] = {}
    order: list[str] = []

    def snapshot() -> SubjectPool:
        entries = tuple(
            (
                users[uid],
                tuple(
                    sorted(
                        tweets[uid].values(),
                        key=lambda t: (t.created_at, t.tweet_id),
                        reverse=True,
                    )
                ),
            )
            for uid in order
        )
        return SubjectPool(entries=entries, pool_date=pool_date, plan=plan)

    for k, query in enumerate(plan.queries):
        try:
            pairs = client.search_recent(query)
        except Exception as exc:
            raise PoolExecutionError(k, snapshot(), exc) from exc
        for user, tweet in pairs:
            if user.user_id not in users:
                users[user.user_id] = user
                tweets[user.user_id] = {}
                order.append(user.user_id)
            tweets[user.user_id][tweet.tweet_id] = tweet
    return snapshot()


# ---------------------------------------------------------------------------
# JSONL persistence. One object per user with embedded tweets; mock-client
# fixtures share the schema plus a "query" key.
# ---------------------------------------------------------------------------

_TS = "%Y-%m-%dT%H:%M:%S%z"


def _dt_to_str(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime(_TS)


def _dt_from_str(s: str) -> datetime:
    return datetime.strptime(s, _TS).astimezone(timezone.utc)


def user_to_dict(user: UserRecord, tweets: Iterable[TweetRecord]) -> dict:
    return {
        "user_id": user.user_id,
        "username": user.username,
        "display_name": user.display_name,
        "description": user.description,
        "location_raw": user.location_raw,
        "profile_image_ref": user.profile_image_ref,
        "captured_at": _dt_to_str(user.captured_at),
        "capture_query_kind": user.capture_query_kind.value,
        "capture_topic": user.capture_topic,
        "tweets": [
            {
                "tweet_id": t.tweet_id,
                "author_id": t.author_id,
                "created_at": _dt_to_str(t.created_at),
                "text": t.text,
            }
            for t in tweets
        ],
    }


def user_from_dict(obj: dict) -> tuple[UserRecord, tuple[TweetRecord, ...]]:
    user = UserRecord(
        user_id=obj["user_id"],
        username=obj["username"],
        display_name=obj["display_name"],
        description=obj["description"],
        location_raw=obj.get("location_raw"),
        profile_image_ref=obj.get("profile_image_ref"),
        captured_at=_dt_from_str(obj["captured_at"]),
        capture_query_kind=QueryKind(obj["capture_query_kind"]),
        capture_topic=obj.get("capture_topic"),
    )
    tweets = tuple(
        TweetRecord(
            tweet_id=t["tweet_id"],
            author_id=t["author_id"],
            created_at=_dt_from_str(t["created_at"]),
            text=t["text"],
        )
        for t in obj["tweets"]
    )
    return user, tweets


def save_pool_jsonl(pool: SubjectPool, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for user, tweets in pool.entries:
            obj = user_to_dict(user, tweets)
            obj["pool_date"] = pool.pool_date.isoformat()
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_pool_jsonl(path: str | Path) -> SubjectPool:
    path = Path(path)
    entries = []
    pool_date: Optional[date] = None
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            user, tweets = user_from_dict(obj)
            entries.append((user, tweets))
            if pool_date is None and "pool_date" in obj:
                pool_date = date.fromisoformat(obj["pool_date"])
    if pool_date is None:
        raise PoolError(f"{path}: no pool_date recorded")
    return SubjectPool(entries=tuple(entries), pool_date=pool_date, plan=None)


class MockPlatformClient:
    """Replays JSONL fixtures keyed by query text.

    Search fixtures: user objects with a "query" key; returned in file order,
    truncated so at most `query.weight` tweets are fetched per query.
    Timelines: per-user full histories served newest-first, capped at m.
    """

    def __init__(
        self,
        search_fixtures: Sequence[dict],
        timelines: Optional[dict[str, Sequence[TweetRecord]]] = None,
        fail_queries: Optional[dict[str, Exception]] = None,
    ):
        self._fixtures = list(search_fixtures)
        self._timelines = {k: list(v) for k, v in (timelines or {}).items()}
        self._fail = dict(fail_queries or {})

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "MockPlatformClient":
        rows = []
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        timelines: dict[str, list[TweetRecord]] = {}
        for obj in rows:
            user, tweets = user_from_dict(obj)
            history = obj.get("timeline")
            if history is not None:
                timelines[user.user_id] = [
                    TweetRecord(
                        tweet_id=t["tweet_id"],
                        author_id=t["author_id"],
                        created_at=_dt_from_str(t["created_at"]),
                        text=t["text"],
                    )
                    for t in history
                ]
        return cls(rows, timelines)

    def search_recent(self, query: SearchQuery) -> list[tuple[UserRecord, TweetRecord]]:
        if query.text in self._fail:
            raise self._fail[query.text]
        out: list[tuple[UserRecord, TweetRecord]] = []
        budget = query.weight
        for obj in self._fixtures:
            if obj.get("query") != query.text:
                continue
            user, tweets = user_from_dict(obj)
            for t in tweets:
                if budget == 0:
                    return out
                out.append((user, t))
                budget -= 1
        return out

    def user_timeline(self, user_id: str, m: int) -> list[TweetRecord]:
        if m < 1:
            raise ValueError(f"timeline depth must be >= 1, got {m}")
        if user_id not in self._timelines:
            raise NotFound(f"unknown user {user_id}")
        history = sorted(
            self._timelines[user_id],
            key=lambda t: (t.created_at, t.tweet_id),
            reverse=True,
        )
        return history[:m]
