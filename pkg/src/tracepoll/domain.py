"""Core data types shared by every pipeline stage.

Immutable value objects for users, tweets, survey features and stratification
frames, plus the small assembly/lookup helpers the rest of the package builds
on. Everything here is safe to share across threads except QuotaState, which
owns a lock for its check-and-increment counter.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from datetime import date, datetime
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence


class DomainError(Exception):
    """Base class for domain-level contract violations."""


class ForeignTweet(DomainError):
    """A tweet attributed to a user it was not authored by."""


class SchemaMismatch(DomainError):
    """An attribute map does not cover a frame's schema."""


class QueryKind(Enum):
    POLITICAL = "political"
    TRENDING = "trending"


def normalize_category(value: str) -> str:
    """Canonical form used for all category matching: lowercase, trimmed."""
    return value.strip().lower()


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    username: str
    display_name: str
    description: str
    location_raw: Optional[str]
    profile_image_ref: Optional[str]
    captured_at: datetime
    capture_query_kind: QueryKind
    capture_topic: Optional[str] = None  # set for trending captures

    def __post_init__(self):
        if not self.user_id:
            raise DomainError("user_id must be non-empty")


@dataclass(frozen=True)
class TweetRecord:
    tweet_id: str
    author_id: str
    created_at: datetime
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise DomainError(f"tweet {self.tweet_id}: empty text")


@dataclass(frozen=True)
class Mould:
    """A user's digital trace: profile plus tweets, newest first."""

    user: UserRecord
    tweets: tuple[TweetRecord, ...]
    augmented: bool = False


def assemble_mould(user: UserRecord, tweets: Sequence[TweetRecord]) -> Mould:
    """Build a Mould: tweets deduplicated by id and sorted newest-first.

    Raises ForeignTweet if any tweet was not authored by `user`.
    """
    for t in tweets:
        if t.author_id != user.user_id:
            raise ForeignTweet(
                f"tweet {t.tweet_id} authored by {t.author_id}, not {user.user_id}"
            )
    seen: dict[str, TweetRecord] = {}
    for t in tweets:
        seen.setdefault(t.tweet_id, t)
    ordered = sorted(
        seen.values(), key=lambda t: (t.created_at, t.tweet_id), reverse=True
    )
    return Mould(user=user, tweets=tuple(ordered), augmented=False)


class FeatureKind(Enum):
    INDEPENDENT = "independent"  # population distribution known (weightable)
    DEPENDENT = "dependent"


@dataclass(frozen=True)
class FeatureDef:
    """A survey question: a title and a symbol-keyed choice set."""

    title: str
    options: tuple[tuple[str, str], ...]  # (symbol, category)
    kind: FeatureKind = FeatureKind.INDEPENDENT

    def __post_init__(self):
        if not self.title:
            raise DomainError("feature title must be non-empty")
        if len(self.options) < 2:
            raise DomainError(f"feature {self.title}: needs >= 2 options")
        symbols = [s for s, _ in self.options]
        if len(set(symbols)) != len(symbols):
            raise DomainError(f"feature {self.title}: duplicate symbols")

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.options)

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(c for _, c in self.options)

    def category_for(self, symbol: str) -> str:
        for s, c in self.options:
            if s == symbol:
                return c
        raise KeyError(symbol)


def feature_def_to_dict(f: FeatureDef) -> dict:
    return {
        "title": f.title,
        "options": [[s, c] for s, c in f.options],
        "kind": f.kind.value,
    }


def feature_def_from_dict(obj: Mapping) -> FeatureDef:
    return FeatureDef(
        title=obj["title"],
        options=tuple((s, c) for s, c in obj["options"]),
        kind=FeatureKind(obj.get("kind", "independent")),
    )


@dataclass(frozen=True)
class FeatureValue:
    """One annotated answer for a feature."""

    title: str
    symbol: str
    category: str
    explanation: str
    speculation: int

    def __post_init__(self):
        if not 0 <= self.speculation <= 100:
            raise DomainError(
                f"{self.title}: speculation {self.speculation} outside [0, 100]"
            )


@dataclass(frozen=True)
class SiliconResponse:
    """The structured survey record produced for one polled user."""

    user_id: str
    poll_id: str
    fieldwork_date: date
    values: Mapping[str, FeatureValue]
    strategy_votes: Optional[Mapping[str, FeatureValue]] = None

    def __post_init__(self):
        for title, fv in self.values.items():
            if fv.title != title:
                raise DomainError(f"value keyed {title!r} carries title {fv.title!r}")


@dataclass(frozen=True)
class StratCell:
    cell_id: int
    attributes: Mapping[str, str]
    weight: float


@dataclass(frozen=True)
class StratFrame:
    """Population cells over a fixed attribute schema."""

    cells: tuple[StratCell, ...]
    attribute_schema: tuple[str, ...]

    def key_of(self, attrs: Mapping[str, str]) -> tuple[str, ...]:
        """Normalized schema-ordered key; raises SchemaMismatch on gaps."""
        try:
            return tuple(normalize_category(attrs[t]) for t in self.attribute_schema)
        except KeyError as exc:
            raise SchemaMismatch(f"attrs missing schema title {exc.args[0]!r}") from exc

    def index(self) -> dict[tuple[str, ...], int]:
        return {self.key_of(c.attributes): c.cell_id for c in self.cells}

    def total_weight(self) -> float:
        return sum(c.weight for c in self.cells)

    def categories_of(self, title: str) -> tuple[str, ...]:
        """Distinct normalized categories of one schema title, in first-seen order."""
        seen: dict[str, None] = {}
        for c in self.cells:
            seen.setdefault(normalize_category(c.attributes[title]), None)
        return tuple(seen)


def lookup_cell(frame: StratFrame, attrs: Mapping[str, str]) -> Optional[int]:
    """Return the cell_id matching `attrs` exactly on the schema, or None."""
    return frame.index().get(frame.key_of(attrs))


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str


def validate_frame(frame: StratFrame) -> list[Violation]:
    """Check frame invariants; violations are returned, never raised."""
    out: list[Violation] = []
    seen: dict[tuple[str, ...], int] = {}
    for c in frame.cells:
        if set(c.attributes) != set(frame.attribute_schema):
            out.append(
                Violation("SchemaMismatch", f"cell {c.cell_id}: attribute set differs")
            )
            continue
        key = frame.key_of(c.attributes)
        if key in seen:
            out.append(
                Violation(
                    "DuplicateCell",
                    f"cells {seen[key]} and {c.cell_id} share attributes {key}",
                )
            )
        else:
            seen[key] = c.cell_id
        if c.weight < 0:
            out.append(
                Violation("NegativeWeight", f"cell {c.cell_id}: weight {c.weight}")
            )
    if frame.cells and frame.total_weight() <= 0:
        out.append(Violation("ZeroTotalWeight", "frame total weight is not positive"))
    return out


def marginalize_frame(frame: StratFrame, titles: Sequence[str]) -> StratFrame:
    """Aggregate a frame onto a subset of its schema titles (weights summed).

    Cell ids are reassigned 1..C in first-seen order of the reduced keys.
    """
    for t in titles:
        if t not in frame.attribute_schema:
            raise SchemaMismatch(f"{t!r} not in frame schema")
    merged: dict[tuple[str, ...], tuple[dict, float]] = {}
    for c in frame.cells:
        key = tuple(normalize_category(c.attributes[t]) for t in titles)
        if key not in merged:
            merged[key] = ({t: c.attributes[t] for t in titles}, 0.0)
        attrs, w = merged[key]
        merged[key] = (attrs, w + c.weight)
    cells = tuple(
        StratCell(cell_id=i + 1, attributes=attrs, weight=w)
        for i, (attrs, w) in enumerate(merged.values())
    )
    return StratFrame(cells=cells, attribute_schema=tuple(titles))


class QuotaState:
    """Live quota counters over a frame; counter never exceeds quota.

    try_acquire is atomic: safe under concurrent acceptance attempts.
    """

    def __init__(self, frame: StratFrame, quota: Mapping[int, int]):
        self.frame = frame
        self.quota = dict(quota)
        self.counter = {cid: 0 for cid in self.quota}
        self._lock = threading.Lock()

    def try_acquire(self, cell_id: int) -> bool:
        with self._lock:
            if self.counter.get(cell_id, 0) < self.quota.get(cell_id, 0):
                self.counter[cell_id] = self.counter.get(cell_id, 0) + 1
                return True
            return False

    def target_total(self) -> int:
        return sum(self.quota.values())

    def filled_total(self) -> int:
        return sum(self.counter.values())


# ---------------------------------------------------------------------------
# Frame CSV round trip: one column per schema title plus cell_id, weight and
# (optionally) quota. UTF-8 with a header row.
# ---------------------------------------------------------------------------


def save_frame_csv(
    frame: StratFrame,
    path: str | Path,
    quota: Optional[Mapping[int, int]] = None,
) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        cols = ["cell_id", *frame.attribute_schema, "weight"]
        if quota is not None:
            cols.append("quota")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for c in frame.cells:
            row = [
                str(c.cell_id),
                *[c.attributes[t] for t in frame.attribute_schema],
                repr(float(c.weight)),
            ]
            if quota is not None:
                row.append(str(quota.get(c.cell_id, 0)))
            writer.writerow(row)


def load_frame_csv(path: str | Path) -> tuple[StratFrame, Optional[dict[int, int]]]:
    """Load a frame CSV; returns (frame, quota map or None)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "cell_id" not in header or "weight" not in header:
            raise DomainError(f"{path}: frame CSV needs cell_id and weight columns")
        has_quota = "quota" in header
        reserved = {"cell_id", "weight", "quota"}
        schema = tuple(h for h in header if h not in reserved)
        idx = {h: i for i, h in enumerate(header)}
        cells = []
        quota: dict[int, int] = {}
        for row in reader:
            cid = int(row[idx["cell_id"]])
            attrs = {t: row[idx[t]] for t in schema}
            cells.append(
                StratCell(cell_id=cid, attributes=attrs, weight=float(row[idx["weight"]]))
            )
            if has_quota:
                quota[cid] = int(row[idx["quota"]])
    frame = StratFrame(cells=tuple(cells), attribute_schema=schema)
    return frame, (quota if has_quota else None)
