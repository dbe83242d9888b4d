"""The poll-time exclusion cascade and timeline augmentation.

Order is part of the contract: temporal -> null-geography -> entity ->
geography -> quota -> augment. The mechanical filters act on pool metadata;
the intelligent ones delegate a fixed prompt to the annotator backend and
parse its reply strictly, so backend drift surfaces as errors instead of
silent drops.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .annotator import AnnotatorBackend, AnnotatorRefused
from .domain import (
    FeatureDef,
    Mould,
    QueryKind,
    QuotaState,
    SchemaMismatch,
    SiliconResponse,
    assemble_mould,
    lookup_cell,
    normalize_category,
)
from .pool import PlatformClient, SubjectPool
from .prompts import (
    ENTITY_FILTER_PROMPT,
    GEO_FILTER_PROMPT,
    GEO_REJECTION_REPLY,
    build_prompt,
    parse_annotation,
    render_mould,
)


class FilterError(Exception):
    pass


class UnparseableReply(FilterError):
    def __init__(self, stage: str, reply: str):
        super().__init__(f"{stage}: unparseable reply {reply!r}")
        self.stage = stage
        self.reply = reply


class AlreadyAugmented(FilterError):
    pass


class ProcessingLedger:
    """Last-processed date per user; dates only move forward."""

    def __init__(self, entries: Optional[Mapping[str, date]] = None):
        self._entries: dict[str, date] = dict(entries or {})

    def last_processed(self, user_id: str) -> Optional[date]:
        return self._entries.get(user_id)

    def record(self, user_id: str, processed_on: date) -> None:
        prev = self._entries.get(user_id)
        if prev is None or processed_on > prev:
            self._entries[user_id] = processed_on

    def __len__(self) -> int:
        return len(self._entries)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user_id", "last_processed_date"])
            for uid in sorted(self._entries):
                writer.writerow([uid, self._entries[uid].isoformat()])

    @classmethod
    def load_csv(cls, path: str | Path) -> "ProcessingLedger":
        entries: dict[str, date] = {}
        with Path(path).open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                entries[row[0]] = date.fromisoformat(row[1])
        return cls(entries)


@dataclass(frozen=True)
class GeoResult:
    level1_member: bool
    level2: Optional[str] = None

    def __post_init__(self):
        if self.level1_member != (self.level2 is not None):
            raise FilterError("level2 must be present iff level1_member")

    @property
    def stateless(self) -> bool:
        return self.level1_member and self.level2 == "USA"


US_STATE_NAMES = (
    "Alabama", "Alaska", "Arizona", "Arkansas", "California", "Colorado",
    "Connecticut", "Delaware", "District of Columbia", "Florida", "Georgia",
    "Hawaii", "Idaho", "Illinois", "Indiana", "Iowa", "Kansas", "Kentucky",
    "Louisiana", "Maine", "Maryland", "Massachusetts", "Michigan", "Minnesota",
    "Mississippi", "Missouri", "Montana", "Nebraska", "Nevada", "New Hampshire",
    "New Jersey", "New Mexico", "New York", "North Carolina", "North Dakota",
    "Ohio", "Oklahoma", "Oregon", "Pennsylvania", "Rhode Island",
    "South Carolina", "South Dakota", "Tennessee", "Texas", "Utah", "Vermont",
    "Virginia", "Washington", "West Virginia", "Wisconsin", "Wyoming",
)

_CANONICAL_STATES = {normalize_category(s): s for s in US_STATE_NAMES}


def temporal_filter(
    pool: SubjectPool, ledger: ProcessingLedger, window_days: int
) -> SubjectPool:
    """Drop users processed within the window (closed: exactly window_days ago
    still counts as recent)."""
    cutoff = pool.pool_date - timedelta(days=window_days)
    entries = tuple(
        (user, tweets)
        for user, tweets in pool.entries
        if (last := ledger.last_processed(user.user_id)) is None or last < cutoff
    )
    return SubjectPool(entries=entries, pool_date=pool.pool_date, plan=pool.plan)


def null_geography_filter(pool: SubjectPool) -> SubjectPool:
    entries = tuple(
        (user, tweets)
        for user, tweets in pool.entries
        if user.location_raw is not None and user.location_raw.strip()
    )
    return SubjectPool(entries=entries, pool_date=pool.pool_date, plan=pool.plan)


class EntityKind:
    PERSON = "Person"
    OTHER = "Other"


def entity_filter(mould: Mould, annotator: AnnotatorBackend) -> str:
    """Ask whether the account is a real person; replies must be P or O."""
    prompt = render_mould(mould) + "\n\n" + ENTITY_FILTER_PROMPT
    reply = annotator.complete(prompt).strip().strip('"')
    if reply == "P":
        return EntityKind.PERSON
    if reply == "O":
        return EntityKind.OTHER
    raise UnparseableReply("entity_filter", reply)


def geographic_filter(
    mould: Mould,
    annotator: AnnotatorBackend,
    known_areas: Sequence[str] = US_STATE_NAMES,
) -> GeoResult:
    """Level-1 membership plus the level-2 area, in one reply.

    Recognized replies: a canonical area name (case-insensitive), "USA" for
    members without a state, or the rejection sentence. Anything else raises,
    making annotator drift visible. The area table defaults to the US states
    plus the District of Columbia but is configuration, not code.
    """
    canonical = (
        _CANONICAL_STATES
        if known_areas is US_STATE_NAMES
        else {normalize_category(a): a for a in known_areas}
    )
    prompt = render_mould(mould) + "\n\n" + GEO_FILTER_PROMPT
    reply = annotator.complete(prompt).strip().strip('"').rstrip(".")
    lowered = normalize_category(reply)
    if lowered == normalize_category(GEO_REJECTION_REPLY):
        return GeoResult(level1_member=False, level2=None)
    if lowered == "usa":
        return GeoResult(level1_member=True, level2="USA")
    if lowered in canonical:
        return GeoResult(level1_member=True, level2=canonical[lowered])
    raise UnparseableReply("geographic_filter", reply)


@dataclass(frozen=True)
class QuotaDecision:
    status: str  # "accepted" | "rejected" | "no_cell"
    cell_id: Optional[int] = None

    ACCEPTED = "accepted"
    REJECTED = "rejected"
    NO_CELL = "no_cell"


def quota_filter(attrs: Mapping[str, str], quotas: QuotaState) -> QuotaDecision:
    """Accept iff the user's cell exists and has headroom; the counter
    increment is atomic with the check."""
    cell_id = lookup_cell(quotas.frame, attrs)
    if cell_id is None:
        return QuotaDecision(QuotaDecision.NO_CELL)
    if quotas.try_acquire(cell_id):
        return QuotaDecision(QuotaDecision.ACCEPTED, cell_id)
    return QuotaDecision(QuotaDecision.REJECTED, cell_id)


def timeline_depth(kind: QueryKind, m_politics: int, lam: float) -> int:
    """Trending captures get a deeper timeline: round(lambda * m)."""
    if lam <= 1:
        raise FilterError(f"lambda must exceed 1, got {lam}")
    if m_politics < 1:
        raise FilterError(f"m_politics must be >= 1, got {m_politics}")
    if kind is QueryKind.POLITICAL:
        return m_politics
    return int(round(lam * m_politics))


def augment_mould(mould: Mould, client: PlatformClient, depth: int) -> Mould:
    """Merge the user's recent timeline into the mould (dedup by tweet id)."""
    if mould.augmented:
        raise AlreadyAugmented(f"user {mould.user.user_id} already augmented")
    timeline = client.user_timeline(mould.user.user_id, depth)
    merged = assemble_mould(mould.user, list(mould.tweets) + list(timeline))
    return Mould(user=merged.user, tweets=merged.tweets, augmented=True)


# ---------------------------------------------------------------------------
# Audit log: one JSONL record per (user, stage) decision.
# ---------------------------------------------------------------------------


@dataclass
class FilterAudit:
    records: list[dict] = field(default_factory=list)

    def log(self, user_id: str, stage: str, decision: str, reason: str = "") -> None:
        self.records.append(
            {"user_id": user_id, "stage": stage, "decision": decision, "reason": reason}
        )

    def save_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def stages_for(self, user_id: str) -> list[str]:
        return [r["stage"] for r in self.records if r["user_id"] == user_id]


# ---------------------------------------------------------------------------
# Full cascade orchestration
# ---------------------------------------------------------------------------


@dataclass
class PollSettings:
    window_days: int = 30
    m_politics: int = 20
    lam: float = 2.0
    include_speculation: bool = True
    randomize_order: bool = False
    seed: int = 0
    threads: int = 1
    poll_id: str = "poll"
    known_areas: Sequence[str] = US_STATE_NAMES


@dataclass
class PollOutcome:
    responses: list[SiliconResponse]
    audit: FilterAudit
    quotas: QuotaState
    refusals: int
    geo_by_user: dict[str, GeoResult]

    def quota_report(self) -> list[dict]:
        rows = []
        for cell in self.quotas.frame.cells:
            cid = cell.cell_id
            rows.append(
                {
                    "cell_id": cid,
                    "quota": self.quotas.quota.get(cid, 0),
                    "filled": self.quotas.counter.get(cid, 0),
                }
            )
        return rows


def _screen_user(
    user,
    tweets,
    annotator: AnnotatorBackend,
    quota_defs: Sequence[FeatureDef],
    settings: PollSettings,
):
    """Pre-quota stages for one user: entity, geography, quota attributes.

    Pure with respect to shared state, so it can run concurrently across
    users; quota decisions are applied afterwards in pool order.
    """
    mould = assemble_mould(user, list(tweets))
    entity = entity_filter(mould, annotator)
    if entity != EntityKind.PERSON:
        return mould, entity, None, None
    geo = geographic_filter(mould, annotator, known_areas=settings.known_areas)
    if not geo.level1_member:
        return mould, entity, geo, None
    # quota attributes: no background, base mould only
    prompt = build_prompt(
        "",
        mould,
        list(quota_defs),
        randomize_order=settings.randomize_order,
        include_speculation=settings.include_speculation,
        seed=settings.seed,
    )
    try:
        parsed = parse_annotation(annotator.complete(prompt), quota_defs)
    except AnnotatorRefused:
        return mould, entity, geo, "refused"
    return mould, entity, geo, parsed


def poll_users(
    pool: SubjectPool,
    ledger: ProcessingLedger,
    quotas: QuotaState,
    annotator: AnnotatorBackend,
    client: PlatformClient,
    features: Sequence[FeatureDef],
    settings: PollSettings,
) -> PollOutcome:
    """Run the cascade over a pool and extract full responses for survivors.

    `features` is the complete extraction set; the quota stage re-uses its
    independent members that match the quota frame schema.
    """
    audit = FilterAudit()
    refusals = 0
    geo_by_user: dict[str, GeoResult] = {}
    responses: list[SiliconResponse] = []

    survivors = temporal_filter(pool, ledger, settings.window_days)
    dropped = {u.user_id for u, _ in pool.entries} - {
        u.user_id for u, _ in survivors.entries
    }
    for uid in (u.user_id for u, _ in pool.entries):
        if uid in dropped:
            audit.log(uid, "temporal", "drop", f"processed within {settings.window_days}d")
        else:
            audit.log(uid, "temporal", "pass")
    after_geo = null_geography_filter(survivors)
    gone = {u.user_id for u, _ in survivors.entries} - {
        u.user_id for u, _ in after_geo.entries
    }
    for uid in (u.user_id for u, _ in survivors.entries):
        if uid in gone:
            audit.log(uid, "null_geography", "drop", "no self-reported location")
        else:
            audit.log(uid, "null_geography", "pass")

    quota_titles = {normalize_category(t) for t in quotas.frame.attribute_schema}
    quota_defs = [f for f in features if normalize_category(f.title) in quota_titles]
    if {normalize_category(f.title) for f in quota_defs} != quota_titles:
        raise SchemaMismatch(
            "extraction features do not cover the quota frame schema"
        )

    entries = list(after_geo.entries)
    if settings.threads > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as ex:
            screened = list(
                ex.map(
                    lambda e: _screen_user(e[0], e[1], annotator, quota_defs, settings),
                    entries,
                )
            )
    else:
        screened = [
            _screen_user(u, t, annotator, quota_defs, settings) for u, t in entries
        ]

    for (user, _tweets), (mould, entity, geo, parsed) in zip(entries, screened):
        uid = user.user_id
        if entity != EntityKind.PERSON:
            audit.log(uid, "entity", "drop", "not a person account")
            continue
        audit.log(uid, "entity", "pass")
        assert geo is not None
        if not geo.level1_member:
            audit.log(uid, "geography", "drop", "outside level-1 geography")
            continue
        audit.log(uid, "geography", "pass", geo.level2 or "")
        geo_by_user[uid] = geo
        if parsed == "refused":
            refusals += 1
            audit.log(uid, "quota", "drop", "annotator refused")
            continue
        attrs = {fv.title: fv.category for fv in parsed.entries}
        decision = quota_filter(
            {t: attrs[f.title] for t, f in zip_titles(quota_defs, quotas)}, quotas
        )
        if decision.status != QuotaDecision.ACCEPTED:
            audit.log(uid, "quota", "drop", decision.status)
            continue
        audit.log(uid, "quota", "accept", f"cell {decision.cell_id}")

        depth = timeline_depth(
            user.capture_query_kind, settings.m_politics, settings.lam
        )
        try:
            full_mould = augment_mould(mould, client, depth)
            audit.log(uid, "augment", "ok", f"depth {depth}")
        except Exception as exc:
            audit.log(uid, "augment", "partial", str(exc))
            full_mould = mould
        prompt = build_prompt(
            "",
            full_mould,
            list(features),
            randomize_order=settings.randomize_order,
            include_speculation=settings.include_speculation,
            seed=settings.seed,
        )
        try:
            parsed_full = parse_annotation(annotator.complete(prompt), features)
        except AnnotatorRefused:
            refusals += 1
            audit.log(uid, "extraction", "drop", "annotator refused")
            continue
        audit.log(uid, "extraction", "ok")
        ledger.record(uid, pool.pool_date)
        responses.append(
            SiliconResponse(
                user_id=uid,
                poll_id=settings.poll_id,
                fieldwork_date=pool.pool_date,
                values=parsed_full.as_map(),
            )
        )
    return PollOutcome(
        responses=responses,
        audit=audit,
        quotas=quotas,
        refusals=refusals,
        geo_by_user=geo_by_user,
    )


def zip_titles(quota_defs: Sequence[FeatureDef], quotas: QuotaState):
    """Pair quota-frame schema titles with their matching feature defs."""
    by_norm = {normalize_category(f.title): f for f in quota_defs}
    return [(t, by_norm[normalize_category(t)]) for t in quotas.frame.attribute_schema]


# ---------------------------------------------------------------------------
# Response persistence
# ---------------------------------------------------------------------------


def save_responses_jsonl(
    responses: Sequence[SiliconResponse],
    geo_by_user: Mapping[str, GeoResult],
    path: str | Path,
) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in responses:
            geo = geo_by_user.get(r.user_id)
            obj = {
                "user_id": r.user_id,
                "poll_id": r.poll_id,
                "fieldwork_date": r.fieldwork_date.isoformat(),
                "state": (geo.level2 if geo else None),
                "values": {
                    t: {
                        "symbol": fv.symbol,
                        "category": fv.category,
                        "explanation": fv.explanation,
                        "speculation": fv.speculation,
                    }
                    for t, fv in sorted(r.values.items())
                },
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_responses_jsonl(
    path: str | Path,
) -> tuple[list[SiliconResponse], dict[str, Optional[str]]]:
    from .domain import FeatureValue

    responses = []
    states: dict[str, Optional[str]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            values = {
                t: FeatureValue(
                    title=t,
                    symbol=v["symbol"],
                    category=v["category"],
                    explanation=v.get("explanation", ""),
                    speculation=v["speculation"],
                )
                for t, v in obj["values"].items()
            }
            responses.append(
                SiliconResponse(
                    user_id=obj["user_id"],
                    poll_id=obj["poll_id"],
                    fieldwork_date=date.fromisoformat(obj["fieldwork_date"]),
                    values=values,
                )
            )
            states[obj["user_id"]] = obj.get("state")
    return responses, states
