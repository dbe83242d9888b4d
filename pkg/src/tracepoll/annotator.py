"""Annotation backends: an abstract completion interface, a deterministic
oracle that simulates annotation from known user attributes, and a thin
environment-configured HTTP adapter for live use.

The oracle is the test-time stand-in for a live model: it answers the entity,
geography and feature-extraction prompts by reading the user trace embedded in
the prompt (or an explicit truth table), with configurable confusion and
speculation. Per-call randomness derives from (seed, user, title), so output
is independent of call order and concurrency.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .domain import FeatureDef, normalize_category
from .prompts import (
    ENTITY_FILTER_PROMPT,
    GEO_FILTER_PROMPT,
    GEO_REJECTION_REPLY,
    parse_feature_blocks,
)


class AnnotatorError(Exception):
    pass


class AnnotatorRateLimited(AnnotatorError):
    def __init__(self, retry_after: float = 0.0):
        super().__init__(f"rate limited, retry after {retry_after}s")
        self.retry_after = retry_after


class AnnotatorRefused(AnnotatorError):
    """Terminal: the backend declined to answer."""


class AnnotatorTransportError(AnnotatorError):
    pass


class Exhausted(AnnotatorError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class AnnotatorBackend:
    """One call: complete(prompt) -> reply text."""

    model_name: str = "unspecified"
    temperature: Optional[float] = None

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


def retrying_complete(
    backend: AnnotatorBackend,
    prompt: str,
    max_attempts: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Retry rate limits and transport failures with exponential backoff.

    Refusals are terminal and re-raised immediately.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    last: Optional[Exception] = None
    for attempt in range(max_attempts):
        try:
            return backend.complete(prompt)
        except AnnotatorRefused:
            raise
        except (AnnotatorRateLimited, AnnotatorTransportError) as exc:
            last = exc
            if attempt + 1 < max_attempts:
                wait = backoff * (2**attempt)
                if isinstance(exc, AnnotatorRateLimited) and exc.retry_after > wait:
                    wait = exc.retry_after
                sleep(wait)
    assert last is not None
    raise Exhausted(max_attempts, last)


class MissingTruth(AnnotatorError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    """Error model for the oracle.

    confusion maps title -> {true category -> {reported category -> prob}};
    rows must sum to 1. Missing titles/rows answer truthfully. Speculation is
    drawn per title from a clipped normal (spread 0 gives a point mass).
    """

    confusion: Mapping[str, Mapping[str, Mapping[str, float]]] = field(default_factory=dict)
    speculation_mean: Mapping[str, float] = field(default_factory=dict)
    speculation_spread: Mapping[str, float] = field(default_factory=dict)
    default_speculation: float = 0.0
    rejection_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for title, rows in self.confusion.items():
            for truth, row in rows.items():
                total = sum(row.values())
                if abs(total - 1.0) > 1e-9:
                    raise AnnotatorError(
                        f"confusion row {title}/{truth} sums to {total}, not 1"
                    )
        if not 0.0 <= self.rejection_rate <= 1.0:
            raise AnnotatorError(f"rejection_rate {self.rejection_rate} outside [0, 1]")

    @classmethod
    def from_json(cls, path: str | Path) -> "OracleConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            confusion=obj.get("confusion", {}),
            speculation_mean=obj.get("speculation_mean", {}),
            speculation_spread=obj.get("speculation_spread", {}),
            default_speculation=obj.get("default_speculation", 0.0),
            rejection_rate=obj.get("rejection_rate", 0.0),
            seed=obj.get("seed", 0),
        )


def _call_rng(seed: int, user_key: str, title: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{user_key}|{title}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _draw_speculation(cfg: OracleConfig, title: str, rng: np.random.Generator) -> int:
    mean = cfg.speculation_mean.get(title, cfg.default_speculation)
    spread = cfg.speculation_spread.get(title, 0.0)
    value = mean if spread == 0 else rng.normal(mean, spread)
    return int(min(100, max(0, round(value))))


def oracle_annotate(
    truth: Mapping[str, str],
    defs: Sequence[FeatureDef],
    cfg: OracleConfig,
    user_key: str = "",
) -> str:
    """Emit a well-formed five-field block per feature, sampling the reported
    category from the confusion row for the true one."""
    blocks = []
    for fdef in defs:
        if fdef.title not in truth:
            raise MissingTruth(f"no truth for title {fdef.title!r}")
        rng = _call_rng(cfg.seed, user_key, fdef.title)
        true_cat = normalize_category(truth[fdef.title])
        row = cfg.confusion.get(fdef.title, {}).get(true_cat)
        if row is None:
            reported = true_cat
        else:
            cats = sorted(row)
            probs = np.array([row[c] for c in cats])
            reported = cats[rng.choice(len(cats), p=probs / probs.sum())]
        symbol = None
        for sym, cat in fdef.options:
            if normalize_category(cat) == reported:
                symbol = sym
                break
        if symbol is None:
            raise MissingTruth(
                f"category {reported!r} not among options of {fdef.title!r}"
            )
        spec = _draw_speculation(cfg, fdef.title, rng)
        blocks.append(
            "\n".join(
                [
                    f"**title: {fdef.title}**",
                    f"**explanation: The profile text points to {reported}.**",
                    f"**symbol: {symbol})**",
                    f"**category: {fdef.category_for(symbol)}**",
                    f"**speculation: {spec}**",
                ]
            )
        )
    return "\n\n".join(blocks)


_USERNAME_RE = re.compile(r"username:\s*(\S+?),\s*name:")
_LOCATION_RE = re.compile(r"location in their bio as follows:\s*(.*)")
_DESC_RE = re.compile(r"description:\s*(.*?)\.(?:\s*profile image:|\s*Furthermore)")


class MockOracle(AnnotatorBackend):
    """Deterministic annotator for desk runs.

    Truth may be supplied directly (maps keyed by username) or parsed from the
    structured profile text inside the prompt: a description of 'title: value'
    pairs separated by '; ', and a location field holding a state name, 'USA',
    or a non-member marker.
    """

    model_name = "mock-oracle"

    def __init__(
        self,
        cfg: Optional[OracleConfig] = None,
        truth_attrs: Optional[Mapping[str, Mapping[str, str]]] = None,
        entity_map: Optional[Mapping[str, str]] = None,
        geo_map: Optional[Mapping[str, Optional[str]]] = None,
    ):
        self.cfg = cfg or OracleConfig()
        self.truth_attrs = truth_attrs
        self.entity_map = dict(entity_map or {})
        self.geo_map = dict(geo_map or {})

    def _username(self, prompt: str) -> str:
        m = _USERNAME_RE.search(prompt)
        if m is None:
            raise AnnotatorError("oracle could not locate the username in the prompt")
        return m.group(1)

    def _attrs_for(self, prompt: str, username: str) -> Mapping[str, str]:
        if self.truth_attrs is not None:
            if username not in self.truth_attrs:
                raise MissingTruth(f"no truth table entry for {username!r}")
            return self.truth_attrs[username]
        m = _DESC_RE.search(prompt)
        if m is None:
            raise MissingTruth(f"no parseable description for {username!r}")
        attrs = {}
        for part in m.group(1).split(";"):
            if ":" in part:
                k, v = part.split(":", 1)
                attrs[k.strip()] = v.strip()
        return attrs

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if ENTITY_FILTER_PROMPT in prompt:
            username = self._username(prompt)
            return self.entity_map.get(username, "P")
        if GEO_FILTER_PROMPT in prompt:
            username = self._username(prompt)
            if username in self.geo_map:
                reply = self.geo_map[username]
                return reply if reply is not None else GEO_REJECTION_REPLY
            m = _LOCATION_RE.search(prompt)
            location = m.group(1).strip() if m else ""
            return location if location else GEO_REJECTION_REPLY
        # feature extraction: recover the requested choice sets from the prompt
        username = self._username(prompt)
        if self.cfg.rejection_rate > 0:
            rng = _call_rng(self.cfg.seed, username, "__reject__")
            if rng.random() < self.cfg.rejection_rate:
                raise AnnotatorRefused(f"declined to annotate {username}")
        marker = "Below is the list of categories to which this user may belong to:"
        pos = prompt.rfind(marker)
        if pos < 0:
            raise AnnotatorError("unrecognized prompt shape")
        defs = parse_feature_blocks(prompt[pos + len(marker) :])
        attrs = self._attrs_for(prompt, username)
        truth = {normalize_category(k): v for k, v in attrs.items()}
        by_title = {}
        for fdef in defs:
            key = normalize_category(fdef.title)
            if key not in truth:
                raise MissingTruth(f"{username}: no truth for {fdef.title!r}")
            by_title[fdef.title] = truth[key]
        return oracle_annotate(by_title, defs, self.cfg, user_key=username)


class ScriptedBackend(AnnotatorBackend):
    """Returns canned replies in order; raises queued exceptions in place."""

    model_name = "scripted"

    def __init__(self, replies: Sequence[str | Exception]):
        self._replies = list(replies)
        self.calls: list[str] = []

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self.calls.append(prompt)
        if not self._replies:
            raise AnnotatorTransportError("script exhausted")
        item = self._replies.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class LiveHTTPAdapter(AnnotatorBackend):
    """Optional adapter for an OpenAI-style chat completion endpoint.

    Configuration comes from the environment so credentials never live in run
    configs: the variable named by `api_key_env` must hold the key. Not used
    by any test path.
    """

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "ANNOTATOR_API_KEY",
        temperature: Optional[float] = None,
        timeout: float = 120.0,
    ):
        self.model_name = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout

    @classmethod
    def from_env(cls) -> "LiveHTTPAdapter":
        """Configure entirely from ANNOTATOR_MODEL / ANNOTATOR_BASE_URL /
        ANNOTATOR_API_KEY (and optional ANNOTATOR_TEMPERATURE)."""
        model = os.environ.get("ANNOTATOR_MODEL")
        if not model:
            raise AnnotatorTransportError("ANNOTATOR_MODEL is not set")
        temp = os.environ.get("ANNOTATOR_TEMPERATURE")
        return cls(
            model=model,
            base_url=os.environ.get("ANNOTATOR_BASE_URL", "https://api.openai.com/v1"),
            temperature=float(temp) if temp else None,
        )

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AnnotatorTransportError(
                f"environment variable {self.api_key_env} is not set"
            )
        payload: dict = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
        }
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {key}",
            },
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:  # pragma: no cover - live only
            if exc.code == 429:
                raise AnnotatorRateLimited(float(exc.headers.get("Retry-After", 1.0)))
            raise AnnotatorTransportError(str(exc)) from exc
        except OSError as exc:  # pragma: no cover - live only
            raise AnnotatorTransportError(str(exc)) from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:  # pragma: no cover - live only
            raise AnnotatorTransportError(f"malformed response: {body}") from exc
